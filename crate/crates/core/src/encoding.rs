//! Multiresolution hash encoding: trainable per-level feature tables indexed
//! from multi-scale lattices, trilinear feature interpolation, and gradients
//! with respect to the table entries.
//!
//! Levels whose lattice fits in the table are indexed densely (row-major);
//! larger levels fall back to the spatial hash
//! `(i*1) ^ (j*2654435761) ^ (k*805459861) mod T` in wrapping u32 arithmetic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Tolerance for inputs marginally outside [0,1]^3; they get clamped.
const COORD_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashEncodingConfig {
    /// Number of resolution levels L.
    pub levels: usize,
    /// Feature dimensionality d per level.
    pub feat_dim: usize,
    /// Lattice resolution of the coarsest level.
    pub base_res: u32,
    /// Per-level resolution increase factor.
    pub growth: f64,
    /// Entries per level table; must be a power of two.
    pub table_size: usize,
}

impl HashEncodingConfig {
    /// Shared-field defaults: 16 levels of 2 features, base 16, growth 2,
    /// 2^19 entries per level.
    pub fn shared_default() -> Self {
        HashEncodingConfig {
            levels: 16,
            feat_dim: 2,
            base_res: 16,
            growth: 2.0,
            table_size: 1 << 19,
        }
    }

    /// Modulation-field default: smaller tables, modulations are smoother
    /// than densities.
    pub fn nmf_default() -> Self {
        HashEncodingConfig {
            levels: 8,
            feat_dim: 2,
            base_res: 8,
            growth: 2.0,
            table_size: 1 << 15,
        }
    }

    /// Per-volume scratch-fit default for noisy data: base 8, 8 levels,
    /// 2^19 entries.
    pub fn scratch_noisy_default() -> Self {
        HashEncodingConfig {
            levels: 8,
            feat_dim: 2,
            base_res: 8,
            growth: 2.0,
            table_size: 1 << 19,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.feat_dim < 1 || self.base_res < 1 {
            return Err(Error::Config(
                "hash encoding needs levels >= 1, feat_dim >= 1, base_res >= 1".into(),
            ));
        }
        if self.growth <= 1.0 {
            return Err(Error::Config(format!(
                "growth factor must be > 1, got {}",
                self.growth
            )));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "table size must be a power of two, got {}",
                self.table_size
            )));
        }
        self.level_resolutions()?;
        Ok(())
    }

    /// Lattice resolutions N_l = round(base * growth^l); exact for growth 2.
    pub fn level_resolutions(&self) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(self.levels);
        for l in 0..self.levels {
            let r = self.base_res as f64 * self.growth.powi(l as i32);
            if !(1.0..=(u32::MAX as f64 / 2.0)).contains(&r) {
                return Err(Error::Config(format!(
                    "level {l} resolution {r} overflows"
                )));
            }
            out.push(r.round() as u32);
        }
        Ok(out)
    }

    /// Output dimensionality L*d of the concatenated encoding.
    pub fn output_dim(&self) -> usize {
        self.levels * self.feat_dim
    }

    pub fn params_per_level(&self) -> usize {
        self.table_size * self.feat_dim
    }

    fn is_dense(&self, res: u32) -> bool {
        let verts = (res as u128 + 1).pow(3);
        verts <= self.table_size as u128
    }
}

/// Table index for lattice vertex `cell` on level `level`.
pub fn hash_index(cfg: &HashEncodingConfig, level: usize, cell: [u32; 3]) -> Result<usize> {
    let res = *cfg
        .level_resolutions()?
        .get(level)
        .ok_or_else(|| Error::IndexOutOfBounds(format!("level {level} of {}", cfg.levels)))?;
    if cell.iter().any(|&c| c > res) {
        return Err(Error::IndexOutOfBounds(format!(
            "cell {cell:?} outside level resolution {res}"
        )));
    }
    Ok(index_for(cfg, res, cfg.is_dense(res), cell))
}

#[inline(always)]
fn index_for(cfg: &HashEncodingConfig, res: u32, dense: bool, cell: [u32; 3]) -> usize {
    if dense {
        let n1 = res as usize + 1;
        cell[0] as usize + n1 * (cell[1] as usize + n1 * cell[2] as usize)
    } else {
        let h = cell[0]
            .wrapping_mul(HASH_PRIMES[0])
            ^ cell[1].wrapping_mul(HASH_PRIMES[1])
            ^ cell[2].wrapping_mul(HASH_PRIMES[2]);
        (h as usize) & (cfg.table_size - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LevelLayout {
    res: u32,
    dense: bool,
}

/// Trainable encoding: config plus per-level feature tables.
#[derive(Clone, Debug, PartialEq)]
pub struct HashEncoding<T> {
    cfg: HashEncodingConfig,
    layouts: Vec<LevelLayout>,
    /// tables[l] has table_size * feat_dim entries, vertex-major.
    pub tables: Vec<Vec<T>>,
}

/// Corner indices and trilinear weights for one level lookup.
pub(crate) struct CornerSet {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl<T: Real> HashEncoding<T> {
    /// Tables seeded uniformly in [-1e-4, 1e-4].
    pub fn init(cfg: HashEncodingConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.params_per_level();
        let tables = (0..cfg.levels)
            .map(|_| {
                (0..n)
                    .map(|_| T::from_f64(rng.gen_range(-1e-4..1e-4)))
                    .collect()
            })
            .collect();
        Self::from_tables(cfg, tables)
    }

    pub fn from_tables(cfg: HashEncodingConfig, tables: Vec<Vec<T>>) -> Result<Self> {
        cfg.validate()?;
        if tables.len() != cfg.levels || tables.iter().any(|t| t.len() != cfg.params_per_level()) {
            return Err(Error::ShapeMismatch("table shapes do not match config".into()));
        }
        let layouts = cfg
            .level_resolutions()?
            .into_iter()
            .map(|res| LevelLayout { res, dense: cfg.is_dense(res) })
            .collect();
        Ok(HashEncoding { cfg, layouts, tables })
    }

    pub fn cfg(&self) -> &HashEncodingConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.cfg.levels * self.cfg.params_per_level()
    }

    #[inline]
    fn clamp_point(x: [f64; 3]) -> Result<[f64; 3]> {
        let mut p = x;
        for v in &mut p {
            if !v.is_finite() || *v < -COORD_TOL || *v > 1.0 + COORD_TOL {
                return Err(Error::Data(format!(
                    "encoding input {x:?} outside the unit cube"
                )));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(p)
    }

    #[inline]
    pub(crate) fn corners(&self, level: usize, p: [f64; 3]) -> CornerSet {
        let LevelLayout { res, dense } = self.layouts[level];
        let scale = res as f64;
        let mut cell = [0u32; 3];
        let mut frac = [0f64; 3];
        for axis in 0..3 {
            let g = p[axis] * scale;
            // Clamp so the +1 corner stays on the lattice at x = 1.
            let i = (g.floor() as i64).clamp(0, res as i64 - 1) as u32;
            cell[axis] = i;
            frac[axis] = (g - i as f64).clamp(0.0, 1.0);
        }
        let mut idx = [0usize; 8];
        let mut w = [0f64; 8];
        for corner in 0..8 {
            let dx = (corner & 1) as u32;
            let dy = ((corner >> 1) & 1) as u32;
            let dz = ((corner >> 2) & 1) as u32;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            idx[corner] = index_for(
                &self.cfg,
                res,
                dense,
                [cell[0] + dx, cell[1] + dy, cell[2] + dz],
            );
            w[corner] = wx * wy * wz;
        }
        CornerSet { idx, w }
    }

    /// Encode a point in [0,1]^3 into `out` (length L*d): per level,
    /// trilinearly interpolate the 8 corner feature vectors and concatenate.
    pub fn encode_into(&self, x: [f64; 3], out: &mut [T]) -> Result<()> {
        if out.len() != self.cfg.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "encoding output buffer has {} slots, need {}",
                out.len(),
                self.cfg.output_dim()
            )));
        }
        let p = Self::clamp_point(x)?;
        let d = self.cfg.feat_dim;
        for level in 0..self.cfg.levels {
            let cs = self.corners(level, p);
            let table = &self.tables[level];
            let slot = &mut out[level * d..(level + 1) * d];
            slot.fill(T::zero());
            for corner in 0..8 {
                let w = T::from_f64(cs.w[corner]);
                let base = cs.idx[corner] * d;
                for f in 0..d {
                    slot[f] = slot[f] + w * table[base + f];
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, x: [f64; 3]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.cfg.output_dim()];
        self.encode_into(x, &mut out)?;
        Ok(out)
    }

    /// Gradient of `<encode(x), upstream>` with respect to the table
    /// entries: each touched corner entry receives its trilinear weight
    /// times the matching upstream component.
    pub fn encode_backward(&self, x: [f64; 3], upstream: &[T]) -> Result<SparseEncodingGrad<T>> {
        if upstream.len() != self.cfg.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "upstream has {} entries, need {}",
                upstream.len(),
                self.cfg.output_dim()
            )));
        }
        let p = Self::clamp_point(x)?;
        let d = self.cfg.feat_dim;
        let mut grad = SparseEncodingGrad { feat_dim: d, levels: vec![Vec::new(); self.cfg.levels] };
        for level in 0..self.cfg.levels {
            let up = &upstream[level * d..(level + 1) * d];
            if up.iter().all(|u| *u == T::zero()) {
                continue;
            }
            let cs = self.corners(level, p);
            let entries = &mut grad.levels[level];
            'corner: for corner in 0..8 {
                let w = T::from_f64(cs.w[corner]);
                if w == T::zero() {
                    continue;
                }
                // Hash collisions among the 8 corners accumulate.
                for (idx, vals) in entries.iter_mut() {
                    if *idx == cs.idx[corner] {
                        for f in 0..d {
                            vals[f] = vals[f] + w * up[f];
                        }
                        continue 'corner;
                    }
                }
                entries.push((cs.idx[corner], up.iter().map(|u| w * *u).collect()));
            }
            entries.sort_by_key(|(idx, _)| *idx);
        }
        Ok(grad)
    }

    /// Accumulate the backward pass directly into a dense gradient table
    /// (hot path for batched training).
    #[inline]
    pub(crate) fn accumulate_backward(&self, p: [f64; 3], upstream: &[T], grad_tables: &mut [Vec<T>]) {
        let d = self.cfg.feat_dim;
        for level in 0..self.cfg.levels {
            let up = &upstream[level * d..(level + 1) * d];
            let cs = self.corners(level, p);
            let table = &mut grad_tables[level];
            for corner in 0..8 {
                let w = T::from_f64(cs.w[corner]);
                let base = cs.idx[corner] * d;
                for f in 0..d {
                    table[base + f] = table[base + f] + w * up[f];
                }
            }
        }
    }
}

/// Sparse per-level gradients over the encoding tables: sorted
/// `(vertex index, d features)` entries, at most 8 per level.
#[derive(Clone, Debug)]
pub struct SparseEncodingGrad<T> {
    pub feat_dim: usize,
    pub levels: Vec<Vec<(usize, Vec<T>)>>,
}

impl<T: Real> SparseEncodingGrad<T> {
    pub fn nnz(&self) -> usize {
        self.levels.iter().map(|l| l.len() * self.feat_dim).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.iter().all(|(_, v)| v.iter().all(|x| *x == T::zero())))
    }
}
