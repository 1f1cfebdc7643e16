//! The neural density field: a shared hash-encoded MLP producing nonnegative
//! attenuation, modulated per patient by a Neural Modulation Field (NMF) that
//! maps position to FiLM scale/shift pairs for every hidden layer.
//!
//! Forward structure for one point x (normalized to [0,1]^3 by the bbox):
//!
//! ```text
//! e      = hash_encode_shared(x)
//! (g,b)_l = nmf(x)                      gamma_l = 1 + g_l, beta_l = b_l
//! a_0    = e
//! a_l    = relu((W_l a_{l-1} + b_l) * gamma_l + beta_l)    l = 1..n_hidden
//! mu     = softplus(w_out . a_n + b_out)
//! ```
//!
//! With `patient = None` the modulations are the identity (gamma 1, beta 0),
//! which is also exactly what a zero-initialized NMF head produces, so a
//! fresh patient starts at the shared anatomy prior.

pub(crate) mod batch;

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{HashEncoding, HashEncodingConfig};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, RaySampleSet, Vec3};
use crate::real::Real;
use crate::rng::{self, tag};
use crate::volume::{GridSpec, VolumeGrid};

pub use batch::{FieldScratch, NmfGrad, PointBatchGrads, SharedFieldGrad};

/// One linear layer, weights row-major `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Real> Dense<T> {
    /// Fan-in scaled uniform init for weights and bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| T::from_f64(rng.gen_range(-k..k)))
            .collect();
        let b = (0..out_dim).map(|_| T::from_f64(rng.gen_range(-k..k))).collect();
        Dense { w, b, in_dim, out_dim }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            w: vec![T::zero(); in_dim * out_dim],
            b: vec![T::zero(); out_dim],
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// out = W x + b for a single input.
    pub fn forward(&self, x: &[T], out: &mut [T]) {
        batch::linear_forward(self, x, out, 1);
    }
}

/// Gradient buffer shaped like a [`Dense`] layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrad<T> {
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> DenseGrad<T> {
    pub fn zeros_like(layer: &Dense<T>) -> Self {
        DenseGrad {
            w: vec![T::zero(); layer.w.len()],
            b: vec![T::zero(); layer.b.len()],
        }
    }
}

/// Architecture of the conditional field family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldModelConfig {
    pub shared_encoding: HashEncodingConfig,
    /// Hidden width H of the shared MLP; FiLM pairs have this length.
    pub hidden_width: usize,
    /// Number of shared hidden layers; all of them are modulated.
    pub n_hidden: usize,
    pub nmf_encoding: HashEncodingConfig,
    pub nmf_hidden_width: usize,
    pub nmf_n_hidden: usize,
}

impl FieldModelConfig {
    /// Full-size architecture: 16-level 2^19 shared encoding into a
    /// 2-layer 128-wide MLP; NMF with an 8-level 2^15 encoding and
    /// 2x128 hidden layers.
    pub fn full_default() -> Self {
        FieldModelConfig {
            shared_encoding: HashEncodingConfig::shared_default(),
            hidden_width: 128,
            n_hidden: 2,
            nmf_encoding: HashEncodingConfig::nmf_default(),
            nmf_hidden_width: 128,
            nmf_n_hidden: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shared_encoding.validate()?;
        self.nmf_encoding.validate()?;
        if self.hidden_width < 1 || self.n_hidden < 1 || self.nmf_hidden_width < 1 || self.nmf_n_hidden < 1
        {
            return Err(Error::Config("field model needs positive widths and depths".into()));
        }
        Ok(())
    }

    /// Raw NMF head output size: one (gamma, beta) pair per hidden layer.
    pub fn modulation_dim(&self) -> usize {
        2 * self.hidden_width * self.n_hidden
    }
}

/// The shared field f_theta: encoding + modulated MLP + softplus output.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedFieldParams<T> {
    pub encoding: HashEncoding<T>,
    pub hidden: Vec<Dense<T>>,
    pub output: Dense<T>,
    /// World box the field is defined over; inputs normalize against it.
    pub bbox: Aabb,
}

impl<T: Real> SharedFieldParams<T> {
    pub fn init(cfg: &FieldModelConfig, bbox: Aabb, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT_SHARED]);
        let encoding = HashEncoding::init(cfg.shared_encoding, &mut rng)?;
        let mut hidden = Vec::with_capacity(cfg.n_hidden);
        let mut in_dim = cfg.shared_encoding.output_dim();
        for _ in 0..cfg.n_hidden {
            hidden.push(Dense::init(in_dim, cfg.hidden_width, &mut rng));
            in_dim = cfg.hidden_width;
        }
        let mut output = Dense::init(cfg.hidden_width, 1, &mut rng);
        // Start the density near the low end of the tissue range instead of
        // softplus(0) ~ 0.69 mm^-1.
        output.b[0] = T::from_f64(-4.0);
        Ok(SharedFieldParams { encoding, hidden, output, bbox })
    }

    pub fn hidden_width(&self) -> usize {
        self.output.in_dim
    }

    pub fn param_count(&self) -> usize {
        self.encoding.param_count()
            + self.hidden.iter().map(Dense::param_count).sum::<usize>()
            + self.output.param_count()
    }
}

/// Per-patient Neural Modulation Field phi_i.
#[derive(Clone, Debug, PartialEq)]
pub struct NmfParams<T> {
    pub patient: String,
    pub encoding: HashEncoding<T>,
    pub hidden: Vec<Dense<T>>,
    /// Raw head: `2 * mod_width * n_modulated` outputs, zero-initialized so
    /// fresh patients start at the identity modulation.
    pub head: Dense<T>,
    pub mod_width: usize,
    pub n_modulated: usize,
}

impl<T: Real> NmfParams<T> {
    pub fn init(cfg: &FieldModelConfig, patient: &str, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT_NMF, rng::mix(hash_str(patient))]);
        let encoding = HashEncoding::init(cfg.nmf_encoding, &mut rng)?;
        let mut hidden = Vec::with_capacity(cfg.nmf_n_hidden);
        let mut in_dim = cfg.nmf_encoding.output_dim();
        for _ in 0..cfg.nmf_n_hidden {
            hidden.push(Dense::init(in_dim, cfg.nmf_hidden_width, &mut rng));
            in_dim = cfg.nmf_hidden_width;
        }
        let head = Dense::zeros(cfg.nmf_hidden_width, cfg.modulation_dim());
        Ok(NmfParams {
            patient: patient.to_string(),
            encoding,
            hidden,
            head,
            mod_width: cfg.hidden_width,
            n_modulated: cfg.n_hidden,
        })
    }

    pub fn param_count(&self) -> usize {
        self.encoding.param_count()
            + self.hidden.iter().map(Dense::param_count).sum::<usize>()
            + self.head.param_count()
    }
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a, stable across runs.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Scale/shift pair for one modulated layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Shared parameters theta plus the per-patient NMF set.
#[derive(Clone, Debug, PartialEq)]
pub struct CondFieldParams<T> {
    pub shared: SharedFieldParams<T>,
    pub nmfs: BTreeMap<String, NmfParams<T>>,
}

impl<T: Real> CondFieldParams<T> {
    pub fn new(shared: SharedFieldParams<T>) -> Self {
        CondFieldParams { shared, nmfs: BTreeMap::new() }
    }

    pub fn insert_nmf(&mut self, nmf: NmfParams<T>) -> Result<()> {
        if nmf.mod_width != self.shared.hidden_width() || nmf.n_modulated != self.shared.hidden.len()
        {
            return Err(Error::ShapeMismatch(format!(
                "NMF modulates {}x{} but the shared field has {} layers of width {}",
                nmf.n_modulated,
                nmf.mod_width,
                self.shared.hidden.len(),
                self.shared.hidden_width()
            )));
        }
        self.nmfs.insert(nmf.patient.clone(), nmf);
        Ok(())
    }

    pub fn nmf(&self, patient: &str) -> Result<&NmfParams<T>> {
        self.nmfs
            .get(patient)
            .ok_or_else(|| Error::UnknownPatient(patient.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.shared.param_count() + self.nmfs.values().map(NmfParams::param_count).sum::<usize>()
    }
}

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

/// Evaluate the NMF at a normalized point: encode, run the hidden stack,
/// split the raw head output r into per-layer halves (g, s) and return
/// gamma = 1 + g, beta = s.
pub fn nmf_forward<T: Real>(nmf: &NmfParams<T>, x_norm: [f64; 3]) -> Result<Vec<Modulation<T>>> {
    let mut scratch = FieldScratch::new();
    let raw = batch::nmf_forward_batch(nmf, &[x_norm], &mut scratch)?;
    let h = nmf.mod_width;
    let mut out = Vec::with_capacity(nmf.n_modulated);
    for l in 0..nmf.n_modulated {
        let base = l * 2 * h;
        out.push(Modulation {
            gamma: raw[base..base + h].iter().map(|g| T::one() + *g).collect(),
            beta: raw[base + h..base + 2 * h].to_vec(),
        });
    }
    Ok(out)
}

/// FiLM layer: relu((W a + b) * gamma + beta).
pub fn film_layer<T: Real>(
    a_in: &[T],
    layer: &Dense<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<Vec<T>> {
    if a_in.len() != layer.in_dim || gamma.len() != layer.out_dim || beta.len() != layer.out_dim {
        return Err(Error::ShapeMismatch(format!(
            "film layer expects input {} and modulation {}, got {}/{}/{}",
            layer.in_dim,
            layer.out_dim,
            a_in.len(),
            gamma.len(),
            beta.len()
        )));
    }
    let mut z = vec![T::zero(); layer.out_dim];
    layer.forward(a_in, &mut z);
    for o in 0..layer.out_dim {
        let h = z[o] * gamma[o] + beta[o];
        z[o] = if h > T::zero() { h } else { T::zero() };
    }
    Ok(z)
}

/// Density at a world point, conditioned on `patient` when given
/// (identity modulations otherwise). Always nonnegative.
pub fn field_forward<T: Real>(
    params: &CondFieldParams<T>,
    patient: Option<&str>,
    x_mm: Vec3,
) -> Result<T> {
    let nmf = patient.map(|p| params.nmf(p)).transpose()?;
    let x = params.shared.bbox.normalize(x_mm);
    let mut scratch = FieldScratch::new();
    let mut out = Vec::new();
    batch::forward_batch(&params.shared, nmf, &[x], &mut out, &mut scratch)?;
    Ok(out[0])
}

/// Log-domain rendering of one ray: p_hat = sum_c f(x_c) * dr_c.
pub fn render_ray<T: Real>(
    params: &CondFieldParams<T>,
    patient: Option<&str>,
    samples: &RaySampleSet,
) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::Data("cannot render an empty sample set".into()));
    }
    let nmf = patient.map(|p| params.nmf(p)).transpose()?;
    let pts: Vec<[f64; 3]> = samples
        .positions
        .iter()
        .map(|&p| params.shared.bbox.normalize(p))
        .collect();
    let mut scratch = FieldScratch::new();
    let mut mu = Vec::new();
    batch::forward_batch(&params.shared, nmf, &pts, &mut mu, &mut scratch)?;
    let p_hat: f64 = mu
        .iter()
        .zip(&samples.steps)
        .map(|(m, dt)| m.as_f64() * dt)
        .sum();
    Ok(T::from_f64(p_hat))
}

/// Smallest |pre-activation| across all ReLU inputs when evaluating the
/// field at `x_mm`; finite-difference checks use this to reject probe
/// points sitting on a kink, where the derivative is one-sided.
pub fn preactivation_margin<T: Real>(
    params: &CondFieldParams<T>,
    patient: Option<&str>,
    x_mm: Vec3,
) -> Result<f64> {
    let nmf = patient.map(|p| params.nmf(p)).transpose()?;
    let x = params.shared.bbox.normalize(x_mm);
    let mut scratch = FieldScratch::new();
    let mut out = Vec::new();
    batch::forward_batch(&params.shared, nmf, &[x], &mut out, &mut scratch)?;
    Ok(scratch.min_preactivation())
}

/// Gradient tree produced by [`field_backward`]: shared gradients plus the
/// touched patients' NMF gradients.
#[derive(Clone, Debug)]
pub struct FieldGradients<T> {
    pub shared: Option<batch::SharedFieldGrad<T>>,
    pub nmfs: BTreeMap<String, batch::NmfGrad<T>>,
}

/// Reverse-mode gradients for a batch of rays with upstream dL/dp_hat.
/// The per-sample chain is dL/df_c = dr_c * dL/dp_hat.
pub fn field_backward<T: Real>(
    params: &CondFieldParams<T>,
    patient: Option<&str>,
    rays: &[(&RaySampleSet, T)],
) -> Result<FieldGradients<T>> {
    let nmf = patient.map(|p| params.nmf(p)).transpose()?;
    let mut pts = Vec::new();
    let mut upstream = Vec::new();
    for (samples, dldp) in rays {
        if samples.is_empty() {
            return Err(Error::Data("cannot backprop an empty sample set".into()));
        }
        for (pos, dt) in samples.positions.iter().zip(&samples.steps) {
            pts.push(params.shared.bbox.normalize(*pos));
            upstream.push(*dldp * T::from_f64(*dt));
        }
    }
    let mut grads = PointBatchGrads::zeros(&params.shared, nmf);
    let mut scratch = FieldScratch::new();
    let mut mu = Vec::new();
    for (chunk_pts, chunk_up) in pts.chunks(batch::CHUNK).zip(upstream.chunks(batch::CHUNK)) {
        batch::forward_batch(&params.shared, nmf, chunk_pts, &mut mu, &mut scratch)?;
        batch::backward_batch(&params.shared, nmf, chunk_up, &mut scratch, &mut grads)?;
    }
    let mut nmfs = BTreeMap::new();
    if let (Some(nmf), Some(g)) = (nmf, grads.nmf) {
        nmfs.insert(nmf.patient.clone(), g);
    }
    Ok(FieldGradients { shared: grads.shared, nmfs })
}

// ---------------------------------------------------------------------------
// Parameter tree access
// ---------------------------------------------------------------------------

/// Flat access to every trainable array of a parameter (or gradient) tree,
/// in a fixed traversal order shared by params and their gradients.
pub trait ParamLeaves<T> {
    fn leaves(&self) -> Vec<&[T]>;
    fn leaves_mut(&mut self) -> Vec<&mut [T]>;

    fn param_count(&self) -> usize {
        self.leaves().iter().map(|l| l.len()).sum()
    }
}

impl<T: Real> ParamLeaves<T> for SharedFieldParams<T> {
    fn leaves(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.encoding.tables.iter().map(|t| t.as_slice()).collect();
        for layer in &self.hidden {
            out.push(&layer.w);
            out.push(&layer.b);
        }
        out.push(&self.output.w);
        out.push(&self.output.b);
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> =
            self.encoding.tables.iter_mut().map(|t| t.as_mut_slice()).collect();
        for layer in &mut self.hidden {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out.push(&mut self.output.w);
        out.push(&mut self.output.b);
        out
    }
}

impl<T: Real> ParamLeaves<T> for NmfParams<T> {
    fn leaves(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.encoding.tables.iter().map(|t| t.as_slice()).collect();
        for layer in &self.hidden {
            out.push(&layer.w);
            out.push(&layer.b);
        }
        out.push(&self.head.w);
        out.push(&self.head.b);
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> =
            self.encoding.tables.iter_mut().map(|t| t.as_mut_slice()).collect();
        for layer in &mut self.hidden {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }
}

impl<T: Real> ParamLeaves<T> for batch::SharedFieldGrad<T> {
    fn leaves(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.tables.iter().map(|t| t.as_slice()).collect();
        for layer in &self.hidden {
            out.push(&layer.w);
            out.push(&layer.b);
        }
        out.push(&self.output.w);
        out.push(&self.output.b);
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = self.tables.iter_mut().map(|t| t.as_mut_slice()).collect();
        for layer in &mut self.hidden {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out.push(&mut self.output.w);
        out.push(&mut self.output.b);
        out
    }
}

impl<T: Real> ParamLeaves<T> for batch::NmfGrad<T> {
    fn leaves(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = self.tables.iter().map(|t| t.as_slice()).collect();
        for layer in &self.hidden {
            out.push(&layer.w);
            out.push(&layer.b);
        }
        out.push(&self.head.w);
        out.push(&self.head.b);
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = self.tables.iter_mut().map(|t| t.as_mut_slice()).collect();
        for layer in &mut self.hidden {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }
}

/// Evaluate the field at every `stride`-th voxel center of `grid`.
pub fn bake_to_grid<T: Real>(
    params: &CondFieldParams<T>,
    patient: Option<&str>,
    grid: &GridSpec,
    stride: usize,
) -> Result<VolumeGrid> {
    use rayon::prelude::*;
    if stride == 0 {
        return Err(Error::Config("bake stride must be >= 1".into()));
    }
    let nmf = patient.map(|p| params.nmf(p)).transpose()?;
    let dims = [
        (grid.dims[0] + stride - 1) / stride,
        (grid.dims[1] + stride - 1) / stride,
        (grid.dims[2] + stride - 1) / stride,
    ];
    let spacing = grid.spacing * stride as f64;
    let origin = grid.origin;
    let bbox = &params.shared.bbox;

    let plane = dims[0] * dims[1];
    let slices: Result<Vec<Vec<f32>>> = (0..dims[2])
        .into_par_iter()
        .map(|k| {
            let mut scratch = FieldScratch::new();
            let mut mu: Vec<T> = Vec::new();
            let mut pts = Vec::with_capacity(plane);
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = Vec3::new(
                        origin[0] + (i * stride) as f64 * grid.spacing,
                        origin[1] + (j * stride) as f64 * grid.spacing,
                        origin[2] + (k * stride) as f64 * grid.spacing,
                    );
                    pts.push(bbox.normalize(p));
                }
            }
            let mut out = Vec::with_capacity(plane);
            for chunk in pts.chunks(batch::CHUNK) {
                batch::forward_batch(&params.shared, nmf, chunk, &mut mu, &mut scratch)?;
                out.extend(mu.iter().map(|m| m.as_f32()));
            }
            Ok(out)
        })
        .collect();
    let mut data = Vec::with_capacity(plane * dims[2]);
    for s in slices? {
        data.extend_from_slice(&s);
    }
    VolumeGrid::new(dims, spacing, origin, data)
}
