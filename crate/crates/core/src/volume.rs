//! Voxel grids, procedural thorax phantoms, trilinear sampling, and the
//! volume file format (JSON header + raw little-endian f32 payload).

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::rng::{self, tag};

/// Regular grid of attenuation values, mm^-1, isotropic spacing, row-major
/// with x fastest. `origin` is the world position of voxel (0,0,0)'s center.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: [f64; 3],
    data: Vec<f32>,
}

/// Reconstruction grid description: dims plus placement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: [f64; 3],
}

impl GridSpec {
    /// Grid of `dims` voxels exactly covering `bbox` (voxel boundaries on the
    /// box faces). Requires the box to be an isotropic fit for `dims`.
    pub fn covering(bbox: &Aabb, dims: [usize; 3]) -> Result<GridSpec> {
        let e = bbox.extent();
        let spacing = e.x / dims[0] as f64;
        for (axis, (ext, n)) in [(e.x, dims[0]), (e.y, dims[1]), (e.z, dims[2])]
            .into_iter()
            .enumerate()
        {
            if ((ext / n as f64) - spacing).abs() > 1e-9 * spacing {
                return Err(Error::Config(format!(
                    "bbox extent on axis {axis} is not isotropic with dims {dims:?}"
                )));
            }
        }
        let origin = [
            bbox.min.x + spacing / 2.0,
            bbox.min.y + spacing / 2.0,
            bbox.min.z + spacing / 2.0,
        ];
        Ok(GridSpec { dims, spacing, origin })
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn bbox(&self) -> Result<Aabb> {
        let h = self.spacing / 2.0;
        Aabb::new(
            Vec3::new(self.origin[0] - h, self.origin[1] - h, self.origin[2] - h),
            Vec3::new(
                self.origin[0] + (self.dims[0] as f64 - 1.0) * self.spacing + h,
                self.origin[1] + (self.dims[1] as f64 - 1.0) * self.spacing + h,
                self.origin[2] + (self.dims[2] as f64 - 1.0) * self.spacing + h,
            ),
        )
    }
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], spacing: f64, origin: [f64; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("all dims must be >= 1, got {dims:?}")));
        }
        if spacing <= 0.0 {
            return Err(Error::Config(format!("spacing must be > 0, got {spacing}")));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::ShapeMismatch(format!(
                "volume payload has {} values, dims {:?} need {}",
                data.len(),
                dims,
                dims[0] * dims[1] * dims[2]
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume contains non-finite values".into()));
        }
        Ok(VolumeGrid { dims, spacing, origin, data })
    }

    pub fn zeros(spec: &GridSpec) -> Self {
        VolumeGrid {
            dims: spec.dims,
            spacing: spec.spacing,
            origin: spec.origin,
            data: vec![0.0; spec.n_voxels()],
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec { dims: self.dims, spacing: self.spacing, origin: self.origin }
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.linear_index(i, j, k)]
    }

    /// World position of voxel center (i,j,k).
    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + i as f64 * self.spacing,
            self.origin[1] + j as f64 * self.spacing,
            self.origin[2] + k as f64 * self.spacing,
        )
    }

    /// Outer bounding box (voxel boundaries, half a spacing beyond the
    /// center hull).
    pub fn bbox(&self) -> Aabb {
        self.grid_spec().bbox().expect("valid by construction")
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Trilinear interpolation at world point `p`. Voxel indices outside the
/// grid contribute zero, so values degrade to 0 beyond one voxel outside
/// the voxel-center hull.
#[inline]
pub fn sample_trilinear(vol: &VolumeGrid, p: Vec3) -> f64 {
    let gx = (p.x - vol.origin[0]) / vol.spacing;
    let gy = (p.y - vol.origin[1]) / vol.spacing;
    let gz = (p.z - vol.origin[2]) / vol.spacing;
    let fx = gx.floor();
    let fy = gy.floor();
    let fz = gz.floor();
    let tx = gx - fx;
    let ty = gy - fy;
    let tz = gz - fz;
    let (nx, ny, nz) = (vol.dims[0] as i64, vol.dims[1] as i64, vol.dims[2] as i64);
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);

    let mut acc = 0.0_f64;
    for (dz, wz) in [(0_i64, 1.0 - tz), (1, tz)] {
        let z = iz + dz;
        if z < 0 || z >= nz || wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0_i64, 1.0 - ty), (1, ty)] {
            let y = iy + dy;
            if y < 0 || y >= ny || wy == 0.0 {
                continue;
            }
            let wyz = wy * wz;
            let row = ((z * ny + y) * nx) as usize;
            for (dx, wx) in [(0_i64, 1.0 - tx), (1, tx)] {
                let x = ix + dx;
                if x < 0 || x >= nx {
                    continue;
                }
                acc += wx * wyz * vol.data[row + x as usize] as f64;
            }
        }
    }
    acc
}

/// The 8 trilinear (index, weight) pairs at `p`; out-of-grid corners are
/// skipped. Shared by the projector's scatter adjoint.
#[inline]
pub fn trilinear_corners(
    dims: [usize; 3],
    spacing: f64,
    origin: [f64; 3],
    p: Vec3,
    out: &mut [(usize, f64); 8],
) -> usize {
    let gx = (p.x - origin[0]) / spacing;
    let gy = (p.y - origin[1]) / spacing;
    let gz = (p.z - origin[2]) / spacing;
    let fx = gx.floor();
    let fy = gy.floor();
    let fz = gz.floor();
    let tx = gx - fx;
    let ty = gy - fy;
    let tz = gz - fz;
    let (nx, ny, nz) = (dims[0] as i64, dims[1] as i64, dims[2] as i64);
    let (ix, iy, iz) = (fx as i64, fy as i64, fz as i64);
    let mut n = 0;
    for (dz, wz) in [(0_i64, 1.0 - tz), (1, tz)] {
        let z = iz + dz;
        if z < 0 || z >= nz {
            continue;
        }
        for (dy, wy) in [(0_i64, 1.0 - ty), (1, ty)] {
            let y = iy + dy;
            if y < 0 || y >= ny {
                continue;
            }
            for (dx, wx) in [(0_i64, 1.0 - tx), (1, tx)] {
                let x = ix + dx;
                if x < 0 || x >= nx {
                    continue;
                }
                let w = wx * wy * wz;
                if w != 0.0 {
                    out[n] = (((z * ny + y) * nx + x) as usize, w);
                    n += 1;
                }
            }
        }
    }
    n
}

/// Keep every `stride`-th voxel along each axis (same origin, scaled
/// spacing); used for cheap convergence-trace comparisons.
pub fn decimate(vol: &VolumeGrid, stride: usize) -> VolumeGrid {
    assert!(stride >= 1);
    if stride == 1 {
        return vol.clone();
    }
    let dims = [
        (vol.dims[0] + stride - 1) / stride,
        (vol.dims[1] + stride - 1) / stride,
        (vol.dims[2] + stride - 1) / stride,
    ];
    let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                data.push(vol.at(i * stride, j * stride, k * stride));
            }
        }
    }
    VolumeGrid {
        dims,
        spacing: vol.spacing * stride as f64,
        origin: vol.origin,
        data,
    }
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range1 {
    pub lo: f64,
    pub hi: f64,
}

impl Range1 {
    pub fn new(lo: f64, hi: f64) -> Self {
        Range1 { lo, hi }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..self.hi)
        }
    }
}

/// Parameter ranges for one axis-aligned ellipsoid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidRange {
    pub center: [Range1; 3],
    pub semi_axes: [Range1; 3],
}

impl EllipsoidRange {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Ellipsoid {
        Ellipsoid {
            center: [
                self.center[0].draw(rng),
                self.center[1].draw(rng),
                self.center[2].draw(rng),
            ],
            semi_axes: [
                self.semi_axes[0].draw(rng),
                self.semi_axes[1].draw(rng),
                self.semi_axes[2].draw(rng),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        let dx = (p.x - self.center[0]) / self.semi_axes[0];
        let dy = (p.y - self.center[1]) / self.semi_axes[1];
        let dz = (p.z - self.center[2]) / self.semi_axes[2];
        dx * dx + dy * dy + dz * dz <= 1.0
    }

    /// Sufficient containment test: the corner farthest from `outer`'s
    /// center over `self`'s bounding box lies inside `outer`.
    fn inside(&self, outer: &Ellipsoid) -> bool {
        let mut q = 0.0;
        for axis in 0..3 {
            let d = (self.center[axis] - outer.center[axis]).abs() + self.semi_axes[axis];
            q += (d / outer.semi_axes[axis]).powi(2);
        }
        q <= 1.0
    }
}

/// Ranges describing the anatomy of a synthetic thorax phantom.
///
/// Composition order is fixed: body, then lungs carved inside, then spine,
/// then nodules added on top of lung density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub body: EllipsoidRange,
    pub lungs: [EllipsoidRange; 2],
    pub spine: EllipsoidRange,
    /// Soft tissue / lung / bone densities, mm^-1.
    pub soft_density: Range1,
    pub lung_density: Range1,
    pub bone_density: Range1,
    pub nodule_count: (usize, usize),
    pub nodule_radius: Range1,
    /// Added on top of the lung density inside each nodule.
    pub nodule_density: Range1,
}

impl PhantomSpec {
    /// Desk-scale thorax defaults: 64^3 voxels at 2 mm, soft tissue
    /// 0.02 mm^-1, lungs 0.004, bone 0.04.
    pub fn default_desk() -> Self {
        Self::with_grid([64, 64, 64], 2.0)
    }

    /// Same anatomy scaled to an arbitrary isotropic grid (extent
    /// dims*spacing mm, centered at the origin). Anatomy ranges are given as
    /// fractions of the half-extent so smaller test grids stay valid.
    pub fn with_grid(dims: [usize; 3], spacing: f64) -> Self {
        let hx = dims[0] as f64 * spacing / 2.0;
        let hy = dims[1] as f64 * spacing / 2.0;
        let hz = dims[2] as f64 * spacing / 2.0;
        let r = |lo: f64, hi: f64, h: f64| Range1::new(lo * h, hi * h);
        PhantomSpec {
            dims,
            spacing,
            body: EllipsoidRange {
                center: [r(-0.03, 0.03, hx), r(-0.03, 0.03, hy), Range1::new(0.0, 0.0)],
                semi_axes: [r(0.68, 0.78, hx), r(0.52, 0.62, hy), r(1.6, 2.2, hz)],
            },
            lungs: [
                EllipsoidRange {
                    center: [r(-0.36, -0.30, hx), r(-0.10, 0.0, hy), r(-0.08, 0.08, hz)],
                    semi_axes: [r(0.18, 0.24, hx), r(0.22, 0.30, hy), r(0.42, 0.55, hz)],
                },
                EllipsoidRange {
                    center: [r(0.30, 0.36, hx), r(-0.10, 0.0, hy), r(-0.08, 0.08, hz)],
                    semi_axes: [r(0.18, 0.24, hx), r(0.22, 0.30, hy), r(0.42, 0.55, hz)],
                },
            ],
            spine: EllipsoidRange {
                center: [r(-0.02, 0.02, hx), r(0.34, 0.40, hy), Range1::new(0.0, 0.0)],
                semi_axes: [r(0.09, 0.12, hx), r(0.09, 0.12, hy), r(1.2, 1.6, hz)],
            },
            soft_density: Range1::new(0.019, 0.021),
            lung_density: Range1::new(0.0035, 0.0045),
            bone_density: Range1::new(0.038, 0.042),
            nodule_count: (2, 6),
            nodule_radius: Range1::new(0.04 * hx.min(hy), 0.12 * hx.min(hy)),
            nodule_density: Range1::new(0.012, 0.018),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) || self.spacing <= 0.0 {
            return Err(Error::Config("phantom grid must be non-empty with positive spacing".into()));
        }
        let ranges = [
            self.soft_density,
            self.lung_density,
            self.bone_density,
            self.nodule_density,
        ];
        for r in ranges {
            if !(0.0..=0.1).contains(&r.lo) || !(0.0..=0.1).contains(&r.hi) || r.lo > r.hi {
                return Err(Error::Config(format!(
                    "density range [{}, {}] outside [0, 0.1] mm^-1",
                    r.lo, r.hi
                )));
            }
        }
        let all_semi = std::iter::once(&self.body)
            .chain(self.lungs.iter())
            .chain(std::iter::once(&self.spine))
            .flat_map(|e| e.semi_axes.iter())
            .chain(std::iter::once(&self.nodule_radius));
        for r in all_semi {
            if r.lo <= 0.0 || r.lo > r.hi {
                return Err(Error::Config("semi-axes must be positive with lo <= hi".into()));
            }
        }
        if self.nodule_count.0 > self.nodule_count.1 {
            return Err(Error::Config("nodule count range inverted".into()));
        }
        Ok(())
    }

    /// Upper bound on any voxel value a draw from this spec can produce.
    pub fn max_density(&self) -> f64 {
        self.bone_density
            .hi
            .max(self.soft_density.hi)
            .max(self.lung_density.hi + self.nodule_density.hi)
    }
}

/// The realized shapes behind one phantom; kept so tests can probe
/// membership analytically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomInstance {
    pub body: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub spine: Ellipsoid,
    /// (sphere, added density) pairs inside the lungs.
    pub nodules: Vec<(Ellipsoid, f64)>,
    pub soft_density: f64,
    pub lung_density: f64,
    pub bone_density: f64,
}

/// Draw the shape parameters for one phantom. Deterministic in (spec, seed).
pub fn draw_phantom(spec: &PhantomSpec, seed: u64) -> Result<PhantomInstance> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[tag::PHANTOM]);
    let body = spec.body.draw(&mut rng);
    let mut lungs = Vec::with_capacity(2);
    for lr in &spec.lungs {
        let mut lung = lr.draw(&mut rng);
        let mut tries = 0;
        while !lung.inside(&body) {
            tries += 1;
            if tries > 100 {
                return Err(Error::Config(
                    "lung ranges incompatible with body ranges (containment unsatisfiable)".into(),
                ));
            }
            lung = lr.draw(&mut rng);
        }
        lungs.push(lung);
    }
    let spine = spec.spine.draw(&mut rng);
    let soft_density = spec.soft_density.draw(&mut rng);
    let lung_density = spec.lung_density.draw(&mut rng);
    let bone_density = spec.bone_density.draw(&mut rng);
    let n_nodules = if spec.nodule_count.0 == spec.nodule_count.1 {
        spec.nodule_count.0
    } else {
        rng.gen_range(spec.nodule_count.0..=spec.nodule_count.1)
    };
    let mut nodules = Vec::with_capacity(n_nodules);
    for i in 0..n_nodules {
        let lung = &lungs[i % 2];
        let radius = spec.nodule_radius.draw(&mut rng);
        // Shrink the lung by the radius so the whole nodule stays inside.
        let margin = [
            (lung.semi_axes[0] - radius).max(1e-3),
            (lung.semi_axes[1] - radius).max(1e-3),
            (lung.semi_axes[2] - radius).max(1e-3),
        ];
        let center;
        let mut tries = 0;
        loop {
            let u = [
                rng.gen_range(-1.0..1.0_f64),
                rng.gen_range(-1.0..1.0_f64),
                rng.gen_range(-1.0..1.0_f64),
            ];
            tries += 1;
            if u[0] * u[0] + u[1] * u[1] + u[2] * u[2] <= 1.0 || tries > 200 {
                center = [
                    lung.center[0] + u[0] * margin[0],
                    lung.center[1] + u[1] * margin[1],
                    lung.center[2] + u[2] * margin[2],
                ];
                break;
            }
        }
        let density = spec.nodule_density.draw(&mut rng);
        nodules.push((
            Ellipsoid { center, semi_axes: [radius, radius, radius] },
            density,
        ));
    }
    Ok(PhantomInstance {
        body,
        lungs: [lungs[0], lungs[1]],
        spine,
        nodules,
        soft_density,
        lung_density,
        bone_density,
    })
}

/// Density at a world point under the fixed compositing order.
pub fn phantom_density(inst: &PhantomInstance, p: Vec3) -> f64 {
    let mut v = 0.0;
    if inst.body.contains(p) {
        v = inst.soft_density;
    }
    let in_lung = inst.lungs.iter().any(|l| l.contains(p));
    if in_lung {
        v = inst.lung_density;
    }
    if inst.spine.contains(p) {
        v = inst.bone_density;
    }
    if in_lung {
        for (nod, d) in &inst.nodules {
            if nod.contains(p) {
                v += d;
            }
        }
    }
    v
}

/// Rasterize onto a grid centered at the world origin.
pub fn rasterize_phantom(inst: &PhantomInstance, dims: [usize; 3], spacing: f64) -> Result<VolumeGrid> {
    let origin = [
        -((dims[0] as f64 - 1.0) / 2.0) * spacing,
        -((dims[1] as f64 - 1.0) / 2.0) * spacing,
        -((dims[2] as f64 - 1.0) / 2.0) * spacing,
    ];
    let mut data = vec![0.0_f32; dims[0] * dims[1] * dims[2]];
    let mut idx = 0;
    for k in 0..dims[2] {
        let z = origin[2] + k as f64 * spacing;
        for j in 0..dims[1] {
            let y = origin[1] + j as f64 * spacing;
            for i in 0..dims[0] {
                let x = origin[0] + i as f64 * spacing;
                data[idx] = phantom_density(inst, Vec3::new(x, y, z)) as f32;
                idx += 1;
            }
        }
    }
    VolumeGrid::new(dims, spacing, origin, data)
}

/// Deterministic phantom volume for (spec, seed).
pub fn make_phantom(spec: &PhantomSpec, seed: u64) -> Result<VolumeGrid> {
    let inst = draw_phantom(spec, seed)?;
    rasterize_phantom(&inst, spec.dims, spec.spacing)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing_mm: f64,
    origin_mm: [f64; 3],
    dtype: String,
    data_file: String,
}

fn raw_path_for(json_path: &Path, data_file: &str) -> PathBuf {
    json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(data_file)
}

/// Write `<base>.vol.json` + `<base>.vol.raw`. `path` must be the header
/// path ending in `.vol.json`.
pub fn write_volume(vol: &VolumeGrid, path: &Path) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("bad volume path {path:?}")))?;
    let stem = name
        .strip_suffix(".vol.json")
        .ok_or_else(|| Error::Config(format!("volume header path must end in .vol.json, got {name}")))?;
    let data_file = format!("{stem}.vol.raw");
    let header = VolumeHeader {
        dims: vol.dims,
        spacing_mm: vol.spacing,
        origin_mm: vol.origin,
        dtype: "f32le".into(),
        data_file: data_file.clone(),
    };
    let mut payload = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, serde_json::to_vec_pretty(&header)?)?;
    let mut f = fs::File::create(raw_path_for(path, &data_file))?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<VolumeGrid> {
    let header: VolumeHeader = serde_json::from_slice(&fs::read(path)?)?;
    if header.dtype != "f32le" {
        return Err(Error::Data(format!("unsupported volume dtype {}", header.dtype)));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let mut payload = Vec::new();
    fs::File::open(raw_path_for(path, &header.data_file))?.read_to_end(&mut payload)?;
    if payload.len() != n * 4 {
        return Err(Error::Data(format!(
            "volume payload is {} bytes, header dims {:?} need {}",
            payload.len(),
            header.dims,
            n * 4
        )));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if v.is_nan() {
            return Err(Error::Data("volume payload contains NaN".into()));
        }
        data.push(v);
    }
    VolumeGrid::new(header.dims, header.spacing_mm, header.origin_mm, data)
}
