//! The forward operator A (volume -> log-domain projections) by ray-driven
//! midpoint sampling, its exact adjoint (scatter with identical trilinear
//! weights), and the Poisson measurement-noise model.
//!
//! Parallel reductions are merged in a fixed order (angle index, then pixel
//! order), so outputs are byte-identical regardless of thread count.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_for_pixel, ConeBeamGeometry};
use crate::volume::{sample_trilinear, trilinear_corners, GridSpec, VolumeGrid};

/// How many photons the noise model assumed, and with which seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub photons: f64,
    pub seed: u64,
}

/// Per-angle 2D arrays of log-domain line integrals p = -log(I/I0),
/// angle-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack {
    pub geom: ConeBeamGeometry,
    data: Vec<f32>,
    pub noise_meta: Option<NoiseMeta>,
}

impl ProjectionStack {
    pub fn new(geom: ConeBeamGeometry, data: Vec<f32>, noise_meta: Option<NoiseMeta>) -> Result<Self> {
        if data.len() != geom.n_pixels() {
            return Err(Error::ShapeMismatch(format!(
                "projection payload has {} values, geometry needs {}",
                data.len(),
                geom.n_pixels()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("projections contain non-finite values".into()));
        }
        if noise_meta.is_none() && data.iter().any(|&v| v < 0.0) {
            return Err(Error::Data("noise-free projections must be nonnegative".into()));
        }
        Ok(ProjectionStack { geom, data, noise_meta })
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, angle: usize, row: usize, col: usize) -> f32 {
        self.data[self.geom.pixel_index(angle, row, col)]
    }
}

/// Forward-project a raw density field laid out on `grid`.
///
/// Per pixel: cast the source->pixel ray, midpoint-sample `n_samples` points
/// over the bbox clip, and accumulate trilinear samples times the step
/// length. Rays that miss the bbox produce 0.
pub fn project_field(
    data: &[f32],
    grid: &GridSpec,
    geom: &ConeBeamGeometry,
    n_samples: usize,
) -> Result<Vec<f32>> {
    if data.len() != grid.n_voxels() {
        return Err(Error::ShapeMismatch(format!(
            "field has {} values, grid {:?} needs {}",
            data.len(),
            grid.dims,
            grid.n_voxels()
        )));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let vol = VolumeGrid::new(grid.dims, grid.spacing, grid.origin, data.to_vec())?;
    let per_angle = geom.pixels_per_projection();
    let mut out = vec![0.0_f32; geom.n_pixels()];
    out.par_chunks_mut(per_angle)
        .enumerate()
        .try_for_each(|(a, chunk)| -> Result<()> {
            for row in 0..geom.det_rows {
                for col in 0..geom.det_cols {
                    let ray = ray_for_pixel(geom, a, row, col)?;
                    let Some((t0, t1)) = ray.clip else {
                        continue;
                    };
                    let dt = (t1 - t0) / n_samples as f64;
                    let mut acc = 0.0_f64;
                    for c in 0..n_samples {
                        let t = t0 + (c as f64 + 0.5) * dt;
                        acc += sample_trilinear(&vol, ray.point_at(t));
                    }
                    chunk[row * geom.det_cols + col] = (acc * dt) as f32;
                }
            }
            Ok(())
        })?;
    Ok(out)
}

/// Forward operator on a typed volume; requires the volume's bbox to match
/// the geometry's.
pub fn forward_project(
    vol: &VolumeGrid,
    geom: &ConeBeamGeometry,
    n_samples: usize,
) -> Result<ProjectionStack> {
    if !vol.bbox().approx_eq(&geom.bbox, 1e-6) {
        return Err(Error::BboxMismatch(format!(
            "volume bbox {:?} != geometry bbox {:?}",
            vol.bbox(),
            geom.bbox
        )));
    }
    let data = project_field(vol.data(), &vol.grid_spec(), geom, n_samples)?;
    ProjectionStack::new(geom.clone(), data, None)
}

/// Exact adjoint of [`project_field`]: every sample scatters
/// `pixel_value * dt` into its 8 trilinear corners with the forward weights.
///
/// Returns f64 accumulators (callers decide the final precision). Angles are
/// processed in bounded parallel batches and merged in angle order.
pub fn backproject_field(
    proj_data: &[f32],
    geom: &ConeBeamGeometry,
    grid: &GridSpec,
    n_samples: usize,
) -> Result<Vec<f64>> {
    if proj_data.len() != geom.n_pixels() {
        return Err(Error::ShapeMismatch(format!(
            "projection payload has {} values, geometry needs {}",
            proj_data.len(),
            geom.n_pixels()
        )));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let n_vox = grid.n_voxels();
    let per_angle = geom.pixels_per_projection();
    let mut acc = vec![0.0_f64; n_vox];
    // Bounded batches keep peak memory at n_threads volumes while the
    // angle-ordered merge keeps the sum deterministic.
    let batch = rayon::current_num_threads().max(1);
    let mut angle = 0;
    while angle < geom.n_projections() {
        let hi = (angle + batch).min(geom.n_projections());
        let partials: Vec<Result<Vec<f64>>> = (angle..hi)
            .into_par_iter()
            .map(|a| {
                let mut buf = vec![0.0_f64; n_vox];
                let mut corners = [(0usize, 0.0f64); 8];
                for row in 0..geom.det_rows {
                    for col in 0..geom.det_cols {
                        let p = proj_data[a * per_angle + row * geom.det_cols + col] as f64;
                        if p == 0.0 {
                            continue;
                        }
                        let ray = ray_for_pixel(geom, a, row, col)?;
                        let Some((t0, t1)) = ray.clip else {
                            continue;
                        };
                        let dt = (t1 - t0) / n_samples as f64;
                        let w_ray = p * dt;
                        for c in 0..n_samples {
                            let t = t0 + (c as f64 + 0.5) * dt;
                            let n = trilinear_corners(
                                grid.dims,
                                grid.spacing,
                                grid.origin,
                                ray.point_at(t),
                                &mut corners,
                            );
                            for &(idx, w) in &corners[..n] {
                                buf[idx] += w_ray * w;
                            }
                        }
                    }
                }
                Ok(buf)
            })
            .collect();
        for partial in partials {
            let partial = partial?;
            for (dst, src) in acc.iter_mut().zip(&partial) {
                *dst += src;
            }
        }
        angle = hi;
    }
    Ok(acc)
}

/// Typed adjoint returning a volume on `grid`.
pub fn backproject(
    proj: &ProjectionStack,
    grid: &GridSpec,
    n_samples: usize,
) -> Result<VolumeGrid> {
    let acc = backproject_field(proj.data(), &proj.geom, grid, n_samples)?;
    VolumeGrid::new(
        grid.dims,
        grid.spacing,
        grid.origin,
        acc.into_iter().map(|v| v as f32).collect(),
    )
}

// ---------------------------------------------------------------------------
// Poisson noise
// ---------------------------------------------------------------------------

/// Poisson draw: inversion by sequential search below lambda = 30, normal
/// approximation with rounding above. Reproducible given the stream.
pub fn sample_poisson(lambda: f64, rng: &mut ChaCha8Rng) -> u64 {
    debug_assert!(lambda >= 0.0);
    if lambda < 30.0 {
        let mut p = (-lambda).exp();
        let mut cdf = p;
        let mut k = 0u64;
        let u: f64 = rng.gen();
        while u > cdf && k < 10_000 {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
        }
        k
    } else {
        // Box-Muller standard normal.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        let q = lambda + lambda.sqrt() * z;
        q.round().max(0.0) as u64
    }
}

/// Simulate shot noise on a noise-free stack: per pixel, draw
/// q ~ Poisson(photons * exp(-p)), clamp q to at least 1, and return
/// p~ = -log(q / photons). Each pixel uses the stream seeded by
/// `seed XOR linear_pixel_index`, so results are independent of iteration
/// order and thread count.
pub fn add_poisson_noise(proj: &ProjectionStack, photons: f64, seed: u64) -> Result<ProjectionStack> {
    if photons < 1.0 {
        return Err(Error::Config(format!("photon count must be >= 1, got {photons}")));
    }
    if proj.noise_meta.is_some() {
        return Err(Error::Data("projections already carry noise".into()));
    }
    let noisy: Vec<f32> = proj
        .data
        .par_iter()
        .enumerate()
        .map(|(idx, &p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ idx as u64);
            let lambda = photons * (-p as f64).exp();
            let q = sample_poisson(lambda, &mut rng).max(1);
            -(q as f64 / photons).ln() as f32
        })
        .collect();
    ProjectionStack::new(
        proj.geom.clone(),
        noisy,
        Some(NoiseMeta { photons, seed }),
    )
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ProjectionHeader {
    geometry: ConeBeamGeometry,
    n_projections: usize,
    det_rows: usize,
    det_cols: usize,
    dtype: String,
    noise_meta: Option<NoiseMeta>,
    data_file: String,
}

fn raw_path_for(json_path: &Path, data_file: &str) -> PathBuf {
    json_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(data_file)
}

/// Write `<base>.proj.json` + `<base>.proj.raw`.
pub fn write_projections(proj: &ProjectionStack, path: &Path) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("bad projection path {path:?}")))?;
    let stem = name.strip_suffix(".proj.json").ok_or_else(|| {
        Error::Config(format!("projection header path must end in .proj.json, got {name}"))
    })?;
    let data_file = format!("{stem}.proj.raw");
    let header = ProjectionHeader {
        geometry: proj.geom.clone(),
        n_projections: proj.geom.n_projections(),
        det_rows: proj.geom.det_rows,
        det_cols: proj.geom.det_cols,
        dtype: "f32le".into(),
        noise_meta: proj.noise_meta,
        data_file: data_file.clone(),
    };
    let mut payload = Vec::with_capacity(proj.data.len() * 4);
    for v in &proj.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, serde_json::to_vec_pretty(&header)?)?;
    let mut f = fs::File::create(raw_path_for(path, &data_file))?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn read_projections(path: &Path) -> Result<ProjectionStack> {
    let header: ProjectionHeader = serde_json::from_slice(&fs::read(path)?)?;
    if header.dtype != "f32le" {
        return Err(Error::Data(format!("unsupported projection dtype {}", header.dtype)));
    }
    let n = header.geometry.n_pixels();
    if header.n_projections != header.geometry.n_projections()
        || header.det_rows != header.geometry.det_rows
        || header.det_cols != header.geometry.det_cols
    {
        return Err(Error::Data("projection header inconsistent with its geometry".into()));
    }
    let mut payload = Vec::new();
    fs::File::open(raw_path_for(path, &header.data_file))?.read_to_end(&mut payload)?;
    if payload.len() != n * 4 {
        return Err(Error::Data(format!(
            "projection payload is {} bytes, geometry needs {}",
            payload.len(),
            n * 4
        )));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if v.is_nan() {
            return Err(Error::Data("projection payload contains NaN".into()));
        }
        data.push(v);
    }
    ProjectionStack::new(header.geometry, data, header.noise_meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb, Vec3};
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn geom(det: usize, n_angles: usize, side: f64) -> ConeBeamGeometry {
        ConeBeamGeometry::with_uniform_angles(
            500.0,
            1000.0,
            det,
            det,
            4.0 * 64.0 / det as f64,
            n_angles,
            205.0_f64.to_radians(),
            Aabb::centered_cube(side).unwrap(),
        )
        .unwrap()
    }

    /// Sphere with 4x4x4 supersampled partial-volume boundary voxels, so
    /// the rasterized field integrates like the analytic ball.
    fn sphere_volume(dims: usize, spacing: f64, radius: f64, mu: f32) -> VolumeGrid {
        let spec = GridSpec::covering(
            &Aabb::centered_cube(dims as f64 * spacing).unwrap(),
            [dims, dims, dims],
        )
        .unwrap();
        let mut vol = VolumeGrid::zeros(&spec);
        let s = 4;
        for k in 0..dims {
            for j in 0..dims {
                for i in 0..dims {
                    let c = vol.voxel_center(i, j, k);
                    let mut inside = 0;
                    for sz in 0..s {
                        for sy in 0..s {
                            for sx in 0..s {
                                let off = |t: usize| (t as f64 + 0.5) / s as f64 - 0.5;
                                let p = Vec3::new(
                                    c.x + off(sx) * spacing,
                                    c.y + off(sy) * spacing,
                                    c.z + off(sz) * spacing,
                                );
                                if p.norm() <= radius {
                                    inside += 1;
                                }
                            }
                        }
                    }
                    let idx = vol.linear_index(i, j, k);
                    vol.data_mut()[idx] = mu * inside as f32 / (s * s * s) as f32;
                }
            }
        }
        vol
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let g = geom(8, 4, 64.0);
        let spec = GridSpec::covering(&g.bbox, [16, 16, 16]).unwrap();
        let vol = VolumeGrid::zeros(&spec);
        let proj = forward_project(&vol, &g, 32).unwrap();
        assert!(proj.data().iter().all(|&v| v == 0.0));
    }

    // Analytic chord: the central ray crosses the full diameter, so
    // p = 2 * R * mu within 1% at 300 midpoint samples.
    #[test]
    fn sphere_central_ray_matches_analytic_chord() {
        let g = ConeBeamGeometry::with_uniform_angles(
            500.0,
            1000.0,
            9,
            9,
            8.0,
            1,
            1.0,
            Aabb::centered_cube(128.0).unwrap(),
        )
        .unwrap();
        let radius = 48.0;
        let mu = 0.02_f32;
        let vol = sphere_volume(64, 2.0, radius, mu);
        let proj = forward_project(&vol, &g, 300).unwrap();
        let center = proj.at(0, 4, 4) as f64;
        assert_relative_eq!(center, 2.0 * radius * mu as f64, max_relative = 0.01);
    }

    #[test]
    fn forward_is_linear() {
        let g = geom(8, 6, 64.0);
        let spec = GridSpec::covering(&g.bbox, [16, 16, 16]).unwrap();
        let mut rng = stream(5, &[0]);
        let data: Vec<f32> = (0..spec.n_voxels()).map(|_| rng.gen_range(0.0..0.05)).collect();
        let doubled: Vec<f32> = data.iter().map(|v| v * 2.0).collect();
        let p1 = project_field(&data, &spec, &g, 48).unwrap();
        let p2 = project_field(&doubled, &spec, &g, 48).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert_relative_eq!(*b, 2.0 * a, max_relative = 1e-5);
        }
    }

    #[test]
    fn bbox_mismatch_is_rejected() {
        let g = geom(8, 4, 64.0);
        let other = GridSpec::covering(&Aabb::centered_cube(100.0).unwrap(), [16, 16, 16]).unwrap();
        let vol = VolumeGrid::zeros(&other);
        assert!(matches!(forward_project(&vol, &g, 16), Err(Error::BboxMismatch(_))));
    }

    #[test]
    fn zero_projections_backproject_to_zero() {
        let g = geom(8, 4, 64.0);
        let spec = GridSpec::covering(&g.bbox, [16, 16, 16]).unwrap();
        let proj = ProjectionStack::new(g.clone(), vec![0.0; g.n_pixels()], None).unwrap();
        let vol = backproject(&proj, &spec, 32).unwrap();
        assert!(vol.data().iter().all(|&v| v == 0.0));
    }

    // A single nonzero pixel only deposits into voxels within one voxel of
    // its ray's sample points.
    #[test]
    fn single_pixel_footprint_is_local() {
        let g = geom(9, 2, 64.0);
        let spec = GridSpec::covering(&g.bbox, [16, 16, 16]).unwrap();
        let mut data = vec![0.0_f32; g.n_pixels()];
        let pix = g.pixel_index(0, 4, 6);
        data[pix] = 1.0;
        let proj = ProjectionStack::new(g.clone(), data, None).unwrap();
        let vol = backproject(&proj, &spec, 64).unwrap();
        let ray = ray_for_pixel(&g, 0, 4, 6).unwrap();
        let (t0, t1) = ray.clip.unwrap();
        let dt = (t1 - t0) / 64.0;
        let near = |i: usize, j: usize, k: usize| -> bool {
            let c = vol.voxel_center(i, j, k);
            (0..64).any(|s| {
                let p = ray.point_at(t0 + (s as f64 + 0.5) * dt);
                (p - c).norm() <= vol.spacing * 3.0_f64.sqrt() + 1e-9
            })
        };
        for k in 0..16 {
            for j in 0..16 {
                for i in 0..16 {
                    if vol.at(i, j, k) != 0.0 {
                        assert!(near(i, j, k), "voxel ({i},{j},{k}) outside ray footprint");
                    }
                }
            }
        }
        assert!(vol.data().iter().any(|&v| v > 0.0));
    }

    // Adjoint dot-product oracle: <Ax, y> == <x, A^T y>.
    #[test]
    fn adjoint_dot_product_identity() {
        let g = geom(16, 12, 64.0);
        let spec = GridSpec::covering(&g.bbox, [32, 32, 32]).unwrap();
        let mut rng = stream(17, &[0]);
        for _ in 0..3 {
            let x: Vec<f32> = (0..spec.n_voxels()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let y: Vec<f32> = (0..g.n_pixels()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let ax = project_field(&x, &spec, &g, 48).unwrap();
            let aty = backproject_field(&y, &g, &spec, 48).unwrap();
            let ax_y: f64 = ax.iter().zip(&y).map(|(a, b)| *a as f64 * *b as f64).sum();
            let x_aty: f64 = x.iter().zip(&aty).map(|(a, b)| *a as f64 * b).sum();
            let ax_norm: f64 = ax.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let y_norm: f64 = y.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let rel = (ax_y - x_aty).abs() / (ax_norm * y_norm);
            assert!(rel < 1e-4, "adjoint identity violated: {rel}");
        }
    }

    #[test]
    fn midpoint_quadrature_converges_in_sample_count() {
        // Smooth Gaussian blob.
        let g = geom(8, 3, 64.0);
        let spec = GridSpec::covering(&g.bbox, [16, 16, 16]).unwrap();
        let mut vol = VolumeGrid::zeros(&spec);
        for k in 0..16 {
            for j in 0..16 {
                for i in 0..16 {
                    let c = vol.voxel_center(i, j, k);
                    let idx = vol.linear_index(i, j, k);
                    vol.data_mut()[idx] = (0.05 * (-c.dot(c) / 800.0).exp()) as f32;
                }
            }
        }
        let diff = |n: usize| -> f64 {
            let a = forward_project(&vol, &g, n).unwrap();
            let b = forward_project(&vol, &g, 2 * n).unwrap();
            let sum: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs() as f64)
                .sum();
            sum / a.data().len() as f64
        };
        // Sample spacing must resolve the voxel scale before the midpoint
        // rule enters its asymptotic regime.
        let (d1, d2, d3) = (diff(32), diff(64), diff(128));
        assert!(d1 > d2 && d2 > d3, "no monotone decrease: {d1} {d2} {d3}");
    }

    #[test]
    fn noise_rejects_bad_inputs() {
        let g = geom(4, 2, 64.0);
        let proj = ProjectionStack::new(g.clone(), vec![0.5; g.n_pixels()], None).unwrap();
        assert!(add_poisson_noise(&proj, 0.0, 1).is_err());
        let noisy = add_poisson_noise(&proj, 1e5, 1).unwrap();
        assert!(add_poisson_noise(&noisy, 1e5, 1).is_err());
    }

    // Forced by the clamp rule: when the rate is so small that q draws 0,
    // the pixel reads exactly log(photons).
    #[test]
    fn tiny_rate_clamps_to_log_photons() {
        let g = geom(4, 2, 64.0);
        // Huge p so lambda = photons * exp(-p) is effectively zero.
        let proj = ProjectionStack::new(g.clone(), vec![200.0; g.n_pixels()], None).unwrap();
        let photons = 5e5;
        let noisy = add_poisson_noise(&proj, photons, 9).unwrap();
        for &v in noisy.data() {
            assert_relative_eq!(v as f64, photons.ln(), epsilon = 1e-6);
        }
    }

    // Delta-method statistics at p = 0: E[p~] ~ 0 within 3 standard errors,
    // and at p = 1 the variance is within 10% of exp(p)/photons.
    #[test]
    fn noise_moments_match_delta_method() {
        let photons = 5e5_f64;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut mean0 = 0.0;
        for _ in 0..n {
            let q = sample_poisson(photons, &mut rng).max(1);
            mean0 += -(q as f64 / photons).ln();
        }
        mean0 /= n as f64;
        let se = (1.0 / photons / n as f64).sqrt();
        assert!(mean0.abs() < 3.0 * se, "mean {mean0} exceeds 3 SE {se}");

        let p = 1.0_f64;
        let lambda = photons * (-p).exp();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let q = sample_poisson(lambda, &mut rng).max(1);
            vals.push(-(q as f64 / photons).ln());
        }
        let m: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = p.exp() / photons;
        assert!(
            (var - expect).abs() / expect < 0.10,
            "variance {var} vs delta-method {expect}"
        );
    }

    // Concentration at large rate: photons = 1e9, p = 1 keeps |p~ - 1| tiny.
    #[test]
    fn large_rate_concentrates() {
        let photons = 1e9_f64;
        let lambda = photons * (-1.0_f64).exp();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let q = sample_poisson(lambda, &mut rng).max(1);
            let p = -(q as f64 / photons).ln();
            assert!((p - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let g = geom(8, 3, 64.0);
        let mut rng = stream(3, &[1]);
        let data: Vec<f32> = (0..g.n_pixels()).map(|_| rng.gen_range(0.0..2.0)).collect();
        let proj = ProjectionStack::new(g.clone(), data, None).unwrap();
        let a = add_poisson_noise(&proj, 5e5, 42).unwrap();
        let b = add_poisson_noise(&proj, 5e5, 42).unwrap();
        assert_eq!(a.data(), b.data());
        let c = add_poisson_noise(&proj, 5e5, 43).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn projection_roundtrip_is_bit_exact() {
        let g = geom(6, 3, 64.0);
        let mut rng = stream(8, &[2]);
        let data: Vec<f32> = (0..g.n_pixels()).map(|_| rng.gen_range(0.0..2.0)).collect();
        let proj = add_poisson_noise(
            &ProjectionStack::new(g, data, None).unwrap(),
            5e5,
            11,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.proj.json");
        write_projections(&proj, &path).unwrap();
        let back = read_projections(&path).unwrap();
        assert_eq!(proj, back);
    }
}
