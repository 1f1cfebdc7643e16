//! Landweber iteration on the least-squares data term with optional
//! smoothed-TV regularization, plus the power-iteration step-size bound.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::projector::{backproject_field, project_field, ProjectionStack};
use crate::rng::{self, tag};
use crate::volume::{GridSpec, VolumeGrid};

use super::tv::tv_grad;

#[derive(Clone, Debug)]
pub struct LandweberConfig {
    /// Step size; stable for omega < 2 / sigma_max^2.
    pub omega: f64,
    pub tv_weight: f64,
    pub tv_epsilon: f64,
    pub n_iter: usize,
    /// Clamp each iterate to nonnegative densities.
    pub nonneg: bool,
    /// Samples per ray for the forward/adjoint pair inside the iteration.
    pub n_samples: usize,
    /// Iteration counts whose iterates are captured in the output; lets a
    /// grid search sweep n_iter in a single run.
    pub checkpoint_iters: Vec<usize>,
}

impl LandweberConfig {
    pub fn validate(&self) -> Result<()> {
        if self.omega <= 0.0 || self.tv_weight < 0.0 || self.tv_epsilon <= 0.0 {
            return Err(Error::Config(
                "landweber needs omega > 0, tv_weight >= 0, tv_epsilon > 0".into(),
            ));
        }
        if self.n_iter == 0 || self.n_samples == 0 {
            return Err(Error::Config("landweber needs n_iter >= 1 and n_samples >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LandweberOutput {
    pub volume: VolumeGrid,
    /// ||A x_k - p|| after each iteration's forward pass.
    pub residual_norms: Vec<f64>,
    /// Iterates captured at the configured checkpoint counts.
    pub checkpoint_volumes: Vec<(usize, VolumeGrid)>,
}

/// x_{k+1} = clamp+( x_k - omega * (A^T (A x_k - p) + tv_weight * dTV(x_k)) ).
///
/// Errors with the residual history if the data residual grows tenfold from
/// its running minimum.
pub fn landweber_tv(
    proj: &ProjectionStack,
    grid: &GridSpec,
    cfg: &LandweberConfig,
) -> Result<LandweberOutput> {
    cfg.validate()?;
    let geom = &proj.geom;
    let mut x = vec![0.0_f32; grid.n_voxels()];
    let mut residuals = Vec::with_capacity(cfg.n_iter);
    let mut min_res = f64::INFINITY;
    let mut checkpoint_volumes = Vec::new();
    for iter in 0..cfg.n_iter {
        let ax = project_field(&x, grid, geom, cfg.n_samples)?;
        let mut r = ax;
        for (rv, pv) in r.iter_mut().zip(proj.data()) {
            *rv -= *pv;
        }
        let res_norm = r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        residuals.push(res_norm);
        min_res = min_res.min(res_norm);
        if res_norm > 10.0 * min_res && min_res > 0.0 {
            return Err(Error::Divergence {
                factor: res_norm / min_res,
                iters: iter + 1,
                residual_history: residuals,
            });
        }
        let grad_data = backproject_field(&r, geom, grid, cfg.n_samples)?;
        if cfg.tv_weight > 0.0 {
            let tvg = tv_grad(&x, grid.dims, cfg.tv_epsilon as f32);
            for i in 0..x.len() {
                let step = cfg.omega * (grad_data[i] + cfg.tv_weight * tvg[i] as f64);
                x[i] = (x[i] as f64 - step) as f32;
            }
        } else {
            for i in 0..x.len() {
                x[i] = (x[i] as f64 - cfg.omega * grad_data[i]) as f32;
            }
        }
        if cfg.nonneg {
            for v in &mut x {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        if cfg.checkpoint_iters.contains(&(iter + 1)) {
            checkpoint_volumes.push((
                iter + 1,
                VolumeGrid::new(grid.dims, grid.spacing, grid.origin, x.clone())?,
            ));
        }
    }
    Ok(LandweberOutput {
        volume: VolumeGrid::new(grid.dims, grid.spacing, grid.origin, x)?,
        residual_norms: residuals,
        checkpoint_volumes,
    })
}

/// Largest singular value of A estimated by power iteration on A^T A from a
/// seeded random start: sigma = ||A v|| / ||v|| at the final iterate.
pub fn estimate_opnorm(
    geom: &ConeBeamGeometry,
    grid: &GridSpec,
    n_samples: usize,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    if iters == 0 {
        return Err(Error::Config("power iteration needs iters >= 1".into()));
    }
    let mut rng = rng::stream(seed, &[tag::OPNORM]);
    let mut v: Vec<f32> = (0..grid.n_voxels()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut sigma = 0.0;
    for _ in 0..iters {
        let v_norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if v_norm == 0.0 {
            return Ok(0.0);
        }
        let av = project_field(&v, grid, geom, n_samples)?;
        let av_norm = av.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        sigma = av_norm / v_norm;
        let atav = backproject_field(&av, geom, grid, n_samples)?;
        let n = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Ok(0.0);
        }
        for (dst, src) in v.iter_mut().zip(&atav) {
            *dst = (src / n) as f32;
        }
    }
    Ok(sigma)
}
