//! Per-scan fitting from projections: render rays, square the residual
//! against the measured log-domain values, and optimize with Adam.
//!
//! `fit_nmf` freezes the shared field and optimizes a fresh modulation field
//! only; `fit_scratch` trains a whole unconditional field from scratch.
//! Both hold out a fixed fraction of rays, evaluate the held-out loss on a
//! schedule, stop early when it stops improving, and return the parameters
//! from the best evaluation.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ray_for_pixel;
use crate::metrics::psnr;
use crate::network::batch::{backward_batch, forward_batch, PointBatchGrads};
use crate::network::{
    bake_to_grid, CondFieldParams, FieldModelConfig, FieldScratch, NmfParams, SharedFieldParams,
};
use crate::optim::adam::{adam_step, AdamConfig, AdamState};
use crate::optim::TrainConfig;
use crate::projector::ProjectionStack;
use crate::real::Real;
use crate::rng::{self, tag};
use crate::volume::{decimate, GridSpec, VolumeGrid};

/// Rays per parallel work unit during fitting; fixed so gradient merges are
/// independent of thread count.
const RAYS_PER_UNIT: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    /// Volume PSNR against the reference, when one was supplied.
    pub psnr_db: Option<f64>,
    pub holdout_loss: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub trace: Vec<TraceRow>,
    pub best_step: u64,
    pub final_step: u64,
    pub stopped_early: bool,
    pub best_holdout_loss: f64,
}

impl FitOutcome {
    /// (step, psnr) pairs for convergence reporting.
    pub fn psnr_trace(&self) -> Vec<(u64, f64)> {
        self.trace
            .iter()
            .filter_map(|r| r.psnr_db.map(|p| (r.step, p)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct NmfFitResult<T: Real> {
    pub nmf: NmfParams<T>,
    pub outcome: FitOutcome,
}

#[derive(Clone, Debug)]
pub struct ScratchFitResult<T: Real> {
    pub params: CondFieldParams<T>,
    pub outcome: FitOutcome,
}

/// Fit a fresh NMF for one scan against a frozen shared field.
pub fn fit_nmf<T: Real>(
    shared: &SharedFieldParams<T>,
    model: &FieldModelConfig,
    proj: &ProjectionStack,
    cfg: &TrainConfig,
    patient: &str,
    reference: Option<&VolumeGrid>,
) -> Result<NmfFitResult<T>> {
    if !proj.geom.bbox.approx_eq(&shared.bbox, 1e-6) {
        return Err(Error::BboxMismatch(
            "projection geometry does not match the shared field's bbox".into(),
        ));
    }
    let nmf = NmfParams::init(model, patient, cfg.seed)?;
    let adam = AdamState::new(&nmf, AdamConfig::with_lr(cfg.lr_nmf));
    let mut driver = FitDriver::new(proj, cfg, reference, shared.bbox)?;
    let mut model_state = FitModel::Nmf { shared, nmf, adam };
    let outcome = driver.run(&mut model_state)?;
    match model_state {
        FitModel::Nmf { nmf, .. } => Ok(NmfFitResult { nmf, outcome }),
        _ => unreachable!(),
    }
}

/// Fit an unconditional field from scratch for one scan.
pub fn fit_scratch<T: Real>(
    model: &FieldModelConfig,
    proj: &ProjectionStack,
    cfg: &TrainConfig,
    reference: Option<&VolumeGrid>,
) -> Result<ScratchFitResult<T>> {
    let shared = SharedFieldParams::init(model, proj.geom.bbox, cfg.seed)?;
    let adam = AdamState::new(&shared, AdamConfig::with_lr(cfg.lr_scratch));
    let mut driver = FitDriver::new(proj, cfg, reference, proj.geom.bbox)?;
    let mut model_state = FitModel::Scratch { shared, adam };
    let outcome = driver.run(&mut model_state)?;
    match model_state {
        FitModel::Scratch { shared, .. } => Ok(ScratchFitResult {
            params: CondFieldParams::new(shared),
            outcome,
        }),
        _ => unreachable!(),
    }
}

enum FitModel<'a, T: Real> {
    Nmf {
        shared: &'a SharedFieldParams<T>,
        nmf: NmfParams<T>,
        adam: AdamState<T>,
    },
    Scratch {
        shared: SharedFieldParams<T>,
        adam: AdamState<T>,
    },
}

enum Snapshot<T: Real> {
    Nmf(NmfParams<T>),
    Scratch(SharedFieldParams<T>),
}

impl<'a, T: Real> FitModel<'a, T> {
    fn shared(&self) -> &SharedFieldParams<T> {
        match self {
            FitModel::Nmf { shared, .. } => shared,
            FitModel::Scratch { shared, .. } => shared,
        }
    }

    fn nmf(&self) -> Option<&NmfParams<T>> {
        match self {
            FitModel::Nmf { nmf, .. } => Some(nmf),
            FitModel::Scratch { .. } => None,
        }
    }

    fn zero_grads(&self) -> PointBatchGrads<T> {
        match self {
            FitModel::Nmf { nmf, .. } => PointBatchGrads::nmf_only(nmf),
            FitModel::Scratch { shared, .. } => PointBatchGrads::zeros(shared, None),
        }
    }

    fn apply(&mut self, grads: &PointBatchGrads<T>) -> Result<()> {
        match self {
            FitModel::Nmf { nmf, adam, .. } => {
                adam_step(adam, nmf, grads.nmf.as_ref().expect("nmf grads"))
            }
            FitModel::Scratch { shared, adam } => {
                adam_step(adam, shared, grads.shared.as_ref().expect("shared grads"))
            }
        }
    }

    fn snapshot(&self) -> Snapshot<T> {
        match self {
            FitModel::Nmf { nmf, .. } => Snapshot::Nmf(nmf.clone()),
            FitModel::Scratch { shared, .. } => Snapshot::Scratch(shared.clone()),
        }
    }

    fn restore(&mut self, snap: Snapshot<T>) {
        match (self, snap) {
            (FitModel::Nmf { nmf, .. }, Snapshot::Nmf(s)) => *nmf = s,
            (FitModel::Scratch { shared, .. }, Snapshot::Scratch(s)) => *shared = s,
            _ => panic!("snapshot kind mismatch"),
        }
    }
}

struct FitDriver<'p> {
    proj: &'p ProjectionStack,
    cfg: &'p TrainConfig,
    reference_dec: Option<VolumeGrid>,
    bake_grid: GridSpec,
    /// Pixels eligible for training ray draws (hits the bbox, not held out).
    trainable: Vec<bool>,
    /// Fixed held-out evaluation rays.
    eval_rays: Vec<usize>,
}

impl<'p> FitDriver<'p> {
    fn new(
        proj: &'p ProjectionStack,
        cfg: &'p TrainConfig,
        reference: Option<&'p VolumeGrid>,
        bbox: crate::geometry::Aabb,
    ) -> Result<Self> {
        cfg.validate()?;
        let geom = &proj.geom;
        let n = geom.n_pixels();

        // Rays that actually cross the volume.
        let hits: Vec<bool> = (0..n)
            .into_par_iter()
            .map(|idx| {
                let (a, r, c) = geom.pixel_coords(idx);
                ray_for_pixel(geom, a, r, c).map(|ray| ray.clip.is_some())
            })
            .collect::<Result<_>>()?;

        // Fixed holdout: a seeded partial shuffle of all pixel indices.
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng::stream(cfg.seed, &[tag::HOLDOUT]);
        let holdout_count = ((n as f64) * cfg.holdout_fraction).round() as usize;
        for i in 0..holdout_count.min(n - 1) {
            let j = rng.gen_range(i..n);
            order.swap(i, j);
        }
        let mut trainable = hits.clone();
        for &idx in &order[..holdout_count] {
            trainable[idx] = false;
        }
        let eval_rays: Vec<usize> = order[..holdout_count]
            .iter()
            .copied()
            .filter(|&idx| hits[idx])
            .take(cfg.eval_rays)
            .collect();
        if eval_rays.is_empty() {
            return Err(Error::Data("holdout produced no usable evaluation rays".into()));
        }
        if !trainable.iter().any(|&t| t) {
            return Err(Error::Data("no trainable rays left after holdout".into()));
        }

        let dims = reference.map(|r| r.dims).unwrap_or([64, 64, 64]);
        let bake_grid = GridSpec::covering(&bbox, dims)?;
        let reference_dec = reference.map(|r| decimate(r, cfg.trace_stride));
        Ok(FitDriver { proj, cfg, reference_dec, bake_grid, trainable, eval_rays })
    }

    /// Mean squared residual over the fixed evaluation rays (midpoint
    /// sampling, forward only), merged in ray order.
    fn holdout_loss<T: Real>(&self, model: &FitModel<'_, T>) -> Result<f64> {
        let geom = &self.proj.geom;
        let shared = model.shared();
        let nmf = model.nmf();
        let losses: Vec<Result<f64>> = self
            .eval_rays
            .par_chunks(RAYS_PER_UNIT * 4)
            .map(|unit| {
                let mut scratch = FieldScratch::new();
                let mut mu: Vec<T> = Vec::new();
                let mut acc = 0.0;
                for &idx in unit {
                    let (a, r, c) = geom.pixel_coords(idx);
                    let ray = ray_for_pixel(geom, a, r, c)?;
                    let p_hat = render_into(
                        shared,
                        nmf,
                        &ray,
                        self.cfg.samples_per_ray,
                        None,
                        &mut mu,
                        &mut scratch,
                    )?
                    .0;
                    let r = p_hat - self.proj.data()[idx] as f64;
                    acc += r * r;
                }
                Ok(acc)
            })
            .collect();
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / self.eval_rays.len() as f64)
    }

    fn trace_psnr<T: Real>(&self, model: &FitModel<'_, T>) -> Result<Option<f64>> {
        let Some(ref_dec) = &self.reference_dec else {
            return Ok(None);
        };
        let baked = bake_with(model, &self.bake_grid, self.cfg.trace_stride)?;
        Ok(Some(psnr(&baked, ref_dec)?))
    }

    fn run<T: Real>(&mut self, model: &mut FitModel<'_, T>) -> Result<FitOutcome> {
        let cfg = self.cfg;
        let geom = &self.proj.geom;
        let n_pixels = geom.n_pixels();
        let mut trace = Vec::new();
        let mut best_loss = f64::INFINITY;
        let mut best_step = 0;
        let mut best_snap = model.snapshot();
        let mut evals_since_best = 0usize;
        let mut stopped_early = false;
        let mut final_step = 0;

        for step in 0..=cfg.max_steps as u64 {
            final_step = step;
            let at_eval = step % cfg.eval_interval as u64 == 0 || step == cfg.max_steps as u64;
            if at_eval {
                let loss = self.holdout_loss(model)?;
                let psnr_db = self.trace_psnr(model)?;
                trace.push(TraceRow { step, psnr_db, holdout_loss: loss });
                if loss < best_loss {
                    best_loss = loss;
                    best_step = step;
                    best_snap = model.snapshot();
                    evals_since_best = 0;
                } else {
                    evals_since_best += 1;
                    if evals_since_best >= cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
            if step == cfg.max_steps as u64 {
                break;
            }

            // Sample trainable rays for this step.
            let mut rng = rng::stream(cfg.seed, &[tag::FIT_STEP, step]);
            let mut rays = Vec::with_capacity(cfg.batch_rays);
            while rays.len() < cfg.batch_rays {
                let idx = rng.gen_range(0..n_pixels);
                if self.trainable[idx] {
                    rays.push(idx);
                }
            }

            let shared = model.shared();
            let nmf = model.nmf();
            let inv = 2.0 / cfg.batch_rays as f64;
            let units: Vec<(usize, &[usize])> =
                rays.chunks(RAYS_PER_UNIT).enumerate().collect();
            let partials: Vec<Result<PointBatchGrads<T>>> = units
                .par_iter()
                .map(|(unit_idx, unit)| {
                    let mut grads = model.zero_grads();
                    let mut scratch = FieldScratch::new();
                    let mut mu: Vec<T> = Vec::new();
                    let mut jitter = rng::stream(cfg.seed, &[tag::CHUNK, step, *unit_idx as u64]);
                    for &idx in *unit {
                        let (a, r, c) = geom.pixel_coords(idx);
                        let ray = ray_for_pixel(geom, a, r, c)?;
                        let (p_hat, dt) = render_into(
                            shared,
                            nmf,
                            &ray,
                            cfg.samples_per_ray,
                            Some(&mut jitter),
                            &mut mu,
                            &mut scratch,
                        )?;
                        let resid = p_hat - self.proj.data()[idx] as f64;
                        let up = T::from_f64(resid * inv * dt);
                        let upstream = vec![up; cfg.samples_per_ray];
                        backward_batch(shared, nmf, &upstream, &mut scratch, &mut grads)?;
                    }
                    Ok(grads)
                })
                .collect();
            let mut total: Option<PointBatchGrads<T>> = None;
            for p in partials {
                let p = p?;
                match &mut total {
                    None => total = Some(p),
                    Some(acc) => acc.add_assign(&p),
                }
            }
            let total = total.ok_or_else(|| Error::Data("empty ray batch".into()))?;
            model.apply(&total)?;
        }

        model.restore(best_snap);
        Ok(FitOutcome {
            trace,
            best_step,
            final_step,
            stopped_early,
            best_holdout_loss: best_loss,
        })
    }
}

/// Render one ray with the batch engine; returns (p_hat, step length).
#[allow(clippy::too_many_arguments)]
fn render_into<T: Real>(
    shared: &SharedFieldParams<T>,
    nmf: Option<&NmfParams<T>>,
    ray: &crate::geometry::Ray,
    n_samples: usize,
    jitter: Option<&mut rand_chacha::ChaCha8Rng>,
    mu: &mut Vec<T>,
    scratch: &mut FieldScratch<T>,
) -> Result<(f64, f64)> {
    let samples = crate::geometry::sample_ray(ray, n_samples, jitter)?;
    let pts: Vec<[f64; 3]> = samples
        .positions
        .iter()
        .map(|&p| shared.bbox.normalize(p))
        .collect();
    forward_batch(shared, nmf, &pts, mu, scratch)?;
    let dt = samples.steps[0];
    let p_hat: f64 = mu.iter().map(|m| m.as_f64()).sum::<f64>() * dt;
    Ok((p_hat, dt))
}

fn bake_with<T: Real>(
    model: &FitModel<'_, T>,
    grid: &GridSpec,
    stride: usize,
) -> Result<VolumeGrid> {
    // bake_to_grid takes CondFieldParams; build a thin view.
    match model {
        FitModel::Nmf { shared, nmf, .. } => {
            let mut params = CondFieldParams::new((*shared).clone());
            params.insert_nmf(nmf.clone())?;
            bake_to_grid(&params, Some(&nmf.patient.clone()), grid, stride)
        }
        FitModel::Scratch { shared, .. } => {
            let params = CondFieldParams::new(shared.clone());
            bake_to_grid(&params, None, grid, stride)
        }
    }
}
