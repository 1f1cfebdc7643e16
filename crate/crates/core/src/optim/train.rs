//! Shared-field training with direct density supervision: batches of points
//! drawn uniformly inside the bbox across randomly chosen training patients,
//! squared-error loss against the ground-truth volumes, Adam on the shared
//! parameters and every touched patient NMF.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::network::batch::{backward_batch, forward_batch, PointBatchGrads, CHUNK};
use crate::network::{CondFieldParams, FieldModelConfig, FieldScratch, NmfParams, SharedFieldParams};
use crate::optim::adam::{adam_step, AdamConfig, AdamState};
use crate::optim::TrainConfig;
use crate::real::Real;
use crate::rng::{self, tag};
use crate::volume::{sample_trilinear, VolumeGrid};

/// Model plus optimizer state, resumable from a checkpoint.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub params: CondFieldParams<T>,
    pub adam_shared: AdamState<T>,
    pub adam_nmfs: BTreeMap<String, AdamState<T>>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput<T: Real> {
    pub state: TrainState<T>,
    /// (step, batch MSE) per step.
    pub loss_trace: Vec<(u64, f64)>,
}

pub fn train_shared<T: Real>(
    dataset: &[(VolumeGrid, String)],
    model: &FieldModelConfig,
    cfg: &TrainConfig,
    resume: Option<TrainState<T>>,
) -> Result<TrainOutput<T>> {
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    cfg.validate()?;
    let bbox = dataset[0].0.bbox();
    for (vol, id) in dataset {
        if !vol.bbox().approx_eq(&bbox, 1e-6) {
            return Err(Error::BboxMismatch(format!(
                "volume {id} has a different bounding box"
            )));
        }
    }

    let mut state = match resume {
        Some(s) => s,
        None => {
            let shared = SharedFieldParams::init(model, bbox, cfg.seed)?;
            let adam_shared = AdamState::new(&shared, AdamConfig::with_lr(cfg.lr_shared));
            let mut params = CondFieldParams::new(shared);
            let mut adam_nmfs = BTreeMap::new();
            for (_, id) in dataset {
                let nmf = NmfParams::init(model, id, cfg.seed)?;
                adam_nmfs.insert(id.clone(), AdamState::new(&nmf, AdamConfig::with_lr(cfg.lr_nmf)));
                params.insert_nmf(nmf)?;
            }
            TrainState { params, adam_shared, adam_nmfs, step: 0 }
        }
    };

    let ext = bbox.extent();
    let n_pat = dataset.len();
    let mut loss_trace = Vec::new();

    for step in state.step..cfg.max_steps as u64 {
        let mut rng = rng::stream(cfg.seed, &[tag::TRAIN_STEP, step]);
        // Bucket the batch by patient so each NMF sees one contiguous pass.
        let mut buckets: Vec<Vec<([f64; 3], f32)>> = vec![Vec::new(); n_pat];
        for _ in 0..cfg.batch_points {
            let p = rng.gen_range(0..n_pat);
            let pos = Vec3::new(
                bbox.min.x + rng.gen::<f64>() * ext.x,
                bbox.min.y + rng.gen::<f64>() * ext.y,
                bbox.min.z + rng.gen::<f64>() * ext.z,
            );
            let target = sample_trilinear(&dataset[p].0, pos) as f32;
            buckets[p].push((bbox.normalize(pos), target));
        }

        // One parallel unit per patient; merged in patient order.
        let shared = &state.params.shared;
        let inv_batch = 2.0 / cfg.batch_points as f64;
        let results: Vec<Result<Option<(f64, PointBatchGrads<T>)>>> = buckets
            .par_iter()
            .enumerate()
            .map(|(p, bucket)| {
                if bucket.is_empty() {
                    return Ok(None);
                }
                let nmf = state.params.nmf(&dataset[p].1)?;
                let mut grads = PointBatchGrads::zeros(shared, Some(nmf));
                let mut scratch = FieldScratch::new();
                let mut mu: Vec<T> = Vec::new();
                let mut sq_sum = 0.0;
                for chunk in bucket.chunks(CHUNK) {
                    let pts: Vec<[f64; 3]> = chunk.iter().map(|(x, _)| *x).collect();
                    forward_batch(shared, Some(nmf), &pts, &mut mu, &mut scratch)?;
                    let upstream: Vec<T> = mu
                        .iter()
                        .zip(chunk)
                        .map(|(m, (_, t))| {
                            let r = m.as_f64() - *t as f64;
                            sq_sum += r * r;
                            T::from_f64(r * inv_batch)
                        })
                        .collect();
                    backward_batch(shared, Some(nmf), &upstream, &mut scratch, &mut grads)?;
                }
                Ok(Some((sq_sum, grads)))
            })
            .collect();

        let mut shared_grad: Option<PointBatchGrads<T>> = None;
        let mut nmf_grads: Vec<(usize, crate::network::NmfGrad<T>)> = Vec::new();
        let mut sq_total = 0.0;
        for (p, res) in results.into_iter().enumerate() {
            let Some((sq, grads)) = res? else { continue };
            sq_total += sq;
            let PointBatchGrads { shared: sg, nmf: ng } = grads;
            match &mut shared_grad {
                None => {
                    shared_grad = Some(PointBatchGrads { shared: sg, nmf: None });
                }
                Some(acc) => {
                    acc.shared
                        .as_mut()
                        .expect("accumulator keeps shared grads")
                        .add_assign(&sg.expect("unit produced shared grads"));
                }
            }
            nmf_grads.push((p, ng.expect("unit produced nmf grads")));
        }
        let shared_grad = shared_grad
            .and_then(|g| g.shared)
            .ok_or_else(|| Error::Data("empty training batch".into()))?;

        adam_step(&mut state.adam_shared, &mut state.params.shared, &shared_grad)?;
        for (p, grad) in &nmf_grads {
            let id = &dataset[*p].1;
            let nmf = state
                .params
                .nmfs
                .get_mut(id)
                .ok_or_else(|| Error::UnknownPatient(id.clone()))?;
            let adam = state
                .adam_nmfs
                .get_mut(id)
                .ok_or_else(|| Error::UnknownPatient(id.clone()))?;
            adam_step(adam, nmf, grad)?;
        }
        loss_trace.push((step, sq_total / cfg.batch_points as f64));
        state.step = step + 1;
    }

    Ok(TrainOutput { state, loss_trace })
}
