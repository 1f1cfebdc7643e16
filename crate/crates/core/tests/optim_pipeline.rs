//! Cross-module exercises of the optimization pipeline at smoke scale:
//! training determinism and progress, per-scan fitting, early stopping,
//! and checkpoint round trips.

use cbnt_core::encoding::HashEncodingConfig;
use cbnt_core::geometry::{Aabb, ConeBeamGeometry};
use cbnt_core::metrics::psnr;
use cbnt_core::network::{bake_to_grid, FieldModelConfig, ParamLeaves};
use cbnt_core::optim::{
    fit_nmf, fit_scratch, load_checkpoint, save_checkpoint, train_shared, TrainConfig,
};
use cbnt_core::projector::forward_project;
use cbnt_core::volume::{make_phantom, GridSpec, PhantomSpec, VolumeGrid};

fn smoke_model() -> FieldModelConfig {
    FieldModelConfig {
        shared_encoding: HashEncodingConfig {
            levels: 5,
            feat_dim: 2,
            base_res: 4,
            growth: 2.0,
            table_size: 1 << 14,
        },
        hidden_width: 32,
        n_hidden: 2,
        nmf_encoding: HashEncodingConfig {
            levels: 3,
            feat_dim: 2,
            base_res: 4,
            growth: 2.0,
            table_size: 1 << 10,
        },
        nmf_hidden_width: 16,
        nmf_n_hidden: 2,
    }
}

fn smoke_dataset(n: usize, dims: usize) -> Vec<(VolumeGrid, String)> {
    let spec = PhantomSpec::with_grid([dims, dims, dims], 64.0 / dims as f64);
    (0..n)
        .map(|i| {
            (
                make_phantom(&spec, 100 + i as u64).unwrap(),
                format!("train_{i:03}"),
            )
        })
        .collect()
}

fn smoke_geom(bbox: Aabb, det: usize, n_angles: usize) -> ConeBeamGeometry {
    ConeBeamGeometry::with_uniform_angles(
        500.0,
        1000.0,
        det,
        det,
        256.0 / det as f64,
        n_angles,
        205.0_f64.to_radians(),
        bbox,
    )
    .unwrap()
}

fn cfg(max_steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_points: 1024,
        batch_rays: 24,
        samples_per_ray: 48,
        max_steps,
        eval_interval: 25,
        patience: 4,
        eval_rays: 128,
        trace_stride: 2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = smoke_dataset(2, 16);
    let model = smoke_model();
    let c = cfg(5, 42);
    let a = train_shared::<f32>(&data, &model, &c, None).unwrap();
    let b = train_shared::<f32>(&data, &model, &c, None).unwrap();
    assert_eq!(a.state.params, b.state.params);
    assert_eq!(a.loss_trace, b.loss_trace);
    let c2 = cfg(5, 43);
    let d = train_shared::<f32>(&data, &model, &c2, None).unwrap();
    assert_ne!(a.state.params, d.state.params);
}

#[test]
fn training_loss_decreases() {
    let data = smoke_dataset(2, 16);
    let model = smoke_model();
    let out = train_shared::<f32>(&data, &model, &cfg(150, 7), None).unwrap();
    let early: f64 = out.loss_trace[..10].iter().map(|(_, l)| l).sum::<f64>() / 10.0;
    let late: f64 =
        out.loss_trace[out.loss_trace.len() - 10..].iter().map(|(_, l)| l).sum::<f64>() / 10.0;
    assert!(
        late < early,
        "loss moving average did not decrease: {early} -> {late}"
    );
}

// Capacity check: a single phantom can be overfit to high fidelity with
// direct density supervision.
#[test]
fn single_phantom_overfits_past_30db() {
    let data = smoke_dataset(1, 32);
    let model = smoke_model();
    let mut c = cfg(2500, 11);
    c.batch_points = 2048;
    let out = train_shared::<f32>(&data, &model, &c, None).unwrap();
    let grid = data[0].0.grid_spec();
    let baked = bake_to_grid(&out.state.params, Some("train_000"), &grid, 1).unwrap();
    let p = psnr(&baked, &data[0].0).unwrap();
    assert!(p > 30.0, "overfit PSNR only {p:.2} dB");
}

#[test]
fn fit_nmf_keeps_shared_parameters_frozen_and_stops_at_best() {
    let data = smoke_dataset(2, 16);
    let model = smoke_model();
    let trained = train_shared::<f32>(&data, &model, &cfg(60, 3), None).unwrap();
    let shared = trained.state.params.shared;
    let shared_before: Vec<Vec<f32>> =
        shared.leaves().iter().map(|l| l.to_vec()).collect();

    let spec = PhantomSpec::with_grid([16, 16, 16], 4.0);
    let test_vol = make_phantom(&spec, 999).unwrap();
    let geom = smoke_geom(test_vol.bbox(), 12, 8);
    let proj = forward_project(&test_vol, &geom, 48).unwrap();
    let result = fit_nmf(&shared, &model, &proj, &cfg(120, 5), "test_scan", Some(&test_vol)).unwrap();

    let shared_after: Vec<Vec<f32>> = shared.leaves().iter().map(|l| l.to_vec()).collect();
    assert_eq!(shared_before, shared_after, "shared parameters changed");

    // The reported best step carries the minimum held-out loss in the trace.
    let best_row = result
        .outcome
        .trace
        .iter()
        .find(|r| r.step == result.outcome.best_step)
        .unwrap();
    for row in &result.outcome.trace {
        assert!(best_row.holdout_loss <= row.holdout_loss + 1e-12);
    }
    // And the trace carries PSNR because a reference was supplied.
    assert!(result.outcome.trace.iter().all(|r| r.psnr_db.is_some()));
}

#[test]
fn fit_is_deterministic_per_seed() {
    let data = smoke_dataset(1, 16);
    let model = smoke_model();
    let trained = train_shared::<f32>(&data, &model, &cfg(30, 3), None).unwrap();
    let shared = trained.state.params.shared;
    let spec = PhantomSpec::with_grid([16, 16, 16], 4.0);
    let vol = make_phantom(&spec, 555).unwrap();
    let geom = smoke_geom(vol.bbox(), 12, 8);
    let proj = forward_project(&vol, &geom, 48).unwrap();
    let a = fit_nmf(&shared, &model, &proj, &cfg(40, 9), "s", None).unwrap();
    let b = fit_nmf(&shared, &model, &proj, &cfg(40, 9), "s", None).unwrap();
    assert_eq!(a.nmf, b.nmf);
    let sa = fit_scratch::<f32>(&model, &proj, &cfg(40, 9), None).unwrap();
    let sb = fit_scratch::<f32>(&model, &proj, &cfg(40, 9), None).unwrap();
    assert_eq!(sa.params, sb.params);
    assert!(sa.params.nmfs.is_empty(), "scratch mode has no patient NMFs");
}

#[test]
fn geometry_mismatch_is_rejected() {
    let data = smoke_dataset(1, 16);
    let model = smoke_model();
    let trained = train_shared::<f32>(&data, &model, &cfg(5, 3), None).unwrap();
    let shared = trained.state.params.shared;
    // Projections over a different bbox.
    let other_bbox = Aabb::centered_cube(100.0).unwrap();
    let geom = smoke_geom(other_bbox, 8, 4);
    let grid = GridSpec::covering(&other_bbox, [8, 8, 8]).unwrap();
    let vol = VolumeGrid::zeros(&grid);
    let proj = forward_project(&vol, &geom, 16).unwrap();
    assert!(fit_nmf(&shared, &model, &proj, &cfg(10, 1), "x", None).is_err());
}

#[test]
fn checkpoint_roundtrip_is_byte_identical_and_resumable() {
    let data = smoke_dataset(2, 16);
    let model = smoke_model();
    let c = cfg(8, 21);
    let out = train_shared::<f32>(&data, &model, &c, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ck1 = dir.path().join("ck1");
    let ck2 = dir.path().join("ck2");
    save_checkpoint(
        &out.state.params,
        Some(&out.state.adam_shared),
        &out.state.adam_nmfs,
        &model,
        c.seed,
        out.state.step,
        &ck1,
    )
    .unwrap();
    let loaded = load_checkpoint(&ck1).unwrap();
    assert_eq!(loaded.params, out.state.params);
    assert_eq!(loaded.step, out.state.step);
    save_checkpoint(
        &loaded.params,
        loaded.adam_shared.as_ref(),
        &loaded.adam_nmfs,
        &loaded.model,
        loaded.seed,
        loaded.step,
        &ck2,
    )
    .unwrap();
    // save -> load -> save produces byte-identical files.
    for name in std::fs::read_dir(&ck1).unwrap() {
        let name = name.unwrap().file_name();
        let a = std::fs::read(ck1.join(&name)).unwrap();
        let b = std::fs::read(ck2.join(&name)).unwrap();
        assert_eq!(a, b, "file {name:?} differs after round trip");
    }

    // Declared parameter count matches an independent sum over the trees.
    let declared = cbnt_core::optim::declared_param_count(&ck1).unwrap();
    assert_eq!(declared, loaded.params.param_count());

    // Resuming for zero extra steps changes nothing.
    let resumed = train_shared::<f32>(
        &data,
        &model,
        &c,
        Some(cbnt_core::optim::TrainState {
            params: loaded.params.clone(),
            adam_shared: loaded.adam_shared.clone().unwrap(),
            adam_nmfs: loaded.adam_nmfs.clone(),
            step: loaded.step,
        }),
    )
    .unwrap();
    assert_eq!(resumed.state.params, loaded.params);

    // And resuming matches an uninterrupted run of the same length.
    let mut c_long = c;
    c_long.max_steps = 16;
    let full = train_shared::<f32>(&data, &model, &c_long, None).unwrap();
    let resumed_long = train_shared::<f32>(
        &data,
        &model,
        &c_long,
        Some(cbnt_core::optim::TrainState {
            params: loaded.params,
            adam_shared: loaded.adam_shared.unwrap(),
            adam_nmfs: loaded.adam_nmfs,
            step: loaded.step,
        }),
    )
    .unwrap();
    assert_eq!(full.state.params, resumed_long.state.params);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let data = smoke_dataset(1, 16);
    let model = smoke_model();
    let out = train_shared::<f32>(&data, &model, &cfg(3, 2), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    save_checkpoint(&out.state.params, None, &Default::default(), &model, 2, 3, &ck).unwrap();

    // Truncated blob.
    let blob = ck.join("shared.f32");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_checkpoint(&ck).is_err());
    std::fs::write(&blob, &bytes).unwrap();
    assert!(load_checkpoint(&ck).is_ok());

    // Version bump.
    let manifest = ck.join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replace("\"format_version\": 1", "\"format_version\": 99"))
        .unwrap();
    assert!(matches!(
        load_checkpoint(&ck),
        Err(cbnt_core::Error::CheckpointVersion { found: 99, .. })
    ));
}
