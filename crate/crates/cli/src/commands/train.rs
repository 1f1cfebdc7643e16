//! Shared-field training over the dataset's train split.

use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use cbnt_core::optim::{save_checkpoint, train_shared};
use cbnt_core::volume::read_volume;

use crate::config::RunConfig;
use crate::manifest::DatasetManifest;

use super::{MethodMeta, Stopwatch};

pub struct TrainArtifacts {
    pub checkpoint_dir: PathBuf,
    pub loss_csv: PathBuf,
}

pub fn run(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let watch = Stopwatch::start();
    let manifest = DatasetManifest::read(&cfg.paths.data_dir)
        .context("gen-data must run before train")?;
    let entries = manifest.entries_of("volume", "train");
    if entries.is_empty() {
        bail!("dataset has no training volumes");
    }
    let mut dataset = Vec::with_capacity(entries.len());
    for e in entries {
        let vol = read_volume(&cfg.paths.data_dir.join(&e.path))?;
        dataset.push((vol, e.id.clone()));
    }

    let model = cfg.model.field_model();
    let out = train_shared::<f32>(&dataset, &model, &cfg.train, None)?;

    let out_dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_dir = out_dir.join("shared_checkpoint");
    save_checkpoint(
        &out.state.params,
        Some(&out.state.adam_shared),
        &out.state.adam_nmfs,
        &model,
        cfg.seed,
        out.state.step,
        &checkpoint_dir,
    )?;

    let loss_csv = out_dir.join("train_loss.csv");
    let mut f = std::fs::File::create(&loss_csv)?;
    writeln!(f, "step,mse")?;
    for (step, mse) in &out.loss_trace {
        writeln!(f, "{step},{mse}")?;
    }

    MethodMeta {
        method: "train".into(),
        scan: "shared".into(),
        wall_seconds: watch.seconds(),
        details: Some(serde_json::json!({
            "steps": out.state.step,
            "patients": dataset.len(),
            "final_mse": out.loss_trace.last().map(|(_, l)| *l),
        })),
    }
    .write(&checkpoint_dir)?;

    Ok(TrainArtifacts { checkpoint_dir, loss_csv })
}
