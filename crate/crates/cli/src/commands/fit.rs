//! Per-scan reconstruction by fitting a neural field to projections:
//! modulation-only against a trained shared field, or from scratch.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;

use cbnt_core::network::{bake_to_grid, CondFieldParams};
use cbnt_core::optim::{
    convergence_report, fit_nmf, fit_scratch, load_checkpoint, save_checkpoint,
    write_convergence_csv, FitOutcome,
};
use cbnt_core::projector::read_projections;
use cbnt_core::volume::{read_volume, write_volume, GridSpec};

use crate::config::RunConfig;

use super::{MethodMeta, Stopwatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FitMode {
    Nmf,
    Scratch,
}

pub struct FitArgs {
    pub mode: FitMode,
    pub projections: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub patient: Option<String>,
    pub reference: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub struct FitArtifacts {
    pub out_dir: PathBuf,
    pub recon: PathBuf,
    pub outcome: FitOutcome,
}

pub fn run(cfg: &RunConfig, args: &FitArgs) -> Result<FitArtifacts> {
    let watch = Stopwatch::start();
    let proj = read_projections(&args.projections)
        .with_context(|| format!("reading projections {:?}", args.projections))?;
    let scan = args
        .patient
        .clone()
        .unwrap_or_else(|| scan_name_of(&args.projections));
    let reference = args
        .reference
        .as_deref()
        .map(read_volume)
        .transpose()
        .context("reading reference volume")?;

    let method = match args.mode {
        FitMode::Nmf => "nmf",
        FitMode::Scratch => "scratch",
    };
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join(method).join(&scan));
    std::fs::create_dir_all(&out_dir)?;

    let grid = GridSpec::covering(&proj.geom.bbox, cfg.phantom.dims)?;
    let (params, patient_for_bake, outcome): (CondFieldParams<f32>, Option<String>, FitOutcome) =
        match args.mode {
            FitMode::Nmf => {
                let Some(ck_dir) = &args.checkpoint else {
                    bail!("config error: fit --mode nmf needs --checkpoint");
                };
                let ck = load_checkpoint(ck_dir)?;
                let result = fit_nmf(
                    &ck.params.shared,
                    &ck.model,
                    &proj,
                    &cfg.train,
                    &scan,
                    reference.as_ref(),
                )?;
                let mut params = CondFieldParams::new(ck.params.shared);
                params.nmfs.clear();
                params.insert_nmf(result.nmf)?;
                save_checkpoint(
                    &params,
                    None,
                    &Default::default(),
                    &ck.model,
                    cfg.seed,
                    result.outcome.best_step,
                    &out_dir.join("nmf_checkpoint"),
                )?;
                (params, Some(scan.clone()), result.outcome)
            }
            FitMode::Scratch => {
                let model = cfg.model.scratch_model();
                let result = fit_scratch::<f32>(&model, &proj, &cfg.train, reference.as_ref())?;
                save_checkpoint(
                    &result.params,
                    None,
                    &Default::default(),
                    &model,
                    cfg.seed,
                    result.outcome.best_step,
                    &out_dir.join("scratch_checkpoint"),
                )?;
                (result.params, None, result.outcome)
            }
        };

    let baked = bake_to_grid(&params, patient_for_bake.as_deref(), &grid, 1)?;
    let recon = out_dir.join("recon.vol.json");
    write_volume(&baked, &recon)?;

    if reference.is_some() {
        let rows = convergence_report(&outcome.psnr_trace())?;
        write_convergence_csv(&rows, &out_dir.join("convergence.csv"))?;
    }

    MethodMeta {
        method: method.into(),
        scan,
        wall_seconds: watch.seconds(),
        details: Some(serde_json::json!({
            "best_step": outcome.best_step,
            "final_step": outcome.final_step,
            "stopped_early": outcome.stopped_early,
            "best_holdout_loss": outcome.best_holdout_loss,
        })),
    }
    .write(&out_dir)?;

    Ok(FitArtifacts { out_dir, recon, outcome })
}

pub(crate) fn scan_name_of(path: &Path) -> String {
    path.file_name()
        .and_then(|s| s.to_str())
        .map(|s| {
            s.trim_end_matches(".proj.json")
                .trim_end_matches("_noisy")
                .trim_end_matches("_clean")
                .to_string()
        })
        .unwrap_or_else(|| "scan".into())
}
