//! FDK reconstruction command.

use std::path::PathBuf;

use anyhow::{Context, Result};

use cbnt_core::baselines::{fdk_reconstruct, FdkConfig};
use cbnt_core::projector::read_projections;
use cbnt_core::volume::{write_volume, GridSpec};

use crate::config::RunConfig;

use super::{MethodMeta, Stopwatch};

pub struct FdkArgs {
    pub projections: PathBuf,
    pub out: Option<PathBuf>,
    /// Override the default window policy (Hann iff the stack is noisy).
    pub hann: Option<bool>,
    pub scan: Option<String>,
}

pub fn run(cfg: &RunConfig, args: &FdkArgs) -> Result<PathBuf> {
    let watch = Stopwatch::start();
    let proj = read_projections(&args.projections)
        .with_context(|| format!("reading projections {:?}", args.projections))?;
    let scan = args
        .scan
        .clone()
        .unwrap_or_else(|| super::fit::scan_name_of(&args.projections));
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.out_dir.join("fdk").join(&scan));
    std::fs::create_dir_all(&out_dir)?;

    let mut fdk_cfg = FdkConfig::for_stack(&proj);
    if let Some(h) = args.hann {
        fdk_cfg.hann = h;
    }
    let grid = GridSpec::covering(&proj.geom.bbox, cfg.phantom.dims)?;
    let vol = fdk_reconstruct(&proj, &grid, &fdk_cfg)?;
    let recon = out_dir.join("recon.vol.json");
    write_volume(&vol, &recon)?;

    MethodMeta {
        method: "fdk".into(),
        scan,
        wall_seconds: watch.seconds(),
        details: Some(serde_json::json!({ "hann": fdk_cfg.hann })),
    }
    .write(&out_dir)?;
    Ok(recon)
}
