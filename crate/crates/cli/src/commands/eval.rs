//! Metric evaluation of a reconstruction against ground truth.

use std::path::PathBuf;

use anyhow::{Context, Result};

use cbnt_core::metrics::{MetricsReport, DEFAULT_SSIM_WINDOW};
use cbnt_core::volume::read_volume;

use crate::slices::dump_mid_slices;

pub struct EvalArgs {
    pub recon: PathBuf,
    pub ground_truth: PathBuf,
    /// Destination for metrics.json; next to the reconstruction by default.
    pub out: Option<PathBuf>,
    pub ssim_window: usize,
    pub dump_slices: Option<PathBuf>,
    /// Display window (mm^-1) for slice export.
    pub window: f64,
}

impl EvalArgs {
    pub fn new(recon: PathBuf, ground_truth: PathBuf) -> Self {
        EvalArgs {
            recon,
            ground_truth,
            out: None,
            ssim_window: DEFAULT_SSIM_WINDOW,
            dump_slices: None,
            window: 0.04,
        }
    }
}

pub fn run(args: &EvalArgs) -> Result<(MetricsReport, PathBuf)> {
    let recon = read_volume(&args.recon)
        .with_context(|| format!("reading reconstruction {:?}", args.recon))?;
    let truth = read_volume(&args.ground_truth)
        .with_context(|| format!("reading ground truth {:?}", args.ground_truth))?;
    let report = MetricsReport::compute(&recon, &truth, args.ssim_window)?;

    let out = args.out.clone().unwrap_or_else(|| {
        args.recon
            .parent()
            .unwrap_or_else(|| std::path::Path::new("."))
            .join("metrics.json")
    });
    std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
    println!("{}", serde_json::to_string(&report)?);

    if let Some(dir) = &args.dump_slices {
        dump_mid_slices(&recon, args.window, dir)?;
    }
    Ok((report, out))
}
