//! Landweber-TV reconstruction with an optional validation-set grid search
//! over the TV weight and iteration count.

use std::io::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use cbnt_core::baselines::{estimate_opnorm, landweber_tv, LandweberConfig};
use cbnt_core::metrics::psnr;
use cbnt_core::projector::read_projections;
use cbnt_core::volume::{read_volume, write_volume, GridSpec};

use crate::config::RunConfig;

use super::{MethodMeta, Stopwatch};

pub struct IterativeArgs {
    pub projections: PathBuf,
    pub out: Option<PathBuf>,
    pub grid_search: bool,
    /// Ground truth for the grid search objective.
    pub reference: Option<PathBuf>,
    pub tv_weight: Option<f64>,
    pub n_iter: Option<usize>,
    pub scan: Option<String>,
}

/// Chosen hyperparameters, exposed so pipelines can reuse a search result.
#[derive(Clone, Copy, Debug)]
pub struct ChosenParams {
    pub omega: f64,
    pub tv_weight: f64,
    pub n_iter: usize,
}

pub fn run(cfg: &RunConfig, args: &IterativeArgs) -> Result<(PathBuf, ChosenParams)> {
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
        .unwrap_or_else(|| cfg.paths.out_dir.join("iterative").join(&scan));
    std::fs::create_dir_all(&out_dir)?;

    let grid = GridSpec::covering(&proj.geom.bbox, cfg.phantom.dims)?;
    let it = &cfg.iterative;
    let sigma = estimate_opnorm(&proj.geom, &grid, it.n_samples, it.opnorm_iters, cfg.seed)?;
    let omega = it.omega_safety / (sigma * sigma);

    let base = LandweberConfig {
        omega,
        tv_weight: args.tv_weight.unwrap_or(it.tv_weight),
        tv_epsilon: it.tv_epsilon,
        n_iter: args.n_iter.unwrap_or(it.n_iter),
        nonneg: true,
        n_samples: it.n_samples,
        checkpoint_iters: Vec::new(),
    };

    let (volume, chosen) = if args.grid_search {
        let Some(ref_path) = &args.reference else {
            bail!("config error: --grid-search needs --reference ground truth");
        };
        let truth = read_volume(ref_path)?;
        let mut csv = std::fs::File::create(out_dir.join("gridsearch.csv"))?;
        writeln!(csv, "omega,lambda_tv,n_iter,psnr")?;
        let max_iter = it.iter_candidates.iter().copied().max().unwrap_or(base.n_iter);
        let mut best: Option<(f64, f64, usize, cbnt_core::volume::VolumeGrid)> = None;
        for &lam in &it.tv_candidates {
            let sweep = LandweberConfig {
                tv_weight: lam,
                n_iter: max_iter,
                checkpoint_iters: it.iter_candidates.clone(),
                ..base.clone()
            };
            let out = landweber_tv(&proj, &grid, &sweep)?;
            for (iters, vol) in out.checkpoint_volumes {
                let p = psnr(&vol, &truth)?;
                writeln!(csv, "{omega},{lam},{iters},{p}")?;
                if best.as_ref().map(|(bp, ..)| p > *bp).unwrap_or(true) {
                    best = Some((p, lam, iters, vol));
                }
            }
        }
        let (best_psnr, lam, iters, vol) =
            best.ok_or_else(|| anyhow::anyhow!("grid search produced no candidates"))?;
        let chosen = ChosenParams { omega, tv_weight: lam, n_iter: iters };
        eprintln!(
            "grid search picked lambda_tv={lam}, n_iter={iters} (psnr {best_psnr:.2} dB)"
        );
        (vol, chosen)
    } else {
        let out = landweber_tv(&proj, &grid, &base)?;
        (
            out.volume,
            ChosenParams { omega, tv_weight: base.tv_weight, n_iter: base.n_iter },
        )
    };

    let recon = out_dir.join("recon.vol.json");
    write_volume(&volume, &recon)?;
    MethodMeta {
        method: "iterative".into(),
        scan,
        wall_seconds: watch.seconds(),
        details: Some(serde_json::json!({
            "omega": chosen.omega,
            "tv_weight": chosen.tv_weight,
            "n_iter": chosen.n_iter,
            "sigma_max": sigma,
        })),
    }
    .write(&out_dir)?;
    Ok((recon, chosen))
}
