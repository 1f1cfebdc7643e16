//! Desk-scale pipeline calibration harness (not part of the test suite).
//! Stages: data, train, nmf, scratch, iter, fdk, all.

use std::path::PathBuf;
use std::time::Instant;

use cbnt_cli::commands::{self, fdk::FdkArgs, fit::FitArgs, fit::FitMode, iterative::IterativeArgs};
use cbnt_cli::config::RunConfig;
use cbnt_core::metrics::{psnr, ssim};
use cbnt_core::volume::read_volume;

fn overrides(root: &PathBuf) -> Vec<String> {
    vec![
        "seed=1234".into(),
        "train.max_steps=4000".into(),
        "train.batch_points=4096".into(),
        "train.batch_rays=64".into(),
        "train.samples_per_ray=128".into(),
        "train.eval_interval=50".into(),
        "train.patience=6".into(),
        "train.eval_rays=512".into(),
        "train.trace_stride=2".into(),
        format!("paths.data_dir={}/data", root.display()),
        format!("paths.out_dir={}/out", root.display()),
    ]
}

fn main() {
    let stage = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let extra: Vec<String> = std::env::args().skip(2).collect();
    let root = PathBuf::from("/tmp/cbnt_calib");
    std::fs::create_dir_all(&root).unwrap();
    let mut ov = overrides(&root);
    ov.extend(extra);
    let cfg = RunConfig::load(None, &ov).unwrap();

    let t0 = Instant::now();
    match stage.as_str() {
        "data" => {
            commands::gen_data::run(&cfg, true).unwrap();
            println!("gen-data: {:.1}s", t0.elapsed().as_secs_f64());
        }
        "train" => {
            let out = commands::train::run(&cfg).unwrap();
            println!(
                "train: {:.1}s, checkpoint {:?}",
                t0.elapsed().as_secs_f64(),
                out.checkpoint_dir
            );
        }
        "nmf" | "scratch" => {
            let scan = std::env::var("SCAN").unwrap_or_else(|_| "test_000".into());
            let mode = if stage == "nmf" { FitMode::Nmf } else { FitMode::Scratch };
            let proj = cfg
                .paths
                .data_dir
                .join(format!("projections/{scan}_noisy.proj.json"));
            let truth_path = cfg.paths.data_dir.join(format!("volumes/{scan}.vol.json"));
            let art = commands::fit::run(
                &cfg,
                &FitArgs {
                    mode,
                    projections: proj,
                    checkpoint: Some(cfg.paths.out_dir.join("shared_checkpoint")),
                    patient: Some(scan.clone()),
                    reference: Some(truth_path.clone()),
                    out: None,
                },
            )
            .unwrap();
            let truth = read_volume(&truth_path).unwrap();
            let recon = read_volume(&art.recon).unwrap();
            println!(
                "{stage} {scan}: {:.1}s  psnr {:.2}  ssim {:.3}  best_step {}  final {}  early {}",
                t0.elapsed().as_secs_f64(),
                psnr(&recon, &truth).unwrap(),
                ssim(&recon, &truth, 7).unwrap(),
                art.outcome.best_step,
                art.outcome.final_step,
                art.outcome.stopped_early,
            );
            for row in &art.outcome.trace {
                println!(
                    "  step {:>5}  holdout {:.5e}  psnr {:?}",
                    row.step, row.holdout_loss, row.psnr_db
                );
            }
        }
        "iter" => {
            let scan = std::env::var("SCAN").unwrap_or_else(|_| "val_000".into());
            let proj = cfg
                .paths
                .data_dir
                .join(format!("projections/{scan}_noisy.proj.json"));
            let truth_path = cfg.paths.data_dir.join(format!("volumes/{scan}.vol.json"));
            let (recon, chosen) = commands::iterative::run(
                &cfg,
                &IterativeArgs {
                    projections: proj,
                    out: None,
                    grid_search: true,
                    reference: Some(truth_path.clone()),
                    tv_weight: None,
                    n_iter: None,
                    scan: Some(scan.clone()),
                },
            )
            .unwrap();
            let truth = read_volume(&truth_path).unwrap();
            let vol = read_volume(&recon).unwrap();
            println!(
                "iterative {scan}: {:.1}s  psnr {:.2}  ssim {:.3}  lambda {}  iters {}",
                t0.elapsed().as_secs_f64(),
                psnr(&vol, &truth).unwrap(),
                ssim(&vol, &truth, 7).unwrap(),
                chosen.tv_weight,
                chosen.n_iter
            );
        }
        "fdk" => {
            let scan = std::env::var("SCAN").unwrap_or_else(|_| "test_000".into());
            let proj = cfg
                .paths
                .data_dir
                .join(format!("projections/{scan}_noisy.proj.json"));
            let truth_path = cfg.paths.data_dir.join(format!("volumes/{scan}.vol.json"));
            let recon = commands::fdk::run(
                &cfg,
                &FdkArgs { projections: proj, out: None, hann: None, scan: Some(scan.clone()) },
            )
            .unwrap();
            let truth = read_volume(&truth_path).unwrap();
            let vol = read_volume(&recon).unwrap();
            println!(
                "fdk {scan}: {:.1}s  psnr {:.2}  ssim {:.3}",
                t0.elapsed().as_secs_f64(),
                psnr(&vol, &truth).unwrap(),
                ssim(&vol, &truth, 7).unwrap()
            );
        }
        other => panic!("unknown stage {other}"),
    }
}
