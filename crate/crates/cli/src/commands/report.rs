//! Aggregate per-scan metrics into a per-method summary table:
//! mean and (population) standard deviation of PSNR, SSIM, and wall time.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use super::MethodMeta;

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub n: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub wall_s_mean: f64,
    pub wall_s_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn psnr_from_json(v: &serde_json::Value) -> Result<f64> {
    match v {
        serde_json::Value::Number(n) => Ok(n.as_f64().unwrap_or(f64::NAN)),
        serde_json::Value::String(s) if s == "inf" => Ok(f64::INFINITY),
        other => bail!("unexpected psnr_db value {other}"),
    }
}

/// Walk `<run_dir>/<method>/<scan>/` for metrics.json + meta.json pairs.
pub fn collect(run_dir: &Path) -> Result<Vec<MethodSummary>> {
    let mut per_method: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for method_entry in std::fs::read_dir(run_dir)? {
        let method_dir = method_entry?.path();
        if !method_dir.is_dir() {
            continue;
        }
        for scan_entry in std::fs::read_dir(&method_dir)? {
            let scan_dir = scan_entry?.path();
            let metrics_path = scan_dir.join("metrics.json");
            let meta_path = scan_dir.join("meta.json");
            if !metrics_path.exists() || !meta_path.exists() {
                continue;
            }
            let metrics: serde_json::Value =
                serde_json::from_slice(&std::fs::read(&metrics_path)?)
                    .with_context(|| format!("parsing {metrics_path:?}"))?;
            let meta: MethodMeta = serde_json::from_slice(&std::fs::read(&meta_path)?)
                .with_context(|| format!("parsing {meta_path:?}"))?;
            let psnr = psnr_from_json(&metrics["psnr_db"])?;
            let ssim = metrics["ssim"]
                .as_f64()
                .with_context(|| format!("missing ssim in {metrics_path:?}"))?;
            per_method
                .entry(meta.method.clone())
                .or_default()
                .push((psnr, ssim, meta.wall_seconds));
        }
    }
    if per_method.is_empty() {
        bail!("no <method>/<scan>/metrics.json entries under {run_dir:?}");
    }
    let mut out = Vec::new();
    for (method, rows) in per_method {
        let psnr: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let ssim: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let wall: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let (pm, ps) = mean_std(&psnr);
        let (sm, ss) = mean_std(&ssim);
        let (wm, ws) = mean_std(&wall);
        out.push(MethodSummary {
            method,
            n: rows.len(),
            psnr_mean: pm,
            psnr_std: ps,
            ssim_mean: sm,
            ssim_std: ss,
            wall_s_mean: wm,
            wall_s_std: ws,
        });
    }
    Ok(out)
}

pub fn run(run_dir: &Path, out_csv: Option<&Path>) -> Result<(Vec<MethodSummary>, PathBuf)> {
    let summaries = collect(run_dir)?;
    let path = out_csv
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| run_dir.join("report.csv"));
    let mut f = std::fs::File::create(&path)?;
    writeln!(
        f,
        "method,n,psnr_mean,psnr_std,ssim_mean,ssim_std,wall_s_mean,wall_s_std"
    )?;
    for s in &summaries {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            s.method, s.n, s.psnr_mean, s.psnr_std, s.ssim_mean, s.ssim_std, s.wall_s_mean, s.wall_s_std
        )?;
        println!(
            "{:<10} n={} psnr {:.2} ± {:.2}  ssim {:.3} ± {:.3}  wall {:.1}s",
            s.method, s.n, s.psnr_mean, s.psnr_std, s.ssim_mean, s.ssim_std, s.wall_s_mean
        );
    }
    Ok((summaries, path))
}
