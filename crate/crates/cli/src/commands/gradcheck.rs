//! Finite-difference verification of every analytic gradient path, run in
//! f64: encoding tables, the full conditional field (all parameter groups),
//! and the TV regularizer.

use anyhow::Result;
use rand::Rng;

use cbnt_core::baselines::{tv_grad, tv_value};
use cbnt_core::encoding::{HashEncoding, HashEncodingConfig};
use cbnt_core::error::Error;
use cbnt_core::geometry::{Aabb, RaySampleSet, Vec3};
use cbnt_core::network::{
    field_backward, field_forward, preactivation_margin, CondFieldParams, FieldModelConfig,
    NmfParams, ParamLeaves, SharedFieldParams,
};
use cbnt_core::rng::stream;

pub struct GroupResult {
    pub group: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const TOLERANCE: f64 = 1e-3;
const FD_EPS: f64 = 1e-3;

pub fn run(cases: usize) -> Result<Vec<GroupResult>> {
    let results = vec![
        check_encoding(cases)?,
        check_field(cases)?,
        check_tv(cases)?,
    ];
    for r in &results {
        println!(
            "gradcheck {:<12} cases {:>3}  max_rel_err {:.3e}  {}",
            r.group,
            r.cases,
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    if results.iter().any(|r| !r.pass) {
        return Err(Error::Numerical(format!(
            "gradient check failed (tolerance {TOLERANCE})"
        ))
        .into());
    }
    Ok(results)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn check_encoding(cases: usize) -> Result<GroupResult> {
    let cfg = HashEncodingConfig {
        levels: 3,
        feat_dim: 2,
        base_res: 2,
        growth: 2.0,
        table_size: 64,
    };
    let mut rng = stream(0xE0C, &[0]);
    let mut enc: HashEncoding<f64> = HashEncoding::init(cfg, &mut rng)?;
    for t in &mut enc.tables {
        for v in t.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let mut max_err = 0.0f64;
    for _ in 0..cases {
        let x = [rng.gen::<f64>(), rng.gen(), rng.gen()];
        let upstream: Vec<f64> = (0..cfg.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = enc.encode_backward(x, &upstream)?;
        for (level, entries) in grad.levels.iter().enumerate() {
            for (idx, vals) in entries {
                for f in 0..cfg.feat_dim {
                    let slot = idx * cfg.feat_dim + f;
                    let orig = enc.tables[level][slot];
                    enc.tables[level][slot] = orig + FD_EPS;
                    let hi = dot(&enc.encode(x)?, &upstream);
                    enc.tables[level][slot] = orig - FD_EPS;
                    let lo = dot(&enc.encode(x)?, &upstream);
                    enc.tables[level][slot] = orig;
                    let fd = (hi - lo) / (2.0 * FD_EPS);
                    max_err = max_err.max(rel_err(fd, vals[f]));
                }
            }
        }
    }
    Ok(GroupResult {
        group: "encoding".into(),
        cases,
        max_rel_err: max_err,
        pass: max_err < TOLERANCE,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn tiny_model() -> FieldModelConfig {
    FieldModelConfig {
        shared_encoding: HashEncodingConfig {
            levels: 2,
            feat_dim: 2,
            base_res: 2,
            growth: 2.0,
            table_size: 16,
        },
        hidden_width: 6,
        n_hidden: 2,
        nmf_encoding: HashEncodingConfig {
            levels: 2,
            feat_dim: 2,
            base_res: 2,
            growth: 2.0,
            table_size: 16,
        },
        nmf_hidden_width: 5,
        nmf_n_hidden: 2,
    }
}

fn check_field(cases: usize) -> Result<GroupResult> {
    let model = tiny_model();
    let bbox = Aabb::centered_cube(64.0).unwrap();
    let mut rng = stream(0xF1E1D, &[0]);
    let mut max_err = 0.0f64;
    let mut done = 0;
    let mut attempt = 0u64;
    while done < cases && attempt < cases as u64 * 10 {
        attempt += 1;
        let mut shared: SharedFieldParams<f64> = SharedFieldParams::init(&model, bbox, attempt)?;
        randomize(&mut shared, &mut rng);
        let mut nmf: NmfParams<f64> = NmfParams::init(&model, "p", attempt)?;
        randomize(&mut nmf, &mut rng);
        let mut params = CondFieldParams::new(shared);
        params.insert_nmf(nmf)?;

        // One 3-sample pseudo-ray with unit steps.
        let positions: Vec<Vec3> = (0..3)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-30.0..30.0),
                    rng.gen_range(-30.0..30.0),
                    rng.gen_range(-30.0..30.0),
                )
            })
            .collect();
        // Stay away from ReLU kinks where the derivative is one-sided.
        if positions
            .iter()
            .map(|&p| preactivation_margin(&params, Some("p"), p).unwrap())
            .fold(f64::INFINITY, f64::min)
            < 1e-2
        {
            continue;
        }
        done += 1;
        let samples = RaySampleSet {
            positions: positions.clone(),
            steps: vec![1.0; 3],
        };
        let upstream = rng.gen_range(0.2..1.0);
        let grads = field_backward(&params, Some("p"), &[(&samples, upstream)])?;
        let loss = |params: &CondFieldParams<f64>| -> f64 {
            positions
                .iter()
                .map(|&p| field_forward(params, Some("p"), p).unwrap())
                .sum::<f64>()
                * upstream
        };
        let shared_grad = grads.shared.as_ref().expect("shared grads");
        let nmf_grad = &grads.nmfs["p"];
        for side in 0..2 {
            let analytic: Vec<Vec<f64>> = if side == 0 {
                shared_grad.leaves().iter().map(|l| l.to_vec()).collect()
            } else {
                nmf_grad.leaves().iter().map(|l| l.to_vec()).collect()
            };
            for (leaf, leaf_vals) in analytic.iter().enumerate() {
                for (slot, &g) in leaf_vals.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    let poke = |params: &mut CondFieldParams<f64>, delta: f64| {
                        let mut leaves = if side == 0 {
                            params.shared.leaves_mut()
                        } else {
                            params.nmfs.get_mut("p").unwrap().leaves_mut()
                        };
                        leaves[leaf][slot] += delta;
                    };
                    poke(&mut params, FD_EPS);
                    let hi = loss(&params);
                    poke(&mut params, -2.0 * FD_EPS);
                    let lo = loss(&params);
                    poke(&mut params, FD_EPS);
                    let fd = (hi - lo) / (2.0 * FD_EPS);
                    max_err = max_err.max(rel_err(fd, g));
                }
            }
        }
    }
    Ok(GroupResult {
        group: "field".into(),
        cases: done,
        max_rel_err: max_err,
        pass: done >= cases && max_err < TOLERANCE,
    })
}

fn randomize<T: ParamLeaves<f64>>(tree: &mut T, rng: &mut rand_chacha::ChaCha8Rng) {
    for leaf in tree.leaves_mut() {
        for v in leaf {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
}

fn check_tv(cases: usize) -> Result<GroupResult> {
    let dims = [6, 6, 6];
    let n = 216;
    let mut rng = stream(0x71, &[0]);
    let mut max_err = 0.0f64;
    let eps_tv = 1e-2;
    let h = 1e-6;
    for _ in 0..cases {
        let mut data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.1)).collect();
        let grad = tv_grad(&data, dims, eps_tv);
        for probe in 0..24 {
            let idx = (probe * 11 + 5) % n;
            let orig = data[idx];
            data[idx] = orig + h;
            let hi = tv_value(&data, dims, eps_tv);
            data[idx] = orig - h;
            let lo = tv_value(&data, dims, eps_tv);
            data[idx] = orig;
            let fd = (hi - lo) / (2.0 * h);
            max_err = max_err.max(rel_err(fd, grad[idx]));
        }
    }
    Ok(GroupResult {
        group: "tv".into(),
        cases,
        max_rel_err: max_err,
        pass: max_err < TOLERANCE,
    })
}
