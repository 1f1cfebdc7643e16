//! FDK filtered backprojection for the circular cone-beam orbit:
//! cosine pre-weighting, per-row frequency-domain ramp filtering, and
//! distance-weighted voxel-driven backprojection.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::projector::ProjectionStack;
use crate::volume::{GridSpec, VolumeGrid};

#[derive(Clone, Copy, Debug)]
pub struct FdkConfig {
    /// Apply a Hann window on top of the ramp. Defaults to on when the
    /// projections carry noise metadata.
    pub hann: bool,
}

impl FdkConfig {
    pub fn for_stack(proj: &ProjectionStack) -> Self {
        FdkConfig { hann: proj.noise_meta.is_some() }
    }
}

/// Ramp-filter one row with explicit padding; returns the full padded
/// filtered signal. Frequencies are in cycles per `pitch` unit, so the
/// output carries an extra 1/length unit relative to the input.
pub fn ramp_filter_row_padded(row: &[f64], pad: usize, pitch: f64, hann: bool) -> Vec<f64> {
    assert!(pad >= row.len() && pad.is_power_of_two());
    let mut buf: Vec<Complex<f64>> = row
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(pad)
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(pad);
    let ifft = planner.plan_fft_inverse(pad);
    fft.process(&mut buf);
    let k_nyquist = 1.0 / (2.0 * pitch);
    for (j, v) in buf.iter_mut().enumerate() {
        let bin = if j <= pad / 2 { j } else { pad - j };
        let k = bin as f64 / (pad as f64 * pitch);
        let w = if hann {
            0.5 * (1.0 + (std::f64::consts::PI * k / k_nyquist).cos())
        } else {
            1.0
        };
        *v *= k * w;
    }
    ifft.process(&mut buf);
    buf.iter().map(|v| v.re / pad as f64).collect()
}

/// Ramp-filter one detector row (zero-padded to the next power of two at
/// least twice the row length).
pub fn ramp_filter_row(row: &[f64], pitch: f64, hann: bool) -> Vec<f64> {
    let pad = (2 * row.len()).next_power_of_two();
    let mut out = ramp_filter_row_padded(row, pad, pitch, hann);
    out.truncate(row.len());
    out
}

/// FDK without the final nonnegativity clamp; used to test linearity.
pub fn fdk_raw(proj: &ProjectionStack, grid: &GridSpec, cfg: &FdkConfig) -> Result<Vec<f64>> {
    let geom = &proj.geom;
    if geom.n_projections() < 2 {
        return Err(Error::Config(format!(
            "FDK needs at least 2 angles, got {}",
            geom.n_projections()
        )));
    }
    let (rows, cols) = (geom.det_rows, geom.det_cols);
    let scale = geom.sid / geom.sdd;
    let pitch_iso = geom.det_pitch * scale;

    // 1) cosine pre-weight, 2) row-wise ramp filter (in isocenter-plane
    // coordinates).
    let filtered: Vec<Vec<f64>> = (0..geom.n_projections())
        .into_par_iter()
        .map(|a| {
            let mut out = vec![0.0_f64; rows * cols];
            for r in 0..rows {
                let v_det = (r as f64 - (rows as f64 - 1.0) / 2.0) * geom.det_pitch;
                let mut row_buf = vec![0.0_f64; cols];
                for c in 0..cols {
                    let u_det = (c as f64 - (cols as f64 - 1.0) / 2.0) * geom.det_pitch;
                    let w = geom.sdd / (geom.sdd * geom.sdd + u_det * u_det + v_det * v_det).sqrt();
                    row_buf[c] = proj.at(a, r, c) as f64 * w;
                }
                let f = ramp_filter_row(&row_buf, pitch_iso, cfg.hann);
                out[r * cols..(r + 1) * cols].copy_from_slice(&f);
            }
            out
        })
        .collect();

    // Mean angular step; angles are validated strictly increasing.
    let angles = &geom.angles;
    let d_beta = (angles[angles.len() - 1] - angles[0]) / (angles.len() - 1) as f64;

    // 3) distance-weighted voxel-driven backprojection.
    let [nx, ny, nz] = grid.dims;
    let plane = nx * ny;
    let trig: Vec<(f64, f64)> = angles.iter().map(|a| a.sin_cos()).collect();
    let out: Vec<f64> = (0..nz)
        .into_par_iter()
        .flat_map_iter(|k| {
            let z = grid.origin[2] + k as f64 * grid.spacing;
            let mut slice = vec![0.0_f64; plane];
            for j in 0..ny {
                let y = grid.origin[1] + j as f64 * grid.spacing;
                for i in 0..nx {
                    let x = grid.origin[0] + i as f64 * grid.spacing;
                    let mut acc = 0.0;
                    for (a, &(sin_a, cos_a)) in trig.iter().enumerate() {
                        // Central axis e = R_a (1,0,0), tangent t = R_a (0,1,0).
                        let axis = x * cos_a + y * sin_a;
                        let tang = -x * sin_a + y * cos_a;
                        let dist = geom.sid + axis;
                        if dist <= geom.sid * 0.01 {
                            continue;
                        }
                        let mag = geom.sid / dist;
                        let p_iso = tang * mag;
                        let zeta = z * mag;
                        // Isocenter-plane coords -> fractional detector pixel.
                        let col_f = p_iso / pitch_iso + (cols as f64 - 1.0) / 2.0;
                        let row_f = zeta / pitch_iso + (rows as f64 - 1.0) / 2.0;
                        let q = bilinear(&filtered[a], rows, cols, row_f, col_f);
                        acc += d_beta * mag * mag * q;
                    }
                    slice[j * nx + i] = acc;
                }
            }
            slice
        })
        .collect();
    Ok(out)
}

/// Full FDK reconstruction with negatives clamped to zero.
pub fn fdk_reconstruct(
    proj: &ProjectionStack,
    grid: &GridSpec,
    cfg: &FdkConfig,
) -> Result<VolumeGrid> {
    let raw = fdk_raw(proj, grid, cfg)?;
    VolumeGrid::new(
        grid.dims,
        grid.spacing,
        grid.origin,
        raw.into_iter().map(|v| (v.max(0.0)) as f32).collect(),
    )
}

#[inline]
fn bilinear(data: &[f64], rows: usize, cols: usize, row_f: f64, col_f: f64) -> f64 {
    let r0 = row_f.floor();
    let c0 = col_f.floor();
    let tr = row_f - r0;
    let tc = col_f - c0;
    let mut acc = 0.0;
    for (dr, wr) in [(0i64, 1.0 - tr), (1, tr)] {
        let r = r0 as i64 + dr;
        if r < 0 || r >= rows as i64 || wr == 0.0 {
            continue;
        }
        for (dc, wc) in [(0i64, 1.0 - tc), (1, tc)] {
            let c = c0 as i64 + dc;
            if c < 0 || c >= cols as i64 {
                continue;
            }
            acc += wr * wc * data[r as usize * cols + c as usize];
        }
    }
    acc
}
