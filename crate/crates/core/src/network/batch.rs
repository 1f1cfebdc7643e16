//! Batched forward/backward engine for the conditional field.
//!
//! Points are processed in fixed-size chunks; activations for one chunk live
//! in a reusable [`FieldScratch`]. The unconditional path materializes
//! identity modulations and runs the exact same arithmetic as the
//! conditioned path, so a zero-initialized NMF head reproduces the
//! unconditional field bit for bit.

use crate::encoding::HashEncoding;
use crate::error::{Error, Result};
use crate::real::Real;

use super::{Dense, DenseGrad, NmfParams, SharedFieldParams};

/// Points per chunk in batched evaluation; fixed so reductions never depend
/// on thread count.
pub(crate) const CHUNK: usize = 128;

#[inline]
fn softplus<T: Real>(y: T) -> T {
    if y > T::zero() {
        y + (-y).exp().ln_1p()
    } else {
        y.exp().ln_1p()
    }
}

#[inline]
fn sigmoid<T: Real>(y: T) -> T {
    T::one() / (T::one() + (-y).exp())
}

// ---------------------------------------------------------------------------
// Linear layer kernels (row-major [batch][dim] activations)
// ---------------------------------------------------------------------------

pub(crate) fn linear_forward<T: Real>(layer: &Dense<T>, xs: &[T], out: &mut [T], batch: usize) {
    let (din, dout) = (layer.in_dim, layer.out_dim);
    debug_assert_eq!(xs.len(), batch * din);
    debug_assert_eq!(out.len(), batch * dout);
    for b in 0..batch {
        let x = &xs[b * din..(b + 1) * din];
        let o = &mut out[b * dout..(b + 1) * dout];
        for (j, oj) in o.iter_mut().enumerate() {
            let row = &layer.w[j * din..(j + 1) * din];
            let mut acc = layer.b[j];
            for i in 0..din {
                acc = acc + row[i] * x[i];
            }
            *oj = acc;
        }
    }
}

/// dxs[b,i] = sum_o dzs[b,o] * w[o,i] (overwrites dxs).
fn linear_backward_input<T: Real>(layer: &Dense<T>, dzs: &[T], dxs: &mut [T], batch: usize) {
    let (din, dout) = (layer.in_dim, layer.out_dim);
    for b in 0..batch {
        let dz = &dzs[b * dout..(b + 1) * dout];
        let dx = &mut dxs[b * din..(b + 1) * din];
        dx.fill(T::zero());
        for (o, &g) in dz.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let row = &layer.w[o * din..(o + 1) * din];
            for i in 0..din {
                dx[i] = dx[i] + g * row[i];
            }
        }
    }
}

/// grad.w[o,i] += sum_b dzs[b,o] * xs[b,i]; grad.b[o] += sum_b dzs[b,o].
fn linear_backward_params<T: Real>(
    din: usize,
    dout: usize,
    xs: &[T],
    dzs: &[T],
    grad: &mut DenseGrad<T>,
    batch: usize,
) {
    for b in 0..batch {
        let x = &xs[b * din..(b + 1) * din];
        let dz = &dzs[b * dout..(b + 1) * dout];
        for (o, &g) in dz.iter().enumerate() {
            grad.b[o] = grad.b[o] + g;
            if g == T::zero() {
                continue;
            }
            let row = &mut grad.w[o * din..(o + 1) * din];
            for i in 0..din {
                row[i] = row[i] + g * x[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient containers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SharedFieldGrad<T> {
    pub tables: Vec<Vec<T>>,
    pub hidden: Vec<DenseGrad<T>>,
    pub output: DenseGrad<T>,
}

impl<T: Real> SharedFieldGrad<T> {
    pub fn zeros_like(p: &SharedFieldParams<T>) -> Self {
        SharedFieldGrad {
            tables: p.encoding.tables.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            hidden: p.hidden.iter().map(DenseGrad::zeros_like).collect(),
            output: DenseGrad::zeros_like(&p.output),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        add_tables(&mut self.tables, &other.tables);
        for (a, b) in self.hidden.iter_mut().zip(&other.hidden) {
            add_dense(a, b);
        }
        add_dense(&mut self.output, &other.output);
    }
}

#[derive(Clone, Debug)]
pub struct NmfGrad<T> {
    pub tables: Vec<Vec<T>>,
    pub hidden: Vec<DenseGrad<T>>,
    pub head: DenseGrad<T>,
}

impl<T: Real> NmfGrad<T> {
    pub fn zeros_like(p: &NmfParams<T>) -> Self {
        NmfGrad {
            tables: p.encoding.tables.iter().map(|t| vec![T::zero(); t.len()]).collect(),
            hidden: p.hidden.iter().map(DenseGrad::zeros_like).collect(),
            head: DenseGrad::zeros_like(&p.head),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        add_tables(&mut self.tables, &other.tables);
        for (a, b) in self.hidden.iter_mut().zip(&other.hidden) {
            add_dense(a, b);
        }
        add_dense(&mut self.head, &other.head);
    }
}

fn add_tables<T: Real>(dst: &mut [Vec<T>], src: &[Vec<T>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (x, y) in d.iter_mut().zip(s) {
            *x = *x + *y;
        }
    }
}

fn add_dense<T: Real>(dst: &mut DenseGrad<T>, src: &DenseGrad<T>) {
    for (x, y) in dst.w.iter_mut().zip(&src.w) {
        *x = *x + *y;
    }
    for (x, y) in dst.b.iter_mut().zip(&src.b) {
        *x = *x + *y;
    }
}

/// Gradients accumulated over point batches. Presence of a side controls
/// whether that side is computed: per-scan fitting keeps `shared` at `None`
/// and skips the shared weight/table accumulation entirely.
#[derive(Clone, Debug)]
pub struct PointBatchGrads<T> {
    pub shared: Option<SharedFieldGrad<T>>,
    pub nmf: Option<NmfGrad<T>>,
}

impl<T: Real> PointBatchGrads<T> {
    pub fn zeros(shared: &SharedFieldParams<T>, nmf: Option<&NmfParams<T>>) -> Self {
        PointBatchGrads {
            shared: Some(SharedFieldGrad::zeros_like(shared)),
            nmf: nmf.map(NmfGrad::zeros_like),
        }
    }

    pub fn nmf_only(nmf: &NmfParams<T>) -> Self {
        PointBatchGrads { shared: None, nmf: Some(NmfGrad::zeros_like(nmf)) }
    }

    pub fn add_assign(&mut self, other: &Self) {
        match (&mut self.shared, &other.shared) {
            (Some(a), Some(b)) => a.add_assign(b),
            (None, None) => {}
            _ => panic!("merging gradient trees of different shapes"),
        }
        match (&mut self.nmf, &other.nmf) {
            (Some(a), Some(b)) => a.add_assign(b),
            (None, None) => {}
            _ => panic!("merging gradient trees of different shapes"),
        }
    }
}

// ---------------------------------------------------------------------------
// Scratch
// ---------------------------------------------------------------------------

/// Reusable per-chunk activation storage.
#[derive(Clone, Debug, Default)]
pub struct FieldScratch<T> {
    batch: usize,
    pts: Vec<[f64; 3]>,
    enc_s: Vec<T>,
    /// Pre-modulation z_l = W_l a_{l-1} + b_l.
    z: Vec<Vec<T>>,
    /// Post-modulation h_l = z_l * gamma_l + beta_l.
    h: Vec<Vec<T>>,
    /// Post-ReLU a_l.
    a: Vec<Vec<T>>,
    gamma: Vec<Vec<T>>,
    beta: Vec<Vec<T>>,
    y: Vec<T>,
    // NMF side.
    enc_m: Vec<T>,
    m_z: Vec<Vec<T>>,
    m_a: Vec<Vec<T>>,
    r: Vec<T>,
    // Backward temporaries.
    t_dy: Vec<T>,
    t_da: Vec<T>,
    t_dz: Vec<T>,
    t_de: Vec<T>,
    t_dr: Vec<T>,
    t_dma: Vec<T>,
    t_dmz: Vec<T>,
}

impl<T: Real> FieldScratch<T> {
    pub fn new() -> Self {
        FieldScratch::default()
    }

    fn resize(&mut self, shared: &SharedFieldParams<T>, nmf: Option<&NmfParams<T>>, batch: usize) {
        let nl = shared.hidden.len();
        let hw = shared.hidden_width();
        let ld = shared.encoding.cfg().output_dim();
        self.batch = batch;
        self.enc_s.resize(batch * ld, T::zero());
        resize_layers(&mut self.z, nl, batch * hw);
        resize_layers(&mut self.h, nl, batch * hw);
        resize_layers(&mut self.a, nl, batch * hw);
        resize_layers(&mut self.gamma, nl, batch * hw);
        resize_layers(&mut self.beta, nl, batch * hw);
        self.y.resize(batch, T::zero());
        self.t_dy.resize(batch, T::zero());
        self.t_da.resize(batch * hw, T::zero());
        self.t_dz.resize(batch * hw, T::zero());
        self.t_de.resize(batch * ld, T::zero());
        if let Some(nmf) = nmf {
            let mld = nmf.encoding.cfg().output_dim();
            let mh = nmf.head.in_dim;
            let rd = nmf.head.out_dim;
            self.enc_m.resize(batch * mld, T::zero());
            resize_layers(&mut self.m_z, nmf.hidden.len(), batch * mh);
            resize_layers(&mut self.m_a, nmf.hidden.len(), batch * mh);
            self.r.resize(batch * rd, T::zero());
            self.t_dr.resize(batch * rd, T::zero());
            self.t_dma.resize(batch * mh, T::zero());
            self.t_dmz.resize(batch * mh, T::zero());
            self.t_de.resize(batch * ld.max(mld), T::zero());
        }
    }

    /// Smallest |pre-activation| seen in the last forward pass; gradient
    /// checks use it to stay away from ReLU kinks.
    pub fn min_preactivation(&self) -> f64 {
        let mut m = f64::INFINITY;
        for buf in self.h.iter().chain(self.m_z.iter()) {
            for v in buf {
                m = m.min(v.as_f64().abs());
            }
        }
        m
    }
}

fn resize_layers<T: Real>(bufs: &mut Vec<Vec<T>>, n: usize, len: usize) {
    bufs.resize_with(n, Vec::new);
    for b in bufs.iter_mut() {
        b.resize(len, T::zero());
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

fn encode_batch<T: Real>(enc: &HashEncoding<T>, pts: &[[f64; 3]], out: &mut [T]) -> Result<()> {
    let d = enc.cfg().output_dim();
    for (i, p) in pts.iter().enumerate() {
        enc.encode_into(*p, &mut out[i * d..(i + 1) * d])?;
    }
    Ok(())
}

/// Run the NMF stack for a batch; fills `enc_m`, `m_z`, `m_a`, `r` and
/// returns a copy of the raw head output.
pub(crate) fn nmf_forward_batch<T: Real>(
    nmf: &NmfParams<T>,
    pts: &[[f64; 3]],
    scratch: &mut FieldScratch<T>,
) -> Result<Vec<T>> {
    let b = pts.len();
    let mh = nmf.head.in_dim;
    let mld = nmf.encoding.cfg().output_dim();
    scratch.enc_m.resize(b * mld, T::zero());
    resize_layers(&mut scratch.m_z, nmf.hidden.len(), b * mh);
    resize_layers(&mut scratch.m_a, nmf.hidden.len(), b * mh);
    scratch.r.resize(b * nmf.head.out_dim, T::zero());
    encode_batch(&nmf.encoding, pts, &mut scratch.enc_m)?;
    for (l, layer) in nmf.hidden.iter().enumerate() {
        if l == 0 {
            linear_forward(layer, &scratch.enc_m, &mut scratch.m_z[l], b);
        } else {
            linear_forward(layer, &scratch.m_a[l - 1], &mut scratch.m_z[l], b);
        }
        let (mz, ma) = (&scratch.m_z[l], &mut scratch.m_a[l]);
        for (z, a) in mz.iter().zip(ma.iter_mut()) {
            *a = if *z > T::zero() { *z } else { T::zero() };
        }
    }
    let last = match nmf.hidden.len() {
        0 => &scratch.enc_m,
        n => &scratch.m_a[n - 1],
    };
    linear_forward(&nmf.head, last, &mut scratch.r, b);
    Ok(scratch.r.clone())
}

/// Forward pass for a chunk of normalized points; `out` receives the
/// densities and `scratch` keeps everything backward needs.
pub(crate) fn forward_batch<T: Real>(
    shared: &SharedFieldParams<T>,
    nmf: Option<&NmfParams<T>>,
    pts: &[[f64; 3]],
    out: &mut Vec<T>,
    scratch: &mut FieldScratch<T>,
) -> Result<()> {
    let b = pts.len();
    if b == 0 {
        return Err(Error::Data("empty point batch".into()));
    }
    if let Some(nmf) = nmf {
        if nmf.mod_width != shared.hidden_width() || nmf.n_modulated != shared.hidden.len() {
            return Err(Error::ShapeMismatch(format!(
                "NMF produces {}x{} modulations, shared field needs {}x{}",
                nmf.n_modulated,
                nmf.mod_width,
                shared.hidden.len(),
                shared.hidden_width()
            )));
        }
    }
    scratch.resize(shared, nmf, b);
    scratch.pts.clear();
    scratch.pts.extend_from_slice(pts);
    encode_batch(&shared.encoding, pts, &mut scratch.enc_s)?;

    let hw = shared.hidden_width();
    if let Some(nmf) = nmf {
        nmf_forward_batch(nmf, pts, scratch)?;
        let rd = nmf.head.out_dim;
        for l in 0..nmf.n_modulated {
            let (gl, bl) = (&mut scratch.gamma[l], &mut scratch.beta[l]);
            for i in 0..b {
                let base = i * rd + l * 2 * hw;
                for j in 0..hw {
                    gl[i * hw + j] = T::one() + scratch.r[base + j];
                    bl[i * hw + j] = scratch.r[base + hw + j];
                }
            }
        }
    } else {
        for l in 0..shared.hidden.len() {
            scratch.gamma[l].fill(T::one());
            scratch.beta[l].fill(T::zero());
        }
    }

    for (l, layer) in shared.hidden.iter().enumerate() {
        if l == 0 {
            linear_forward(layer, &scratch.enc_s, &mut scratch.z[l], b);
        } else {
            linear_forward(layer, &scratch.a[l - 1], &mut scratch.z[l], b);
        }
        let (zl, gl, bl) = (&scratch.z[l], &scratch.gamma[l], &scratch.beta[l]);
        let hl = &mut scratch.h[l];
        for i in 0..b * hw {
            hl[i] = zl[i] * gl[i] + bl[i];
        }
        let (hl, al) = (&scratch.h[l], &mut scratch.a[l]);
        for i in 0..b * hw {
            al[i] = if hl[i] > T::zero() { hl[i] } else { T::zero() };
        }
    }
    let last = &scratch.a[shared.hidden.len() - 1];
    linear_forward(&shared.output, last, &mut scratch.y, b);
    out.clear();
    out.extend(scratch.y.iter().map(|&y| softplus(y)));
    Ok(())
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Reverse pass over the state left by [`forward_batch`]. `upstream` is
/// dL/dmu per point. ReLU uses subgradient 0 at 0; the output
/// nonlinearity contributes sigmoid(y).
pub(crate) fn backward_batch<T: Real>(
    shared: &SharedFieldParams<T>,
    nmf: Option<&NmfParams<T>>,
    upstream: &[T],
    scratch: &mut FieldScratch<T>,
    grads: &mut PointBatchGrads<T>,
) -> Result<()> {
    let b = scratch.batch;
    if upstream.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} entries for a batch of {b}",
            upstream.len()
        )));
    }
    if upstream.iter().any(|u| !u.as_f64().is_finite()) {
        return Err(Error::Data("non-finite upstream gradient".into()));
    }
    let hw = shared.hidden_width();
    let nl = shared.hidden.len();
    let want_nmf = nmf.is_some() && grads.nmf.is_some();

    // dy = dmu * sigmoid(y)
    for i in 0..b {
        scratch.t_dy[i] = upstream[i] * sigmoid(scratch.y[i]);
    }

    // Output layer.
    if let Some(sg) = grads.shared.as_mut() {
        linear_backward_params(hw, 1, &scratch.a[nl - 1], &scratch.t_dy, &mut sg.output, b);
    }
    linear_backward_input(&shared.output, &scratch.t_dy, &mut scratch.t_da, b);

    if want_nmf {
        scratch.t_dr.fill(T::zero());
    }

    for l in (0..nl).rev() {
        // dh = da * relu'(h); dz = dh * gamma; dgamma = dh * z; dbeta = dh.
        let (hl, zl, gl) = (&scratch.h[l], &scratch.z[l], &scratch.gamma[l]);
        let rd = nmf.map(|n| n.head.out_dim).unwrap_or(0);
        for i in 0..b {
            for j in 0..hw {
                let k = i * hw + j;
                let dh = if hl[k] > T::zero() { scratch.t_da[k] } else { T::zero() };
                scratch.t_dz[k] = dh * gl[k];
                if want_nmf {
                    let base = i * rd + l * 2 * hw;
                    scratch.t_dr[base + j] = scratch.t_dr[base + j] + dh * zl[k];
                    scratch.t_dr[base + hw + j] = scratch.t_dr[base + hw + j] + dh;
                }
            }
        }
        let layer = &shared.hidden[l];
        if let Some(sg) = grads.shared.as_mut() {
            let input: &[T] = if l == 0 { &scratch.enc_s } else { &scratch.a[l - 1] };
            linear_backward_params(layer.in_dim, hw, input, &scratch.t_dz, &mut sg.hidden[l], b);
        }
        if l > 0 {
            linear_backward_input(layer, &scratch.t_dz, &mut scratch.t_da, b);
        } else if let Some(sg) = grads.shared.as_mut() {
            let ld = shared.encoding.cfg().output_dim();
            linear_backward_input(layer, &scratch.t_dz, &mut scratch.t_de[..b * ld], b);
            for (i, p) in scratch.pts.iter().enumerate() {
                shared
                    .encoding
                    .accumulate_backward(*p, &scratch.t_de[i * ld..(i + 1) * ld], &mut sg.tables);
            }
        }
    }

    // NMF side: head <- dr, hidden stack, encoding tables.
    if want_nmf {
        let nmf = nmf.expect("checked");
        let ng = grads.nmf.as_mut().expect("checked");
        let mh = nmf.head.in_dim;
        let last: &[T] = match nmf.hidden.len() {
            0 => &scratch.enc_m,
            n => &scratch.m_a[n - 1],
        };
        linear_backward_params(mh, nmf.head.out_dim, last, &scratch.t_dr, &mut ng.head, b);
        linear_backward_input(&nmf.head, &scratch.t_dr, &mut scratch.t_dma, b);
        for l in (0..nmf.hidden.len()).rev() {
            let mz = &scratch.m_z[l];
            for k in 0..b * mh {
                scratch.t_dmz[k] = if mz[k] > T::zero() { scratch.t_dma[k] } else { T::zero() };
            }
            let layer = &nmf.hidden[l];
            let input: &[T] = if l == 0 { &scratch.enc_m } else { &scratch.m_a[l - 1] };
            linear_backward_params(layer.in_dim, mh, input, &scratch.t_dmz, &mut ng.hidden[l], b);
            if l > 0 {
                linear_backward_input(layer, &scratch.t_dmz, &mut scratch.t_dma, b);
            } else {
                let mld = nmf.encoding.cfg().output_dim();
                linear_backward_input(layer, &scratch.t_dmz, &mut scratch.t_de[..b * mld], b);
                for (i, p) in scratch.pts.iter().enumerate() {
                    nmf.encoding.accumulate_backward(
                        *p,
                        &scratch.t_de[i * mld..(i + 1) * mld],
                        &mut ng.tables,
                    );
                }
            }
        }
    }
    Ok(())
}
