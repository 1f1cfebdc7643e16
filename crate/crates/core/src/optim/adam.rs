//! Adam with bias correction over arbitrary parameter trees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamLeaves;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates shaped like the parameter tree, plus the
/// global step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: ParamLeaves<T> + ?Sized>(params: &P, cfg: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.leaves().iter().map(|l| l.len()).collect();
        AdamState {
            cfg,
            t: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
///
/// The whole gradient tree is validated first; a non-finite gradient rejects
/// the step without touching parameters or moments.
pub fn adam_step<T, P, G>(state: &mut AdamState<T>, params: &mut P, grads: &G) -> Result<()>
where
    T: Real,
    P: ParamLeaves<T> + ?Sized,
    G: ParamLeaves<T> + ?Sized,
{
    let grad_leaves = grads.leaves();
    {
        let param_leaves = params.leaves();
        if param_leaves.len() != grad_leaves.len()
            || param_leaves
                .iter()
                .zip(&grad_leaves)
                .any(|(p, g)| p.len() != g.len())
            || state.m.len() != param_leaves.len()
            || state
                .m
                .iter()
                .zip(&param_leaves)
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::ShapeMismatch(
                "parameter, gradient, and optimizer trees disagree".into(),
            ));
        }
    }
    for leaf in &grad_leaves {
        if leaf.iter().any(|g| !g.as_f64().is_finite()) {
            return Err(Error::NonFiniteGradient("adam update".into()));
        }
    }

    state.t += 1;
    let b1 = T::from_f64(state.cfg.beta1);
    let b2 = T::from_f64(state.cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - state.cfg.beta1.powi(state.t as i32));
    let bc2 = T::from_f64(1.0 - state.cfg.beta2.powi(state.t as i32));
    let lr = T::from_f64(state.cfg.lr);
    let eps = T::from_f64(state.cfg.eps);

    for (leaf_idx, param_leaf) in params.leaves_mut().into_iter().enumerate() {
        let g_leaf = grad_leaves[leaf_idx];
        let m_leaf = &mut state.m[leaf_idx];
        let v_leaf = &mut state.v[leaf_idx];
        for i in 0..param_leaf.len() {
            let g = g_leaf[i];
            let m = b1 * m_leaf[i] + (one - b1) * g;
            let v = b2 * v_leaf[i] + (one - b2) * g * g;
            m_leaf[i] = m;
            v_leaf[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            param_leaf[i] = param_leaf[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain list-of-arrays parameter tree; handy for optimizer state blobs and
/// small tests.
impl<T: Real> ParamLeaves<T> for Vec<Vec<T>> {
    fn leaves(&self) -> Vec<&[T]> {
        self.iter().map(|v| v.as_slice()).collect()
    }

    fn leaves_mut(&mut self) -> Vec<&mut [T]> {
        self.iter_mut().map(|v| v.as_mut_slice()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(vals: &[f64]) -> Vec<Vec<f64>> {
        vec![vals.to_vec()]
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = tree(&[1.0, -2.0, 3.0]);
        let g = tree(&[0.0, 0.0, 0.0]);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
        adam_step(&mut st, &mut p, &g).unwrap();
        assert_eq!(p[0], vec![1.0, -2.0, 3.0]);
        assert_eq!(st.t, 1);
    }

    // At t = 1 bias correction gives m_hat = g and v_hat = g^2, so the step
    // is lr * g / (|g| + eps) ~ lr * sign(g).
    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let mut p = tree(&[0.0, 0.0, 0.0]);
        let g = tree(&[0.5, -3.0, 1e-3]);
        let lr = 0.07;
        let mut st = AdamState::new(&p, AdamConfig::with_lr(lr));
        adam_step(&mut st, &mut p, &g).unwrap();
        for (pv, gv) in p[0].iter().zip(&g[0]) {
            assert!((pv.abs() - lr).abs() < 1e-4 * lr, "step {pv} for grad {gv}");
            assert_eq!(pv.signum(), -gv.signum());
        }
    }

    // Hand-computed two-step trace of the update recurrence.
    #[test]
    fn two_step_trace_matches_hand_computation() {
        let lr = 0.1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut p = tree(&[0.0]);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(lr));
        adam_step(&mut st, &mut p, &tree(&[1.0])).unwrap();
        adam_step(&mut st, &mut p, &tree(&[1.0])).unwrap();

        // Manual recurrence.
        let mut x = 0.0_f64;
        let mut m = 0.0_f64;
        let mut v = 0.0_f64;
        for t in 1..=2u32 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        assert!((p[0][0] - x).abs() < 1e-12, "{} vs {x}", p[0][0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = tree(&[1.0, 2.0]);
        let g = tree(&[1.0]);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
        assert!(matches!(adam_step(&mut st, &mut p, &g), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn non_finite_gradient_rejects_the_step() {
        let mut p = tree(&[1.0, 2.0]);
        let g = tree(&[1.0, f64::NAN]);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
        let before = p.clone();
        assert!(matches!(
            adam_step(&mut st, &mut p, &g),
            Err(Error::NonFiniteGradient(_))
        ));
        assert_eq!(p, before);
        assert_eq!(st.t, 0);
    }

    // Scale covariance at t = 1: the update direction per coordinate is
    // -sign(g) regardless of |g| (up to the eps floor).
    #[test]
    fn first_step_direction_ignores_gradient_scale() {
        for scale in [1e-4, 1.0, 1e4] {
            let mut p = tree(&[0.0]);
            let mut st = AdamState::new(&p, AdamConfig::with_lr(0.01));
            adam_step(&mut st, &mut p, &tree(&[scale])).unwrap();
            assert!((p[0][0] + 0.01).abs() < 1e-5);
        }
    }
}
