//! Element-wise Adam with bias correction.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One Adam update of a single scalar at (1-based) step `t`.
#[inline]
pub fn adam_update(param: &mut f64, grad: f64, m: &mut f64, v: &mut f64, lr: f64, p: &AdamParams, t: u64) {
    *m = p.beta1 * *m + (1.0 - p.beta1) * grad;
    *v = p.beta2 * *v + (1.0 - p.beta2) * grad * grad;
    let m_hat = *m / (1.0 - p.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - p.beta2.powi(t as i32));
    *param -= lr * m_hat / (v_hat.sqrt() + p.eps);
}

/// Updates a whole slice; `params`, `grads` and the moments must align.
pub fn adam_update_slice(params: &mut [f64], grads: &[f64], moments: &mut Moments, lr: f64, p: &AdamParams, t: u64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), moments.len());
    for (((x, g), m), v) in params.iter_mut().zip(grads).zip(&mut moments.m).zip(&mut moments.v) {
        adam_update(x, *g, m, v, lr, p, t);
    }
}
