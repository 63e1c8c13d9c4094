//! Weight normalization and spectral normalization of linear weights.
//!
//! Weights are stored `[in, out]` and applied as `X · W`, so an output
//! column is `W[:, j]`.

use crate::autodiff::WEIGHT_NORM_EPS;
use crate::error::{AeroError, Result};
use crate::tensor::Tensor;

/// Power-iteration steps for offline verification. Training refreshes with one step.
pub const SPECTRAL_VERIFY_ITERS: usize = 50;

/// Warm start at construction. Random `d×4d` matrices have closely spaced top
/// singular values, and 50 steps can leave the estimate 0.1% short.
pub const SPECTRAL_INIT_ITERS: usize = 500;

pub fn column_norms(v: &Tensor) -> Vec<f64> {
    let (rows, cols) = (v.shape()[0], v.shape()[1]);
    let mut norms = vec![0.0; cols];
    for r in 0..rows {
        for (c, n) in norms.iter_mut().enumerate() {
            let x = v.data()[r * cols + c];
            *n += x * x;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    norms
}

pub(crate) fn weight_norm_forward(v: &Tensor, g: &[f64]) -> (Tensor, Vec<f64>) {
    let cols = v.shape()[1];
    let norms = column_norms(v);
    let scale: Vec<f64> = norms.iter().zip(g).map(|(n, g)| g / n.max(WEIGHT_NORM_EPS)).collect();
    let data = v.data().iter().enumerate().map(|(i, x)| x * scale[i % cols]).collect();
    (Tensor::new(v.shape(), data).expect("same shape"), norms)
}

pub(crate) fn weight_norm_backward(v: &Tensor, g: &[f64], norms: &[f64], upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (v.shape()[0], v.shape()[1]);
    // s_j = <dW[:, j], V[:, j]>
    let mut s = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            s[c] += upstream[r * cols + c] * v.data()[r * cols + c];
        }
    }
    let mut dv = vec![0.0; v.numel()];
    let mut dg = vec![0.0; cols];
    for c in 0..cols {
        let n = norms[c];
        if n > WEIGHT_NORM_EPS {
            dg[c] = s[c] / n;
            let a = g[c] / n;
            let b = g[c] * s[c] / (n * n * n);
            for r in 0..rows {
                let i = r * cols + c;
                dv[i] = a * upstream[i] - b * v.data()[i];
            }
        } else {
            dg[c] = s[c] / WEIGHT_NORM_EPS;
            for r in 0..rows {
                let i = r * cols + c;
                dv[i] = g[c] * upstream[i] / WEIGHT_NORM_EPS;
            }
        }
    }
    (dv, dg)
}

/// `V · diag(g / ||V[:, j]||)`: every output column gets norm `|g_j|`.
pub fn apply_weight_norm(v: &Tensor, g: &Tensor) -> Result<Tensor> {
    if v.ndim() != 2 || g.numel() != v.shape()[1] {
        return Err(AeroError::shape(format!("weight norm of {:?} with g {:?}", v.shape(), g.shape())));
    }
    if !g.is_finite() {
        return Err(AeroError::Numeric("weight-norm scales must be finite".into()));
    }
    Ok(weight_norm_forward(v, g.data()).0)
}

/// `uᵀ W v`.
pub(crate) fn bilinear(w: &Tensor, u: &[f64], v: &[f64]) -> f64 {
    let cols = w.shape()[1];
    u.iter()
        .enumerate()
        .map(|(r, ur)| ur * w.data()[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

fn normalize(x: &mut [f64]) {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    x.iter_mut().for_each(|v| *v /= n);
}

/// Runs `iters` rounds of `v ← Wᵀu/‖·‖, u ← Wv/‖·‖` and returns `uᵀ W v`.
pub fn power_iteration(w: &Tensor, u: &mut [f64], v: &mut [f64], iters: usize) -> f64 {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    for _ in 0..iters {
        v.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..rows {
            let ur = u[r];
            for (c, vc) in v.iter_mut().enumerate() {
                *vc += w.data()[r * cols + c] * ur;
            }
        }
        normalize(v);
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = w.data()[r * cols..(r + 1) * cols].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
        normalize(u);
    }
    bilinear(w, u, v)
}

/// Deterministic starting vectors for power iteration.
pub(crate) fn initial_vectors(rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    // Slightly uneven entries keep the start away from any singular subspace's
    // orthogonal complement in practice.
    let mut u: Vec<f64> = (0..rows).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let mut v: Vec<f64> = (0..cols).map(|i| 1.0 + 0.1 * ((i * 104729) % 17) as f64).collect();
    normalize(&mut u);
    normalize(&mut v);
    (u, v)
}

/// `W / σ̂(W)` with `σ̂` from power iteration; updates `u` and `v` in place.
pub fn apply_spectral_norm(w: &Tensor, u: &mut [f64], v: &mut [f64], iters: usize) -> Result<Tensor> {
    if w.ndim() != 2 || u.len() != w.shape()[0] || v.len() != w.shape()[1] {
        return Err(AeroError::shape(format!("spectral norm of {:?}", w.shape())));
    }
    if iters == 0 {
        return Err(AeroError::Range("spectral normalization needs at least one iteration".into()));
    }
    let sigma = power_iteration(w, u, v, iters);
    if !(sigma > 0.0) {
        return Err(AeroError::Numeric(format!("spectral estimate {sigma} is not positive")));
    }
    let data = w.data().iter().map(|x| x / sigma).collect();
    Tensor::new(w.shape(), data)
}

/// Fresh power-iteration estimate of the largest singular value.
pub fn largest_singular_value(w: &Tensor, iters: usize) -> f64 {
    let (mut u, mut v) = initial_vectors(w.shape()[0], w.shape()[1]);
    power_iteration(w, &mut u, &mut v, iters)
}
