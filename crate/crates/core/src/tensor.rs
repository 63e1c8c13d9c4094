//! Dense row-major `f64` tensors and the forward kernels shared by the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AeroError, Result};

/// Dense row-major array of `f64` with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AeroError::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(AeroError::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel().checked_div(self.last_dim()).unwrap_or(0)
    }
}

/// `c (+)= op(a) · op(b)` with `op(a)` being `m×k` and `op(b)` `k×n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly m*k, k*n and m*n elements and the
    // strides above address only those elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `a: [m, k]` and `b: [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(AeroError::shape(format!(
            "matmul of {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::new(&[m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(AeroError::shape(format!("transpose of {:?}", a.shape)));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

/// Additive causal mask: 0 where `j <= i`, `-inf` above the diagonal.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            m.data[i * t + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Checks that `temperature` suffix-broadcasts over the rows of `x` and that
/// `mask` matches the trailing `[rows, cols]` block of `x`.
pub(crate) fn check_softmax_args(
    x: &Tensor,
    temperature: Option<&Tensor>,
    mask: Option<&Tensor>,
) -> Result<()> {
    if x.ndim() == 0 {
        return Err(AeroError::shape("softmax of a 0-d tensor"));
    }
    if let Some(t) = temperature {
        let lead = &x.shape[..x.ndim() - 1];
        let ok = t.numel() == 1
            || (t.ndim() <= lead.len() && lead[lead.len() - t.ndim()..] == t.shape[..]);
        if !ok {
            return Err(AeroError::shape(format!(
                "temperature {:?} does not broadcast over rows of {:?}",
                t.shape, x.shape
            )));
        }
    }
    if let Some(m) = mask {
        let n = x.ndim();
        if m.ndim() != 2 || n < 2 || m.shape[..] != x.shape[n - 2..] {
            return Err(AeroError::shape(format!(
                "mask {:?} does not match trailing dims of {:?}",
                m.shape, x.shape
            )));
        }
    }
    Ok(())
}

/// Row-wise softmax of `x / t` plus an additive `{0, -inf}` mask.
///
/// `temperature` broadcasts as a suffix of the row dimensions (`[H, T]` for
/// scores of shape `[B, H, T, T]`). Masked entries come out as exactly zero.
pub fn softmax_rows(x: &Tensor, temperature: Option<&Tensor>, mask: Option<&Tensor>) -> Result<Tensor> {
    check_softmax_args(x, temperature, mask)?;
    let mut out = vec![0.0; x.numel()];
    softmax_rows_into(x, temperature.map(|t| t.data()), mask, &mut out)?;
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_rows_into(
    x: &Tensor,
    temperature: Option<&[f64]>,
    mask: Option<&Tensor>,
    out: &mut [f64],
) -> Result<()> {
    let cols = x.last_dim();
    let rows = x.rows();
    let mask_rows = mask.map(|m| m.shape[0]).unwrap_or(1);
    for r in 0..rows {
        let t = match temperature {
            Some(t) => t[r % t.len()],
            None => 1.0,
        };
        if !(t > 0.0) {
            return Err(AeroError::Numeric(format!("non-positive temperature {t} at row {r}")));
        }
        let xr = &x.data[r * cols..(r + 1) * cols];
        let yr = &mut out[r * cols..(r + 1) * cols];
        let mrow = mask.map(|m| &m.data[(r % mask_rows) * cols..(r % mask_rows + 1) * cols]);
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            let s = xr[j] / t + mrow.map_or(0.0, |m| m[j]);
            yr[j] = s;
            if s > max {
                max = s;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(AeroError::Numeric(format!("softmax row {r} is fully masked")));
        }
        let mut sum = 0.0;
        for v in yr.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in yr.iter_mut() {
            *v /= sum;
        }
    }
    Ok(())
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Per-row LayerNorm over the last axis followed by the affine `gain`/`bias`.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if d < 2 || gain.numel() != d || bias.numel() != d {
        return Err(AeroError::shape(format!(
            "layernorm of {:?} with gain {:?} and bias {:?}",
            x.shape, gain.shape, bias.shape
        )));
    }
    let mut out = vec![0.0; x.numel()];
    for (xr, yr) in x.data.chunks(d).zip(out.chunks_mut(d)) {
        let (mean, rstd) = row_moments(xr, eps);
        for j in 0..d {
            yr[j] = (xr[j] - mean) * rstd * gain.data[j] + bias.data[j];
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Elementwise activation kinds used by the FFN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Gelu,
    Relu,
    LeakyRelu(f64),
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let data = x.data.iter().map(|&v| kind.apply(v)).collect();
    Tensor { shape: x.shape.clone(), data, grad: None, requires_grad: false }
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let v = logits.last_dim();
    if logits.rows() != targets.len() {
        return Err(AeroError::shape(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape
        )));
    }
    let mut total = 0.0;
    for (row, &t) in logits.data.chunks(v).zip(targets) {
        if t >= v {
            return Err(AeroError::Index(format!("target {t} outside vocabulary of {v}")));
        }
        total += log_sum_exp(row) - row[t];
    }
    Ok(total / targets.len() as f64)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of `softplus` for positive arguments.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_oracle() {
        let m = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap().data(), m.data());
        assert_eq!(matmul(&m, &Tensor::eye(2)).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive(&a, &b)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(AeroError::Shape(_))));
    }

    #[test]
    fn gemm_transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let at = transpose(&a).unwrap();
        let bt = transpose(&b).unwrap();
        let expect = naive(&a, &b);
        let mut out = vec![0.0; 15];
        gemm(3, 4, 5, at.data(), true, bt.data(), true, &mut out, false);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    fn row_entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
    }

    #[test]
    fn softmax_symmetry_and_limits() {
        let x = Tensor::new(&[1, 4], vec![2.5; 4]).unwrap();
        let y = softmax_rows(&x, Some(&Tensor::scalar(7.0)), None).unwrap();
        for v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let x = Tensor::new(&[1, 4], vec![5.0, 1.0, 1.0, 1.0]).unwrap();
        let hot = softmax_rows(&x, Some(&Tensor::scalar(1e6)), None).unwrap();
        assert!((row_entropy(hot.data()) - 4f64.ln()).abs() < 1e-9);
        let cold = softmax_rows(&x, Some(&Tensor::scalar(1e-6)), None).unwrap();
        assert_eq!(cold.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(row_entropy(cold.data()) < 1e-12);
    }

    #[test]
    fn softmax_causal_mask_zeroes_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 5, 5], 3.0, &mut rng);
        let y = softmax_rows(&x, None, Some(&causal_mask(5))).unwrap();
        for b in 0..2 {
            for i in 0..5 {
                let row = &y.data()[(b * 5 + i) * 5..(b * 5 + i + 1) * 5];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in (i + 1)..5 {
                    assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn softmax_errors() {
        let x = Tensor::zeros(&[2, 2]);
        let mut m = Tensor::zeros(&[2, 2]);
        m.data_mut()[0] = f64::NEG_INFINITY;
        m.data_mut()[1] = f64::NEG_INFINITY;
        assert!(softmax_rows(&x, None, Some(&m)).is_err());
        assert!(softmax_rows(&x, Some(&Tensor::scalar(0.0)), None).is_err());
        assert!(softmax_rows(&x, Some(&Tensor::zeros(&[3])), None).is_err());
    }

    #[test]
    fn layernorm_cases() {
        let g = Tensor::ones(&[4]);
        let b = Tensor::zeros(&[4]);
        // Zero-mean unit-variance row: exact up to the eps in the denominator.
        let s = 2f64.sqrt();
        let x = Tensor::new(&[1, 4], vec![s, -s, 0.0, 0.0]).unwrap();
        let y = layernorm(&x, &g, &b, 1e-15).unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-9);
        let y = layernorm(&x, &g, &b, LAYERNORM_EPS).unwrap();
        let scale = 1.0 / (1.0 + LAYERNORM_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() <= 1e-12);
        }

        let c = Tensor::new(&[1, 4], vec![3.0; 4]).unwrap();
        assert!(layernorm(&c, &g, &b, LAYERNORM_EPS).unwrap().data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[6, 32], 2.0, &mut rng);
        let y = layernorm(&x, &g_n(32), &Tensor::zeros(&[32]), 1e-15).unwrap();
        for row in y.data().chunks(32) {
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    fn g_n(n: usize) -> Tensor {
        Tensor::ones(&[n])
    }

    #[test]
    fn activation_cases() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::new(&[2], vec![-2.0, 3.0]).unwrap();
        let y = activation(&x, Activation::LeakyRelu(0.0));
        assert_eq!(y.data()[0].abs(), 0.0);
        assert_eq!(y.data()[1], 3.0);
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(20.0) - 20.0).abs() < 1e-12);
        assert!(gelu(-20.0).abs() < 1e-12);
        assert_eq!(activation(&x, Activation::Identity), x);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::zeros(&[3, 50]);
        assert!((cross_entropy(&uniform, &[0, 7, 49]).unwrap() - 50f64.ln()).abs() < 1e-12);

        let mut confident = Tensor::zeros(&[1, 5]);
        confident.data_mut()[2] = 60.0;
        assert!(cross_entropy(&confident, &[2]).unwrap() < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::randn(&[4, 6], 2.0, &mut rng);
        let targets = [0, 5, 2, 3];
        let mut direct = 0.0;
        for (row, &t) in logits.data().chunks(6).zip(&targets) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            direct -= (row[t].exp() / z).ln();
        }
        direct /= 4.0;
        assert!((cross_entropy(&logits, &targets).unwrap() - direct).abs() <= 1e-10);

        assert!(matches!(cross_entropy(&uniform, &[0, 1, 50]), Err(AeroError::Index(_))));
    }

    #[test]
    fn softplus_roundtrip() {
        for y in [1e-4, 1e-2, 0.5, 1.0, 3.0, 40.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }
}
