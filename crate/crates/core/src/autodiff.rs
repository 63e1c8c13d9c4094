//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] replays
//! the nodes in reverse order and accumulates gradients into every node that
//! depends on a parameter leaf. A fresh tape is used for every training step.

use crate::entropy::{penalty_backward, penalty_forward, RegMode};
use crate::error::{AeroError, Result};
use crate::tensor::{
    self, check_softmax_args, gemm, log_sum_exp, row_moments, sigmoid, softmax_rows_into, softplus,
    Activation, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive guard inside `log` when measuring attention entropy.
pub const ENTROPY_EPS: f64 = 1e-9;

/// Guard on the column norm in weight normalization.
pub const WEIGHT_NORM_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddConst { x: Var },
    MulScalar { x: Var, s: Var },
    DivScalar { x: Var, s: Var, min_abs: f64 },
    Reshape { x: Var },
    SwapAxes12 { x: Var },
    SliceLast { x: Var },
    AddLeadingRows { x: Var, rows: Var },
    Softmax { x: Var, temp: Option<Var> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Act { x: Var, kind: Activation },
    LeakyRelu { x: Var, slope: Var },
    Softplus { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Entropy { a: Var },
    EntropyPenalty { e: Var, theta: Var, e_max: f64, margin: f64, mode: RegMode },
    Sum { x: Var },
    Mean { x: Var },
    WeightNorm { v: Var, g: Var, norms: Vec<f64> },
    SpectralNorm { w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last [`Tape::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient when it is reachable from the loss.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf whose gradient flag follows `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let ng = value.requires_grad();
        self.push(value, Op::Leaf, ng)
    }

    /// `a: [.., m, k]` times a shared `b: [k, n]` (or `[n, k]` when `trans_b`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.ndim() != 2 || av.ndim() < 1 {
            return Err(AeroError::shape(format!("matmul of {:?} and {:?}", av.shape(), bv.shape())));
        }
        let (bk, n) = if trans_b { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        let k = av.last_dim();
        if k != bk {
            return Err(AeroError::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let m = av.rows();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, ng))
    }

    /// Batched product over matching leading dims: `[.., m, k] x [.., k, n]`
    /// (or `[.., n, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (na, nb) = (av.ndim(), bv.ndim());
        if na < 2 || na != nb || av.shape()[..na - 2] != bv.shape()[..nb - 2] {
            return Err(AeroError::shape(format!(
                "batch_matmul of {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k) = (av.shape()[na - 2], av.shape()[na - 1]);
        let (bk, n) = if trans_b {
            (bv.shape()[nb - 1], bv.shape()[nb - 2])
        } else {
            (bv.shape()[nb - 2], bv.shape()[nb - 1])
        };
        if k != bk {
            return Err(AeroError::shape(format!(
                "batch_matmul inner dimensions differ: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let batch: usize = av.shape()[..na - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = av.shape().to_vec();
        shape[na - 1] = n;
        let value = Tensor::new(&shape, out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AeroError::shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale { x, factor }, ng)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v + c).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(value, Op::AddConst { x }, ng)
    }

    fn scalar_of(&self, s: Var) -> Result<f64> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(AeroError::shape(format!("expected a scalar, got {:?}", sv.shape())));
        }
        Ok(sv.item())
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of(s)?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * sv).collect();
        let value = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(&[x, s]);
        Ok(self.push(value, Op::MulScalar { x, s }, ng))
    }

    /// `x / s` for a one-element `s`, with `|s|` held at or above `min_abs`.
    pub fn div_scalar(&mut self, x: Var, s: Var, min_abs: f64) -> Result<Var> {
        let c = clamp_away_from_zero(self.scalar_of(s)?, min_abs);
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v / c).collect();
        let value = Tensor::new(xv.shape(), data)?;
        let ng = self.ng(&[x, s]);
        Ok(self.push(value, Op::DivScalar { x, s, min_abs }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Reshape { x }, ng))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(AeroError::shape(format!("swap_axes12 of {:?}", xv.shape())));
        }
        let s = xv.shape();
        let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
        let out = swap12(xv.data(), a, b, c, d);
        let value = Tensor::new(&[a, c, b, d], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::SwapAxes12 { x }, ng))
    }

    /// Keeps the first `len` entries of the last axis.
    pub fn slice_last(&mut self, x: Var, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if len > n {
            return Err(AeroError::shape(format!("slice of {len} from last dim of {:?}", xv.shape())));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(n) {
            out.extend_from_slice(&row[..len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::SliceLast { x }, ng))
    }

    /// `x: [.., T, d]` plus the first `T` rows of `rows: [R, d]`, broadcast over
    /// the leading dims.
    pub fn add_leading_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(rows));
        let n = xv.ndim();
        if n < 2 || rv.ndim() != 2 || rv.shape()[1] != xv.shape()[n - 1] || rv.shape()[0] < xv.shape()[n - 2] {
            return Err(AeroError::shape(format!(
                "add_leading_rows of {:?} and {:?}",
                xv.shape(),
                rv.shape()
            )));
        }
        let block = xv.shape()[n - 2] * xv.shape()[n - 1];
        let r = &rv.data()[..block];
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(block) {
            for (o, p) in chunk.iter_mut().zip(r) {
                *o += p;
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(&[x, rows]);
        Ok(self.push(value, Op::AddLeadingRows { x, rows }, ng))
    }

    /// Row-wise softmax of `x / temp` plus an optional additive `{0, -inf}` mask.
    pub fn softmax_rows(&mut self, x: Var, temp: Option<Var>, mask: Option<&Tensor>) -> Result<Var> {
        let xv = self.value(x);
        check_softmax_args(xv, temp.map(|t| self.value(t)), mask)?;
        let mut out = vec![0.0; xv.numel()];
        softmax_rows_into(xv, temp.map(|t| self.value(t).data()), mask, &mut out)?;
        let value = Tensor::new(xv.shape(), out)?;
        let mut inputs = vec![x];
        inputs.extend(temp);
        let ng = self.ng(&inputs);
        Ok(self.push(value, Op::Softmax { x, temp }, ng))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d < 2 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(AeroError::shape(format!("layernorm of {:?}", xv.shape())));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let xr = &xv.data()[r * d..(r + 1) * d];
            let (mean, rs) = row_moments(xr, eps);
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = tensor::activation(self.value(x), kind);
        let ng = self.ng(&[x]);
        self.push(value, Op::Act { x, kind }, ng)
    }

    /// Leaky ReLU whose negative slope is the one-element `slope` node.
    pub fn leaky_relu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let s = self.scalar_of(slope)?;
        let value = tensor::activation(self.value(x), Activation::LeakyRelu(s));
        let ng = self.ng(&[x, slope]);
        Ok(self.push(value, Op::LeakyRelu { x, slope }, ng))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| softplus(v)).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(value, Op::Softplus { x }, ng)
    }

    /// Gathers rows of `table: [V, d]`; the output has shape `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(AeroError::shape(format!("embedding of {:?} from {:?}", ids_shape, tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(AeroError::Index(format!("token {id} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(&shape, out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Mean token-level negative log-likelihood; returns a one-element node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let loss = tensor::cross_entropy(self.value(logits), targets)?;
        let ng = self.ng(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec() }, ng))
    }

    /// Row entropy `-sum_j a_j ln(a_j + 1e-9)` over the last axis, floored at 0.
    pub fn entropy(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() < 2 {
            return Err(AeroError::shape(format!("entropy of {:?}", av.shape())));
        }
        let value = crate::entropy::row_entropy_tensor(av);
        let ng = self.ng(&[a]);
        Ok(self.push(value, Op::Entropy { a }, ng))
    }

    /// Thresholded squared deviation of headwise entropies `e: [B, H, T]` from
    /// `theta[h] * e_max`, summed and averaged over heads.
    pub fn entropy_penalty(&mut self, e: Var, theta: Var, e_max: f64, margin: f64, mode: RegMode) -> Result<Var> {
        let (ev, tv) = (self.value(e), self.value(theta));
        if ev.ndim() != 3 || tv.numel() != ev.shape()[1] {
            return Err(AeroError::shape(format!(
                "entropy penalty of {:?} with thresholds {:?}",
                ev.shape(),
                tv.shape()
            )));
        }
        let loss = penalty_forward(ev, tv.data(), e_max, margin, mode);
        let ng = self.ng(&[e, theta]);
        Ok(self.push(Tensor::scalar(loss), Op::EntropyPenalty { e, theta, e_max, margin, mode }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, ng)
    }

    /// Column-wise weight normalization of `v: [in, out]` with scales `g: [out]`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let (vv, gv) = (self.value(v), self.value(g));
        if vv.ndim() != 2 || gv.numel() != vv.shape()[1] {
            return Err(AeroError::shape(format!("weight_norm of {:?} with g {:?}", vv.shape(), gv.shape())));
        }
        let (w, norms) = crate::model::norm::weight_norm_forward(vv, gv.data());
        let ng = self.ng(&[v, g]);
        Ok(self.push(w, Op::WeightNorm { v, g, norms }, ng))
    }

    /// `w / (uᵀ w v)` with the power-iteration vectors held constant.
    pub fn spectral_norm(&mut self, w: Var, u: &[f64], v: &[f64]) -> Result<Var> {
        let wv = self.value(w);
        if wv.ndim() != 2 || wv.shape()[0] != u.len() || wv.shape()[1] != v.len() {
            return Err(AeroError::shape(format!("spectral_norm of {:?}", wv.shape())));
        }
        let sigma = crate::model::norm::bilinear(wv, u, v);
        if !(sigma.abs() > 0.0) {
            return Err(AeroError::Numeric(format!("spectral estimate {sigma} is not usable")));
        }
        let data = wv.data().iter().map(|x| x / sigma).collect();
        let value = Tensor::new(wv.shape(), data)?;
        let ng = self.ng(&[w]);
        Ok(self.push(value, Op::SpectralNorm { w, u: u.to_vec(), v: v.to_vec(), sigma }, ng))
    }

    /// Reverse pass from a one-element `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| AeroError::Usage(format!("{loss:?} is not on this tape")))?;
        if node.value.numel() != 1 {
            return Err(AeroError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.needs_grad {
            return Err(AeroError::Usage("backward on a tensor detached from every parameter".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let mut acc = Accumulator { nodes: &self.nodes, grads: &mut self.grads };
            acc.backprop(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn clamp_away_from_zero(x: f64, min_abs: f64) -> f64 {
    if x.abs() >= min_abs {
        x
    } else if x < 0.0 {
        -min_abs
    } else {
        min_abs
    }
}

fn swap12(data: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> Accumulator<'a> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    fn add(&mut self, v: Var, delta: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop(&mut self, i: usize, g: &[f64]) {
        let nodes = self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (av, bv) = (self.val(a), self.val(b));
                let k = av.last_dim();
                let m = av.rows();
                let n = out.last_dim();
                if self.wants(a) {
                    // dA = G · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bv.data(), !trans_b, &mut da, false);
                    self.add(a, da);
                }
                if self.wants(b) {
                    let db = if trans_b {
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, g, true, av.data(), false, &mut db, false);
                        db
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av.data(), true, g, false, &mut db, false);
                        db
                    };
                    self.add(b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (av, bv) = (self.val(a), self.val(b));
                let nd = av.ndim();
                let (m, k) = (av.shape()[nd - 2], av.shape()[nd - 1]);
                let n = out.last_dim();
                let batch = av.numel() / (m * k);
                if self.wants(a) {
                    let mut da = vec![0.0; av.numel()];
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            !trans_b,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            false,
                        );
                    }
                    self.add(a, da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; bv.numel()];
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let ds = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gs, true, as_, false, ds, false);
                        } else {
                            gemm(k, m, n, as_, true, gs, false, ds, false);
                        }
                    }
                    self.add(b, db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add(a, g.to_vec());
                self.add(b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let d = g.iter().zip(self.val(b).data()).map(|(x, y)| x * y).collect();
                    self.add(a, d);
                }
                if self.wants(b) {
                    let d = g.iter().zip(self.val(a).data()).map(|(x, y)| x * y).collect();
                    self.add(b, d);
                }
            }
            Op::Scale { x, factor } => {
                let (x, f) = (*x, *factor);
                self.add(x, g.iter().map(|v| v * f).collect());
            }
            Op::AddConst { x } | Op::Reshape { x } => {
                let x = *x;
                self.add(x, g.to_vec());
            }
            Op::MulScalar { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.val(s).item();
                if self.wants(s) {
                    let ds = g.iter().zip(self.val(x).data()).map(|(a, b)| a * b).sum();
                    self.add(s, vec![ds]);
                }
                self.add(x, g.iter().map(|v| v * sv).collect());
            }
            Op::DivScalar { x, s, min_abs } => {
                let (x, s) = (*x, *s);
                let raw = self.val(s).item();
                let c = clamp_away_from_zero(raw, *min_abs);
                if self.wants(s) && raw.abs() >= *min_abs {
                    let dot: f64 = g.iter().zip(self.val(x).data()).map(|(a, b)| a * b).sum();
                    self.add(s, vec![-dot / (c * c)]);
                }
                self.add(x, g.iter().map(|v| v / c).collect());
            }
            Op::SwapAxes12 { x } => {
                let x = *x;
                let s = out.shape();
                // out is [a, c, b, d]; swapping back yields [a, b, c, d].
                let d = swap12(g, s[0], s[1], s[2], s[3]);
                self.add(x, d);
            }
            Op::SliceLast { x } => {
                let x = *x;
                let n = self.val(x).last_dim();
                let len = out.last_dim();
                let mut d = vec![0.0; self.val(x).numel()];
                for (dr, gr) in d.chunks_mut(n).zip(g.chunks(len.max(1))) {
                    dr[..len].copy_from_slice(&gr[..len]);
                }
                self.add(x, d);
            }
            Op::AddLeadingRows { x, rows } => {
                let (x, rows) = (*x, *rows);
                if self.wants(rows) {
                    let s = out.shape();
                    let block = s[s.len() - 2] * s[s.len() - 1];
                    let mut d = vec![0.0; self.val(rows).numel()];
                    for chunk in g.chunks(block) {
                        for (o, v) in d[..block].iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.add(rows, d);
                }
                self.add(x, g.to_vec());
            }
            Op::Softmax { x, temp, .. } => {
                let (x, temp) = (*x, *temp);
                let xv = self.val(x);
                let cols = out.last_dim();
                let rows = out.rows();
                let tdata = temp.map(|t| self.val(t).data());
                let mut dx = vec![0.0; xv.numel()];
                let mut dt = tdata.map(|t| vec![0.0; t.len()]);
                for r in 0..rows {
                    let y = &out.data()[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xr = &xv.data()[r * cols..(r + 1) * cols];
                    let t = tdata.map_or(1.0, |t| t[r % t.len()]);
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    let mut tacc = 0.0;
                    for j in 0..cols {
                        if y[j] == 0.0 {
                            continue;
                        }
                        let ds = y[j] * (gr[j] - dot);
                        dx[r * cols + j] = ds / t;
                        tacc += ds * xr[j];
                    }
                    if let Some(dt) = dt.as_mut() {
                        let n = dt.len();
                        dt[r % n] -= tacc / (t * t);
                    }
                }
                self.add(x, dx);
                if let (Some(t), Some(dt)) = (temp, dt) {
                    self.add(t, dt);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = out.last_dim();
                let gv = self.val(gain).data();
                let mut dx = vec![0.0; out.numel()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                self.add(x, dx);
                self.add(gain, dg);
                self.add(bias, db);
            }
            Op::Act { x, kind } => {
                let (x, kind) = (*x, *kind);
                let d = g.iter().zip(self.val(x).data()).map(|(gi, &xi)| gi * kind.derivative(xi)).collect();
                self.add(x, d);
            }
            Op::LeakyRelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                let s = self.val(slope).item();
                let xv = self.val(x).data();
                if self.wants(slope) {
                    let ds = g.iter().zip(xv).filter(|(_, &xi)| xi <= 0.0).map(|(gi, xi)| gi * xi).sum();
                    self.add(slope, vec![ds]);
                }
                let d = g.iter().zip(xv).map(|(gi, &xi)| if xi > 0.0 { *gi } else { gi * s }).collect();
                self.add(x, d);
            }
            Op::Softplus { x } => {
                let x = *x;
                let d = g.iter().zip(self.val(x).data()).map(|(gi, &xi)| gi * sigmoid(xi)).collect();
                self.add(x, d);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if self.wants(table) {
                    let d = self.val(table).shape()[1];
                    let mut dt = vec![0.0; self.val(table).numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[row * d + j];
                        }
                    }
                    self.add(table, dt);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let lv = self.val(logits);
                let v = lv.last_dim();
                let scale = g[0] / targets.len() as f64;
                let mut d = vec![0.0; lv.numel()];
                for (r, (row, &t)) in lv.data().chunks(v).zip(targets).enumerate() {
                    let lse = log_sum_exp(row);
                    for j in 0..v {
                        d[r * v + j] = (row[j] - lse).exp() * scale;
                    }
                    d[r * v + t] -= scale;
                }
                self.add(logits, d);
            }
            Op::Entropy { a } => {
                let a = *a;
                let av = self.val(a);
                let cols = av.last_dim();
                let mut d = vec![0.0; av.numel()];
                for (r, gr) in g.iter().enumerate() {
                    if out.data()[r] <= 0.0 {
                        continue;
                    }
                    let row = &av.data()[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let p = row[j];
                        d[r * cols + j] = -gr * ((p + ENTROPY_EPS).ln() + p / (p + ENTROPY_EPS));
                    }
                }
                self.add(a, d);
            }
            Op::EntropyPenalty { e, theta, e_max, margin, mode } => {
                let (e, theta) = (*e, *theta);
                let (de, dtheta) =
                    penalty_backward(self.val(e), self.val(theta).data(), *e_max, *margin, *mode, g[0]);
                self.add(e, de);
                self.add(theta, dtheta);
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.val(x).numel();
                self.add(x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let x = *x;
                let n = self.val(x).numel();
                self.add(x, vec![g[0] / n as f64; n]);
            }
            Op::WeightNorm { v, g: gs, norms } => {
                let (v, gs) = (*v, *gs);
                let (dv, dg) = crate::model::norm::weight_norm_backward(self.val(v), self.val(gs).data(), norms, g);
                self.add(v, dv);
                self.add(gs, dg);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let w = *w;
                let wv = self.val(w);
                let cols = wv.shape()[1];
                let dot: f64 = g.iter().zip(wv.data()).map(|(a, b)| a * b).sum();
                let coef = dot / (sigma * sigma);
                let mut d = vec![0.0; wv.numel()];
                for (r, ur) in u.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] = g[r * cols + c] / sigma - coef * ur * v[c];
                    }
                }
                self.add(w, d);
            }
        }
    }
}
