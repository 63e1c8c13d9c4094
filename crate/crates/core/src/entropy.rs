//! Headwise attention entropy, the thresholded entropy regularizer and
//! entropy snapshots used for heatmaps.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, ENTROPY_EPS};
use crate::error::{AeroError, Result};
use crate::model::ForwardTrace;
use crate::tensor::Tensor;

/// How per-position entropies are reduced before thresholding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMode {
    /// Penalize every (batch, query position) entropy separately, then sum.
    PerPosition,
    /// Average over query positions first, penalize one value per (batch, head).
    PerHeadMean,
}

impl RegMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RegMode::PerPosition => "per_position",
            RegMode::PerHeadMean => "per_head_mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_position" => Some(RegMode::PerPosition),
            "per_head_mean" => Some(RegMode::PerHeadMean),
            _ => None,
        }
    }
}

/// Tolerance fraction used by the reference listing.
pub const LISTING_GAMMA: f64 = 0.10;

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyRegConfig {
    pub enabled: bool,
    /// Weight of the regularizer in the total loss.
    pub lambda: f64,
    /// Dead-zone half-width as a fraction of `ln T`.
    pub gamma: f64,
    /// Initial value of every learnable threshold weight.
    pub theta_init: f64,
    pub mode: RegMode,
}

impl Default for EntropyRegConfig {
    fn default() -> Self {
        EntropyRegConfig { enabled: false, lambda: 1e-5, gamma: 0.2, theta_init: 0.5, mode: RegMode::PerPosition }
    }
}

impl EntropyRegConfig {
    /// Short-context preset (`lambda = 1e-5`).
    pub fn short_context() -> Self {
        EntropyRegConfig { enabled: true, ..Default::default() }
    }

    /// Long-context preset (`lambda = 5e-5`).
    pub fn long_context() -> Self {
        EntropyRegConfig { enabled: true, lambda: 5e-5, ..Default::default() }
    }

    /// The tolerance used by the reference listing instead of the tuned 0.2.
    pub fn listing_tolerance(mut self) -> Self {
        self.gamma = LISTING_GAMMA;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(AeroError::config("entropy_reg.gamma", format!("{} is outside [0, 1)", self.gamma)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(AeroError::config("entropy_reg.lambda", format!("{} must be finite and >= 0", self.lambda)));
        }
        if !self.theta_init.is_finite() {
            return Err(AeroError::config("entropy_reg.theta_init", "must be finite"));
        }
        Ok(())
    }

    /// `ln T`, the entropy of a uniform distribution over `T` positions.
    pub fn max_entropy(t: usize) -> f64 {
        (t as f64).ln()
    }
}

fn row_entropy(row: &[f64]) -> f64 {
    let h = -row.iter().map(|&p| p * (p + ENTROPY_EPS).ln()).sum::<f64>();
    h.max(0.0)
}

pub(crate) fn row_entropy_tensor(a: &Tensor) -> Tensor {
    let cols = a.last_dim();
    let data = a.data().chunks(cols).map(row_entropy).collect();
    let shape = &a.shape()[..a.ndim() - 1];
    Tensor::new(shape, data).expect("row count matches")
}

/// Entropy of every attention row: `[B, H, T, T] -> [B, H, T]`.
pub fn headwise_entropy(attn: &Tensor) -> Result<Tensor> {
    if attn.ndim() != 4 {
        return Err(AeroError::shape(format!("attention of shape {:?}, expected [B, H, T, T]", attn.shape())));
    }
    Ok(row_entropy_tensor(attn))
}

/// Mean over batch and query positions: `[B, H, T] -> [H]`.
pub fn mean_head_entropy(e: &Tensor) -> Result<Tensor> {
    if e.ndim() != 3 {
        return Err(AeroError::shape(format!("entropies of shape {:?}, expected [B, H, T]", e.shape())));
    }
    let (b, h, t) = (e.shape()[0], e.shape()[1], e.shape()[2]);
    let mut out = vec![0.0; h];
    for bi in 0..b {
        for (hi, o) in out.iter_mut().enumerate() {
            let start = (bi * h + hi) * t;
            *o += e.data()[start..start + t].iter().sum::<f64>();
        }
    }
    let n = (b * t) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Tensor::new(&[h], out)
}

fn thresholded_square(dev: f64, margin: f64) -> f64 {
    if dev.abs() > margin {
        dev * dev
    } else {
        0.0
    }
}

pub(crate) fn penalty_forward(e: &Tensor, theta: &[f64], e_max: f64, margin: f64, mode: RegMode) -> f64 {
    let (b, h, t) = (e.shape()[0], e.shape()[1], e.shape()[2]);
    let mut total = 0.0;
    for (hi, th) in theta.iter().enumerate() {
        let threshold = th * e_max;
        let mut head = 0.0;
        for bi in 0..b {
            let row = &e.data()[(bi * h + hi) * t..(bi * h + hi + 1) * t];
            match mode {
                RegMode::PerPosition => {
                    head += row.iter().map(|&v| thresholded_square(v - threshold, margin)).sum::<f64>();
                }
                RegMode::PerHeadMean => {
                    let mean = row.iter().sum::<f64>() / t as f64;
                    head += thresholded_square(mean - threshold, margin);
                }
            }
        }
        total += head;
    }
    total / h as f64
}

pub(crate) fn penalty_backward(
    e: &Tensor,
    theta: &[f64],
    e_max: f64,
    margin: f64,
    mode: RegMode,
    upstream: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (b, h, t) = (e.shape()[0], e.shape()[1], e.shape()[2]);
    let scale = upstream / h as f64;
    let mut de = vec![0.0; e.numel()];
    let mut dtheta = vec![0.0; h];
    for (hi, th) in theta.iter().enumerate() {
        let threshold = th * e_max;
        for bi in 0..b {
            let start = (bi * h + hi) * t;
            let row = &e.data()[start..start + t];
            match mode {
                RegMode::PerPosition => {
                    for (i, &v) in row.iter().enumerate() {
                        let dev = v - threshold;
                        if dev.abs() > margin {
                            let d = 2.0 * dev * scale;
                            de[start + i] = d;
                            dtheta[hi] -= d * e_max;
                        }
                    }
                }
                RegMode::PerHeadMean => {
                    let dev = row.iter().sum::<f64>() / t as f64 - threshold;
                    if dev.abs() > margin {
                        let d = 2.0 * dev * scale;
                        de[start..start + t].iter_mut().for_each(|x| *x = d / t as f64);
                        dtheta[hi] -= d * e_max;
                    }
                }
            }
        }
    }
    (de, dtheta)
}

/// Entropy regularization over all layers' attention maps.
///
/// Each layer contributes its head-averaged penalty; the result is the mean
/// over layers. `thresholds[l]` holds the `H` learnable threshold weights of
/// layer `l`. Gradients flow into the attention maps (and therefore into
/// temperatures and projections) and into the thresholds.
pub fn entropy_reg_loss(
    tape: &mut Tape,
    attentions: &[Var],
    thresholds: &[Var],
    cfg: &EntropyRegConfig,
    context_len: usize,
) -> Result<Var> {
    if attentions.len() != thresholds.len() {
        return Err(AeroError::shape(format!(
            "{} attention maps but {} threshold vectors",
            attentions.len(),
            thresholds.len()
        )));
    }
    if attentions.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let e_max = EntropyRegConfig::max_entropy(context_len);
    let margin = cfg.gamma * e_max;
    let mut total: Option<Var> = None;
    for (&attn, &theta) in attentions.iter().zip(thresholds) {
        let heads = tape.shape(attn).get(1).copied().unwrap_or(0);
        if tape.value(theta).numel() != heads {
            return Err(AeroError::shape(format!(
                "{} threshold weights for {heads} heads",
                tape.value(theta).numel()
            )));
        }
        let e = tape.entropy(attn)?;
        let layer = tape.entropy_penalty(e, theta, e_max, margin, cfg.mode)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, layer)?,
            None => layer,
        });
    }
    let total = total.expect("at least one layer");
    Ok(tape.scale(total, 1.0 / attentions.len() as f64))
}

/// `ce + lambda * reg`; with `lambda == 0` the regularizer is left out of the graph.
pub fn total_loss(tape: &mut Tape, ce: Var, reg: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(ce);
    }
    let weighted = tape.scale(reg, lambda);
    tape.add(ce, weighted)
}

pub fn total_loss_value(ce: f64, reg: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        ce
    } else {
        ce + lambda * reg
    }
}

/// Per-head mean entropies of one forward pass, with the three-range histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropySnapshot {
    pub step: usize,
    pub context_len: usize,
    /// `[layer][head]` mean entropy over batch and query positions.
    pub head_means: Vec<Vec<f64>>,
    /// Largest head mean in this snapshot.
    pub observed_max: f64,
    /// Counts in `[0, max/4)`, `[max/4, 3max/4)`, `[3max/4, max]` with `max = observed_max`.
    pub buckets: [usize; 3],
    /// Same ranges with `max = ln T`.
    pub buckets_log_t: [usize; 3],
}

/// Assigns each value to one of the three entropy ranges relative to `max`.
///
/// When `max` is (numerically) zero every head has collapsed and all values
/// land in the lowest range.
pub fn bucket_counts<'a>(values: impl IntoIterator<Item = &'a f64>, max: f64) -> [usize; 3] {
    let mut counts = [0; 3];
    for &v in values {
        let idx = if max <= 1e-12 || v < max / 4.0 {
            0
        } else if v < 3.0 * max / 4.0 {
            1
        } else {
            2
        };
        counts[idx] += 1;
    }
    counts
}

impl EntropySnapshot {
    pub fn from_head_means(step: usize, context_len: usize, head_means: Vec<Vec<f64>>) -> Self {
        let observed_max = head_means.iter().flatten().cloned().fold(0.0f64, f64::max);
        let buckets = bucket_counts(head_means.iter().flatten(), observed_max);
        let buckets_log_t = bucket_counts(head_means.iter().flatten(), EntropyRegConfig::max_entropy(context_len));
        EntropySnapshot { step, context_len, head_means, observed_max, buckets, buckets_log_t }
    }

    pub fn num_heads(&self) -> usize {
        self.head_means.iter().map(Vec::len).sum()
    }

    /// Fraction of heads whose mean entropy exceeds `fraction * ln T`.
    pub fn fraction_above(&self, fraction: f64) -> f64 {
        let cut = fraction * EntropyRegConfig::max_entropy(self.context_len);
        let n = self.num_heads();
        if n == 0 {
            return 0.0;
        }
        self.head_means.iter().flatten().filter(|&&v| v > cut).count() as f64 / n as f64
    }
}

/// Builds a snapshot from a trace captured with attention maps.
pub fn snapshot(trace: &ForwardTrace, step: usize) -> Result<EntropySnapshot> {
    if trace.attentions.is_empty() {
        return Err(AeroError::Usage("trace was captured without attention maps".into()));
    }
    let mut head_means = Vec::with_capacity(trace.attentions.len());
    let mut context_len = 0;
    for attn in &trace.attentions {
        context_len = attn.shape().get(2).copied().unwrap_or(0);
        let e = headwise_entropy(attn)?;
        head_means.push(mean_head_entropy(&e)?.into_data());
    }
    Ok(EntropySnapshot::from_head_means(step, context_len, head_means))
}
