//! Attention, FFN and block forward passes on the tape.

use crate::autodiff::{Tape, Var};
use crate::config::{FfnActivation, ModelConfig, Stabilizer, TEMPERATURE_FLOOR};
use crate::error::{AeroError, Result};
use crate::model::params::{Bound, ParamId};
use crate::tensor::{causal_mask, Activation, LAYERNORM_EPS};

/// Lower bound on `|alpha|` in the scaled FFN.
pub const ALPHA_MIN_ABS: f64 = 1e-6;

/// Power-iteration vectors for one spectrally normalized weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub param: ParamId,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// How a linear weight's effective matrix is formed from parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LinearWeight {
    Plain(ParamId),
    /// Direction `v: [in, out]` and per-column scale `g: [out]`.
    WeightNorm { v: ParamId, g: ParamId },
    /// Raw weight divided by its power-iteration spectral estimate.
    Spectral { w: ParamId, slot: usize },
}

impl LinearWeight {
    pub fn effective(&self, tape: &mut Tape, bound: &Bound, spectral: &[SpectralState]) -> Result<Var> {
        match *self {
            LinearWeight::Plain(id) => Ok(bound[id]),
            LinearWeight::WeightNorm { v, g } => tape.weight_norm(bound[v], bound[g]),
            LinearWeight::Spectral { w, slot } => {
                let s = &spectral[slot];
                tape.spectral_norm(bound[w], &s.u, &s.v)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: LinearWeight,
    pub wk: LinearWeight,
    pub wv: LinearWeight,
    pub wo: LinearWeight,
    /// `[H, T_max]` unconstrained; effective `t = softplus(raw) + 1e-4`.
    pub raw_temperature: Option<ParamId>,
    /// `[H]` learnable threshold weights for the entropy regularizer.
    pub reg_threshold_weights: ParamId,
}

#[derive(Clone, Debug)]
pub enum FfnParams {
    Standard { w_in: LinearWeight, w_out: LinearWeight },
    Fused { w: LinearWeight },
    Identity,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1: Option<(ParamId, ParamId)>,
    pub ln2: Option<(ParamId, ParamId)>,
    pub attn: AttentionParams,
    pub ffn: FfnParams,
    /// `(alpha, beta)` of the scaled FFN.
    pub scaling: Option<(ParamId, ParamId)>,
    pub leaky_slope: Option<ParamId>,
}

/// Everything the forward functions need besides the tape.
pub struct Ctx<'a> {
    pub cfg: &'a ModelConfig,
    pub bound: &'a Bound,
    pub spectral: &'a [SpectralState],
}

/// Multi-head causal self-attention on `x: [B, T, d]`.
///
/// Returns the projected output `[B, T, d]` and the attention map `[B, H, T, T]`.
pub fn attention_forward(tape: &mut Tape, x: Var, p: &AttentionParams, ctx: &Ctx) -> Result<(Var, Var)> {
    let cfg = ctx.cfg;
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(AeroError::shape(format!("attention input {shape:?}, expected [B, T, {}]", cfg.d_model)));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if t > cfg.max_context {
        return Err(AeroError::config(
            "max_context",
            format!("sequence of {t} tokens exceeds the maximum context {}", cfg.max_context),
        ));
    }
    let (h, dk) = (cfg.n_heads, cfg.head_dim());

    let heads = |tape: &mut Tape, w: &LinearWeight| -> Result<Var> {
        let w = w.effective(tape, ctx.bound, ctx.spectral)?;
        let y = tape.matmul(x, w, false)?;
        let y = tape.reshape(y, &[b, t, h, dk])?;
        tape.swap_axes12(y)
    };
    let q = heads(tape, &p.wq)?;
    let k = heads(tape, &p.wk)?;
    let v = heads(tape, &p.wv)?;

    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
    let temp = match p.raw_temperature {
        Some(id) => {
            let raw = tape.slice_last(ctx.bound[id], t)?;
            let sp = tape.softplus(raw);
            Some(tape.add_const(sp, TEMPERATURE_FLOOR))
        }
        None => None,
    };
    let attn = tape.softmax_rows(scores, temp, Some(&causal_mask(t)))?;
    let ctx_v = tape.batch_matmul(attn, v, false)?;
    let merged = tape.swap_axes12(ctx_v)?;
    let merged = tape.reshape(merged, &[b, t, d])?;
    let wo = p.wo.effective(tape, ctx.bound, ctx.spectral)?;
    let out = tape.matmul(merged, wo, false)?;
    Ok((out, attn))
}

/// Position-wise FFN for one layer.
pub fn ffn_forward(tape: &mut Tape, x: Var, layer: &LayerParams, ctx: &Ctx) -> Result<Var> {
    match &layer.ffn {
        FfnParams::Identity => Ok(x),
        FfnParams::Fused { w } => {
            let w = w.effective(tape, ctx.bound, ctx.spectral)?;
            tape.matmul(x, w, false)
        }
        FfnParams::Standard { w_in, w_out } => {
            let w1 = w_in.effective(tape, ctx.bound, ctx.spectral)?;
            let hidden = tape.matmul(x, w1, false)?;
            let act = match (ctx.cfg.nonlinearity.activation(), layer.leaky_slope) {
                (FfnActivation::Relu, Some(slope)) => tape.leaky_relu(hidden, ctx.bound[slope])?,
                (FfnActivation::Relu, None) => tape.activation(hidden, Activation::Relu),
                (FfnActivation::Gelu, _) => tape.activation(hidden, Activation::Gelu),
                (FfnActivation::None, _) => hidden,
            };
            let w2 = w_out.effective(tape, ctx.bound, ctx.spectral)?;
            tape.matmul(act, w2, false)
        }
    }
}

fn maybe_layernorm(tape: &mut Tape, x: Var, ln: Option<(ParamId, ParamId)>, bound: &Bound) -> Result<Var> {
    match ln {
        Some((g, b)) => tape.layernorm(x, bound[g], bound[b], LAYERNORM_EPS),
        None => Ok(x),
    }
}

/// One Pre-LN block (LayerNorm replaced by identity in LN-free configs).
///
/// `X_sa = X + MHA(LN1(X))`, then either `X_sa + FFN(LN2(X_sa))` or, with
/// learnable scaling, `beta * X_sa + FFN(LN2(X_sa)) / alpha`.
pub fn block_forward(tape: &mut Tape, x: Var, layer: &LayerParams, ctx: &Ctx) -> Result<(Var, Var)> {
    let a_in = maybe_layernorm(tape, x, layer.ln1, ctx.bound)?;
    let (attn_out, attn) = attention_forward(tape, a_in, &layer.attn, ctx)?;
    let x_sa = tape.add(x, attn_out)?;
    let f_in = maybe_layernorm(tape, x_sa, layer.ln2, ctx.bound)?;
    let f_out = ffn_forward(tape, f_in, layer, ctx)?;
    let out = match layer.scaling {
        Some((alpha, beta)) if ctx.cfg.stabilizer == Stabilizer::LearnableScaling => {
            let res = tape.mul_scalar(x_sa, ctx.bound[beta])?;
            let scaled = tape.div_scalar(f_out, ctx.bound[alpha], ALPHA_MIN_ABS)?;
            tape.add(res, scaled)?
        }
        _ => tape.add(x_sa, f_out)?,
    };
    Ok((out, attn))
}
