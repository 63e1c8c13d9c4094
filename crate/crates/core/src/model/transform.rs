//! Offline structural transforms: FFN fusion and deepest-first FFN pruning.

use crate::config::{FfnActivation, FfnVariant, ModelConfig, Nonlinearity, Stabilizer};
use crate::error::{AeroError, Result};
use crate::model::{norm, FfnParams, LinearWeight, Model};
use crate::tensor::{matmul, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_no_activation(nonlinearity: Nonlinearity) -> Result<()> {
    if nonlinearity.activation() != FfnActivation::None {
        return Err(AeroError::InvalidTransform(format!(
            "activation present in {nonlinearity}: fusing the FFN layers would change the function"
        )));
    }
    Ok(())
}

/// Collapses `act(X W_in) W_out` into `X W` for configurations with no
/// activation between the two linear layers.
pub fn fuse_ffn_weights(nonlinearity: Nonlinearity, w_in: &Tensor, w_out: &Tensor) -> Result<Tensor> {
    check_no_activation(nonlinearity)?;
    if w_in.ndim() != 2 || w_out.ndim() != 2 || w_in.shape()[1] != w_out.shape()[0] {
        return Err(AeroError::shape(format!("cannot fuse {:?} with {:?}", w_in.shape(), w_out.shape())));
    }
    matmul(w_in, w_out)
}

/// Fuses every standard FFN of `model` into a single `d×d` matrix.
///
/// Weight-normalized FFNs keep their parameterization: the fused matrix
/// becomes the direction and its column norms the scales, so the effective
/// weight is unchanged. Spectral normalization cannot be carried over.
pub fn fuse_model(model: &Model) -> Result<Model> {
    let cfg = model.config();
    check_no_activation(cfg.nonlinearity)?;
    if cfg.stabilizer == Stabilizer::SpectralNorm {
        return Err(AeroError::InvalidTransform(
            "spectral normalization of a fused matrix does not preserve the two-layer function".into(),
        ));
    }
    if !cfg.ffn_variants.contains(&FfnVariant::Standard4d) {
        return Err(AeroError::InvalidTransform(format!("{} is already fused (no standard FFN left)", cfg.display_name())));
    }
    let mut fused_cfg = cfg.clone();
    for v in &mut fused_cfg.ffn_variants {
        if *v == FfnVariant::Standard4d {
            *v = FfnVariant::FusedSingle;
        }
    }
    fused_cfg.name = None;

    let mut fused = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if let FfnParams::Standard { w_in, w_out } = &layer.ffn {
            let a = model.effective_weight(w_in)?;
            let b = model.effective_weight(w_out)?;
            fused.push((i, fuse_ffn_weights(cfg.nonlinearity, &a, &b)?));
        }
    }

    let mut next = model.with_config_from(fused_cfg)?;
    for (i, w) in fused {
        let FfnParams::Fused { w: slot } = next.layers()[i].ffn.clone() else {
            return Err(AeroError::Internal(format!("layer {i} was not rebuilt as fused")));
        };
        match slot {
            LinearWeight::Plain(id) => {
                let name = next.params().name(id).to_string();
                next.params_mut().set(&name, w)?;
            }
            LinearWeight::WeightNorm { v, g } => {
                let norms = Tensor::new(&[w.shape()[1]], norm::column_norms(&w))?;
                let (vn, gn) = (next.params().name(v).to_string(), next.params().name(g).to_string());
                next.params_mut().set(&vn, w)?;
                next.params_mut().set(&gn, norms)?;
            }
            LinearWeight::Spectral { .. } => unreachable!("spectral configs are rejected above"),
        }
    }
    Ok(next)
}

/// Marks the `count` deepest layers' FFNs as identity.
pub fn prune_deeper_ffns(cfg: &ModelConfig, count: usize) -> Result<ModelConfig> {
    if count > cfg.n_layers {
        return Err(AeroError::Range(format!("cannot prune {count} FFNs from {} layers", cfg.n_layers)));
    }
    let mut out = cfg.clone();
    let start = cfg.n_layers - count;
    for v in &mut out.ffn_variants[start..] {
        *v = FfnVariant::Identity;
    }
    Ok(out)
}

/// Applies [`prune_deeper_ffns`] to a model, keeping every other weight.
pub fn prune_model(model: &Model, count: usize) -> Result<Model> {
    let mut cfg = prune_deeper_ffns(model.config(), count)?;
    cfg.name = None;
    model.with_config_from(cfg)
}

/// Uniform random token ids `[batch, seq]` from a seeded stream.
pub fn random_tokens(vocab: usize, batch: usize, seq: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch * seq).map(|_| rng.random_range(0..vocab)).collect()
}

/// Largest absolute logit difference between two models over `batches`
/// random token batches.
pub fn logit_residual(a: &Model, b: &Model, batches: usize, batch: usize, seq: usize, seed: u64) -> Result<f64> {
    let vocab = a.config().vocab_size.min(b.config().vocab_size);
    let mut worst = 0.0f64;
    for i in 0..batches {
        let tokens = random_tokens(vocab, batch, seq, seed.wrapping_add(i as u64));
        let (la, _) = a.logits(&tokens, batch, seq)?;
        let (lb, _) = b.logits(&tokens, batch, seq)?;
        if !la.is_finite() || !lb.is_finite() {
            return Err(AeroError::Numeric("non-finite logits while comparing models".into()));
        }
        worst = worst.max(la.max_abs_diff(&lb));
    }
    Ok(worst)
}
