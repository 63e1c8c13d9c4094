//! Configurable decoder-only transformer.

pub mod layers;
pub mod norm;
pub mod params;
pub mod transform;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{FfnVariant, LeakySlopeMode, ModelConfig, Stabilizer, TEMPERATURE_FLOOR};
use crate::error::{AeroError, Result};
use crate::tensor::{inverse_softplus, Tensor, LAYERNORM_EPS};

pub use layers::{
    attention_forward, block_forward, ffn_forward, AttentionParams, Ctx, FfnParams, LayerParams, LinearWeight,
    SpectralState,
};
pub use params::{Bound, Param, ParamId, ParamStore};

pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE_INIT: f64 = 0.01;
pub const THRESHOLD_INIT: f64 = 0.5;

/// What one forward pass recorded besides the logits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    /// Per layer `[B, H, T, T]`; empty unless capture was requested.
    pub attentions: Vec<Tensor>,
    /// Largest absolute value of each block's output.
    pub layer_max_abs: Vec<f64>,
    /// Whether each block's output contains a non-finite value.
    pub layer_nan: Vec<bool>,
}

impl ForwardTrace {
    pub fn first_nan_layer(&self) -> Option<usize> {
        self.layer_nan.iter().position(|&f| f)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub capture_attention: bool,
}

pub struct ForwardOutput {
    /// `[B, T, V]`
    pub logits: Var,
    /// Attention map node of every layer.
    pub attentions: Vec<Var>,
    pub trace: ForwardTrace,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    ln_f: Option<(ParamId, ParamId)>,
    lm_head: Option<ParamId>,
    spectral: Vec<SpectralState>,
}

struct Builder<'a> {
    store: ParamStore,
    spectral: Vec<SpectralState>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, rows: usize, cols: usize, std: f64, stabilizer: Stabilizer) -> LinearWeight {
        let w = Tensor::randn(&[rows, cols], std, self.rng);
        match stabilizer {
            Stabilizer::WeightNorm => {
                let g = Tensor::new(&[cols], norm::column_norms(&w)).expect("one norm per column");
                let v = self.store.add(format!("{name}.v"), w, true);
                let g = self.store.add(format!("{name}.g"), g, false);
                LinearWeight::WeightNorm { v, g }
            }
            Stabilizer::SpectralNorm => {
                let (mut u, mut v) = norm::initial_vectors(rows, cols);
                norm::power_iteration(&w, &mut u, &mut v, norm::SPECTRAL_INIT_ITERS);
                let id = self.store.add(name, w, true);
                self.spectral.push(SpectralState { param: id, u, v });
                LinearWeight::Spectral { w: id, slot: self.spectral.len() - 1 }
            }
            Stabilizer::None | Stabilizer::LearnableScaling => LinearWeight::Plain(self.store.add(name, w, true)),
        }
    }

    fn layernorm(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        let g = self.store.add(format!("{name}.gain"), Tensor::ones(&[d]), false);
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[d]), false);
        (g, b)
    }
}

impl Model {
    /// Builds a randomly initialized model; weights are drawn from a ChaCha8
    /// stream seeded with `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate_trainable()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = Builder { store: ParamStore::default(), spectral: Vec::new(), rng: &mut rng };
        let (d, h, l) = (cfg.d_model, cfg.n_heads, cfg.n_layers);
        let out_std = INIT_STD / ((2 * l.max(1)) as f64).sqrt();
        let attn_stab = if cfg.stabilize_attention { cfg.stabilizer } else { Stabilizer::None };
        let has_ln = cfg.nonlinearity.has_layernorm();

        let tok_emb = b.store.add("tok_emb", Tensor::randn(&[cfg.vocab_size, d], INIT_STD, b.rng), true);
        let pos_emb = b.store.add("pos_emb", Tensor::randn(&[cfg.max_context, d], INIT_STD, b.rng), true);
        let global_slope = (cfg.leaky_slope_mode == LeakySlopeMode::Global)
            .then(|| b.store.add("leaky_slope", Tensor::scalar(LEAKY_SLOPE_INIT), false));
        let raw_t = inverse_softplus(cfg.temperature_init - TEMPERATURE_FLOOR);

        let mut layers = Vec::with_capacity(l);
        for (i, variant) in cfg.ffn_variants.iter().enumerate() {
            let p = format!("layers.{i}");
            let ln1 = has_ln.then(|| b.layernorm(&format!("{p}.ln1"), d));
            let attn = AttentionParams {
                wq: b.linear(&format!("{p}.attn.wq"), d, d, INIT_STD, attn_stab),
                wk: b.linear(&format!("{p}.attn.wk"), d, d, INIT_STD, attn_stab),
                wv: b.linear(&format!("{p}.attn.wv"), d, d, INIT_STD, attn_stab),
                wo: b.linear(&format!("{p}.attn.wo"), d, d, out_std, attn_stab),
                raw_temperature: cfg.learnable_temperature.then(|| {
                    b.store.add(format!("{p}.attn.raw_temperature"), Tensor::full(&[h, cfg.max_context], raw_t), false)
                }),
                reg_threshold_weights: b.store.add(
                    format!("{p}.attn.reg_threshold_weights"),
                    Tensor::full(&[h], THRESHOLD_INIT),
                    false,
                ),
            };
            let ln2 = has_ln.then(|| b.layernorm(&format!("{p}.ln2"), d));
            let ffn = match variant {
                FfnVariant::Standard4d => FfnParams::Standard {
                    w_in: b.linear(&format!("{p}.ffn.w_in"), d, 4 * d, INIT_STD, cfg.stabilizer),
                    w_out: b.linear(&format!("{p}.ffn.w_out"), 4 * d, d, out_std, cfg.stabilizer),
                },
                FfnVariant::FusedSingle => {
                    FfnParams::Fused { w: b.linear(&format!("{p}.ffn.w"), d, d, out_std, cfg.stabilizer) }
                }
                FfnVariant::Identity => FfnParams::Identity,
            };
            let scaling = (cfg.stabilizer == Stabilizer::LearnableScaling).then(|| {
                let alpha = b.store.add(format!("{p}.scale.alpha"), Tensor::scalar(1.0), false);
                let beta = b.store.add(format!("{p}.scale.beta"), Tensor::scalar(1.0), false);
                (alpha, beta)
            });
            let leaky_slope = match cfg.leaky_slope_mode {
                LeakySlopeMode::Off => None,
                LeakySlopeMode::Global => global_slope,
                LeakySlopeMode::Layerwise => {
                    Some(b.store.add(format!("{p}.leaky_slope"), Tensor::scalar(LEAKY_SLOPE_INIT), false))
                }
            };
            layers.push(LayerParams { ln1, ln2, attn, ffn, scaling, leaky_slope });
        }
        let ln_f = cfg.final_layernorm.then(|| b.layernorm("ln_f", d));
        let lm_head = (!cfg.tied_embeddings)
            .then(|| b.store.add("lm_head", Tensor::randn(&[d, cfg.vocab_size], INIT_STD, b.rng), true));

        let Builder { store, spectral, .. } = b;
        Ok(Model { cfg, params: store, tok_emb, pos_emb, layers, ln_f, lm_head, spectral })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn spectral_states(&self) -> &[SpectralState] {
        &self.spectral
    }

    pub fn spectral_states_mut(&mut self) -> &mut [SpectralState] {
        &mut self.spectral
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Sets every layer's threshold weights to `value`.
    pub fn reset_thresholds(&mut self, value: f64) {
        let h = self.cfg.n_heads;
        for i in 0..self.layers.len() {
            let id = self.layers[i].attn.reg_threshold_weights;
            *self.params.get_mut(id) = Tensor::full(&[h], value).with_requires_grad(true);
        }
    }

    /// Threshold-weight handles of every layer, in layer order.
    pub fn threshold_vars(&self, bound: &Bound) -> Vec<Var> {
        self.layers.iter().map(|l| bound[l.attn.reg_threshold_weights]).collect()
    }

    /// Advances every spectral-norm power iteration by `iters` steps using
    /// the current raw weights.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for s in &mut self.spectral {
            norm::power_iteration(self.params.get(s.param), &mut s.u, &mut s.v, iters);
        }
    }

    /// Effective (normalized) weight of a linear layer, outside any tape.
    pub fn effective_weight(&self, w: &LinearWeight) -> Result<Tensor> {
        match *w {
            LinearWeight::Plain(id) => Ok(self.params.get(id).clone()),
            LinearWeight::WeightNorm { v, g } => norm::apply_weight_norm(self.params.get(v), self.params.get(g)),
            LinearWeight::Spectral { w, slot } => {
                let s = &self.spectral[slot];
                let sigma = norm::bilinear(self.params.get(w), &s.u, &s.v);
                let data = self.params.get(w).data().iter().map(|x| x / sigma).collect();
                Tensor::new(self.params.get(w).shape(), data)
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Runs the model on `tokens` laid out as `[batch, seq]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        if batch * seq != tokens.len() || seq == 0 {
            return Err(AeroError::shape(format!("{} tokens do not form a [{batch}, {seq}] batch", tokens.len())));
        }
        if seq > self.cfg.max_context {
            return Err(AeroError::config(
                "max_context",
                format!("sequence of {seq} tokens exceeds the maximum context {}", self.cfg.max_context),
            ));
        }
        let emb = tape.embedding(bound[self.tok_emb], tokens, &[batch, seq])?;
        let mut x = tape.add_leading_rows(emb, bound[self.pos_emb])?;

        let ctx = Ctx { cfg: &self.cfg, bound, spectral: &self.spectral };
        let mut trace = ForwardTrace::default();
        let mut attentions = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, attn) = block_forward(tape, x, layer, &ctx)?;
            let v = tape.value(out);
            trace.layer_nan.push(!v.is_finite());
            trace.layer_max_abs.push(v.data().iter().fold(0.0f64, |m, x| m.max(x.abs())));
            if opts.capture_attention {
                trace.attentions.push(tape.value(attn).clone());
            }
            attentions.push(attn);
            x = out;
        }
        if let Some((g, b)) = self.ln_f {
            x = tape.layernorm(x, bound[g], bound[b], LAYERNORM_EPS)?;
        }
        let logits = match self.lm_head {
            Some(head) => tape.matmul(x, bound[head], false)?,
            None => tape.matmul(x, bound[self.tok_emb], true)?,
        };
        Ok(ForwardOutput { logits, attentions, trace })
    }

    /// Inference-only forward over frozen parameters.
    pub fn logits(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<(Tensor, ForwardTrace)> {
        self.logits_with(tokens, batch, seq, ForwardOptions::default())
    }

    pub fn logits_with(
        &self,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        opts: ForwardOptions,
    ) -> Result<(Tensor, ForwardTrace)> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, tokens, batch, seq, opts)?;
        Ok((tape.value(out.logits).clone(), out.trace))
    }

    /// Rebuilds the model for `cfg`, copying every parameter whose name and
    /// shape match. Used by the structural transforms.
    pub(crate) fn with_config_from(&self, cfg: ModelConfig) -> Result<Model> {
        let mut next = Model::new(cfg)?;
        for p in self.params.iter() {
            if let Some(id) = next.params.id(&p.name) {
                if next.params.get(id).shape() == p.tensor.shape() {
                    *next.params.get_mut(id) = p.tensor.clone();
                }
            }
        }
        for s in &mut next.spectral {
            let name = next.params.name(s.param);
            if let Some(old) = self.spectral.iter().find(|o| self.params.name(o.param) == name) {
                s.u.clone_from(&old.u);
                s.v.clone_from(&old.v);
            }
        }
        Ok(next)
    }
}
