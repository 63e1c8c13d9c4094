//! Architecture description shared by the model, the cost model and the CLI.

use std::fmt;
use std::path::Path;

use crate::error::{AeroError, Result};
use crate::kv::{self, KvDoc};

/// Which nonlinearities a block keeps. Softmax is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    SmLnG,
    SmLnR,
    SmLn,
    SmG,
    SmR,
    Sm,
}

/// Pointwise activation inside a standard FFN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnActivation {
    Gelu,
    Relu,
    None,
}

impl Nonlinearity {
    pub const ALL: [Nonlinearity; 6] = [
        Nonlinearity::SmLnG,
        Nonlinearity::SmLnR,
        Nonlinearity::SmLn,
        Nonlinearity::SmG,
        Nonlinearity::SmR,
        Nonlinearity::Sm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Nonlinearity::SmLnG => "SM+LN+G",
            Nonlinearity::SmLnR => "SM+LN+R",
            Nonlinearity::SmLn => "SM+LN",
            Nonlinearity::SmG => "SM+G",
            Nonlinearity::SmR => "SM+R",
            Nonlinearity::Sm => "SM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        Self::ALL.into_iter().find(|n| n.label() == compact)
    }

    pub fn has_layernorm(self) -> bool {
        matches!(self, Nonlinearity::SmLnG | Nonlinearity::SmLnR | Nonlinearity::SmLn)
    }

    pub fn activation(self) -> FfnActivation {
        match self {
            Nonlinearity::SmLnG | Nonlinearity::SmG => FfnActivation::Gelu,
            Nonlinearity::SmLnR | Nonlinearity::SmR => FfnActivation::Relu,
            Nonlinearity::SmLn | Nonlinearity::Sm => FfnActivation::None,
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnVariant {
    /// `act(X W_in) W_out` with `W_in: d×4d`, `W_out: 4d×d`.
    Standard4d,
    /// A single `d×d` matrix (the product of the two linear layers).
    FusedSingle,
    /// FFN removed; the residual path is all that remains.
    Identity,
}

impl FfnVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            FfnVariant::Standard4d => "standard_4d",
            FfnVariant::FusedSingle => "fused_single",
            FfnVariant::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard_4d" => Some(FfnVariant::Standard4d),
            "fused_single" => Some(FfnVariant::FusedSingle),
            "identity" => Some(FfnVariant::Identity),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stabilizer {
    None,
    WeightNorm,
    SpectralNorm,
    LearnableScaling,
}

impl Stabilizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Stabilizer::None => "none",
            Stabilizer::WeightNorm => "weight_norm",
            Stabilizer::SpectralNorm => "spectral_norm",
            Stabilizer::LearnableScaling => "learnable_scaling",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Stabilizer::None),
            "weight_norm" => Some(Stabilizer::WeightNorm),
            "spectral_norm" => Some(Stabilizer::SpectralNorm),
            "learnable_scaling" => Some(Stabilizer::LearnableScaling),
            _ => None,
        }
    }

    fn name_tag(self) -> &'static str {
        match self {
            Stabilizer::None => "",
            Stabilizer::WeightNorm => "WNorm",
            Stabilizer::SpectralNorm => "SNorm",
            Stabilizer::LearnableScaling => "Sc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeakySlopeMode {
    Off,
    /// One learnable negative slope per layer.
    Layerwise,
    /// One learnable negative slope shared by all layers.
    Global,
}

impl LeakySlopeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LeakySlopeMode::Off => "off",
            LeakySlopeMode::Layerwise => "layerwise",
            LeakySlopeMode::Global => "global",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(LeakySlopeMode::Off),
            "layerwise" => Some(LeakySlopeMode::Layerwise),
            "global" => Some(LeakySlopeMode::Global),
            _ => None,
        }
    }
}

/// Effective temperature offset: `t = softplus(raw) + TEMPERATURE_FLOOR`.
pub const TEMPERATURE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Display name; derived from the architecture when absent.
    pub name: Option<String>,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_context: usize,
    pub vocab_size: usize,
    pub nonlinearity: Nonlinearity,
    /// One entry per layer.
    pub ffn_variants: Vec<FfnVariant>,
    pub stabilizer: Stabilizer,
    /// Apply weight/spectral normalization to the attention projections too.
    pub stabilize_attention: bool,
    pub leaky_slope_mode: LeakySlopeMode,
    pub learnable_temperature: bool,
    /// Initial effective temperature when `learnable_temperature` is set.
    pub temperature_init: f64,
    pub tied_embeddings: bool,
    /// Append a LayerNorm before the vocabulary projection (LN configs only).
    pub final_layernorm: bool,
    /// Census-only: count a single `T×d` LayerNorm (for comparing against
    /// single-LN designs). Such configs cannot be trained.
    pub census_single_ln: bool,
    /// Census-only: attention without value and output projections, whose
    /// FLOPs per token and layer are `4d² + Td + d(T+1)`.
    pub census_simplified_attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(4, 4, 128, 64, 256, Nonlinearity::SmLnG)
    }
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        max_context: usize,
        vocab_size: usize,
        nonlinearity: Nonlinearity,
    ) -> Self {
        ModelConfig {
            name: None,
            n_layers,
            n_heads,
            d_model,
            max_context,
            vocab_size,
            nonlinearity,
            ffn_variants: vec![FfnVariant::Standard4d; n_layers],
            stabilizer: Stabilizer::None,
            stabilize_attention: false,
            leaky_slope_mode: LeakySlopeMode::Off,
            learnable_temperature: false,
            temperature_init: 1e-2,
            tied_embeddings: false,
            final_layernorm: false,
            census_single_ln: false,
            census_simplified_attention: false,
            seed: 0,
        }
    }

    /// GPT-2 small dimensions (`L = 12, H = 12, d = 768`) at context 128.
    pub fn gpt2_small(nonlinearity: Nonlinearity) -> Self {
        ModelConfig::new(12, 12, 768, 128, 50257, nonlinearity)
    }

    /// Pythia-70M dimensions (`L = 6, H = 8, d = 512`).
    pub fn pythia_70m(nonlinearity: Nonlinearity) -> Self {
        ModelConfig::new(6, 8, 512, 128, 50304, nonlinearity)
    }

    pub fn with_stabilizer(mut self, s: Stabilizer) -> Self {
        self.stabilizer = s;
        self
    }

    pub fn with_ffn(mut self, v: FfnVariant) -> Self {
        self.ffn_variants = vec![v; self.n_layers];
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn pruned_ffns(&self) -> usize {
        self.ffn_variants.iter().filter(|v| **v == FfnVariant::Identity).count()
    }

    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        let mut s = self.nonlinearity.label().to_string();
        if self.learnable_temperature {
            s = s.replacen("SM", "SM(t)", 1);
        }
        if self.leaky_slope_mode != LeakySlopeMode::Off {
            s = s.replace("+R", "+LR");
        }
        let fused = self.ffn_variants.contains(&FfnVariant::FusedSingle);
        let pruned = self.pruned_ffns();
        if self.stabilizer != Stabilizer::None || fused || pruned > 0 {
            s.push('+');
            s.push_str(self.stabilizer.name_tag());
            s.push_str(if fused { "FuFFN" } else { "FFN" });
            if pruned > 0 {
                s.push_str(&format!("i_{pruned}"));
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("max_context", self.max_context),
            ("vocab_size", self.vocab_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(AeroError::config(key, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(AeroError::config(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if self.ffn_variants.len() != self.n_layers {
            return Err(AeroError::config(
                "ffn_variant",
                format!("{} entries for {} layers", self.ffn_variants.len(), self.n_layers),
            ));
        }
        if let Some(first) = self.ffn_variants.iter().position(|v| *v == FfnVariant::Identity) {
            if self.ffn_variants[first..].iter().any(|v| *v != FfnVariant::Identity) {
                return Err(AeroError::config("ffn_variant", "identity FFNs must form a suffix of the layers"));
            }
        }
        if self.leaky_slope_mode != LeakySlopeMode::Off && self.nonlinearity.activation() != FfnActivation::Relu {
            return Err(AeroError::config(
                "leaky_slope_mode",
                format!("needs a ReLU configuration, got {}", self.nonlinearity),
            ));
        }
        if self.learnable_temperature && !(self.temperature_init > TEMPERATURE_FLOOR && self.temperature_init.is_finite()) {
            return Err(AeroError::config(
                "temperature_init",
                format!("must exceed {TEMPERATURE_FLOOR}, got {}", self.temperature_init),
            ));
        }
        if self.final_layernorm && !self.nonlinearity.has_layernorm() {
            return Err(AeroError::config("final_layernorm", "only valid with a LayerNorm configuration"));
        }
        Ok(())
    }

    /// Checks that go beyond [`ModelConfig::validate`] for configs that will be trained.
    pub fn validate_trainable(&self) -> Result<()> {
        self.validate()?;
        for (key, on) in [
            ("census_single_ln", self.census_single_ln),
            ("census_simplified_attention", self.census_simplified_attention),
        ] {
            if on {
                return Err(AeroError::config(key, "census-only configs cannot be instantiated"));
            }
        }
        Ok(())
    }

    /// Non-fatal issues worth reporting before training.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.nonlinearity == Nonlinearity::Sm && self.stabilizer == Stabilizer::None {
            w.push("softmax-only configuration without a stabilizer tends to collapse in training".to_string());
        }
        w
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let mut cfg = ModelConfig::default();
        cfg.name = doc.raw("name").map(str::to_string);
        cfg.n_layers = doc.get_or("n_layers", cfg.n_layers)?;
        cfg.n_heads = doc.get_or("n_heads", cfg.n_heads)?;
        cfg.d_model = doc.get_or("d_model", cfg.d_model)?;
        cfg.max_context = doc.get_or("max_context", cfg.max_context)?;
        cfg.vocab_size = doc.get_or("vocab_size", cfg.vocab_size)?;
        if let Some(v) = doc.raw("nonlinearity") {
            cfg.nonlinearity = Nonlinearity::parse(v)
                .ok_or_else(|| AeroError::config("nonlinearity", format!("unknown configuration `{v}`")))?;
        }
        cfg.ffn_variants = match doc.raw("ffn_variant") {
            None => vec![FfnVariant::Standard4d; cfg.n_layers],
            Some(v) => {
                let parts = v
                    .split(',')
                    .map(|p| {
                        FfnVariant::parse(p.trim())
                            .ok_or_else(|| AeroError::config("ffn_variant", format!("unknown variant `{}`", p.trim())))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if parts.len() == 1 {
                    vec![parts[0]; cfg.n_layers]
                } else {
                    parts
                }
            }
        };
        if let Some(v) = doc.raw("stabilizer") {
            cfg.stabilizer =
                Stabilizer::parse(v).ok_or_else(|| AeroError::config("stabilizer", format!("unknown stabilizer `{v}`")))?;
        }
        cfg.stabilize_attention = doc.get_bool("stabilize_attention", false)?;
        if let Some(v) = doc.raw("leaky_slope_mode") {
            cfg.leaky_slope_mode = LeakySlopeMode::parse(v)
                .ok_or_else(|| AeroError::config("leaky_slope_mode", format!("unknown mode `{v}`")))?;
        }
        cfg.learnable_temperature = doc.get_bool("learnable_temperature", false)?;
        cfg.temperature_init = doc.get_or("temperature_init", cfg.temperature_init)?;
        cfg.tied_embeddings = doc.get_bool("tied_embeddings", false)?;
        cfg.final_layernorm = doc.get_bool("final_layernorm", false)?;
        cfg.census_single_ln = doc.get_bool("census_single_ln", false)?;
        cfg.census_simplified_attention = doc.get_bool("census_simplified_attention", false)?;
        cfg.seed = doc.get_or("seed", 0)?;
        let pruned: usize = doc.get_or("pruned_ffns", 0)?;
        doc.reject_unknown()?;
        if cfg.ffn_variants.len() == cfg.n_layers && pruned > 0 {
            cfg = crate::model::transform::prune_deeper_ffns(&cfg, pruned)
                .map_err(|e| AeroError::config("pruned_ffns", e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AeroError::io(path, e))?;
        Self::from_kv(&text)
    }

    pub fn to_kv(&self) -> String {
        let ffn = if self.ffn_variants.windows(2).all(|w| w[0] == w[1]) && !self.ffn_variants.is_empty() {
            self.ffn_variants[0].as_str().to_string()
        } else {
            self.ffn_variants.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(",")
        };
        let mut pairs: Vec<(&str, String)> = Vec::new();
        if let Some(n) = &self.name {
            pairs.push(("name", n.clone()));
        }
        pairs.extend([
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("max_context", self.max_context.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("nonlinearity", self.nonlinearity.label().to_string()),
        ]);
        if self.n_layers > 0 {
            pairs.push(("ffn_variant", ffn));
        }
        pairs.extend([
            ("stabilizer", self.stabilizer.as_str().to_string()),
            ("stabilize_attention", self.stabilize_attention.to_string()),
            ("leaky_slope_mode", self.leaky_slope_mode.as_str().to_string()),
            ("learnable_temperature", self.learnable_temperature.to_string()),
            ("temperature_init", format!("{:?}", self.temperature_init)),
            ("tied_embeddings", self.tied_embeddings.to_string()),
            ("final_layernorm", self.final_layernorm.to_string()),
            ("census_single_ln", self.census_single_ln.to_string()),
            ("census_simplified_attention", self.census_simplified_attention.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        kv::render(&pairs)
    }
}
