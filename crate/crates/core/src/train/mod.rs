//! Training loop with NaN probing, entropy instrumentation, metrics and checkpoints.

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod optim;

use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::entropy::{self, EntropyRegConfig, EntropySnapshot, RegMode};
use crate::error::{AeroError, Result};
use crate::kv::KvDoc;
use crate::model::{ForwardOptions, ForwardTrace, Model};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{load_corpus, make_batches, synthetic_text, Batch, Corpus};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use optim::{AdamW, AdamWConfig};

/// Stream offset separating evaluation batches from training batches.
const EVAL_STREAM_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NanPolicy {
    /// Stop at the first non-finite loss.
    Halt,
    /// Skip the update and keep going.
    Continue,
}

impl NanPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            NanPolicy::Halt => "halt",
            NanPolicy::Continue => "continue",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "halt" => Some(NanPolicy::Halt),
            "continue" => Some(NanPolicy::Continue),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    File(PathBuf),
    /// Generated text of the given size, seeded by the training seed.
    Synthetic(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Training sequence length; defaults to the model's maximum context.
    pub context_len: Option<usize>,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batches: usize,
    pub snapshot_every: usize,
    pub corpus: CorpusSource,
    pub split: f64,
    pub nan_policy: NanPolicy,
    pub entropy_reg: EntropyRegConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 8,
            context_len: None,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            seed: 0,
            eval_every: 50,
            eval_batches: 2,
            snapshot_every: 100,
            corpus: CorpusSource::Synthetic(1 << 20),
            split: 0.9,
            nan_policy: NanPolicy::Halt,
            entropy_reg: EntropyRegConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(AeroError::config("steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(AeroError::config("batch_size", "must be at least 1"));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(AeroError::config("lr", format!("{} must be finite and positive", self.optimizer.lr)));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(AeroError::config("split", format!("{} is outside (0, 1)", self.split)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(AeroError::config("grad_clip", "must be positive"));
        }
        for (key, v) in [("eval_every", self.eval_every), ("snapshot_every", self.snapshot_every)] {
            if v == 0 {
                return Err(AeroError::config(key, "must be at least 1"));
            }
        }
        for (key, b) in [("beta1", self.optimizer.beta1), ("beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(AeroError::config(key, format!("{b} is outside [0, 1)")));
            }
        }
        self.entropy_reg.validate()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let d = TrainConfig::default();
        let o = d.optimizer;
        let r = d.entropy_reg.clone();
        let corpus = match (doc.raw("corpus_path"), doc.get::<usize>("synthetic_corpus_bytes")?) {
            (Some(_), Some(_)) => {
                return Err(AeroError::config("corpus_path", "give either corpus_path or synthetic_corpus_bytes"))
            }
            (Some(p), None) => CorpusSource::File(PathBuf::from(p)),
            (None, Some(n)) => CorpusSource::Synthetic(n),
            (None, None) => d.corpus.clone(),
        };
        let mode = match doc.raw("entropy_reg.mode") {
            None => r.mode,
            Some(m) => RegMode::parse(m)
                .ok_or_else(|| AeroError::config("entropy_reg.mode", format!("unknown mode `{m}`")))?,
        };
        let nan_policy = match doc.raw("nan_policy") {
            None => d.nan_policy,
            Some(p) => NanPolicy::parse(p).ok_or_else(|| AeroError::config("nan_policy", format!("unknown policy `{p}`")))?,
        };
        let cfg = TrainConfig {
            steps: doc.get_or("steps", d.steps)?,
            batch_size: doc.get_or("batch_size", d.batch_size)?,
            context_len: doc.get("context_len")?,
            optimizer: AdamWConfig {
                lr: doc.get_or("lr", o.lr)?,
                beta1: doc.get_or("beta1", o.beta1)?,
                beta2: doc.get_or("beta2", o.beta2)?,
                eps: doc.get_or("adam_eps", o.eps)?,
                weight_decay: doc.get_or("weight_decay", o.weight_decay)?,
            },
            grad_clip: doc.get_or("grad_clip", d.grad_clip)?,
            seed: doc.get_or("seed", d.seed)?,
            eval_every: doc.get_or("eval_every", d.eval_every)?,
            eval_batches: doc.get_or("eval_batches", d.eval_batches)?,
            snapshot_every: doc.get_or("snapshot_every", d.snapshot_every)?,
            corpus,
            split: doc.get_or("split", d.split)?,
            nan_policy,
            entropy_reg: EntropyRegConfig {
                enabled: doc.get_bool("entropy_reg.enabled", r.enabled)?,
                lambda: doc.get_or("entropy_reg.lambda", r.lambda)?,
                gamma: doc.get_or("entropy_reg.gamma", r.gamma)?,
                theta_init: doc.get_or("entropy_reg.theta_init", r.theta_init)?,
                mode,
            },
        };
        doc.reject_unknown()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AeroError::io(path, e))?;
        let mut cfg = Self::from_kv(&text)?;
        // Relative corpus paths are taken relative to the config file.
        if let CorpusSource::File(p) = &mut cfg.corpus {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            CorpusSource::File(p) => data::load_corpus(p, self.split),
            CorpusSource::Synthetic(n) => data::split_tokens(data::synthetic_text(*n, self.seed), self.split),
        }
    }
}

/// Loss pieces of one forward pass.
pub struct LossGraph {
    pub total: Var,
    pub ce: Var,
    pub reg: Option<Var>,
    pub trace: ForwardTrace,
}

/// Builds `CE + lambda * reg` for one batch on `tape`.
pub fn build_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &crate::model::Bound,
    batch: &Batch,
    reg: &EntropyRegConfig,
    opts: ForwardOptions,
) -> Result<LossGraph> {
    let out = model.forward(tape, bound, &batch.inputs, batch.batch, batch.seq, opts)?;
    let ce = tape.cross_entropy(out.logits, &batch.targets)?;
    if !reg.enabled {
        return Ok(LossGraph { total: ce, ce, reg: None, trace: out.trace });
    }
    let thresholds = model.threshold_vars(bound);
    let r = entropy::entropy_reg_loss(tape, &out.attentions, &thresholds, reg, batch.seq)?;
    let total = entropy::total_loss(tape, ce, r, reg.lambda)?;
    Ok(LossGraph { total, ce, reg: Some(r), trace: out.trace })
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: f64,
    pub ce: f64,
    pub reg: f64,
    /// Gradient norm before clipping; NaN when the step was skipped.
    pub grad_norm: f64,
    pub trace: ForwardTrace,
    /// The loss was non-finite, so no update was applied.
    pub non_finite: bool,
}

/// Forward, backward, clip and update on one batch.
pub fn train_step(model: &mut Model, opt: &mut AdamW, batch: &Batch, cfg: &TrainConfig) -> Result<StepOutcome> {
    model.refresh_spectral(1);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let graph = build_loss(model, &mut tape, &bound, batch, &cfg.entropy_reg, ForwardOptions::default())?;
    let loss = tape.value(graph.total).item();
    let ce = tape.value(graph.ce).item();
    let reg = graph.reg.map_or(0.0, |r| tape.value(r).item());
    if !loss.is_finite() {
        return Ok(StepOutcome { loss, ce, reg, grad_norm: f64::NAN, trace: graph.trace, non_finite: true });
    }
    tape.backward(graph.total)?;
    model.params_mut().collect_grads(&tape, &bound)?;
    drop(tape);
    let grad_norm = optim::clip_grad_norm(model.params_mut(), cfg.grad_clip)?;
    if !grad_norm.is_finite() {
        model.params_mut().zero_grads();
        return Ok(StepOutcome { loss, ce, reg, grad_norm, trace: graph.trace, non_finite: true });
    }
    opt.step(model.params_mut())?;
    model.params_mut().zero_grads();
    Ok(StepOutcome { loss, ce, reg, grad_norm, trace: graph.trace, non_finite: false })
}

/// Per-layer non-finite flags of a trace and the earliest offending layer.
pub fn nan_probe(trace: &ForwardTrace) -> (Vec<bool>, Option<usize>) {
    (trace.layer_nan.clone(), trace.first_nan_layer())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NanEvent {
    pub step: usize,
    /// Earliest layer with a non-finite block output, if any.
    pub layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub train_loss: f64,
    pub val_loss: f64,
    pub reg_loss: f64,
    pub snapshot: Option<EntropySnapshot>,
}

/// Fixed evaluation batches: the same windows at every evaluation.
pub struct EvalSet {
    train: Vec<Batch>,
    val: Vec<Batch>,
}

impl EvalSet {
    pub fn new(corpus: &Corpus, cfg: &TrainConfig, seq: usize) -> Result<Self> {
        let n = cfg.eval_batches.max(1);
        let pick = |tokens: &[u8], stream: u64| -> Result<Vec<Batch>> {
            (0..n as u64).map(|i| make_batches(tokens, cfg.batch_size, seq, cfg.seed, stream + i)).collect()
        };
        Ok(EvalSet { train: pick(&corpus.train, EVAL_STREAM_BASE)?, val: pick(&corpus.val, 2 * EVAL_STREAM_BASE)? })
    }

    /// Mean CE on both splits, mean regularizer on the validation split and,
    /// when `snapshot` is set, head entropies on the first validation batch.
    pub fn evaluate(&self, model: &Model, reg: &EntropyRegConfig, step: usize, snapshot: bool) -> Result<Evaluation> {
        let eval = |batches: &[Batch], with_reg: bool, capture: bool| -> Result<(f64, f64, Option<ForwardTrace>)> {
            let (mut ce_sum, mut reg_sum, mut trace) = (0.0, 0.0, None);
            for (i, b) in batches.iter().enumerate() {
                let mut tape = Tape::new();
                let bound = model.params().bind_frozen(&mut tape);
                let opts = ForwardOptions { capture_attention: capture && i == 0 };
                let g = build_loss(model, &mut tape, &bound, b, reg, opts)?;
                ce_sum += tape.value(g.ce).item();
                if with_reg {
                    reg_sum += g.reg.map_or(0.0, |r| tape.value(r).item());
                }
                if opts.capture_attention {
                    trace = Some(g.trace);
                }
            }
            let n = batches.len() as f64;
            Ok((ce_sum / n, reg_sum / n, trace))
        };
        let (train_loss, _, _) = eval(&self.train, false, false)?;
        let (val_loss, reg_loss, trace) = eval(&self.val, true, snapshot)?;
        let snapshot = trace.map(|t| entropy::snapshot(&t, step)).transpose()?;
        Ok(Evaluation { train_loss, val_loss, reg_loss, snapshot })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
    pub snapshots: Vec<EntropySnapshot>,
    pub first_nan: Option<NanEvent>,
    pub nan_steps: usize,
    pub steps_run: usize,
    pub halted: bool,
}

impl TrainOutcome {
    pub fn initial_train_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.train_loss)
    }

    pub fn final_train_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.train_loss)
    }

    pub fn final_snapshot(&self) -> Option<&EntropySnapshot> {
        self.snapshots.last()
    }

    /// Any NaN flag in any record.
    pub fn any_nan_flag(&self) -> bool {
        self.records.iter().any(|r| r.nan_flags.iter().any(|&f| f))
    }
}

struct Accum {
    max_abs: Vec<f64>,
    nan: Vec<bool>,
}

impl Accum {
    fn new(layers: usize) -> Self {
        Accum { max_abs: vec![0.0; layers], nan: vec![false; layers] }
    }

    fn add(&mut self, trace: &ForwardTrace) {
        for (m, v) in self.max_abs.iter_mut().zip(&trace.layer_max_abs) {
            if v.is_nan() || *v > *m {
                *m = *v;
            }
        }
        for (f, v) in self.nan.iter_mut().zip(&trace.layer_nan) {
            *f |= v;
        }
    }
}

/// Trains a freshly initialized model. Records are passed to `sink` as they
/// are produced.
pub fn run_training(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut sink: Option<&mut MetricsWriter>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate_trainable()?;
    for w in model_cfg.warnings() {
        warn!("{}: {w}", model_cfg.display_name());
    }
    let seq = cfg.context_len.unwrap_or(model_cfg.max_context);
    if seq == 0 || seq > model_cfg.max_context {
        return Err(AeroError::config(
            "context_len",
            format!("{seq} must be between 1 and the model's max_context {}", model_cfg.max_context),
        ));
    }
    if model_cfg.vocab_size < data::BYTE_VOCAB {
        return Err(AeroError::config(
            "vocab_size",
            format!("byte-level training needs at least {} tokens, got {}", data::BYTE_VOCAB, model_cfg.vocab_size),
        ));
    }
    let corpus = cfg.load_corpus()?;
    let evals = EvalSet::new(&corpus, cfg, seq)?;

    let mut model = Model::new(model_cfg.clone())?;
    model.reset_thresholds(cfg.entropy_reg.theta_init);
    let mut opt = AdamW::new(cfg.optimizer, model.params());
    let layers = model_cfg.n_layers;

    let mut outcome = TrainOutcome {
        model: model.clone(),
        records: Vec::new(),
        snapshots: Vec::new(),
        first_nan: None,
        nan_steps: 0,
        steps_run: 0,
        halted: false,
    };
    let mut emit = |outcome: &mut TrainOutcome, model: &Model, step: usize, acc: &Accum, snapshot: bool| -> Result<()> {
        let e = evals.evaluate(model, &cfg.entropy_reg, step, snapshot)?;
        let record = MetricsRecord {
            step,
            train_loss: e.train_loss,
            val_loss: e.val_loss,
            val_ppl: e.val_loss.exp(),
            reg_loss: e.reg_loss,
            context_len: seq,
            mean_entropy: e.snapshot.as_ref().map(|s| s.head_means.clone()).unwrap_or_default(),
            max_abs_activation: acc.max_abs.clone(),
            nan_flags: acc.nan.clone(),
        };
        info!("step {step}: train {:.4} val {:.4} reg {:.4}", record.train_loss, record.val_loss, record.reg_loss);
        if let Some(w) = sink.as_deref_mut() {
            w.append(&record)?;
        }
        outcome.records.push(record);
        outcome.snapshots.extend(e.snapshot);
        Ok(())
    };

    // Step-0 record: activation summaries come from an evaluation forward.
    let mut acc = Accum::new(layers);
    {
        let (_, trace) = model.logits(&evals.val[0].inputs, evals.val[0].batch, seq)?;
        acc.add(&trace);
    }
    emit(&mut outcome, &model, 0, &acc, true)?;

    let mut acc = Accum::new(layers);
    for step in 1..=cfg.steps {
        let batch = make_batches(&corpus.train, cfg.batch_size, seq, cfg.seed, step as u64)?;
        let out = train_step(&mut model, &mut opt, &batch, cfg)?;
        acc.add(&out.trace);
        outcome.steps_run = step;
        if out.non_finite {
            outcome.nan_steps += 1;
            let (_, layer) = nan_probe(&out.trace);
            if outcome.first_nan.is_none() {
                warn!("non-finite loss at step {step} (first NaN layer {layer:?})");
                outcome.first_nan = Some(NanEvent { step, layer });
            }
            if cfg.nan_policy == NanPolicy::Halt {
                outcome.halted = true;
                emit(&mut outcome, &model, step, &acc, true)?;
                break;
            }
        }
        let is_snapshot = step % cfg.snapshot_every == 0 || step == cfg.steps;
        if step % cfg.eval_every == 0 || is_snapshot {
            emit(&mut outcome, &model, step, &acc, is_snapshot)?;
            acc = Accum::new(layers);
        }
    }
    outcome.model = model;
    Ok(outcome)
}

/// File names written by [`run_training_to_dir`].
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const ENTROPY_FILE: &str = "entropy.csv";

/// Runs training and writes `metrics.jsonl`, `final.ckpt` and `entropy.csv`
/// into `out`.
pub fn run_training_to_dir(model_cfg: &ModelConfig, cfg: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out).map_err(|e| AeroError::io(out, e))?;
    let mut writer = MetricsWriter::create(&out.join(METRICS_FILE))?;
    let outcome = run_training(model_cfg, cfg, Some(&mut writer))?;
    save_checkpoint(&outcome.model, &out.join(CHECKPOINT_FILE))?;
    let csv = metrics::entropy_heatmap_csv(&outcome.snapshots)?;
    let path = out.join(ENTROPY_FILE);
    std::fs::write(&path, csv).map_err(|e| AeroError::io(&path, e))?;
    Ok(outcome)
}
