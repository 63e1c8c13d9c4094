//! FLOPs accounting, nonlinear-operation census and a linear private-inference
//! cost estimate.
//!
//! Only FFN and attention FLOPs are counted; the embedding lookup and the
//! vocabulary projection are reported separately by [`head_flops`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{FfnActivation, FfnVariant, ModelConfig};
use crate::error::{AeroError, Result};
use crate::kv::KvDoc;

/// Per-token FFN multiply-adds of one standard layer, in units of `d²`.
const STANDARD_FFN_D2: u64 = 16;
const FUSED_FFN_D2: u64 = 2;

fn ffn_layer_flops(variant: FfnVariant, d: u64) -> u64 {
    match variant {
        FfnVariant::Standard4d => STANDARD_FFN_D2 * d * d,
        FfnVariant::FusedSingle => FUSED_FFN_D2 * d * d,
        FfnVariant::Identity => 0,
    }
}

/// FFN FLOPs of one forward pass over `t` tokens.
pub fn ffn_flops(cfg: &ModelConfig, t: usize) -> u64 {
    let d = cfg.d_model as u64;
    cfg.ffn_variants.iter().map(|&v| t as u64 * ffn_layer_flops(v, d)).sum()
}

/// Attention FLOPs of one forward pass over `t` tokens: per token and layer
/// `8d²` for the four projections, `2Td` for the scores and `d(T+1)` for the
/// causally masked value product.
pub fn attention_flops(cfg: &ModelConfig, t: usize) -> u64 {
    let (l, d, t) = (cfg.n_layers as u64, cfg.d_model as u64, t as u64);
    let projections = if cfg.census_simplified_attention { 4 * d * d } else { 8 * d * d };
    let scores = if cfg.census_simplified_attention { t * d } else { 2 * t * d };
    l * t * (projections + scores + d * (t + 1))
}

/// Vocabulary projection FLOPs (`2·T·d·V`), excluded from the totals.
pub fn head_flops(cfg: &ModelConfig, t: usize) -> u64 {
    2 * t as u64 * cfg.d_model as u64 * cfg.vocab_size as u64
}

/// `8d/3`: below this context length FFN FLOPs dominate a standard model.
pub fn crossover_context(d: usize) -> f64 {
    8.0 * d as f64 / 3.0
}

/// The exact balance point `T = (8d − 1)/3` of `16d² = 8d² + 2Td + d(T+1)`.
pub fn exact_crossover(d: usize) -> f64 {
    (8.0 * d as f64 - 1.0) / 3.0
}

/// FFN fraction of the FLOPs of a standard-FFN model of width `d`.
pub fn ffn_share(d: usize, t: usize) -> f64 {
    let cfg = ModelConfig::new(1, 1, d, t.max(1), 1, crate::config::Nonlinearity::SmLnG);
    let f = ffn_flops(&cfg, t) as f64;
    f / (f + attention_flops(&cfg, t) as f64)
}

/// Formats a FLOP count in billions with one decimal, rounding half up on
/// the exact integer ("14.5B").
pub fn render_billions(flops: u64) -> String {
    let tenths = (flops + 50_000_000) / 100_000_000;
    format!("{}.{}B", tenths / 10, tenths % 10)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Sm,
    Ln,
    G,
    R,
}

impl OpKind {
    pub const ALL: [OpKind; 4] = [OpKind::Sm, OpKind::Ln, OpKind::G, OpKind::R];

    pub fn tag(self) -> &'static str {
        match self {
            OpKind::Sm => "SM",
            OpKind::Ln => "LN",
            OpKind::G => "G",
            OpKind::R => "R",
        }
    }

    fn key(self) -> &'static str {
        match self {
            OpKind::Sm => "sm",
            OpKind::Ln => "ln",
            OpKind::G => "g",
            OpKind::R => "r",
        }
    }
}

/// `count` instances of a nonlinearity applied to a `rows×cols` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CensusEntry {
    pub kind: OpKind,
    pub count: u64,
    pub rows: u64,
    pub cols: u64,
}

impl fmt::Display for CensusEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}×R^{{{}×{}}}", self.kind.tag(), self.count, self.rows, self.cols)
    }
}

impl FromStr for CensusEntry {
    type Err = AeroError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || AeroError::config("census", format!("cannot parse census entry `{s}`"));
        let (tag, rest) = s.split_once(':').ok_or_else(bad)?;
        let kind = OpKind::ALL.into_iter().find(|k| k.tag() == tag.trim()).ok_or_else(bad)?;
        let (count, shape) = rest.trim().split_once("×R^{").ok_or_else(bad)?;
        let shape = shape.strip_suffix('}').ok_or_else(bad)?;
        let (rows, cols) = shape.split_once('×').ok_or_else(bad)?;
        let num = |x: &str| x.trim().parse::<u64>().map_err(|_| bad());
        Ok(CensusEntry { kind, count: num(count)?, rows: num(rows)?, cols: num(cols)? })
    }
}

/// Nonlinear operations executed by one forward pass over `t` tokens.
pub fn nonlinear_census(cfg: &ModelConfig, t: usize) -> Vec<CensusEntry> {
    let (l, h, d, t) = (cfg.n_layers as u64, cfg.n_heads as u64, cfg.d_model as u64, t as u64);
    let mut out = vec![CensusEntry { kind: OpKind::Sm, count: l * h, rows: t, cols: t }];
    let ln = if cfg.census_single_ln {
        1
    } else if cfg.nonlinearity.has_layernorm() {
        2 * l + u64::from(cfg.final_layernorm)
    } else {
        0
    };
    if ln > 0 {
        out.push(CensusEntry { kind: OpKind::Ln, count: ln, rows: t, cols: d });
    }
    let act = match cfg.nonlinearity.activation() {
        FfnActivation::Gelu => Some(OpKind::G),
        FfnActivation::Relu => Some(OpKind::R),
        FfnActivation::None => None,
    };
    let standard = cfg.ffn_variants.iter().filter(|v| **v == FfnVariant::Standard4d).count() as u64;
    if let Some(kind) = act.filter(|_| standard > 0) {
        out.push(CensusEntry { kind, count: standard, rows: t, cols: 4 * d });
    }
    out
}

pub fn render_census(entries: &[CensusEntry]) -> String {
    entries.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub comm_bytes: f64,
    pub latency_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: String,
    pub context_len: usize,
    pub ffn_flops: u64,
    pub attention_flops: u64,
    pub total_flops: u64,
    pub ffn_share: f64,
    pub census: Vec<CensusEntry>,
    /// Vocabulary projection FLOPs, filled only on request.
    pub head_flops: Option<u64>,
    pub estimated_cost: Option<CostEstimate>,
}

impl CostReport {
    pub fn new(cfg: &ModelConfig, t: usize) -> Self {
        let ffn = ffn_flops(cfg, t);
        let attn = attention_flops(cfg, t);
        let total = ffn + attn;
        CostReport {
            config: cfg.display_name(),
            context_len: t,
            ffn_flops: ffn,
            attention_flops: attn,
            total_flops: total,
            ffn_share: if total == 0 { 0.0 } else { ffn as f64 / total as f64 },
            census: nonlinear_census(cfg, t),
            head_flops: None,
            estimated_cost: None,
        }
    }

    pub fn with_head_flops(mut self, cfg: &ModelConfig) -> Self {
        self.head_flops = Some(head_flops(cfg, self.context_len));
        self
    }

    pub fn with_estimate(mut self, units: &UnitCostTable) -> Self {
        self.estimated_cost = Some(estimate_cost(&self, units));
        self
    }
}

/// User-supplied unit costs: one `(bytes, seconds)` pair per nonlinear op
/// instance of each kind, and one per matmul FLOP.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitCostTable {
    pub sm: (f64, f64),
    pub ln: (f64, f64),
    pub g: (f64, f64),
    pub r: (f64, f64),
    pub flop: (f64, f64),
}

impl UnitCostTable {
    pub fn op(&self, kind: OpKind) -> (f64, f64) {
        match kind {
            OpKind::Sm => self.sm,
            OpKind::Ln => self.ln,
            OpKind::G => self.g,
            OpKind::R => self.r,
        }
    }

    fn op_mut(&mut self, kind: OpKind) -> &mut (f64, f64) {
        match kind {
            OpKind::Sm => &mut self.sm,
            OpKind::Ln => &mut self.ln,
            OpKind::G => &mut self.g,
            OpKind::R => &mut self.r,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let s = |(b, t): (f64, f64)| (b * factor, t * factor);
        UnitCostTable { sm: s(self.sm), ln: s(self.ln), g: s(self.g), r: s(self.r), flop: s(self.flop) }
    }

    /// Reads `sm.bytes = …`, `sm.seconds = …`, … and `flop.bytes`/`flop.seconds`;
    /// missing keys are zero.
    pub fn from_kv(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let mut table = UnitCostTable::default();
        let read = |prefix: &str, slot: &mut (f64, f64)| -> Result<()> {
            for (suffix, value) in [("bytes", &mut slot.0), ("seconds", &mut slot.1)] {
                let key = format!("{prefix}.{suffix}");
                *value = doc.get_or(&key, 0.0)?;
                if !(*value >= 0.0 && value.is_finite()) {
                    return Err(AeroError::config(key, format!("unit cost {value} must be finite and >= 0")));
                }
            }
            Ok(())
        };
        for kind in OpKind::ALL {
            read(kind.key(), table.op_mut(kind))?;
        }
        read("flop", &mut table.flop)?;
        doc.reject_unknown()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AeroError::io(path, e))?;
        Self::from_kv(&text)
    }
}

/// Linear estimate: census counts times per-op costs plus matmul FLOPs times
/// the per-FLOP cost. An estimate only; no protocol is simulated.
pub fn estimate_cost(report: &CostReport, units: &UnitCostTable) -> CostEstimate {
    let mut comm = report.total_flops as f64 * units.flop.0;
    let mut lat = report.total_flops as f64 * units.flop.1;
    for e in &report.census {
        let (b, s) = units.op(e.kind);
        comm += e.count as f64 * b;
        lat += e.count as f64 * s;
    }
    CostEstimate { comm_bytes: comm, latency_seconds: lat }
}

const COLUMNS: [&str; 6] = ["config", "ffn_flops", "attn_flops", "total", "ffn_share", "census"];

fn row(r: &CostReport) -> [String; 6] {
    [
        r.config.clone(),
        render_billions(r.ffn_flops),
        render_billions(r.attention_flops),
        render_billions(r.total_flops),
        format!("{:.3}", r.ffn_share),
        render_census(&r.census),
    ]
}

/// Aligned plain-text table, one row per report.
pub fn render_table(reports: &[CostReport]) -> String {
    let rows: Vec<[String; 6]> = reports.iter().map(row).collect();
    let mut widths = COLUMNS.map(|c| c.chars().count());
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        out.push_str(padded.join("  ").trim_end());
        out.push('\n');
    };
    line(&COLUMNS.map(String::from));
    for r in &rows {
        line(r);
    }
    out
}

/// CSV with exact integer FLOP counts.
pub fn render_csv(reports: &[CostReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| AeroError::Internal(format!("csv: {e}"));
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.config.clone(),
            r.ffn_flops.to_string(),
            r.attention_flops.to_string(),
            r.total_flops.to_string(),
            format!("{:.6}", r.ffn_share),
            render_census(&r.census),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| AeroError::Internal(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| AeroError::Internal(e.to_string()))
}
