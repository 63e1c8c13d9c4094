//! Metrics records (one JSON object per line) and entropy exports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::entropy::EntropySnapshot;
use crate::error::{AeroError, Result};

/// JSON has no NaN or infinity; such values are written as `null` and read
/// back as NaN.
mod lossy_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

mod lossy_vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let opt = Vec::<Option<f64>>::deserialize(d)?;
        Ok(opt.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(with = "lossy_f64")]
    pub train_loss: f64,
    #[serde(with = "lossy_f64")]
    pub val_loss: f64,
    #[serde(with = "lossy_f64")]
    pub val_ppl: f64,
    #[serde(with = "lossy_f64")]
    pub reg_loss: f64,
    /// Context length the entropies were measured at.
    pub context_len: usize,
    /// `[layer][head]` mean attention entropy; empty on records without a snapshot.
    pub mean_entropy: Vec<Vec<f64>>,
    /// Per layer, largest absolute block output since the previous record.
    #[serde(with = "lossy_vec")]
    pub max_abs_activation: Vec<f64>,
    /// Per layer, whether a non-finite block output occurred since the previous record.
    pub nan_flags: Vec<bool>,
}

impl MetricsRecord {
    pub fn snapshot(&self) -> Option<EntropySnapshot> {
        (!self.mean_entropy.is_empty())
            .then(|| EntropySnapshot::from_head_means(self.step, self.context_len, self.mean_entropy.clone()))
    }
}

pub fn to_json_line(record: &MetricsRecord) -> Result<String> {
    serde_json::to_string(record).map_err(|e| AeroError::Internal(format!("metrics serialization: {e}")))
}

/// Appends records to a JSONL file, flushing after each line.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    /// Creates (or truncates) the file at the start of a run.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| AeroError::io(path, e))?;
        Ok(MetricsWriter { out: BufWriter::new(file), path: path.to_path_buf() })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = to_json_line(record)?;
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| AeroError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| AeroError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AeroError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| AeroError::Ingestion(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn csv_err(e: impl std::fmt::Display) -> AeroError {
    AeroError::Internal(format!("csv: {e}"))
}

/// Heatmap rows `step, layer, head, mean_entropy, fraction_of_log_t` for
/// every snapshot.
pub fn entropy_heatmap_csv(snapshots: &[EntropySnapshot]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "layer", "head", "mean_entropy", "fraction_of_log_t"]).map_err(csv_err)?;
    for s in snapshots {
        let log_t = (s.context_len as f64).ln();
        for (l, heads) in s.head_means.iter().enumerate() {
            for (h, e) in heads.iter().enumerate() {
                let frac = if log_t > 0.0 { e / log_t } else { 0.0 };
                w.write_record([
                    s.step.to_string(),
                    l.to_string(),
                    h.to_string(),
                    format!("{e:.9}"),
                    format!("{frac:.6}"),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}

/// One row per snapshot with the fraction of heads in each entropy range,
/// relative to the observed maximum and to `ln T`.
pub fn entropy_bucket_csv(snapshots: &[EntropySnapshot]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "step",
        "heads",
        "observed_max",
        "low",
        "mid",
        "high",
        "low_log_t",
        "mid_log_t",
        "high_log_t",
    ])
    .map_err(csv_err)?;
    for s in snapshots {
        let n = s.num_heads().max(1) as f64;
        let mut row = vec![s.step.to_string(), s.num_heads().to_string(), format!("{:.9}", s.observed_max)];
        row.extend(s.buckets.iter().chain(&s.buckets_log_t).map(|&c| format!("{:.6}", c as f64 / n)));
        w.write_record(&row).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}
