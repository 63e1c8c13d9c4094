//! Byte-level corpora and deterministic batch sampling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AeroError, Result};

pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

/// Splits raw bytes into a training prefix of `floor(len * split)` bytes and
/// a validation suffix.
pub fn split_tokens(bytes: Vec<u8>, split: f64) -> Result<Corpus> {
    if bytes.is_empty() {
        return Err(AeroError::Ingestion("corpus is empty".into()));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(AeroError::config("split", format!("{split} is outside (0, 1)")));
    }
    let n_train = (bytes.len() as f64 * split).floor() as usize;
    let mut train = bytes;
    let val = train.split_off(n_train);
    Ok(Corpus { train, val })
}

pub fn load_corpus(path: &Path, split: f64) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| AeroError::io(path, e))?;
    if bytes.is_empty() {
        return Err(AeroError::Ingestion(format!("corpus {} is empty", path.display())));
    }
    split_tokens(bytes, split)
}

/// Inputs and next-byte targets, both `[batch, seq]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

pub fn batch_at_offsets(tokens: &[u8], offsets: &[usize], seq: usize) -> Result<Batch> {
    let mut inputs = Vec::with_capacity(offsets.len() * seq);
    let mut targets = Vec::with_capacity(offsets.len() * seq);
    for &o in offsets {
        if o + seq + 1 > tokens.len() {
            return Err(AeroError::Range(format!(
                "window at {o} of length {} runs past {} tokens",
                seq + 1,
                tokens.len()
            )));
        }
        inputs.extend(tokens[o..o + seq].iter().map(|&b| b as usize));
        targets.extend(tokens[o + 1..o + seq + 1].iter().map(|&b| b as usize));
    }
    Ok(Batch { inputs, targets, batch: offsets.len(), seq })
}

/// Window starts for `step`, drawn from a ChaCha8 stream keyed by `(seed, step)`.
pub fn batch_offsets(len: usize, batch: usize, seq: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if len <= seq + 1 {
        return Err(AeroError::Ingestion(format!("{len} tokens cannot supply windows of {} tokens", seq + 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    let last = len - seq - 1;
    Ok((0..batch).map(|_| rng.random_range(0..=last)).collect())
}

pub fn make_batches(tokens: &[u8], batch: usize, seq: usize, seed: u64, step: u64) -> Result<Batch> {
    let offsets = batch_offsets(tokens.len(), batch, seq, seed, step)?;
    batch_at_offsets(tokens, &offsets, seq)
}

const WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "is", "that", "for", "it", "as", "was", "with", "be", "by", "on", "not",
    "he", "this", "are", "or", "his", "from", "at", "which", "but", "have", "an", "had", "they", "you", "were",
    "their", "one", "all", "we", "can", "her", "has", "there", "been", "if", "more", "when", "will", "would", "who",
    "so", "no", "model", "layer", "attention", "value", "small", "river", "house", "light", "number", "water",
    "people", "time", "world", "little", "between", "under", "through", "against", "morning", "question", "garden",
    "window", "because", "before", "after", "often", "simple", "return", "carried", "thought", "remember", "city",
];

/// Deterministic English-like text: Zipf-weighted words, sentences and
/// paragraphs. Used where no corpus file is supplied.
pub fn synthetic_text(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (1..=WORDS.len()).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    let mut out = Vec::with_capacity(bytes + 16);
    let mut sentence_len = 0;
    let mut capital = true;
    while out.len() < bytes {
        let mut pick = rng.random::<f64>() * total;
        let mut idx = 0;
        while pick > weights[idx] && idx + 1 < WORDS.len() {
            pick -= weights[idx];
            idx += 1;
        }
        let word = WORDS[idx].as_bytes();
        if capital {
            out.push(word[0].to_ascii_uppercase());
            out.extend_from_slice(&word[1..]);
            capital = false;
        } else {
            out.extend_from_slice(word);
        }
        sentence_len += 1;
        if sentence_len > 4 && rng.random::<f64>() < 0.15 {
            out.push(if rng.random::<f64>() < 0.9 { b'.' } else { b'?' });
            sentence_len = 0;
            capital = true;
            out.push(if rng.random::<f64>() < 0.1 { b'\n' } else { b' ' });
        } else if sentence_len > 2 && rng.random::<f64>() < 0.05 {
            out.extend_from_slice(b", ");
        } else {
            out.push(b' ');
        }
    }
    out.truncate(bytes);
    out
}
