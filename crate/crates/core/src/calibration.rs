//! Safety margin from positive prediction residuals, and the effective
//! canvas length it produces.
//!
//! The margin `δ` is the nearest-rank upper quantile at `p_safe` of the
//! residuals `k − L̂` over records the predictor under-estimated. Because no
//! interpolation happens, at most `⌊(1 − p_safe)·n⌋` of those `n` residuals
//! exceed `δ`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::PromptRecord;
use crate::predictor::GbdtModel;
use crate::{Error, Result, Tokens};

pub const DEFAULT_P_SAFE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyMargin {
    pub delta: Tokens,
    pub p_safe: f64,
    pub residual_count: usize,
    /// Which data slice produced the residuals, e.g. `validation`.
    pub source_split: String,
}

impl SafetyMargin {
    /// No margin at all.
    pub fn zero() -> Self {
        Self {
            delta: 0,
            p_safe: 1.0,
            residual_count: 0,
            source_split: "none".into(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let m: SafetyMargin = serde_json::from_reader(BufReader::new(file))?;
        validate_p_safe(m.p_safe)?;
        Ok(m)
    }
}

/// `model.json` → `model.margin.json`.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("margin.json")
}

fn validate_p_safe(p_safe: f64) -> Result<()> {
    if p_safe > 0.0 && p_safe <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("p_safe must be in (0, 1], got {p_safe}")))
    }
}

/// `{k − L̂ | k > L̂}` from `(predicted, true)` pairs.
pub fn positive_residuals_from_pairs(pairs: &[(Tokens, Tokens)]) -> Vec<Tokens> {
    pairs
        .iter()
        .filter(|(pred, truth)| truth > pred)
        .map(|(pred, truth)| truth - pred)
        .collect()
}

pub fn positive_residuals(model: &GbdtModel, records: &[PromptRecord]) -> Vec<Tokens> {
    let prompts: Vec<&str> = records.iter().map(|r| r.prompt_text.as_str()).collect();
    let preds = model.predict_many(&prompts);
    let pairs: Vec<(Tokens, Tokens)> = preds
        .into_iter()
        .zip(records.iter().map(|r| r.response_length))
        .collect();
    positive_residuals_from_pairs(&pairs)
}

/// Nearest-rank upper quantile: the `⌈p_safe·n⌉`-th smallest residual, or 0
/// for an empty set.
pub fn compute_delta(residuals: &[Tokens], p_safe: f64) -> Result<Tokens> {
    validate_p_safe(p_safe)?;
    if residuals.is_empty() {
        return Ok(0);
    }
    let n = residuals.len();
    // the epsilon keeps an exact product such as 0.95·20 from rounding up to 19.000…01
    let rank = ((p_safe * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let mut sorted = residuals.to_vec();
    sorted.sort_unstable();
    Ok(sorted[rank - 1])
}

/// Calibrates `δ` for `model` on `records`.
pub fn calibrate(
    model: &GbdtModel,
    records: &[PromptRecord],
    p_safe: f64,
    source_split: &str,
) -> Result<SafetyMargin> {
    let residuals = positive_residuals(model, records);
    Ok(SafetyMargin {
        delta: compute_delta(&residuals, p_safe)?,
        p_safe,
        residual_count: residuals.len(),
        source_split: source_split.to_string(),
    })
}

/// `L* = min(L̂ + δ, L_max)`.
pub fn effective_length(predicted: Tokens, delta: Tokens, l_max: Tokens) -> Tokens {
    predicted.saturating_add(delta).min(l_max)
}

/// Of the records the predictor under-estimated, the fraction still too
/// short after adding `delta`. Returns `None` when nothing was
/// under-estimated.
pub fn post_margin_miss_rate(pairs: &[(Tokens, Tokens)], delta: Tokens) -> Option<f64> {
    let residuals = positive_residuals_from_pairs(pairs);
    if residuals.is_empty() {
        return None;
    }
    let missed = residuals.iter().filter(|&&r| r > delta).count();
    Some(missed as f64 / residuals.len() as f64)
}
