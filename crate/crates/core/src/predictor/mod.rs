//! Response-length predictor: a least-squares gradient-boosted tree
//! ensemble over prompt features.
//!
//! Training starts from the mean target and fits each new tree to the
//! current residuals with exact greedy splits. Predictions are rounded half
//! away from zero and clamped to at least one token.

pub mod features;
pub mod tree;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PromptRecord;
use crate::{Error, Result, Tokens};

pub use features::{featurize, FeatureConfig, FeatureVector, Variant};
pub use tree::{best_root_split, ChosenSplit, Node, Tree};

use tree::{grow, ColumnMatrix, GrowParams};

/// Version written to and required from model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Upper bound on boosting rounds; training stops early once a round
    /// can no longer reduce training error.
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub hash_buckets: usize,
    /// Recorded with the model. Tree growth itself is deterministic and
    /// does not sample.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 200,
            max_depth: 6,
            learning_rate: 0.1,
            min_samples_leaf: 20,
            hash_buckets: 4096,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::invalid("rounds, max_depth and min_samples_leaf must be ≥ 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::invalid(format!(
                "learning_rate must be in (0, 1], got {}",
                self.learning_rate
            )));
        }
        FeatureConfig::new(self.hash_buckets).validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub format_version: u32,
    pub variant: Variant,
    pub feature_config: FeatureConfig,
    pub base_score: f64,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub trees: Vec<Tree>,
    /// Training RMSE before the first tree and after every tree.
    pub train_rmse: Vec<f64>,
    /// Free-form provenance (data digest, split seeds) set by callers.
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub pct_within_10: f64,
}

fn featurize_all(prompts: &[&str], variant: Variant, cfg: &FeatureConfig) -> Vec<FeatureVector> {
    prompts
        .par_iter()
        .map(|p| featurize(p, variant, cfg))
        .collect()
}

fn rmse(residuals: &[f64]) -> f64 {
    (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt()
}

/// Boosts trees over precomputed feature rows.
pub fn train_rows(
    rows: &[FeatureVector],
    targets: &[f64],
    variant: Variant,
    feature_config: FeatureConfig,
    config: &TrainConfig,
) -> Result<GbdtModel> {
    config.validate()?;
    if rows.is_empty() || rows.len() != targets.len() {
        return Err(Error::invalid("training needs one target per non-empty feature row"));
    }
    if let Some(i) = targets.iter().position(|y| !y.is_finite()) {
        return Err(Error::invalid(format!("training target {i} is not finite")));
    }
    let dim = rows[0].dim();
    let matrix = ColumnMatrix::from_rows(rows, dim)?;
    debug_assert_eq!(matrix.n_features(), dim);

    let n = targets.len() as f64;
    let base_score = targets.iter().sum::<f64>() / n;
    let mut residuals: Vec<f64> = targets.iter().map(|y| y - base_score).collect();
    let mut sse: f64 = residuals.iter().map(|r| r * r).sum();
    let mut train_rmse = vec![rmse(&residuals)];
    let params = GrowParams {
        max_depth: config.max_depth,
        min_samples_leaf: config.min_samples_leaf,
    };

    let lr = config.learning_rate;
    let mut trees = Vec::new();
    for _ in 0..config.rounds {
        let (tree, leaf_of_row) = grow(&matrix, &residuals, params);
        let updated: Vec<f64> = residuals
            .iter()
            .zip(&leaf_of_row)
            .map(|(r, &leaf)| match tree.nodes[leaf as usize] {
                Node::Leaf { value } => r - lr * value,
                Node::Split { .. } => unreachable!("rows always end at a leaf"),
            })
            .collect();
        let new_sse: f64 = updated.iter().map(|r| r * r).sum();
        if new_sse > sse {
            break;
        }
        let no_split = tree.nodes.len() == 1;
        residuals = updated;
        sse = new_sse;
        train_rmse.push(rmse(&residuals));
        trees.push(tree);
        if no_split {
            break;
        }
    }

    Ok(GbdtModel {
        format_version: MODEL_FORMAT_VERSION,
        variant,
        feature_config,
        base_score,
        learning_rate: lr,
        max_depth: config.max_depth,
        trees,
        train_rmse,
        metadata: BTreeMap::new(),
    })
}

/// Trains a predictor for the records' response lengths.
pub fn train(records: &[PromptRecord], variant: Variant, config: &TrainConfig) -> Result<GbdtModel> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let fc = FeatureConfig::new(config.hash_buckets);
    let prompts: Vec<&str> = records.iter().map(|r| r.prompt_text.as_str()).collect();
    let rows = featurize_all(&prompts, variant, &fc);
    let targets: Vec<f64> = records.iter().map(|r| f64::from(r.response_length)).collect();
    train_rows(&rows, &targets, variant, fc, config)
}

/// Rounds a raw ensemble output to a token count: half away from zero, at
/// least one.
pub fn round_length(raw: f64) -> Tokens {
    raw.round().clamp(1.0, f64::from(Tokens::MAX)) as Tokens
}

impl GbdtModel {
    pub fn dim(&self) -> usize {
        self.feature_config.dim(self.variant)
    }

    pub fn featurize(&self, prompt: &str) -> FeatureVector {
        featurize(prompt, self.variant, &self.feature_config)
    }

    pub fn predict_raw_features(&self, fv: &FeatureVector) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(fv)).sum();
        self.base_score + self.learning_rate * sum
    }

    pub fn predict_raw(&self, prompt: &str) -> f64 {
        self.predict_raw_features(&self.featurize(prompt))
    }

    pub fn predict_length(&self, prompt: &str) -> Tokens {
        round_length(self.predict_raw(prompt))
    }

    /// Predicted lengths for many prompts, in input order.
    pub fn predict_many(&self, prompts: &[&str]) -> Vec<Tokens> {
        prompts.par_iter().map(|p| self.predict_length(p)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.feature_config.validate()?;
        if !(self.base_score.is_finite() && self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Model("bad base_score or learning_rate".into()));
        }
        let dim = self.dim();
        for (i, t) in self.trees.iter().enumerate() {
            t.validate(dim, self.max_depth)
                .map_err(|e| Error::Model(format!("tree {i}: {e}")))?;
        }
        Ok(())
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
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(MODEL_FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Model(format!(
                    "{}: unsupported model format version {v}",
                    path.display()
                )))
            }
            None => return Err(Error::Model(format!("{}: missing format_version", path.display()))),
        }
        let model: GbdtModel = serde_json::from_value(value)
            .map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
        model.validate()?;
        Ok(model)
    }
}

pub fn save_model(model: &GbdtModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<GbdtModel> {
    GbdtModel::load(path)
}

pub fn predict_length(model: &GbdtModel, prompt: &str) -> Tokens {
    model.predict_length(prompt)
}

/// Error metrics of `(predicted, true)` length pairs. A prediction counts
/// as within 10% when `|L̂ − k| ≤ 0.10·k`.
pub fn metrics_from_pairs(pairs: &[(Tokens, Tokens)]) -> RegressionMetrics {
    if pairs.is_empty() {
        return RegressionMetrics {
            rmse: 0.0,
            mae: 0.0,
            pct_within_10: 100.0,
        };
    }
    let n = pairs.len() as f64;
    let (mut se, mut ae, mut within) = (0.0, 0.0, 0usize);
    for &(pred, truth) in pairs {
        let err = f64::from(pred) - f64::from(truth);
        se += err * err;
        ae += err.abs();
        // integer form of |err| ≤ 0.1·k, avoiding 0.1 rounding at the boundary
        if 10 * u64::from(pred.abs_diff(truth)) <= u64::from(truth) {
            within += 1;
        }
    }
    RegressionMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        pct_within_10: 100.0 * within as f64 / n,
    }
}

pub fn evaluate(model: &GbdtModel, records: &[PromptRecord]) -> RegressionMetrics {
    let prompts: Vec<&str> = records.iter().map(|r| r.prompt_text.as_str()).collect();
    let preds = model.predict_many(&prompts);
    let pairs: Vec<(Tokens, Tokens)> = preds
        .into_iter()
        .zip(records.iter().map(|r| r.response_length))
        .collect();
    metrics_from_pairs(&pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(prompt: &str, k: Tokens) -> PromptRecord {
        PromptRecord {
            id: prompt.into(),
            prompt_text: prompt.into(),
            response_text: None,
            response_length: k,
            component: None,
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            rounds: 10,
            max_depth: 3,
            learning_rate: 0.5,
            min_samples_leaf: 1,
            hash_buckets: 64,
            seed: 0,
        }
    }

    #[test]
    fn constant_target_absorbed_by_base_score() {
        let recs: Vec<_> = (0..30).map(|i| rec(&"x ".repeat(i + 1), 50)).collect();
        let m = train(&recs, Variant::TextOnly, &small_config()).unwrap();
        assert_eq!(m.base_score, 50.0);
        for p in ["", "anything at all", "x x x"] {
            assert_eq!(m.predict_length(p), 50);
        }
    }

    #[test]
    fn three_point_example_end_to_end() {
        let rows: Vec<FeatureVector> = [1.0, 2.0, 3.0]
            .iter()
            .map(|&x| FeatureVector::from_dense(&[x]))
            .collect();
        let cfg = TrainConfig {
            rounds: 1,
            max_depth: 1,
            learning_rate: 1.0,
            min_samples_leaf: 1,
            hash_buckets: 1,
            seed: 0,
        };
        let m = train_rows(&rows, &[0.0, 0.0, 10.0], Variant::TextOnly, FeatureConfig::new(1), &cfg)
            .unwrap();
        assert!((m.base_score - 10.0 / 3.0).abs() < 1e-15);
        let leaves: Vec<f64> = m.trees[0]
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { value } => Some(*value),
                _ => None,
            })
            .collect();
        assert!((leaves[0] + 10.0 / 3.0).abs() < 1e-12);
        assert!((leaves[1] - 20.0 / 3.0).abs() < 1e-12);
        let preds: Vec<f64> = rows.iter().map(|r| m.predict_raw_features(r)).collect();
        for (p, want) in preds.iter().zip([0.0, 0.0, 10.0]) {
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_length(104.5), 105);
        assert_eq!(round_length(104.49), 104);
        assert_eq!(round_length(0.2), 1);
        assert_eq!(round_length(-7.0), 1);
    }

    #[test]
    fn metrics_cases() {
        let m = metrics_from_pairs(&[(5, 5), (9, 9)]);
        assert_eq!((m.rmse, m.mae, m.pct_within_10), (0.0, 0.0, 100.0));
        assert_eq!(metrics_from_pairs(&[(110, 100)]).pct_within_10, 100.0);
        assert_eq!(metrics_from_pairs(&[(90, 100)]).pct_within_10, 100.0);
        assert_eq!(metrics_from_pairs(&[(111, 100)]).pct_within_10, 0.0);
        assert_eq!(metrics_from_pairs(&[(2, 1)]).pct_within_10, 0.0);
        let m = metrics_from_pairs(&[(1, 4), (4, 4)]);
        assert!((m.rmse - (4.5f64).sqrt()).abs() < 1e-12);
        assert_eq!(m.mae, 1.5);
    }

    #[test]
    fn training_errors() {
        assert!(train(&[], Variant::TextOnly, &small_config()).is_err());
        let rows = vec![FeatureVector::from_dense(&[1.0])];
        let cfg = small_config();
        assert!(train_rows(&rows, &[f64::NAN], Variant::TextOnly, FeatureConfig::new(1), &cfg).is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..small_config()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            hash_buckets: 1000,
            ..small_config()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn learns_length_from_prompt_size_and_loss_is_monotone() {
        let recs: Vec<_> = (0..200)
            .map(|i| rec(&"item, ".repeat(i % 20 + 1), (8 * (i % 20 + 1)) as Tokens))
            .collect();
        let m = train(&recs, Variant::TextOnly, &TrainConfig { rounds: 60, ..small_config() }).unwrap();
        assert!(m.train_rmse.windows(2).all(|w| w[1] <= w[0]));
        let metrics = evaluate(&m, &recs);
        assert!(metrics.mae < 1.0, "{metrics:?}");
        assert!(m.trees.iter().all(|t| t.depth() <= 3));
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let recs: Vec<_> = (0..50).map(|i| rec(&"a b ".repeat(i % 7 + 1), (i % 7 + 3) as Tokens)).collect();
        let m = train(&recs, Variant::Engineered, &small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = GbdtModel::load(&path).unwrap();
        assert_eq!(m, back);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(GbdtModel::load(&path), Err(Error::Model(_))));

        std::fs::write(&path, text.replacen("\"format_version\": 1", "\"format_version\": 9", 1)).unwrap();
        let err = GbdtModel::load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
