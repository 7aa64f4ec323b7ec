//! Prompt featurization: hashed n-gram counts plus a few dense statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::tokens;
use crate::{Error, Result};

/// Identifier stored in model files for the n-gram bucketing hash.
pub const HASH_ALGORITHM: &str = "fnv1a-64";

pub const DEFAULT_KEYWORDS: [&str; 9] = [
    "summarize", "list", "explain", "write", "poem", "essay", "code", "brief", "detail",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    TextOnly,
    Engineered,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TextOnly => "text-only",
            Variant::Engineered => "engineered",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text-only" => Ok(Variant::TextOnly),
            "engineered" => Ok(Variant::Engineered),
            other => Err(Error::invalid(format!("unknown predictor variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub hash_buckets: usize,
    pub keywords: Vec<String>,
    pub hash: String,
}

impl FeatureConfig {
    pub fn new(hash_buckets: usize) -> Self {
        Self {
            hash_buckets,
            keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            hash: HASH_ALGORITHM.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.hash_buckets.is_power_of_two() {
            return Err(Error::invalid(format!(
                "hash_buckets must be a power of two, got {}",
                self.hash_buckets
            )));
        }
        if self.hash != HASH_ALGORITHM {
            return Err(Error::Model(format!("unsupported n-gram hash `{}`", self.hash)));
        }
        Ok(())
    }

    pub fn dim(&self, variant: Variant) -> usize {
        let base = self.hash_buckets + 2;
        match variant {
            Variant::TextOnly => base,
            Variant::Engineered => base + self.keywords.len() + 6,
        }
    }

    /// Human-readable name for every feature index.
    pub fn feature_names(&self, variant: Variant) -> Vec<String> {
        let mut names: Vec<String> = (0..self.hash_buckets).map(|b| format!("ngram[{b}]")).collect();
        names.push("char_count".into());
        names.push("token_count".into());
        if variant == Variant::Engineered {
            names.extend(self.keywords.iter().map(|k| format!("kw:{k}")));
            names.extend(
                ["count:?", "count:!", "count:,", "count:newline", "count:code_fence", "char_entropy"]
                    .map(String::from),
            );
        }
        names
    }
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::new(4096)
    }
}

/// Feature values for one prompt. Stored sparsely; absent indices are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(u32, f64)>,
}

impl FeatureVector {
    pub fn from_dense(values: &[f64]) -> Self {
        Self {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, &v)| (i as u32, v))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, index: usize) -> f64 {
        match self.entries.binary_search_by_key(&(index as u32), |e| e.0) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => 0.0,
        }
    }

    /// Non-zero entries in ascending index order.
    pub fn nonzero(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, x) in &self.entries {
            v[i as usize] = x;
        }
        v
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Shannon entropy of the character distribution, in bits.
pub fn char_entropy(text: &str) -> f64 {
    let mut counts: BTreeMap<char, usize> = BTreeMap::new();
    let mut total = 0usize;
    for c in text.chars() {
        *counts.entry(c).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

pub fn featurize(prompt: &str, variant: Variant, config: &FeatureConfig) -> FeatureVector {
    let buckets = config.hash_buckets;
    let lower = prompt.to_lowercase();
    let toks: Vec<&str> = tokens(&lower).collect();

    let mut hashed: BTreeMap<u32, f64> = BTreeMap::new();
    let mut bump = |key: &str| {
        let b = (fnv1a64(key.as_bytes()) % buckets as u64) as u32;
        *hashed.entry(b).or_default() += 1.0;
    };
    for t in &toks {
        bump(t);
    }
    let mut pair = String::new();
    for w in toks.windows(2) {
        pair.clear();
        pair.push_str(w[0]);
        pair.push(' ');
        pair.push_str(w[1]);
        bump(&pair);
    }

    let mut entries: Vec<(u32, f64)> = hashed.into_iter().collect();
    let mut dense = vec![prompt.chars().count() as f64, toks.len() as f64];
    if variant == Variant::Engineered {
        for kw in &config.keywords {
            dense.push(if lower.contains(kw.as_str()) { 1.0 } else { 0.0 });
        }
        for c in ['?', '!', ',', '\n'] {
            dense.push(prompt.matches(c).count() as f64);
        }
        dense.push(prompt.matches("```").count() as f64);
        dense.push(char_entropy(prompt));
    }
    entries.extend(
        dense
            .into_iter()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .map(|(i, v)| ((buckets + i) as u32, v)),
    );

    FeatureVector {
        dim: config.dim(variant),
        entries,
    }
}
