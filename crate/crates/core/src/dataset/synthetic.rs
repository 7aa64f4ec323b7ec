//! Seeded mixture-distribution corpora with length-predictive prompts.
//!
//! Each record draws a mixture component by weight, samples a response
//! length from that component's family, and renders a prompt that asks for
//! a list of topics roughly proportional to that length. The item count and
//! the component's style keyword are the cues a predictor can learn from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use super::PromptRecord;
use crate::{Error, Result, Tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Every sample equals `mean`.
    Constant,
    /// `Normal(mean, spread)`, rounded.
    Normal,
    /// Log-normal whose mean and standard deviation equal `mean` and `spread`.
    Lognormal,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Family::Constant),
            "normal" => Ok(Family::Normal),
            "lognormal" => Ok(Family::Lognormal),
            other => Err(Error::invalid(format!("unknown distribution family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub label: String,
    pub weight: f64,
    pub mean: f64,
    pub spread: f64,
    pub family: Family,
    /// Phrase inserted into every prompt of this component.
    pub keyword: String,
}

impl MixtureComponent {
    /// A component whose keyword is chosen from its mean: "briefly" below
    /// 500 tokens, "in detail" otherwise.
    pub fn new(label: impl Into<String>, weight: f64, family: Family, mean: f64, spread: f64) -> Self {
        let keyword = if mean < 500.0 { "briefly" } else { "in detail" };
        Self {
            label: label.into(),
            weight,
            mean,
            spread,
            family,
            keyword: keyword.into(),
        }
    }
}

/// How strongly a prompt encodes its response length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueSpec {
    /// Response tokens per listed item.
    pub tokens_per_item: f64,
    /// Probability that the item count is off by one.
    pub jitter_prob: f64,
}

impl Default for CueSpec {
    fn default() -> Self {
        Self {
            tokens_per_item: 1.0,
            jitter_prob: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
    pub seed: u64,
    pub size: usize,
    #[serde(default)]
    pub cue: CueSpec,
}

impl MixtureSpec {
    /// Single heavy-tailed component with mean 96 and standard deviation 120.
    pub fn skewed(size: usize, seed: u64) -> Self {
        Self {
            components: vec![MixtureComponent::new("general", 1.0, Family::Lognormal, 96.0, 120.0)],
            seed,
            size,
            cue: CueSpec::default(),
        }
    }

    /// 60% short answers around 50 tokens, 40% long reports around 3000.
    pub fn bimodal(size: usize, seed: u64) -> Self {
        Self {
            components: vec![
                MixtureComponent::new("short", 0.6, Family::Lognormal, 50.0, 25.0),
                MixtureComponent::new("long", 0.4, Family::Normal, 3000.0, 500.0),
            ],
            seed,
            size,
            cue: CueSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::invalid("mixture size must be positive"));
        }
        if self.components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let mut total = 0.0;
        for c in &self.components {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::invalid(format!("component `{}`: weight must be positive", c.label)));
            }
            if !(c.mean.is_finite() && c.spread.is_finite() && c.spread >= 0.0) {
                return Err(Error::invalid(format!("component `{}`: bad mean/spread", c.label)));
            }
            if c.family == Family::Lognormal && c.mean <= 0.0 {
                return Err(Error::invalid(format!("component `{}`: lognormal mean must be positive", c.label)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("component weights sum to {total}, expected 1")));
        }
        if !(self.cue.tokens_per_item > 0.0 && (0.0..=1.0).contains(&self.cue.jitter_prob)) {
            return Err(Error::invalid("bad cue spec"));
        }
        Ok(())
    }
}

enum Sampler {
    Constant(f64),
    Normal(Normal<f64>),
    Lognormal(LogNormal<f64>),
}

impl Sampler {
    fn new(c: &MixtureComponent) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::invalid(format!("component `{}`: {e}", c.label));
        Ok(match c.family {
            Family::Constant => Sampler::Constant(c.mean),
            _ if c.spread == 0.0 => Sampler::Constant(c.mean),
            Family::Normal => Sampler::Normal(Normal::new(c.mean, c.spread).map_err(|e| bad(&e))?),
            Family::Lognormal => {
                let sigma2 = (1.0 + (c.spread / c.mean).powi(2)).ln();
                let mu = c.mean.ln() - sigma2 / 2.0;
                Sampler::Lognormal(LogNormal::new(mu, sigma2.sqrt()).map_err(|e| bad(&e))?)
            }
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Tokens {
        let x = match self {
            Sampler::Constant(v) => *v,
            Sampler::Normal(d) => d.sample(rng),
            Sampler::Lognormal(d) => d.sample(rng),
        };
        x.round().clamp(1.0, f64::from(Tokens::MAX)) as Tokens
    }
}

const VERBS: [&str; 6] = ["Explain", "Describe", "Write", "Summarize", "List", "Discuss"];

const TOPICS: [&str; 16] = [
    "the water cycle",
    "medieval trade routes",
    "sorting algorithms",
    "volcanic activity",
    "personal budgeting",
    "the French revolution",
    "photosynthesis",
    "distributed databases",
    "marathon training",
    "renaissance painting",
    "urban gardening",
    "quantum tunneling",
    "coffee brewing",
    "the immune system",
    "ocean currents",
    "jazz improvisation",
];

const ITEMS: [&str; 32] = [
    "history", "causes", "effects", "examples", "costs", "risks", "benefits", "tools",
    "methods", "limits", "origins", "trends", "theory", "practice", "metrics", "myths",
    "variants", "context", "evidence", "debates", "impact", "future", "basics", "details",
    "pitfalls", "steps", "goals", "sources", "actors", "timeline", "outcomes", "lessons",
];

fn render_prompt(rng: &mut ChaCha8Rng, k: Tokens, keyword: &str, cue: &CueSpec) -> String {
    let mut items = (f64::from(k) / cue.tokens_per_item).round().max(1.0) as usize;
    if rng.random_bool(cue.jitter_prob) {
        if rng.random_bool(0.5) {
            items += 1;
        } else {
            items = (items - 1).max(1);
        }
    }
    let verb = VERBS[rng.random_range(0..VERBS.len())];
    let topic = TOPICS[rng.random_range(0..TOPICS.len())];
    let list: Vec<&str> = (0..items)
        .map(|_| ITEMS[rng.random_range(0..ITEMS.len())])
        .collect();
    format!("{verb} {topic} {keyword}, covering these points: {}.", list.join(", "))
}

/// Draws `spec.size` records. Bit-reproducible for a fixed spec.
pub fn gen_synthetic(spec: &MixtureSpec) -> Result<Vec<PromptRecord>> {
    spec.validate()?;
    let samplers = spec
        .components
        .iter()
        .map(Sampler::new)
        .collect::<Result<Vec<_>>>()?;
    let mut cumulative = Vec::with_capacity(spec.components.len());
    let mut acc = 0.0;
    for c in &spec.components {
        acc += c.weight;
        cumulative.push(acc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let u: f64 = rng.random::<f64>() * acc;
        let ci = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(cumulative.len() - 1);
        let component = &spec.components[ci];
        let k = samplers[ci].sample(&mut rng);
        let prompt_text = render_prompt(&mut rng, k, &component.keyword, &spec.cue);
        records.push(PromptRecord {
            id: format!("syn-{i:06}"),
            prompt_text,
            response_text: None,
            response_length: k,
            component: Some(component.label.clone()),
        });
    }
    Ok(records)
}
