//! Per-record simulation of canvas-sizing strategies.
//!
//! An attempt with response canvas `L` succeeds iff `L ≥ k`, the record's
//! true response length. Failed attempts are retried according to the
//! strategy and every attempt is charged its full inference cost. An attempt
//! at `L_max` that still fails ends the trace as truncated.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::effective_length;
use crate::cost_model::{total_inference_flop, ModelConfig};
use crate::dataset::{default_tokenize, PromptRecord};
use crate::predictor::GbdtModel;
use crate::{Error, Flop, Result, Tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    /// Always allocate `L_max`.
    MaxLength,
    /// Start at a fixed canvas and double on failure.
    StaticDoubling { initial: Tokens },
    /// Start at the rounded training-set mean and double on failure.
    MeanDoubling,
    /// Predicted length plus safety margin; one fallback to `L_max`.
    PredictThenDiffuse,
    /// Allocate exactly the true length.
    Oracle,
}

impl Strategy {
    /// All five strategies with the conventional 200-token static start.
    pub const ALL: [Strategy; 5] = [
        Strategy::MaxLength,
        Strategy::StaticDoubling { initial: 200 },
        Strategy::MeanDoubling,
        Strategy::PredictThenDiffuse,
        Strategy::Oracle,
    ];

    pub fn name(&self) -> String {
        match self {
            Strategy::MaxLength => "max-length".into(),
            Strategy::StaticDoubling { initial } => format!("static-doubling-{initial}"),
            Strategy::MeanDoubling => "mean-doubling".into(),
            Strategy::PredictThenDiffuse => "predict-then-diffuse".into(),
            Strategy::Oracle => "oracle".into(),
        }
    }

    /// Parses one short name: `max`, `static`, `static:<n>`, `mean`, `ptd`,
    /// `oracle`. Bare `static` uses `static_initial`.
    pub fn parse(token: &str, static_initial: Tokens) -> Result<Self> {
        let token = token.trim();
        match token {
            "max" | "max-length" => Ok(Strategy::MaxLength),
            "static" => Ok(Strategy::StaticDoubling {
                initial: static_initial,
            }),
            "mean" | "mean-doubling" => Ok(Strategy::MeanDoubling),
            "ptd" | "predict-then-diffuse" => Ok(Strategy::PredictThenDiffuse),
            "oracle" => Ok(Strategy::Oracle),
            other => match other.strip_prefix("static:") {
                Some(n) => {
                    let initial: Tokens = n
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad static initial length `{n}`")))?;
                    if initial == 0 {
                        return Err(Error::invalid("static initial length must be ≥ 1"));
                    }
                    Ok(Strategy::StaticDoubling { initial })
                }
                None => Err(Error::invalid(format!("unknown strategy `{other}`"))),
            },
        }
    }

    pub fn parse_list(list: &str, static_initial: Tokens) -> Result<Vec<Self>> {
        let out = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| Strategy::parse(s, static_initial))
            .collect::<Result<Vec<_>>>()?;
        if out.is_empty() {
            return Err(Error::invalid("no strategies given"));
        }
        Ok(out)
    }
}

/// Anything that can guess a record's response length.
pub trait LengthPredictor: Sync {
    fn predict(&self, record: &PromptRecord) -> Tokens;
}

impl LengthPredictor for GbdtModel {
    fn predict(&self, record: &PromptRecord) -> Tokens {
        self.predict_length(&record.prompt_text)
    }
}

/// Predicts the true length; a perfect predictor for what-if runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct TruthPredictor;

impl LengthPredictor for TruthPredictor {
    fn predict(&self, record: &PromptRecord) -> Tokens {
        record.response_length
    }
}

/// Inputs some strategies need beyond the record itself.
#[derive(Clone, Copy, Default)]
pub struct SimContext<'a> {
    /// Rounded training-set mean, for [`Strategy::MeanDoubling`].
    pub train_mean: Option<Tokens>,
    pub predictor: Option<&'a dyn LengthPredictor>,
    /// Safety margin for [`Strategy::PredictThenDiffuse`].
    pub delta: Option<Tokens>,
    /// Charge prompt tokens as part of every attempt's sequence length.
    pub include_prompt: bool,
}

impl std::fmt::Debug for SimContext<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimContext")
            .field("train_mean", &self.train_mean)
            .field("predictor", &self.predictor.map(|_| "<predictor>"))
            .field("delta", &self.delta)
            .field("include_prompt", &self.include_prompt)
            .finish()
    }
}

/// The first canvas a strategy allocates, before clamping to `L_max`.
pub fn plan_initial(strategy: Strategy, record: &PromptRecord, l_max: Tokens, ctx: &SimContext) -> Result<Tokens> {
    Ok(match strategy {
        Strategy::MaxLength => l_max,
        Strategy::StaticDoubling { initial } => initial.max(1),
        Strategy::MeanDoubling => ctx
            .train_mean
            .ok_or(Error::MissingContext("mean-doubling needs the training-set mean"))?
            .max(1),
        Strategy::PredictThenDiffuse => {
            let predictor = ctx
                .predictor
                .ok_or(Error::MissingContext("predict-then-diffuse needs a trained predictor"))?;
            let delta = ctx
                .delta
                .ok_or(Error::MissingContext("predict-then-diffuse needs a safety margin"))?;
            effective_length(predictor.predict(record).max(1), delta, l_max)
        }
        Strategy::Oracle => record.response_length,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptTrace {
    pub record_id: String,
    pub strategy: String,
    pub true_length: Tokens,
    /// Response canvases tried, strictly increasing.
    pub attempted_lengths: Vec<Tokens>,
    pub attempt_flops: Vec<Flop>,
    pub fallback_count: usize,
    pub truncated: bool,
    pub final_length: Tokens,
}

impl AttemptTrace {
    pub fn attempts(&self) -> usize {
        self.attempted_lengths.len()
    }
}

/// Total cost of a trace, retries included.
pub fn sample_cost(trace: &AttemptTrace) -> Result<Flop> {
    trace
        .attempt_flops
        .iter()
        .try_fold(0u128, |acc, &f| acc.checked_add(f))
        .ok_or(Error::Overflow("sample cost"))
}

pub fn simulate_sample(
    strategy: Strategy,
    record: &PromptRecord,
    config: &ModelConfig,
    ctx: &SimContext,
) -> Result<AttemptTrace> {
    let l_max = config.max_response_len;
    let k = record.response_length;
    let prompt_tokens = if ctx.include_prompt {
        default_tokenize(&record.prompt_text) as u64
    } else {
        0
    };

    let mut lengths = Vec::new();
    let mut flops = Vec::new();
    let mut canvas = plan_initial(strategy, record, l_max, ctx)?.min(l_max);
    let truncated = loop {
        lengths.push(canvas);
        flops.push(total_inference_flop(config, u64::from(canvas) + prompt_tokens)?);
        if canvas >= k {
            break false;
        }
        if canvas == l_max {
            break true;
        }
        canvas = match strategy {
            Strategy::StaticDoubling { .. } | Strategy::MeanDoubling => canvas.saturating_mul(2).min(l_max),
            Strategy::PredictThenDiffuse => l_max,
            // these start at their final canvas; reaching here means k > L_max
            Strategy::MaxLength | Strategy::Oracle => unreachable!("single-shot strategy retried"),
        };
    };

    Ok(AttemptTrace {
        record_id: record.id.clone(),
        strategy: strategy.name(),
        true_length: k,
        final_length: *lengths.last().unwrap(),
        fallback_count: lengths.len() - 1,
        attempted_lengths: lengths,
        attempt_flops: flops,
        truncated,
    })
}

pub fn write_traces<W: Write>(mut writer: W, traces: &[AttemptTrace]) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut writer, t)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<trace writer>", e))?;
    }
    Ok(())
}

pub fn save_traces(path: &Path, traces: &[AttemptTrace]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_traces(&mut w, traces)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_traces(path: &Path) -> Result<Vec<AttemptTrace>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
