//! Strategy sweeps, report aggregation and the canned experiments built on
//! top of them.
//!
//! All per-strategy totals are exact integer sums, so results do not depend
//! on record order or on how the worker pool schedules records.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, SafetyMargin, DEFAULT_P_SAFE};
use crate::cost_model::ModelConfig;
use crate::dataset::{compute_stats, gen_synthetic, split_indices, DatasetStats, MixtureSpec, PromptRecord};
use crate::predictor::{round_length, train, GbdtModel, TrainConfig, Variant};
use crate::strategies::{sample_cost, simulate_sample, AttemptTrace, SimContext, Strategy, TruthPredictor};
use crate::{Error, Flop, Result, Tokens, FLOP_PER_TFLOP};

pub const CSV_HEADER: [&str; 7] = [
    "strategy",
    "total_flop",
    "savings_pct",
    "fallback_rate_pct",
    "truncation_rate_pct",
    "mean_attempts",
    "attempts_p99",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub total_flop: Flop,
    pub total_tflop: f64,
    pub savings_pct: f64,
    /// Records needing at least one retry.
    pub fallback_rate_pct: f64,
    pub truncation_rate_pct: f64,
    pub mean_attempts: f64,
    pub attempts_p99: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub record_count: usize,
    /// Absent for datasets too small to summarise.
    pub dataset: Option<DatasetStats>,
    pub model_config: ModelConfig,
    pub include_prompt: bool,
    pub train_mean: Option<Tokens>,
    pub delta: Option<Tokens>,
    pub seed: Option<u64>,
    /// Unix seconds; the only field allowed to differ between identical runs.
    pub timestamp_unix: Option<u64>,
    #[serde(default)]
    pub flags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub metadata: ReportMetadata,
    pub strategies: Vec<StrategyRow>,
}

impl BenchmarkReport {
    pub fn row(&self, strategy: &str) -> Option<&StrategyRow> {
        self.strategies.iter().find(|r| r.strategy == strategy)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub timestamp_unix: Option<u64>,
    pub flags: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct BenchRun {
    pub report: BenchmarkReport,
    /// Strategy-major, records in input order within each strategy.
    pub traces: Vec<AttemptTrace>,
}

/// Nearest-rank quantile of an ascending slice.
fn nearest_rank<T: Copy>(sorted: &[T], p: f64) -> T {
    let n = sorted.len();
    let rank = ((p * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

fn pct(part: usize, whole: usize) -> f64 {
    100.0 * part as f64 / whole as f64
}

/// `100·(1 − flop/max_flop)`.
pub fn savings_pct(flop: Flop, max_flop: Flop) -> f64 {
    if max_flop == 0 {
        return 0.0;
    }
    // Difference taken in integers to avoid cancellation near 100%.
    let pct = |d: Flop| 100.0 * (d as f64 / max_flop as f64);
    if flop <= max_flop {
        pct(max_flop - flop)
    } else {
        -pct(flop - max_flop)
    }
}

/// Aggregates one strategy's traces. `max_flop` is the MaxLength total on
/// the same records.
pub fn summarize_traces(strategy: &str, traces: &[AttemptTrace], max_flop: Flop) -> Result<StrategyRow> {
    if traces.is_empty() {
        return Err(Error::invalid("no traces to summarize"));
    }
    let mut total: Flop = 0;
    let mut attempts = Vec::with_capacity(traces.len());
    let (mut fallbacks, mut truncations) = (0usize, 0usize);
    for t in traces {
        total = total
            .checked_add(sample_cost(t)?)
            .ok_or(Error::Overflow("strategy total"))?;
        attempts.push(t.attempts());
        fallbacks += usize::from(t.fallback_count > 0);
        truncations += usize::from(t.truncated);
    }
    let n = traces.len();
    let attempt_sum: usize = attempts.iter().sum();
    attempts.sort_unstable();
    Ok(StrategyRow {
        strategy: strategy.to_string(),
        total_flop: total,
        total_tflop: total as f64 / FLOP_PER_TFLOP,
        savings_pct: savings_pct(total, max_flop),
        fallback_rate_pct: pct(fallbacks, n),
        truncation_rate_pct: pct(truncations, n),
        mean_attempts: attempt_sum as f64 / n as f64,
        attempts_p99: nearest_rank(&attempts, 0.99),
    })
}

fn simulate_all(
    strategy: Strategy,
    records: &[PromptRecord],
    config: &ModelConfig,
    ctx: &SimContext,
) -> Result<Vec<AttemptTrace>> {
    records
        .par_iter()
        .map(|r| simulate_sample(strategy, r, config, ctx))
        .collect()
}

/// Simulates every `(strategy, record)` pair. MaxLength is always simulated
/// as the savings denominator, and reported only if requested.
pub fn run_benchmark(
    strategies: &[Strategy],
    records: &[PromptRecord],
    config: &ModelConfig,
    ctx: &SimContext,
    opts: &BenchOptions,
) -> Result<BenchRun> {
    if records.is_empty() {
        return Err(Error::invalid("benchmark needs at least one record"));
    }
    if strategies.is_empty() {
        return Err(Error::invalid("benchmark needs at least one strategy"));
    }
    config.validate()?;

    let body = || -> Result<BenchRun> {
        let max_traces = simulate_all(Strategy::MaxLength, records, config, ctx)?;
        let max_flop = summarize_traces("max", &max_traces, 0)?.total_flop;
        let mut rows = Vec::with_capacity(strategies.len());
        let mut traces = Vec::with_capacity(strategies.len() * records.len());
        for &s in strategies {
            let ts = if s == Strategy::MaxLength {
                max_traces.clone()
            } else {
                simulate_all(s, records, config, ctx)?
            };
            rows.push(summarize_traces(&s.name(), &ts, max_flop)?);
            traces.extend(ts);
        }
        Ok(BenchRun {
            report: BenchmarkReport {
                metadata: ReportMetadata {
                    record_count: records.len(),
                    dataset: compute_stats(records).ok(),
                    model_config: *config,
                    include_prompt: ctx.include_prompt,
                    train_mean: ctx.train_mean,
                    delta: ctx.delta,
                    seed: opts.seed,
                    timestamp_unix: opts.timestamp_unix,
                    flags: opts.flags.clone(),
                },
                strategies: rows,
            },
            traces,
        })
    };

    match opts.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?
            .install(body),
        None => body(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::invalid(format!("unknown report format `{other}` (expected json or csv)"))),
        }
    }
}

impl ReportFormat {
    /// Picks the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        path.extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .parse()
    }
}

pub fn write_report<W: Write>(writer: W, report: &BenchmarkReport, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let mut w = writer;
            serde_json::to_writer_pretty(&mut w, report)?;
            w.write_all(b"\n").map_err(|e| Error::io("<report writer>", e))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            w.write_record(CSV_HEADER)?;
            for r in &report.strategies {
                w.write_record([
                    r.strategy.clone(),
                    r.total_flop.to_string(),
                    r.savings_pct.to_string(),
                    r.fallback_rate_pct.to_string(),
                    r.truncation_rate_pct.to_string(),
                    r.mean_attempts.to_string(),
                    r.attempts_p99.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io("<report writer>", e))
        }
    }
}

pub fn export_report(report: &BenchmarkReport, format: ReportFormat, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_report(&mut w, report, format)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_report_json(path: &Path) -> Result<BenchmarkReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Parses the CSV form back into rows.
pub fn read_report_csv<R: Read>(reader: R) -> Result<Vec<StrategyRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::invalid(format!("unexpected report header {header:?}")));
    }
    let field = |rec: &csv::StringRecord, i: usize| rec.get(i).unwrap_or("").to_string();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Record {
            record: line + 1,
            message: format!("bad {what}"),
        };
        let total_flop: Flop = field(&rec, 1).parse().map_err(|_| bad("total_flop"))?;
        let num = |i: usize, what: &str| field(&rec, i).parse::<f64>().map_err(|_| bad(what));
        rows.push(StrategyRow {
            strategy: field(&rec, 0),
            total_flop,
            total_tflop: total_flop as f64 / FLOP_PER_TFLOP,
            savings_pct: num(2, "savings_pct")?,
            fallback_rate_pct: num(3, "fallback_rate_pct")?,
            truncation_rate_pct: num(4, "truncation_rate_pct")?,
            mean_attempts: num(5, "mean_attempts")?,
            attempts_p99: field(&rec, 6).parse().map_err(|_| bad("attempts_p99"))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub count: usize,
    pub single_shot_pct: f64,
    pub retry_rate_pct: f64,
    pub truncated_pct: f64,
    /// Attempt count → number of traces.
    pub attempts_histogram: BTreeMap<usize, usize>,
    pub attempts_p99: usize,
    pub max_attempts: usize,
}

pub fn latency_profile(traces: &[AttemptTrace]) -> Result<LatencyProfile> {
    if traces.is_empty() {
        return Err(Error::invalid("latency profile needs at least one trace"));
    }
    let mut attempts: Vec<usize> = traces.iter().map(AttemptTrace::attempts).collect();
    attempts.sort_unstable();
    let mut histogram = BTreeMap::new();
    for &a in &attempts {
        *histogram.entry(a).or_insert(0) += 1;
    }
    let n = traces.len();
    let single = histogram.get(&1).copied().unwrap_or(0);
    Ok(LatencyProfile {
        count: n,
        single_shot_pct: pct(single, n),
        retry_rate_pct: pct(n - single, n),
        truncated_pct: pct(traces.iter().filter(|t| t.truncated).count(), n),
        attempts_p99: nearest_rank(&attempts, 0.99),
        max_attempts: *attempts.last().unwrap(),
        attempts_histogram: histogram,
    })
}

/// How records are carved up for training and calibration.
///
/// Records split `train_ratio` / rest into train and test; train splits
/// again `fit_ratio` / rest into the slice the predictor is fitted on and
/// the validation slice `δ` is calibrated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_ratio: f64,
    pub fit_ratio: f64,
    pub split_seed: u64,
    pub p_safe: f64,
    pub variant: Variant,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_ratio: 0.8,
            fit_ratio: 0.8,
            split_seed: 42,
            p_safe: DEFAULT_P_SAFE,
            variant: Variant::TextOnly,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Slices {
    pub train: Vec<PromptRecord>,
    pub test: Vec<PromptRecord>,
    pub fit: Vec<PromptRecord>,
    pub validation: Vec<PromptRecord>,
}

pub fn split_slices(records: &[PromptRecord], train_ratio: f64, fit_ratio: f64, seed: u64) -> Result<Slices> {
    let pick = |src: &[PromptRecord], idx: &[usize]| -> Vec<PromptRecord> { idx.iter().map(|&i| src[i].clone()).collect() };
    let (tr, te) = split_indices(records.len(), train_ratio, seed)?;
    let train = pick(records, &tr);
    let (fi, va) = split_indices(train.len(), fit_ratio, seed.wrapping_add(1))?;
    Ok(Slices {
        fit: pick(&train, &fi),
        validation: pick(&train, &va),
        test: pick(records, &te),
        train,
    })
}

/// Rounded mean response length, at least one token.
pub fn mean_length(records: &[PromptRecord]) -> Result<Tokens> {
    if records.is_empty() {
        return Err(Error::invalid("mean of an empty dataset"));
    }
    let sum: f64 = records.iter().map(|r| f64::from(r.response_length)).sum();
    Ok(round_length(sum / records.len() as f64))
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub slices: Slices,
    pub model: GbdtModel,
    pub margin: SafetyMargin,
    /// Rounded mean over the whole train slice.
    pub train_mean: Tokens,
}

impl Pipeline {
    pub fn context(&self, include_prompt: bool) -> SimContext<'_> {
        SimContext {
            train_mean: Some(self.train_mean),
            predictor: Some(&self.model),
            delta: Some(self.margin.delta),
            include_prompt,
        }
    }
}

/// Split, fit the predictor, and calibrate `δ` on the validation slice.
pub fn run_pipeline(records: &[PromptRecord], cfg: &PipelineConfig) -> Result<Pipeline> {
    let slices = split_slices(records, cfg.train_ratio, cfg.fit_ratio, cfg.split_seed)?;
    let model = train(&slices.fit, cfg.variant, &cfg.train)?;
    let margin = calibrate(&model, &slices.validation, cfg.p_safe, "validation")?;
    let train_mean = mean_length(&slices.train)?;
    Ok(Pipeline {
        slices,
        model,
        margin,
        train_mean,
    })
}

#[derive(Debug, Clone)]
pub struct BimodalConfig {
    pub size: usize,
    pub data_seed: u64,
    pub pipeline: PipelineConfig,
}

impl Default for BimodalConfig {
    fn default() -> Self {
        Self {
            size: 10_000,
            data_seed: 42,
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BimodalReport {
    pub dataset: DatasetStats,
    pub test_records: usize,
    pub train_mean: Tokens,
    pub delta: Tokens,
    pub mean_doubling_flop: Flop,
    pub ptd_flop: Flop,
    /// `100·(1 − flop_PtD/flop_MeanDoubling)`.
    pub advantage_pct: f64,
    /// Same comparison with the true length as the prediction.
    pub truth_predictor_advantage_pct: f64,
    pub mean_doubling_fallback_rate_pct: f64,
    pub ptd_fallback_rate_pct: f64,
    pub long_records: usize,
    /// Long-component test records where MeanDoubling needed ≥ 3 attempts.
    pub long_multi_attempt_pct: f64,
}

fn total_of(traces: &[AttemptTrace]) -> Result<Flop> {
    traces.iter().try_fold(0u128, |acc, t| {
        acc.checked_add(sample_cost(t)?).ok_or(Error::Overflow("total"))
    })
}

/// Generates the 60/40 bimodal mixture, trains and calibrates on its train
/// slice, and compares MeanDoubling with PredictThenDiffuse on the test
/// slice.
pub fn bimodal_experiment(config: &ModelConfig, cfg: &BimodalConfig) -> Result<BimodalReport> {
    let records = gen_synthetic(&MixtureSpec::bimodal(cfg.size, cfg.data_seed))?;
    let pipe = run_pipeline(&records, &cfg.pipeline)?;
    let test = &pipe.slices.test;
    let ctx = pipe.context(false);

    let md = simulate_all(Strategy::MeanDoubling, test, config, &ctx)?;
    let ptd = simulate_all(Strategy::PredictThenDiffuse, test, config, &ctx)?;
    let truth_ctx = SimContext {
        predictor: Some(&TruthPredictor),
        delta: Some(0),
        ..ctx
    };
    let ptd_truth = simulate_all(Strategy::PredictThenDiffuse, test, config, &truth_ctx)?;

    let (md_flop, ptd_flop, truth_flop) = (total_of(&md)?, total_of(&ptd)?, total_of(&ptd_truth)?);
    let long: Vec<&AttemptTrace> = test
        .iter()
        .zip(&md)
        .filter(|(r, _)| r.component.as_deref() == Some("long"))
        .map(|(_, t)| t)
        .collect();
    let long_multi = long.iter().filter(|t| t.attempts() >= 3).count();
    let fallback_pct = |ts: &[AttemptTrace]| pct(ts.iter().filter(|t| t.fallback_count > 0).count(), ts.len());

    Ok(BimodalReport {
        dataset: compute_stats(&records)?,
        test_records: test.len(),
        train_mean: pipe.train_mean,
        delta: pipe.margin.delta,
        mean_doubling_flop: md_flop,
        ptd_flop,
        advantage_pct: savings_pct(ptd_flop, md_flop),
        truth_predictor_advantage_pct: savings_pct(truth_flop, md_flop),
        mean_doubling_fallback_rate_pct: fallback_pct(&md),
        ptd_fallback_rate_pct: fallback_pct(&ptd),
        long_records: long.len(),
        long_multi_attempt_pct: if long.is_empty() { 0.0 } else { pct(long_multi, long.len()) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_model::total_inference_flop;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use proptest::strategy::Strategy as _;

    fn rec(id: usize, k: Tokens) -> PromptRecord {
        PromptRecord {
            id: format!("r{id}"),
            prompt_text: format!("prompt number {id}"),
            response_text: None,
            response_length: k,
            component: None,
        }
    }

    fn simple_ctx() -> SimContext<'static> {
        SimContext {
            train_mean: Some(100),
            predictor: Some(&TruthPredictor),
            delta: Some(0),
            include_prompt: false,
        }
    }

    fn bench(records: &[PromptRecord]) -> BenchRun {
        run_benchmark(&Strategy::ALL, records, &ModelConfig::LLADA_8B, &simple_ctx(), &BenchOptions::default()).unwrap()
    }

    #[test]
    fn single_record_at_cap_ties() {
        let run = bench(&[rec(0, 4096)]);
        for name in ["max-length", "predict-then-diffuse", "oracle"] {
            assert_eq!(run.report.row(name).unwrap().savings_pct, 0.0, "{name}");
        }
        // doubling reaches the cap only after paying for smaller canvases
        assert!(run.report.row("mean-doubling").unwrap().savings_pct < 0.0);
        assert!(run.report.metadata.dataset.is_none());
    }

    #[test]
    fn empty_inputs_rejected() {
        let cfg = ModelConfig::LLADA_8B;
        assert!(run_benchmark(&Strategy::ALL, &[], &cfg, &simple_ctx(), &BenchOptions::default()).is_err());
        assert!(run_benchmark(&[], &[rec(0, 1)], &cfg, &simple_ctx(), &BenchOptions::default()).is_err());
        assert!(latency_profile(&[]).is_err());
    }

    #[test]
    fn totals_and_percentages() {
        let records = [rec(0, 50), rec(1, 300), rec(2, 5000)];
        let run = bench(&records);
        let cfg = ModelConfig::LLADA_8B;
        let f = |l: u64| total_inference_flop(&cfg, l).unwrap();
        let max = run.report.row("max-length").unwrap();
        assert_eq!(max.total_flop, 3 * f(4096));
        assert_eq!(max.savings_pct, 0.0);
        assert!((max.truncation_rate_pct - 100.0 / 3.0).abs() < 1e-12);

        let st = run.report.row("static-doubling-200").unwrap();
        // 50: [200]; 300: [200, 400]; 5000: [200 … 3200, 4096]
        let want = f(200) + f(200) + f(400) + [200, 400, 800, 1600, 3200, 4096].iter().map(|&l| f(l)).sum::<u128>();
        assert_eq!(st.total_flop, want);
        assert!((st.fallback_rate_pct - 200.0 / 3.0).abs() < 1e-12);
        assert!((st.mean_attempts - 9.0 / 3.0).abs() < 1e-12);
        assert_eq!(st.attempts_p99, 6);
        let expect = 100.0 * (1.0 - st.total_flop as f64 / max.total_flop as f64);
        assert!((st.savings_pct - expect).abs() <= 1e-12 * expect.abs());

        let oracle = run.report.row("oracle").unwrap();
        assert_eq!(oracle.total_flop, f(50) + f(300) + f(4096));
        for row in &run.report.strategies {
            assert!(oracle.savings_pct >= row.savings_pct);
        }
    }

    #[test]
    fn max_length_always_available_as_denominator() {
        let records = [rec(0, 10), rec(1, 20)];
        let cfg = ModelConfig::LLADA_8B;
        let run = run_benchmark(&[Strategy::Oracle], &records, &cfg, &simple_ctx(), &BenchOptions::default()).unwrap();
        assert_eq!(run.report.strategies.len(), 1);
        assert!(run.report.strategies[0].savings_pct > 99.0);
    }

    #[test]
    fn latency_profile_arithmetic() {
        let cfg = ModelConfig::LLADA_8B;
        let mut records: Vec<PromptRecord> = (0..1000).map(|i| rec(i, 50)).collect();
        let all_single = simulate_all(Strategy::Oracle, &records, &cfg, &simple_ctx()).unwrap();
        let p = latency_profile(&all_single).unwrap();
        assert_eq!(p.single_shot_pct, 100.0);
        assert_eq!(p.max_attempts, 1);

        records[7].response_length = 150;
        let ctx = SimContext {
            train_mean: Some(100),
            ..simple_ctx()
        };
        let one_retry = simulate_all(Strategy::MeanDoubling, &records, &cfg, &ctx).unwrap();
        let p = latency_profile(&one_retry).unwrap();
        assert!((p.single_shot_pct - 99.9).abs() < 1e-9);
        assert_eq!(p.attempts_histogram[&2], 1);
        assert_eq!(p.attempts_p99, 1);
        assert_eq!(p.max_attempts, 2);
    }

    #[test]
    fn report_round_trips() {
        let records: Vec<PromptRecord> = (0..40).map(|i| rec(i, 1 + (i as Tokens * 397) % 6000)).collect();
        let mut opts = BenchOptions::default();
        opts.seed = Some(7);
        opts.flags.insert("jobs".into(), "2".into());
        let mut report = run_benchmark(&Strategy::ALL, &records, &ModelConfig::LLADA_8B, &simple_ctx(), &opts)
            .unwrap()
            .report;
        // totals beyond u64 must survive both formats
        let big = u128::from(u64::MAX) * 1000 + 7;
        report.strategies[0].total_flop = big;
        report.strategies[0].total_tflop = big as f64 / FLOP_PER_TFLOP;

        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("r.json");
        export_report(&report, ReportFormat::Json, &json).unwrap();
        assert_eq!(load_report_json(&json).unwrap(), report);

        let csv_path = dir.path().join("r.csv");
        export_report(&report, ReportFormat::Csv, &csv_path).unwrap();
        let rows = read_report_csv(File::open(&csv_path).unwrap()).unwrap();
        assert_eq!(rows, report.strategies);
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));

        assert!("xml".parse::<ReportFormat>().is_err());
        assert_eq!(ReportFormat::from_path(&csv_path).unwrap(), ReportFormat::Csv);
    }

    #[test]
    fn jobs_do_not_change_results() {
        let records: Vec<PromptRecord> = (0..300).map(|i| rec(i, 1 + (i as Tokens * 7919) % 5000)).collect();
        let cfg = ModelConfig::LLADA_8B;
        let run = |jobs| {
            let opts = BenchOptions {
                jobs: Some(jobs),
                ..BenchOptions::default()
            };
            run_benchmark(&Strategy::ALL, &records, &cfg, &simple_ctx(), &opts).unwrap()
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.report, b.report);
        assert_eq!(a.traces, b.traces);
    }

    #[test]
    fn slices_partition_records() {
        let records: Vec<PromptRecord> = (0..100).map(|i| rec(i, 10)).collect();
        let s = split_slices(&records, 0.8, 0.8, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.fit.len(), s.validation.len()), (80, 20, 64, 16));
        let mut ids: Vec<&str> = s.fit.iter().chain(&s.validation).chain(&s.test).map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 100);
    }

    #[test]
    fn long_record_doubling_trace() {
        let ctx = SimContext {
            train_mean: Some(1230),
            ..SimContext::default()
        };
        let t = simulate_sample(Strategy::MeanDoubling, &rec(0, 3000), &ModelConfig::LLADA_8B, &ctx).unwrap();
        assert_eq!(t.attempted_lengths, [1230, 2460, 4096]);
    }

    fn arb_records() -> impl proptest::strategy::Strategy<Value = Vec<PromptRecord>> {
        prop::collection::vec(1u32..6000, 1..60)
            .prop_map(|ks| ks.into_iter().enumerate().map(|(i, k)| rec(i, k)).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn aggregation_is_order_independent(records in arb_records(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = records.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = bench(&records).report;
            let b = bench(&shuffled).report;
            prop_assert_eq!(a.strategies, b.strategies);
            prop_assert_eq!(a.metadata.dataset, b.metadata.dataset);
        }

        #[test]
        fn rows_match_independent_recount(records in arb_records()) {
            let run = bench(&records);
            let n = records.len();
            let max: u128 = run.traces.iter().filter(|t| t.strategy == "max-length")
                .map(|t| t.attempt_flops.iter().sum::<u128>()).sum();
            for row in &run.report.strategies {
                let mine: Vec<&AttemptTrace> = run.traces.iter().filter(|t| t.strategy == row.strategy).collect();
                prop_assert_eq!(mine.len(), n);
                let total: u128 = mine.iter().map(|t| t.attempt_flops.iter().sum::<u128>()).sum();
                prop_assert_eq!(total, row.total_flop);
                let retried = mine.iter().filter(|t| t.attempted_lengths.len() > 1).count();
                prop_assert!((row.fallback_rate_pct - 100.0 * retried as f64 / n as f64).abs() < 1e-12);
                let s = 100.0 * (1.0 - total as f64 / max as f64);
                prop_assert!((row.savings_pct - s).abs() <= 1e-12 * s.abs().max(1e-300));
            }
        }

        #[test]
        fn larger_delta_never_hurts(records in arb_records(), bias in -200i64..200, d in 0u32..300, extra in 0u32..300) {
            struct Biased(i64);
            impl crate::strategies::LengthPredictor for Biased {
                fn predict(&self, r: &PromptRecord) -> Tokens {
                    (i64::from(r.response_length) + self.0).max(1) as Tokens
                }
            }
            let p = Biased(bias);
            let cfg = ModelConfig::LLADA_8B;
            let ctx = |delta| SimContext { predictor: Some(&p), delta: Some(delta), ..SimContext::default() };
            let (lo, hi) = (ctx(d), ctx(d + extra));
            let a = simulate_all(Strategy::PredictThenDiffuse, &records, &cfg, &lo).unwrap();
            let b = simulate_all(Strategy::PredictThenDiffuse, &records, &cfg, &hi).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(y.attempted_lengths[0] >= x.attempted_lengths[0]);
            }
            let ra = summarize_traces("a", &a, 1).unwrap().fallback_rate_pct;
            let rb = summarize_traces("b", &b, 1).unwrap().fallback_rate_pct;
            prop_assert!(rb <= ra);
        }
    }
}
