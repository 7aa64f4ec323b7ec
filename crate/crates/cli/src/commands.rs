use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use lenplan_core::calibration::{self, post_margin_miss_rate, sidecar_path, SafetyMargin};
use lenplan_core::cost_model::{cost_curve, fit_quadratic, read_cost_curve_file, write_cost_curve, ModelConfig};
use lenplan_core::dataset::{
    compute_stats, gen_synthetic, load_jsonl, save_jsonl, CueSpec, DatasetStats, Family, LengthSource, MixtureComponent,
    MixtureSpec, PromptRecord,
};
use lenplan_core::harness::{
    bimodal_experiment, export_report, latency_profile, mean_length, run_benchmark, split_slices, BenchOptions,
    BimodalConfig, LatencyProfile, PipelineConfig, ReportFormat, Slices,
};
use lenplan_core::predictor::{self, evaluate, load_model, GbdtModel, RegressionMetrics, TrainConfig, Variant};
use lenplan_core::strategies::{save_traces, LengthPredictor, SimContext, Strategy};
use serde::{Deserialize, Serialize};

use crate::manifest::{sha256_file, RunManifest};
use crate::{
    BenchArgs, BimodalArgs, CalibrateArgs, FitArgs, GenArgs, IngestArgs, ModelConfigArgs, PredictArgs, Preset,
    SplitChoice, TokenizerArg, TrainArgs, VariantArg, DEFAULT_SEED,
};

const META_DATA_SHA256: &str = "data_sha256";
const META_SPLIT_SEED: &str = "split_seed";
const META_TRAIN_RATIO: &str = "train_ratio";
const META_FIT_RATIO: &str = "fit_ratio";

fn print_stats(stats: &DatasetStats) {
    println!("records          {}", stats.count);
    println!("mean length      {:.2}", stats.mean);
    println!("std              {:.2}", stats.std);
    println!("median           {}", stats.median);
    match stats.excess_kurtosis {
        Some(k) => println!("excess kurtosis  {k:.2}"),
        None => println!("excess kurtosis  undefined (constant lengths)"),
    }
    println!("min / max        {} / {}", stats.min, stats.max);
}

fn print_records_summary(records: &[PromptRecord]) {
    match compute_stats(records) {
        Ok(stats) => print_stats(&stats),
        Err(_) => println!("records          {}", records.len()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `model.json` → `model.text-only.json`.
fn variant_path(out: &Path, variant: Variant) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.{variant}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{variant}"),
    };
    out.with_file_name(name)
}

fn load_records(path: &Path) -> Result<Vec<PromptRecord>> {
    load_jsonl(path, LengthSource::Tokenize).with_context(|| format!("loading {}", path.display()))
}

fn meta<T: std::str::FromStr>(model: &GbdtModel, key: &str) -> Option<T> {
    model.metadata.get(key).and_then(|v| v.parse().ok())
}

/// Fails if `model` records a training corpus other than `data_digest`.
fn check_same_corpus(model: &GbdtModel, data: &Path, data_digest: &str) -> Result<()> {
    match model.metadata.get(META_DATA_SHA256) {
        Some(d) if d != data_digest => bail!(
            "{} is not the corpus this model was trained on (sha256 {d}); pass the file given to `lenplan train`",
            data.display()
        ),
        _ => Ok(()),
    }
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let source = match a.tokenizer {
        TokenizerArg::Default => LengthSource::Tokenize,
        TokenizerArg::Precomputed => LengthSource::Precomputed,
    };
    let records = load_jsonl(&a.input, source).with_context(|| format!("ingesting {}", a.input.display()))?;
    save_jsonl(&a.output, &records)?;

    let mut m = RunManifest::new("ingest", a, None)?;
    m.input("input", sha256_file(&a.input)?);
    m.write_for(&a.output)?;
    print_records_summary(&records);
    Ok(())
}

fn metrics_table(rows: &[(Variant, RegressionMetrics)]) {
    println!("{:<12} {:>10} {:>10} {:>12}", "variant", "rmse", "mae", "within 10%");
    for (v, m) in rows {
        println!("{:<12} {:>10.3} {:>10.3} {:>11.2}%", v.as_str(), m.rmse, m.mae, m.pct_within_10);
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let records = load_records(&a.data)?;
    let digest = sha256_file(&a.data)?;
    let s = &a.split;
    let slices = split_slices(&records, s.train_ratio, s.fit_ratio, s.seed)?;
    let config = TrainConfig {
        rounds: a.rounds,
        max_depth: a.max_depth,
        learning_rate: a.learning_rate,
        min_samples_leaf: a.min_samples_leaf,
        hash_buckets: a.hash_buckets,
        seed: s.seed,
    };
    let variants = match a.variant {
        VariantArg::TextOnly => vec![Variant::TextOnly],
        VariantArg::Engineered => vec![Variant::Engineered],
        VariantArg::Both => vec![Variant::TextOnly, Variant::Engineered],
    };

    let mut rows = Vec::new();
    for variant in variants {
        let mut model = predictor::train(&slices.fit, variant, &config)
            .with_context(|| format!("training the {variant} predictor"))?;
        let md = &mut model.metadata;
        md.insert(META_DATA_SHA256.into(), digest.clone());
        md.insert(META_SPLIT_SEED.into(), s.seed.to_string());
        md.insert(META_TRAIN_RATIO.into(), s.train_ratio.to_string());
        md.insert(META_FIT_RATIO.into(), s.fit_ratio.to_string());
        md.insert("fit_records".into(), slices.fit.len().to_string());
        md.insert("validation_records".into(), slices.validation.len().to_string());
        md.insert("test_records".into(), slices.test.len().to_string());

        let path = if a.variant == VariantArg::Both {
            variant_path(&a.out, variant)
        } else {
            a.out.clone()
        };
        model.save(&path)?;
        let mut m = RunManifest::new("train", a, Some(s.seed))?;
        m.input("data", digest.clone());
        m.resolve("variant", variant)?;
        m.resolve("train_config", &config)?;
        m.write_for(&path)?;
        println!("wrote {} ({} trees)", path.display(), model.trees.len());
        rows.push((variant, evaluate(&model, &slices.test)));
    }
    println!("test split: {} records", slices.test.len());
    metrics_table(&rows);
    Ok(())
}

fn recorded_slices(model: &GbdtModel, records: &[PromptRecord]) -> Result<(Slices, u64)> {
    let (Some(seed), Some(tr), Some(fr)) = (
        meta::<u64>(model, META_SPLIT_SEED),
        meta::<f64>(model, META_TRAIN_RATIO),
        meta::<f64>(model, META_FIT_RATIO),
    ) else {
        bail!("model has no recorded data split; train it with `lenplan train`");
    };
    Ok((split_slices(records, tr, fr, seed)?, seed))
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let records = load_records(&a.data)?;
    let digest = sha256_file(&a.data)?;
    check_same_corpus(&model, &a.data, &digest)?;
    let (slices, seed) = recorded_slices(&model, &records)?;

    let margin = calibration::calibrate(&model, &slices.validation, a.p_safe, "validation")?;
    let prompts: Vec<&str> = slices.validation.iter().map(|r| r.prompt_text.as_str()).collect();
    let pairs: Vec<(u32, u32)> = model
        .predict_many(&prompts)
        .into_iter()
        .zip(slices.validation.iter().map(|r| r.response_length))
        .collect();
    let single_shot = pairs.iter().filter(|(p, k)| p + margin.delta >= *k).count();

    let out = a.out.clone().unwrap_or_else(|| sidecar_path(&a.model));
    margin.save(&out)?;
    let mut m = RunManifest::new("calibrate", a, Some(seed))?;
    m.input("model", sha256_file(&a.model)?);
    m.input("data", digest);
    m.write_for(&out)?;

    println!("delta            {}", margin.delta);
    println!("p_safe           {}", margin.p_safe);
    println!(
        "under-predicted  {} of {} validation records",
        margin.residual_count,
        slices.validation.len()
    );
    match post_margin_miss_rate(&pairs, margin.delta) {
        Some(miss) => println!("coverage         {:.2}% of under-predictions within delta", 100.0 * (1.0 - miss)),
        None => println!("coverage         100.00% (no under-predictions)"),
    }
    println!(
        "single-shot      {:.2}% of validation records",
        100.0 * single_shot as f64 / pairs.len() as f64
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn resolve_model_config(a: &ModelConfigArgs) -> Result<ModelConfig> {
    let mut cfg = match &a.model_config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading model config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing model config {}", path.display()))?
        }
        None => ModelConfig::LLADA_8B,
    };
    if let Some(v) = a.blocks {
        cfg.num_blocks = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden_dim = v;
    }
    if let Some(v) = a.mlp {
        cfg.mlp_width = v;
    }
    if let Some(v) = a.steps {
        cfg.diffusion_steps = v;
    }
    if let Some(v) = a.lmax {
        cfg.max_response_len = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `SOURCE_DATE_EPOCH` when set, otherwise the current time.
fn timestamp() -> Option<u64> {
    if let Ok(v) = std::env::var("SOURCE_DATE_EPOCH") {
        return v.trim().parse().ok();
    }
    SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs())
}

fn print_bench_table(report: &lenplan_core::harness::BenchmarkReport) {
    println!(
        "{:<24} {:>14} {:>10} {:>10} {:>10} {:>9} {:>5}",
        "strategy", "TFLOP", "savings%", "fallback%", "truncated%", "attempts", "p99"
    );
    for r in &report.strategies {
        println!(
            "{:<24} {:>14.3} {:>10.3} {:>10.3} {:>10.3} {:>9.4} {:>5}",
            r.strategy,
            r.total_tflop,
            r.savings_pct,
            r.fallback_rate_pct,
            r.truncation_rate_pct,
            r.mean_attempts,
            r.attempts_p99
        );
    }
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let cfg = resolve_model_config(&a.model_config)?;
    let strategies = Strategy::parse_list(&a.strategies, a.static_initial)?;
    let needs_ptd = strategies.contains(&Strategy::PredictThenDiffuse);
    let format = match &a.format {
        Some(f) => f.parse::<ReportFormat>()?,
        None => ReportFormat::from_path(&a.out).context("choose the report format with --format")?,
    };

    let records = load_records(&a.data)?;
    let digest = sha256_file(&a.data)?;
    let model = a
        .model
        .as_deref()
        .map(|p| load_model(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    if needs_ptd && model.is_none() {
        bail!("strategy `ptd` needs a trained predictor; pass --model");
    }

    let recorded = |key: &str| model.as_ref().and_then(|m| meta::<f64>(m, key));
    let seed = a
        .seed
        .or_else(|| model.as_ref().and_then(|m| meta::<u64>(m, META_SPLIT_SEED)))
        .unwrap_or(DEFAULT_SEED);
    let train_ratio = a.train_ratio.or_else(|| recorded(META_TRAIN_RATIO)).unwrap_or(0.8);
    let fit_ratio = a.fit_ratio.or_else(|| recorded(META_FIT_RATIO)).unwrap_or(0.8);

    let slices = split_slices(&records, train_ratio, fit_ratio, seed);
    let eval: &[PromptRecord] = match a.split {
        SplitChoice::Test => {
            if let Some(m) = &model {
                check_same_corpus(m, &a.data, &digest)?;
            }
            &slices.as_ref().map_err(|e| anyhow!("cannot form a test split: {e}"))?.test
        }
        SplitChoice::All => &records,
    };
    let train_mean = match (a.train_mean, &slices) {
        (Some(m), _) => m,
        (None, Ok(s)) => mean_length(&s.train)?,
        (None, Err(_)) => mean_length(&records)?,
    };

    let mut margin_digest = None;
    let delta = match (a.delta, &a.model) {
        (Some(d), _) => Some(d),
        (None, Some(model_path)) => {
            let path = a.margin.clone().unwrap_or_else(|| sidecar_path(model_path));
            if path.exists() {
                margin_digest = Some(sha256_file(&path)?);
                Some(SafetyMargin::load(&path).with_context(|| format!("loading {}", path.display()))?.delta)
            } else if needs_ptd {
                bail!(
                    "no safety margin at {}; run `lenplan calibrate` or pass --delta",
                    path.display()
                );
            } else {
                None
            }
        }
        (None, None) => None,
    };

    let ctx = SimContext {
        train_mean: Some(train_mean),
        predictor: model.as_ref().map(|m| m as &dyn LengthPredictor),
        delta,
        include_prompt: a.include_prompt,
    };
    let mut flags = BTreeMap::new();
    flags.insert("strategies".to_string(), a.strategies.clone());
    flags.insert("split".to_string(), format!("{:?}", a.split).to_lowercase());
    flags.insert("train_ratio".to_string(), train_ratio.to_string());
    flags.insert("fit_ratio".to_string(), fit_ratio.to_string());
    let opts = BenchOptions {
        jobs: a.jobs,
        seed: Some(seed),
        timestamp_unix: timestamp(),
        flags,
    };
    let run = run_benchmark(&strategies, eval, &cfg, &ctx, &opts)?;

    let mut m = RunManifest::new("bench", a, Some(seed))?;
    m.input("data", digest);
    if let Some(p) = &a.model {
        m.input("model", sha256_file(p)?);
    }
    if let Some(d) = margin_digest {
        m.input("margin", d);
    }
    m.resolve("model_config", cfg)?;
    m.resolve("train_mean", train_mean)?;
    m.resolve("delta", delta)?;
    m.resolve("split_seed", seed)?;

    export_report(&run.report, format, &a.out)?;
    m.write_for(&a.out)?;
    if let Some(path) = &a.traces {
        save_traces(path, &run.traces)?;
        m.write_for(path)?;
    }
    if let Some(path) = &a.latency {
        let mut profiles: Vec<(String, LatencyProfile)> = Vec::new();
        for chunk in run.traces.chunks(eval.len()) {
            profiles.push((chunk[0].strategy.clone(), latency_profile(chunk)?));
        }
        let map: BTreeMap<String, LatencyProfile> = profiles.into_iter().collect();
        write_json(path, &map)?;
        m.write_for(path)?;
    }
    if let Some(path) = &a.emit_cost_curve {
        if a.curve_step == 0 {
            bail!("--curve-step must be positive");
        }
        let l_max = u64::from(cfg.max_response_len);
        let mut lengths: Vec<u64> = (u64::from(a.curve_step)..=l_max).step_by(a.curve_step as usize).collect();
        if lengths.last() != Some(&l_max) {
            lengths.push(l_max);
        }
        let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
        let mut w = BufWriter::new(file);
        write_cost_curve(&mut w, &cost_curve(&cfg, &lengths)?)?;
        w.flush()?;
        m.write_for(path)?;
    }

    println!("{} records, train mean {train_mean}, delta {}", eval.len(), delta.map_or("-".into(), |d| d.to_string()));
    print_bench_table(&run.report);
    Ok(())
}

fn parse_component(spec: &str) -> Result<MixtureComponent> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [label, weight, family, mean, spread] = parts[..] else {
        bail!("component `{spec}` must look like label:weight:family:mean:spread");
    };
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse().map_err(|_| anyhow!("component `{spec}`: bad {what} `{s}`"))
    };
    Ok(MixtureComponent::new(
        label,
        num(weight, "weight")?,
        family.parse::<Family>()?,
        num(mean, "mean")?,
        num(spread, "spread")?,
    ))
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let spec = match a.preset {
        Some(Preset::Bimodal) => MixtureSpec::bimodal(a.size, a.seed),
        Some(Preset::Skewed) => MixtureSpec::skewed(a.size, a.seed),
        None if a.component.is_empty() => bail!("pass --preset or at least one --component"),
        None => MixtureSpec {
            components: a.component.iter().map(|c| parse_component(c)).collect::<Result<_>>()?,
            seed: a.seed,
            size: a.size,
            cue: CueSpec::default(),
        },
    };
    let records = gen_synthetic(&spec)?;
    save_jsonl(&a.out, &records)?;
    let mut m = RunManifest::new("gen", a, Some(a.seed))?;
    m.resolve("mixture", &spec)?;
    m.write_for(&a.out)?;
    print_records_summary(&records);
    Ok(())
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let points = read_cost_curve_file(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let fit = fit_quadratic(&points)?;
    println!("quadratic_coeff  {:e}", fit.quadratic_coeff);
    println!("linear_coeff     {:e}", fit.linear_coeff);
    println!("intercept        {:e}", fit.intercept);
    println!("r_squared        {}", fit.r_squared);
    if let Some(out) = &a.out {
        write_json(out, &fit)?;
        let mut m = RunManifest::new("fit", a, None)?;
        m.input("input", sha256_file(&a.input)?);
        m.write_for(out)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct PromptLine {
    #[serde(default)]
    id: Option<serde_json::Value>,
    prompt: String,
}

/// JSONL objects with a `prompt` field, or one raw prompt per line. Ids
/// default to the 1-based line number.
fn read_prompts<R: BufRead>(reader: R) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if line.trim_start().starts_with('{') {
            let p: PromptLine =
                serde_json::from_str(&line).with_context(|| format!("line {line_no}: expected an object with `prompt`"))?;
            let id = match p.id {
                Some(serde_json::Value::String(s)) => s,
                Some(v) => v.to_string(),
                None => line_no.to_string(),
            };
            out.push((id, p.prompt));
        } else {
            out.push((line_no.to_string(), line));
        }
    }
    Ok(out)
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let prompts = match &a.input {
        Some(p) => {
            let f = File::open(p).with_context(|| format!("reading {}", p.display()))?;
            read_prompts(BufReader::new(f))?
        }
        None => {
            let mut buf = String::new();
            io::stdin().read_to_string(&mut buf).context("reading stdin")?;
            read_prompts(buf.as_bytes())?
        }
    };
    let texts: Vec<&str> = prompts.iter().map(|p| p.1.as_str()).collect();
    let lengths = model.predict_many(&texts);

    let sink: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("writing {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["id", "predicted_length"])?;
    for ((id, _), len) in prompts.iter().zip(&lengths) {
        w.write_record([id.as_str(), &len.to_string()])?;
    }
    w.flush()?;
    drop(w);

    if let Some(out) = &a.output {
        let mut m = RunManifest::new("predict", a, None)?;
        m.input("model", sha256_file(&a.model)?);
        if let Some(p) = &a.input {
            m.input("input", sha256_file(p)?);
        }
        m.write_for(out)?;
    }
    Ok(())
}

pub fn bimodal(a: &BimodalArgs) -> Result<()> {
    let cfg = resolve_model_config(&a.model_config)?;
    let bc = BimodalConfig {
        size: a.size,
        data_seed: a.seed,
        pipeline: PipelineConfig {
            split_seed: a.seed,
            ..PipelineConfig::default()
        },
    };
    let r = bimodal_experiment(&cfg, &bc)?;
    println!("test records               {}", r.test_records);
    println!("train mean / delta         {} / {}", r.train_mean, r.delta);
    println!("mean-doubling TFLOP        {:.3}", r.mean_doubling_flop as f64 / lenplan_core::FLOP_PER_TFLOP);
    println!("predict-then-diffuse TFLOP {:.3}", r.ptd_flop as f64 / lenplan_core::FLOP_PER_TFLOP);
    println!("advantage                  {:.2}%", r.advantage_pct);
    println!("advantage, exact lengths   {:.2}%", r.truth_predictor_advantage_pct);
    println!(
        "long records with ≥3 mean-doubling attempts  {:.2}% of {}",
        r.long_multi_attempt_pct, r.long_records
    );
    if let Some(out) = &a.out {
        write_json(out, &r)?;
        let mut m = RunManifest::new("bimodal", a, Some(a.seed))?;
        m.resolve("model_config", cfg)?;
        m.write_for(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_paths() {
        assert_eq!(
            variant_path(Path::new("m/model.json"), Variant::Engineered),
            PathBuf::from("m/model.engineered.json")
        );
        assert_eq!(variant_path(Path::new("model"), Variant::TextOnly), PathBuf::from("model.text-only"));
    }

    #[test]
    fn component_specs() {
        let c = parse_component("long:0.4:normal:3000:500").unwrap();
        assert_eq!((c.label.as_str(), c.weight, c.family, c.mean, c.spread), ("long", 0.4, Family::Normal, 3000.0, 500.0));
        assert!(parse_component("long:0.4:normal:3000").is_err());
        assert!(parse_component("long:x:normal:3000:5").is_err());
        assert!(parse_component("long:0.4:cauchy:3000:5").is_err());
    }

    #[test]
    fn prompt_lines() {
        let input = "{\"id\": \"a\", \"prompt\": \"hi\"}\n\nplain text prompt\n{\"id\": 7, \"prompt\": \"x\", \"extra\": 1}\n";
        let p = read_prompts(input.as_bytes()).unwrap();
        assert_eq!(
            p,
            [
                ("a".to_string(), "hi".to_string()),
                ("3".to_string(), "plain text prompt".to_string()),
                ("7".to_string(), "x".to_string())
            ]
        );
        assert!(read_prompts("{\"no_prompt\": 1}".as_bytes()).is_err());
    }

    #[test]
    fn model_config_resolution() {
        let mut a = ModelConfigArgs {
            model_config: None,
            blocks: None,
            hidden: None,
            mlp: None,
            steps: None,
            lmax: Some(1024),
        };
        let cfg = resolve_model_config(&a).unwrap();
        assert_eq!(cfg, ModelConfig { max_response_len: 1024, ..ModelConfig::LLADA_8B });
        a.steps = Some(0);
        assert!(resolve_model_config(&a).is_err());
    }
}
