//! Prompt/response corpora: JSONL ingestion, token counting, splits and
//! length statistics.

mod synthetic;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tokens};

pub use synthetic::{gen_synthetic, CueSpec, Family, MixtureComponent, MixtureSpec};

/// One prompt and the length of its reference response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    #[serde(rename = "prompt")]
    pub prompt_text: String,
    #[serde(rename = "response", default, skip_serializing_if = "Option::is_none")]
    pub response_text: Option<String>,
    pub response_length: Tokens,
    /// Mixture component that produced a synthetic record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component: Option<String>,
}

/// Where `response_length` comes from during ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LengthSource {
    /// Keep an explicit `response_length`, otherwise count `response` with
    /// [`default_tokenize`].
    #[default]
    Tokenize,
    /// Require an explicit `response_length` on every line.
    Precomputed,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    prompt: String,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    response_length: Option<i64>,
    #[serde(default)]
    component: Option<String>,
}

/// Counts tokens: split on Unicode whitespace, then split each chunk into
/// maximal runs of alphanumerics and maximal runs of everything else.
pub fn default_tokenize(text: &str) -> usize {
    tokens(text).count()
}

/// The units counted by [`default_tokenize`].
pub fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|chunk| {
        let mut out = Vec::new();
        let mut start = 0;
        let mut class = None;
        for (i, c) in chunk.char_indices() {
            let alnum = c.is_alphanumeric();
            match class {
                Some(prev) if prev != alnum => {
                    out.push(&chunk[start..i]);
                    start = i;
                }
                _ => {}
            }
            class = Some(alnum);
        }
        if start < chunk.len() {
            out.push(&chunk[start..]);
        }
        out
    })
}

fn parse_line(line: &str, line_no: usize, source: LengthSource) -> Result<PromptRecord> {
    let rec_err = |message: String| Error::Record {
        record: line_no,
        message,
    };
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| rec_err(format!("malformed JSON: {e}")))?;

    let response_length = match (raw.response_length, &raw.response, source) {
        (Some(k), _, _) => {
            if k < 1 || k > i64::from(Tokens::MAX) {
                return Err(rec_err(format!("response_length must be a positive token count, got {k}")));
            }
            k as Tokens
        }
        (None, _, LengthSource::Precomputed) => {
            return Err(rec_err("no response_length (required by the precomputed tokenizer)".into()))
        }
        (None, Some(text), LengthSource::Tokenize) => {
            let k = default_tokenize(text);
            if k == 0 {
                return Err(rec_err("response is empty".into()));
            }
            Tokens::try_from(k).map_err(|_| rec_err("response too long".into()))?
        }
        (None, None, LengthSource::Tokenize) => {
            return Err(rec_err("no response or response_length".into()))
        }
    };

    Ok(PromptRecord {
        id: raw.id.unwrap_or_else(|| line_no.to_string()),
        prompt_text: raw.prompt,
        response_text: raw.response,
        response_length,
        component: raw.component,
    })
}

/// Parses JSONL from any reader. Blank lines are skipped; line numbers in
/// errors are 1-based and count blank lines.
pub fn read_jsonl<R: BufRead>(reader: R, source: LengthSource) -> Result<Vec<PromptRecord>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Record {
            record: line_no,
            message: format!("unreadable line: {e}"),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_line(&line, line_no, source)?);
    }
    Ok(records)
}

pub fn load_jsonl(path: &Path, source: LengthSource) -> Result<Vec<PromptRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), source)
}

pub fn write_jsonl<W: Write>(mut writer: W, records: &[PromptRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<jsonl writer>", e))?;
    }
    Ok(())
}

pub fn save_jsonl(path: &Path, records: &[PromptRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, records)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Seeded shuffle split. Returns `(train, test)` index sets, each in
/// ascending order, with `|train| = round(ratio·n)` clamped so that neither
/// side is empty.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} records")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_train_test(
    records: &[PromptRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<PromptRecord>, Vec<PromptRecord>)> {
    let (train, test) = split_indices(records.len(), ratio, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&train), pick(&test)))
}

/// Summary of a response-length distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (n−1 denominator).
    pub std: f64,
    /// Lower median for even counts.
    pub median: Tokens,
    /// Fisher excess kurtosis `m4/m2² − 3`; `None` when the variance is zero.
    pub excess_kurtosis: Option<f64>,
    pub min: Tokens,
    pub max: Tokens,
}

pub fn compute_stats(records: &[PromptRecord]) -> Result<DatasetStats> {
    let lengths: Vec<Tokens> = records.iter().map(|r| r.response_length).collect();
    length_stats(&lengths)
}

pub fn length_stats(lengths: &[Tokens]) -> Result<DatasetStats> {
    let n = lengths.len();
    if n < 2 {
        return Err(Error::invalid(format!("statistics need at least 2 records, got {n}")));
    }
    // sorted input and an exact integer sum make the result order-independent
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let nf = n as f64;
    let mean = sorted.iter().map(|&k| u64::from(k)).sum::<u64>() as f64 / nf;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &k in &sorted {
        let d = f64::from(k) - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    let std = (m2 / (nf - 1.0)).sqrt();
    let (m2, m4) = (m2 / nf, m4 / nf);
    let excess_kurtosis = (m2 > 0.0).then(|| m4 / (m2 * m2) - 3.0);

    Ok(DatasetStats {
        count: n,
        mean,
        std,
        median: sorted[(n - 1) / 2],
        excess_kurtosis,
        min: sorted[0],
        max: sorted[n - 1],
    })
}
