//! Prediction-record schema, JSONL/CSV ingestion and the sampling baselines.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{cardinality, ScoredDataset};
use crate::rng::stream_rng;

/// Allowed deviation of `score_pos + score_neg` from 1 before a record is flagged.
pub const SCORE_SUM_TOLERANCE: f64 = 0.05;

/// Fraction of rejected lines above which ingestion fails outright.
pub const MAX_REJECTED_FRACTION: f64 = 0.5;

pub const FLAG_SCORE_SUM: &str = "score_sum_mismatch";
pub const FLAG_ZERO_TOTAL: &str = "zero_total_fallback";

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{rejected} of {total} lines rejected; first error: {first}")]
    TooManyRejected {
        rejected: usize,
        total: usize,
        first: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record {0} has no samples")]
    EmptySamples(String),
    #[error("record {0} has no temperature-0 score")]
    MissingScore(String),
    #[error("record {0} has no label")]
    MissingLabel(String),
    #[error("record {id} missing from run {run}")]
    MissingInRun { id: String, run: usize },
    #[error("no runs given")]
    NoRuns,
    #[error("invalid fraction {0}; fractions must lie in (0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

impl From<std::io::Error> for RecordsError {
    fn from(source: std::io::Error) -> Self {
        RecordsError::Io {
            path: String::new(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, RecordsError>;

/// One instance's label, temperature-0 class scores and temperature-1 samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(deserialize_with = "de_string")]
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    #[serde(default, deserialize_with = "de_opt_label", skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, deserialize_with = "de_opt_number", skip_serializing_if = "Option::is_none")]
    pub score_pos: Option<f64>,
    /// Positive-class score as written by the model, kept for rounding diagnostics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_pos_text: Option<String>,
    #[serde(default, deserialize_with = "de_opt_number", skip_serializing_if = "Option::is_none")]
    pub score_neg: Option<f64>,
    #[serde(default, deserialize_with = "de_numbers", skip_serializing_if = "Vec::is_empty")]
    pub samples_pos: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<String>,
    #[serde(default, deserialize_with = "de_opt_number", skip_serializing_if = "Option::is_none")]
    pub decision_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, deserialize_with = "de_opt_number", skip_serializing_if = "Option::is_none")]
    pub score_enriched: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    /// Fields this schema does not know about, preserved on round-trip.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            dataset_id: None,
            label: None,
            score_pos: None,
            score_pos_text: None,
            score_neg: None,
            samples_pos: Vec::new(),
            decision: None,
            decision_confidence: None,
            raw: None,
            score_enriched: None,
            flags: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn flag(&mut self, flag: &str) {
        if !self.flags.iter().any(|f| f == flag) {
            self.flags.push(flag.to_string());
        }
    }

    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }

    /// Range checks; returns an error message for records that must be rejected
    /// and flags soft inconsistencies in place.
    pub fn validate(&mut self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        let probs = [
            ("score_pos", self.score_pos),
            ("score_neg", self.score_neg),
            ("decision_confidence", self.decision_confidence),
            ("score_enriched", self.score_enriched),
        ];
        for (name, value) in probs {
            if let Some(v) = value {
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("{name} {v} outside [0, 1]"));
                }
            }
        }
        if let Some(v) = self.samples_pos.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format!("sample {v} outside [0, 1]"));
        }
        if let (Some(p), Some(n)) = (self.score_pos, self.score_neg) {
            if (p + n - 1.0).abs() > SCORE_SUM_TOLERANCE {
                self.flag(FLAG_SCORE_SUM);
            }
        }
        Ok(())
    }

    /// Negative-class score, defaulting to the complement of the positive one.
    pub fn neg_or_complement(&self) -> Option<f64> {
        self.score_neg.or(self.score_pos.map(|p| 1.0 - p))
    }
}

fn number_from_value(value: &Value) -> Option<f64> {
    match value {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok().filter(|v| v.is_finite()),
        _ => None,
    }
}

fn de_string<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!("invalid id {other}"))),
    }
}

fn de_opt_number<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    match Option::<Value>::deserialize(d)? {
        None | Some(Value::Null) => Ok(None),
        Some(v) => number_from_value(&v)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("not a number: {v}"))),
    }
}

fn de_numbers<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    match Option::<Value>::deserialize(d)? {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                number_from_value(v)
                    .ok_or_else(|| serde::de::Error::custom(format!("not a number: {v}")))
            })
            .collect(),
        Some(other) => Err(serde::de::Error::custom(format!("expected a list, got {other}"))),
    }
}

fn label_from_value(value: &Value) -> Option<u8> {
    match value {
        Value::Bool(b) => Some(u8::from(*b)),
        other => match number_from_value(other)? {
            v if v == 0.0 => Some(0),
            v if v == 1.0 => Some(1),
            _ => None,
        },
    }
}

fn de_opt_label<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<u8>, D::Error> {
    match Option::<Value>::deserialize(d)? {
        None | Some(Value::Null) => Ok(None),
        Some(v) => label_from_value(&v)
            .map(Some)
            .ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {v}"))),
    }
}

/// Provenance written as the first line of every output file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FileMeta {
    pub tool: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calls_per_instance: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<InputDigest>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of_file(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        })
    }
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|source| RecordsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let read = file.read(&mut buf)?;
        if read == 0 {
            break;
        }
        hasher.update(&buf[..read]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    /// Valid records, including flagged ones.
    pub accepted: usize,
    pub flagged: usize,
    pub rejected: usize,
    pub errors: Vec<LineError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecords {
    pub records: Vec<PredictionRecord>,
    pub meta: Option<FileMeta>,
    pub report: IngestReport,
}

/// Loads JSONL, or CSV when the extension is `.csv`.
pub fn load_records(path: &Path) -> Result<LoadedRecords> {
    let file = File::open(path).map_err(|source| RecordsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let loaded = if is_csv {
        read_csv(file)?
    } else {
        read_jsonl(BufReader::new(file))?
    };
    tracing::debug!(
        path = %path.display(),
        accepted = loaded.report.accepted,
        rejected = loaded.report.rejected,
        "loaded records"
    );
    Ok(loaded)
}

struct Collector {
    records: Vec<PredictionRecord>,
    report: IngestReport,
}

impl Collector {
    fn new() -> Self {
        Self {
            records: Vec::new(),
            report: IngestReport::default(),
        }
    }

    fn push(&mut self, line: usize, parsed: std::result::Result<PredictionRecord, String>) {
        let outcome = parsed.and_then(|mut r| r.validate().map(|_| r));
        match outcome {
            Ok(record) => {
                self.report.accepted += 1;
                if record.is_flagged() {
                    self.report.flagged += 1;
                }
                self.records.push(record);
            }
            Err(message) => {
                tracing::warn!(line, %message, "rejected record");
                self.report.rejected += 1;
                self.report.errors.push(LineError { line, message });
            }
        }
    }

    fn finish(self, meta: Option<FileMeta>) -> Result<LoadedRecords> {
        let total = self.report.accepted + self.report.rejected;
        if total > 0 && self.report.rejected as f64 > MAX_REJECTED_FRACTION * total as f64 {
            return Err(RecordsError::TooManyRejected {
                rejected: self.report.rejected,
                total,
                first: self.report.errors[0].message.clone(),
            });
        }
        Ok(LoadedRecords {
            records: self.records,
            meta,
            report: self.report,
        })
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<LoadedRecords> {
    let mut collector = Collector::new();
    let mut meta = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let value: Value = match serde_json::from_str(trimmed) {
            Ok(v) => v,
            Err(e) => {
                collector.push(line_no, Err(e.to_string()));
                continue;
            }
        };
        if let Some(m) = value.get("_meta") {
            if meta.is_none() {
                meta = serde_json::from_value(m.clone()).ok();
            }
            continue;
        }
        collector.push(
            line_no,
            serde_json::from_value(value).map_err(|e| e.to_string()),
        );
    }
    collector.finish(meta)
}

pub const CSV_COLUMNS: [&str; 6] = ["id", "dataset_id", "label", "score_pos", "score_neg", "samples_pos"];

pub fn read_csv<R: Read>(reader: R) -> Result<LoadedRecords> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut collector = Collector::new();
    for (idx, row) in rdr.records().enumerate() {
        // Header is line 1.
        let line_no = idx + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                collector.push(line_no, Err(e.to_string()));
                continue;
            }
        };
        let mut obj = Map::new();
        for (name, field) in headers.iter().zip(row.iter()) {
            if field.is_empty() {
                continue;
            }
            let value = if name == "samples_pos" {
                Value::Array(
                    field
                        .split(';')
                        .map(|s| Value::String(s.trim().to_string()))
                        .collect(),
                )
            } else {
                Value::String(field.to_string())
            };
            obj.insert(name.to_string(), value);
        }
        collector.push(
            line_no,
            serde_json::from_value(Value::Object(obj)).map_err(|e| e.to_string()),
        );
    }
    collector.finish(None)
}

pub fn write_jsonl<W: Write>(
    mut writer: W,
    meta: Option<&FileMeta>,
    records: &[PredictionRecord],
) -> Result<()> {
    if let Some(meta) = meta {
        serde_json::to_writer(&mut writer, &serde_json::json!({ "_meta": meta }))?;
        writer.write_all(b"\n")?;
    }
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<W: Write>(writer: W, records: &[PredictionRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(CSV_COLUMNS)?;
    for r in records {
        let samples = r
            .samples_pos
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";");
        wtr.write_record([
            r.id.clone(),
            r.dataset_id.clone().unwrap_or_default(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
            fmt_opt(r.score_pos),
            fmt_opt(r.score_neg),
            samples,
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Labels and a chosen score column as a dataset. Records without a label or
/// score, and flagged records without a score, are skipped.
pub fn to_dataset<F>(records: &[PredictionRecord], score: F) -> Result<ScoredDataset>
where
    F: Fn(&PredictionRecord) -> Option<f64>,
{
    let (labels, scores): (Vec<bool>, Vec<f64>) = records
        .iter()
        .filter_map(|r| Some((r.label? == 1, score(r)?)))
        .unzip();
    Ok(ScoredDataset::new(labels, scores)?)
}

/// Positive-class score from the fraction of samples whose own decision is
/// positive (sample score above 0.5).
pub fn sample_label_score(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let positive = samples.iter().filter(|&&s| s > 0.5).count();
    Some(positive as f64 / samples.len() as f64)
}

pub fn aggregate_sample_label(records: &[PredictionRecord]) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| sample_label_score(&r.samples_pos).ok_or_else(|| RecordsError::EmptySamples(r.id.clone())))
        .collect()
}

pub fn sample_prob_score(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    // Sorting makes the floating-point sum independent of sample order.
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted.iter().sum::<f64>() / sorted.len() as f64)
}

pub fn aggregate_sample_prob(records: &[PredictionRecord]) -> Result<Vec<f64>> {
    records
        .iter()
        .map(|r| sample_prob_score(&r.samples_pos).ok_or_else(|| RecordsError::EmptySamples(r.id.clone())))
        .collect()
}

/// Averages per-class scores across runs and normalizes them. Returns the
/// positive-class score and whether the zero-total fallback was used.
pub fn mean_biased_score(runs: &[(f64, f64)]) -> Option<(f64, bool)> {
    if runs.is_empty() {
        return None;
    }
    let n = runs.len() as f64;
    let pos = runs.iter().map(|r| r.0).sum::<f64>() / n;
    let neg = runs.iter().map(|r| r.1).sum::<f64>() / n;
    let total = pos + neg;
    if total <= 0.0 {
        Some((0.5, true))
    } else {
        Some((pos / total, false))
    }
}

/// Combines runs prompted with a bias toward each class. Records are matched
/// by id to the first run; the output keeps the first run's record order.
pub fn aggregate_mean_biased(runs: &[Vec<PredictionRecord>]) -> Result<Vec<PredictionRecord>> {
    let first = runs.first().ok_or(RecordsError::NoRuns)?;
    let indexed: Vec<HashMap<&str, &PredictionRecord>> = runs
        .iter()
        .map(|run| run.iter().map(|r| (r.id.as_str(), r)).collect())
        .collect();
    first
        .iter()
        .map(|base| {
            let mut pairs = Vec::with_capacity(runs.len());
            for (run, index) in indexed.iter().enumerate() {
                let r = index.get(base.id.as_str()).ok_or_else(|| RecordsError::MissingInRun {
                    id: base.id.clone(),
                    run,
                })?;
                let pos = r.score_pos.ok_or_else(|| RecordsError::MissingScore(r.id.clone()))?;
                pairs.push((pos, r.neg_or_complement().unwrap_or(1.0 - pos)));
            }
            let (score, fallback) = mean_biased_score(&pairs).ok_or(RecordsError::NoRuns)?;
            let mut out = base.clone();
            out.score_pos = Some(score);
            out.score_neg = Some(1.0 - score);
            out.score_pos_text = None;
            out.samples_pos.clear();
            if fallback {
                out.flag(FLAG_ZERO_TOTAL);
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardinalityPoint {
    pub fraction: f64,
    pub sample_size: usize,
    pub mean_cardinality: f64,
    pub sd: f64,
}

/// Mean and population standard deviation of the distinct-value count over
/// random subsamples (without replacement) at each fraction of the data.
pub fn cardinality_vs_samplesize(
    scores: &[f64],
    fractions: &[f64],
    n_seeds: usize,
    seed: u64,
) -> Result<Vec<CardinalityPoint>> {
    let n_seeds = n_seeds.max(1);
    fractions
        .iter()
        .enumerate()
        .map(|(fi, &fraction)| {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(RecordsError::InvalidFraction(fraction));
            }
            let size = ((fraction * scores.len() as f64).round() as usize)
                .clamp(usize::from(!scores.is_empty()), scores.len());
            let counts: Vec<f64> = (0..n_seeds)
                .map(|s| {
                    let mut rng = stream_rng(seed, (fi * n_seeds + s) as u64);
                    let picked: Vec<f64> = sample(&mut rng, scores.len(), size)
                        .into_iter()
                        .map(|i| scores[i])
                        .collect();
                    cardinality(&picked) as f64
                })
                .collect();
            let mean = counts.iter().sum::<f64>() / n_seeds as f64;
            let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n_seeds as f64;
            Ok(CardinalityPoint {
                fraction,
                sample_size: size,
                mean_cardinality: mean,
                sd: var.sqrt(),
            })
        })
        .collect()
}
