//! Metric reports over prediction files.

use std::collections::BTreeMap;

use opgrain_core::metrics::{auroc, cardinality, ece, prauc, PraucMethod, ScoredDataset};
use opgrain_core::records::{sample_label_score, sample_prob_score, to_dataset, FileMeta, InputDigest};
use opgrain_core::{GranularityReport, PredictionRecord};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Which value of a record is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ScoreSource {
    ScorePos,
    Enriched,
    SampleProb,
    SampleLabel,
}

impl ScoreSource {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreSource::ScorePos => "score_pos",
            ScoreSource::Enriched => "enriched",
            ScoreSource::SampleProb => "sample_prob",
            ScoreSource::SampleLabel => "sample_label",
        }
    }

    pub fn score(&self, r: &PredictionRecord) -> Option<f64> {
        match self {
            ScoreSource::ScorePos => r.score_pos,
            ScoreSource::Enriched => r.score_enriched,
            ScoreSource::SampleProb => sample_prob_score(&r.samples_pos),
            ScoreSource::SampleLabel => sample_label_score(&r.samples_pos),
        }
    }

    /// The column a file is judged by: enriched scores when every scored
    /// record carries one, else the verbalized score.
    pub fn primary(records: &[PredictionRecord]) -> Self {
        let any = records.iter().any(|r| r.score_enriched.is_some());
        let all = records
            .iter()
            .filter(|r| r.score_pos.is_some())
            .all(|r| r.score_enriched.is_some());
        if any && all {
            ScoreSource::Enriched
        } else {
            ScoreSource::ScorePos
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityValues {
    pub g_precision: Option<f64>,
    pub g_recall: Option<f64>,
    pub g_fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PraucValues {
    pub trapezoid: f64,
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub n_records: usize,
    /// Records without a label or without this score.
    pub n_excluded: usize,
    pub cardinality: usize,
    pub granularity: GranularityValues,
    pub prauc: PraucValues,
    pub auroc: f64,
    pub ece: f64,
    /// Flag name to number of records carrying it.
    pub flags: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub resolution: f64,
    pub inputs: Vec<InputDigest>,
    /// Metadata line of the analyzed file, when present.
    pub source: Option<FileMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub metadata: ReportMeta,
    pub methods: Vec<MethodReport>,
}

pub fn dataset_for(records: &[PredictionRecord], source: ScoreSource) -> Result<ScoredDataset> {
    let data = to_dataset(records, |r| source.score(r))?;
    if data.is_empty() {
        return Err(CliError::Data(format!("no labeled records with a {} score", source.name())));
    }
    Ok(data)
}

pub fn flag_counts(records: &[PredictionRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        for f in &r.flags {
            *counts.entry(f.clone()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn method_report(
    records: &[PredictionRecord],
    source: ScoreSource,
    method: &str,
    resolution: f64,
    ece_bins: usize,
) -> Result<MethodReport> {
    let data = dataset_for(records, source)?;
    if data.positives() == 0 || data.negatives() == 0 {
        return Err(CliError::Data(format!(
            "{method}: degenerate class distribution ({} positives, {} negatives)",
            data.positives(),
            data.negatives()
        )));
    }
    let g = GranularityReport::from_dataset(&data, resolution)?;
    Ok(MethodReport {
        method: method.to_string(),
        n_records: data.len(),
        n_excluded: records.len() - data.len(),
        cardinality: cardinality(data.scores()),
        granularity: GranularityValues {
            g_precision: g.g_precision,
            g_recall: g.g_recall,
            g_fpr: g.g_fpr,
        },
        prauc: PraucValues {
            trapezoid: prauc(&data, PraucMethod::Trapezoid)?,
            average_precision: prauc(&data, PraucMethod::AveragePrecision)?,
        },
        auroc: auroc(&data)?,
        ece: ece(&data, ece_bins)?.ece,
        flags: flag_counts(records),
    })
}

/// One row of a method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub source: String,
    pub calls_per_instance: Option<u32>,
    pub cardinality: usize,
    pub g_pre: Option<f64>,
    pub g_rec: Option<f64>,
    pub g_fpr: Option<f64>,
    pub prauc: f64,
    pub auroc: f64,
}

pub const COMPARE_COLUMNS: [&str; 8] = [
    "method",
    "calls_per_instance",
    "cardinality",
    "g_pre",
    "g_rec",
    "g_fpr",
    "prauc",
    "auroc",
];

impl CompareRow {
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.method.clone(),
            self.calls_per_instance.map(|c| c.to_string()).unwrap_or_default(),
            self.cardinality.to_string(),
            opt(self.g_pre),
            opt(self.g_rec),
            opt(self.g_fpr),
            self.prauc.to_string(),
            self.auroc.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metadata: ReportMeta,
    pub rows: Vec<CompareRow>,
}

/// Checks that every file scores the same ids with the same labels.
pub fn check_alignment(files: &[(String, Vec<PredictionRecord>)]) -> Result<()> {
    let Some((first_name, first)) = files.first() else {
        return Ok(());
    };
    let reference: BTreeMap<&str, Option<u8>> = first.iter().map(|r| (r.id.as_str(), r.label)).collect();
    if reference.len() != first.len() {
        return Err(CliError::Consistency(format!("{first_name}: duplicate record ids")));
    }
    for (name, records) in &files[1..] {
        let other: BTreeMap<&str, Option<u8>> = records.iter().map(|r| (r.id.as_str(), r.label)).collect();
        if other.len() != records.len() {
            return Err(CliError::Consistency(format!("{name}: duplicate record ids")));
        }
        if other.keys().ne(reference.keys()) {
            return Err(CliError::Consistency(format!("{name}: record ids differ from {first_name}")));
        }
        if let Some((id, _)) = other.iter().find(|(id, label)| reference[*id] != **label) {
            return Err(CliError::Consistency(format!("{name}: label of {id} differs from {first_name}")));
        }
    }
    Ok(())
}
