//! Confusion matrices, PR/ROC operating curves, AUCs, calibration and KDE.
//!
//! The decision rule throughout is "positive iff score > threshold"; records whose
//! score equals the threshold are predicted negative.
//!
//! Curves are built from every unique score used as a threshold plus two
//! sentinel thresholds, one above the maximum score (nothing predicted positive)
//! and one below the minimum (everything predicted positive). The sentinels give
//! ROC curves their `(0, 0)` and `(1, 1)` endpoints and PR curves a recall-1
//! endpoint. Precision with zero predicted positives is defined as 1.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distance of the sentinel thresholds from the observed score range.
pub const SENTINEL_OFFSET: f64 = 1.0;

/// Default number of reliability bins.
pub const DEFAULT_ECE_BINS: usize = 10;

/// Lower bound on the KDE bandwidth, used when the points have zero spread.
pub const KDE_BANDWIDTH_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("labels ({labels}) and scores ({scores}) differ in length")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("score {value} at index {index} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("no positive labels")]
    NoPositives,
    #[error("degenerate class distribution")]
    DegenerateClasses,
    #[error("threshold must be finite, got {0}")]
    NonFiniteThreshold(f64),
    #[error("number of bins must be at least 1")]
    InvalidBins,
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Binary labels paired with positive-class scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDataset {
    labels: Vec<bool>,
    scores: Vec<f64>,
}

impl ScoredDataset {
    pub fn new(labels: Vec<bool>, scores: Vec<f64>) -> Result<Self> {
        if labels.len() != scores.len() {
            return Err(MetricsError::LengthMismatch {
                labels: labels.len(),
                scores: scores.len(),
            });
        }
        if labels.is_empty() {
            return Err(MetricsError::EmptyDataset);
        }
        if let Some((index, &value)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !(0.0..=1.0).contains(*s))
        {
            return Err(MetricsError::ScoreOutOfRange { index, value });
        }
        Ok(Self { labels, scores })
    }

    /// Convenience constructor from `0/1` labels.
    pub fn from_binary(labels: &[u8], scores: &[f64]) -> Result<Self> {
        Self::new(labels.iter().map(|&l| l != 0).collect(), scores.to_vec())
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Subset by index, preserving order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.scores[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionMatrix {
    fn from_predicted(tp: usize, fp: usize, positives: usize, negatives: usize) -> Self {
        Self {
            tp,
            fp,
            tn: negatives - fp,
            fn_: positives - tp,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Recall (true positive rate); `None` without positives.
    pub fn recall(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    /// Precision, 1 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        let predicted = self.tp + self.fp;
        if predicted == 0 {
            1.0
        } else {
            self.tp as f64 / predicted as f64
        }
    }

    /// False positive rate; `None` without negatives.
    pub fn fpr(&self) -> Option<f64> {
        let n = self.fp + self.tn;
        (n > 0).then(|| self.fp as f64 / n as f64)
    }
}

/// Counts the confusion matrix for "positive iff score > th".
pub fn confusion_at_threshold(data: &ScoredDataset, th: f64) -> Result<ConfusionMatrix> {
    if !th.is_finite() {
        return Err(MetricsError::NonFiniteThreshold(th));
    }
    if data.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut cm = ConfusionMatrix::default();
    for (&label, &score) in data.labels.iter().zip(&data.scores) {
        match (score > th, label) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveSpace {
    /// x = recall, y = precision.
    Pr,
    /// x = false positive rate, y = true positive rate.
    Roc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// Operating points ordered by strictly decreasing threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingCurve {
    pub space: CurveSpace,
    pub points: Vec<CurvePoint>,
}

impl OperatingCurve {
    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.y).collect()
    }

    /// Trapezoidal area under the curve, integrating y over x in point order.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].x - w[0].x) * (w[0].y + w[1].y) / 2.0)
            .sum()
    }

    /// Writes `threshold,x,y` rows with a header.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for p in &self.points {
            wtr.serialize(p)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Cumulative (tp, fp) counts at every threshold of the sweep, from the high
/// sentinel down to the low sentinel.
fn threshold_sweep(data: &ScoredDataset) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.scores[b].total_cmp(&data.scores[a]));

    let max = data.scores[order[0]];
    let min = data.scores[order[order.len() - 1]];
    let mut sweep = Vec::with_capacity(order.len() + 2);
    sweep.push((max + SENTINEL_OFFSET, 0, 0));

    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let score = data.scores[order[i]];
        // Everything strictly above this score is already counted.
        sweep.push((score, tp, fp));
        while i < order.len() && data.scores[order[i]] == score {
            if data.labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    sweep.push((min - SENTINEL_OFFSET, tp, fp));
    sweep
}

/// Builds the PR or ROC operating curve.
pub fn build_curve(data: &ScoredDataset, space: CurveSpace) -> Result<OperatingCurve> {
    if data.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let positives = data.positives();
    let negatives = data.negatives();
    match space {
        CurveSpace::Pr if positives == 0 => return Err(MetricsError::NoPositives),
        CurveSpace::Roc if positives == 0 || negatives == 0 => {
            return Err(MetricsError::DegenerateClasses)
        }
        _ => {}
    }

    let points = threshold_sweep(data)
        .into_iter()
        .map(|(threshold, tp, fp)| {
            let cm = ConfusionMatrix::from_predicted(tp, fp, positives, negatives);
            let (x, y) = match space {
                CurveSpace::Pr => (cm.recall().unwrap_or(0.0), cm.precision()),
                CurveSpace::Roc => (cm.fpr().unwrap_or(0.0), cm.recall().unwrap_or(0.0)),
            };
            CurvePoint { threshold, x, y }
        })
        .collect();
    Ok(OperatingCurve { space, points })
}

/// Tie-corrected rank AUROC: the fraction of (positive, negative) pairs where
/// the positive scores higher, with ties counted as one half.
pub fn auroc(data: &ScoredDataset) -> Result<f64> {
    let positives = data.positives();
    let negatives = data.negatives();
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateClasses);
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));

    // Mann-Whitney U from average ranks.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = data.scores[order[i]];
        let mut j = i;
        let mut pos_in_group = 0usize;
        while j < order.len() && data.scores[order[j]] == score {
            if data.labels[order[j]] {
                pos_in_group += 1;
            }
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += avg_rank * pos_in_group as f64;
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PraucMethod {
    /// Trapezoidal integration of precision over recall along the PR curve.
    #[default]
    Trapezoid,
    /// Step-wise sum of recall increments times precision.
    AveragePrecision,
}

/// Area under the PR curve.
pub fn prauc(data: &ScoredDataset, method: PraucMethod) -> Result<f64> {
    let curve = build_curve(data, CurveSpace::Pr)?;
    Ok(match method {
        // Curve order (decreasing threshold) already has non-decreasing recall.
        PraucMethod::Trapezoid => curve.trapezoid_area(),
        PraucMethod::AveragePrecision => curve
            .points
            .windows(2)
            .map(|w| (w[1].x - w[0].x) * w[1].y)
            .sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean score in the bin; `None` for empty bins.
    pub mean_confidence: Option<f64>,
    /// Fraction of positive labels in the bin; `None` for empty bins.
    pub empirical_positive_rate: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
}

/// Equal-width reliability bins over `[0, 1]` (last bin closed at 1) and the
/// expected calibration error on the positive-class score.
pub fn ece(data: &ScoredDataset, n_bins: usize) -> Result<ReliabilityReport> {
    if n_bins == 0 {
        return Err(MetricsError::InvalidBins);
    }
    if data.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut sum_conf = vec![0.0; n_bins];
    let mut sum_pos = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&label, &score) in data.labels.iter().zip(&data.scores) {
        let bin = ((score * n_bins as f64).floor() as usize).min(n_bins - 1);
        sum_conf[bin] += score;
        sum_pos[bin] += usize::from(label);
        counts[bin] += 1;
    }

    let n = data.len() as f64;
    let mut total = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let count = counts[b];
            let (mean_confidence, empirical_positive_rate) = if count > 0 {
                let conf = sum_conf[b] / count as f64;
                let rate = sum_pos[b] as f64 / count as f64;
                total += count as f64 / n * (conf - rate).abs();
                (Some(conf), Some(rate))
            } else {
                (None, None)
            };
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                mean_confidence,
                empirical_positive_rate,
                count,
            }
        })
        .collect();
    Ok(ReliabilityReport { bins, ece: total })
}

/// Scott's-rule bandwidth `sigma * n^(-1/5)` with the population standard
/// deviation, floored at [`KDE_BANDWIDTH_FLOOR`].
pub fn scott_bandwidth(points: &[f64]) -> Result<f64> {
    if points.is_empty() {
        return Err(MetricsError::EmptyInput("points"));
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<f64>() / n;
    let var = points.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    Ok((var.sqrt() * n.powf(-0.2)).max(KDE_BANDWIDTH_FLOOR))
}

/// Gaussian kernel density of `points` evaluated at every grid location.
pub fn kde_density(points: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(MetricsError::EmptyInput("grid"));
    }
    let h = scott_bandwidth(points)?;
    let norm = 1.0 / (points.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(grid
        .iter()
        .map(|&g| {
            norm * points
                .iter()
                .map(|&p| (-(g - p).powi(2) / (2.0 * h * h)).exp())
                .sum::<f64>()
        })
        .collect())
}

/// Number of distinct values under exact equality (`0.0 == -0.0`).
pub fn cardinality(scores: &[f64]) -> usize {
    let mut values: Vec<f64> = scores.iter().map(|s| s + 0.0).collect();
    values.sort_by(f64::total_cmp);
    values.dedup_by(|a, b| a == b);
    values.len()
}
