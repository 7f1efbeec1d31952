//! Operational granularity: the smallest uniform cell size at which every cell
//! of the unit interval contains at least one projected operating point.
//!
//! Candidate cell sizes are the multiples `k * resolution` up to 1. With
//! `K = ceil(1 / s)` cells, a point `p` falls into cell `min(floor(p / s), K - 1)`,
//! so the last cell absorbs `p = 1` and any overhang beyond 1.
//!
//! Cell membership is evaluated in units of the resolution (`q = p * N` with
//! `N = 1 / resolution`), which keeps the cell boundaries `m * k` exact integers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{build_curve, cardinality, CurveSpace, MetricsError, OperatingCurve, ScoredDataset};

pub const DEFAULT_RESOLUTION: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GranularityError {
    #[error("resolution must be in (0, 1] with 1/resolution an integer, got {0}")]
    InvalidResolution(f64),
    #[error("point {0} is outside [0, 1]")]
    PointOutOfRange(f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Number of resolution steps in the unit interval.
pub fn steps_per_unit(resolution: f64) -> Result<u64, GranularityError> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(GranularityError::InvalidResolution(resolution));
    }
    let inv = 1.0 / resolution;
    let n = inv.round();
    if (inv - n).abs() > 1e-9 * n || n > 1e9 {
        return Err(GranularityError::InvalidResolution(resolution));
    }
    Ok(n as u64)
}

/// Scaled coordinates `p * N`, validated, sorted and deduplicated.
pub fn scaled_points(points: &[f64], n: u64) -> Result<Vec<f64>, GranularityError> {
    let mut q = Vec::with_capacity(points.len());
    for &p in points {
        if !(0.0..=1.0).contains(&p) {
            return Err(GranularityError::PointOutOfRange(p));
        }
        q.push(p * n as f64 + 0.0);
    }
    q.sort_by(f64::total_cmp);
    q.dedup();
    Ok(q)
}

/// Unclamped cell index `m` with `m * k <= q < (m + 1) * k`.
fn raw_cell(q: f64, k: u64) -> u64 {
    let kf = k as f64;
    let mut m = (q / kf).floor() as u64;
    while m > 0 && (m as f64) * kf > q {
        m -= 1;
    }
    while ((m + 1) as f64) * kf <= q {
        m += 1;
    }
    m
}

fn covers(sorted_q: &[f64], k: u64, cells: u64) -> bool {
    let mut next = 0u64;
    for &q in sorted_q {
        let cell = raw_cell(q, k).min(cells - 1);
        if cell > next {
            return false;
        }
        if cell == next {
            next += 1;
            if next == cells {
                return true;
            }
        }
    }
    false
}

/// Granularity of a point set along one axis; `None` for an empty set.
pub fn granularity(points: &[f64], resolution: f64) -> Result<Option<f64>, GranularityError> {
    let n = steps_per_unit(resolution)?;
    let q = scaled_points(points, n)?;
    if q.is_empty() {
        return Ok(None);
    }
    let distinct = q.len() as u64;
    let q_min = q[0];
    for k in 1..=n {
        let cells = n.div_ceil(k);
        // Each cell needs its own distinct point, and the first cell needs the minimum.
        if cells > distinct || (cells > 1 && raw_cell(q_min, k) != 0) {
            continue;
        }
        if covers(&q, k, cells) {
            return Ok(Some(k as f64 / n as f64));
        }
    }
    // k = n is a single cell that always covers a non-empty set.
    unreachable!("single-cell grid always covers a non-empty set")
}

/// Per-axis granularity of a PR/ROC pair plus the score cardinality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GranularityReport {
    pub g_precision: Option<f64>,
    pub g_recall: Option<f64>,
    pub g_fpr: Option<f64>,
    pub cardinality: usize,
    pub resolution: f64,
}

/// Granularity of one curve's axes: `(x, y)` projections.
pub fn curve_granularity(
    curve: &OperatingCurve,
    resolution: f64,
) -> Result<(Option<f64>, Option<f64>), GranularityError> {
    Ok((
        granularity(&curve.xs(), resolution)?,
        granularity(&curve.ys(), resolution)?,
    ))
}

impl GranularityReport {
    /// Projects the PR curve onto precision and recall and the ROC curve onto
    /// fpr. Axes whose curve is undefined for the data (single class) are `None`.
    pub fn from_dataset(data: &ScoredDataset, resolution: f64) -> Result<Self, GranularityError> {
        steps_per_unit(resolution)?;
        let (g_recall, g_precision) = match build_curve(data, CurveSpace::Pr) {
            Ok(pr) => curve_granularity(&pr, resolution)?,
            Err(MetricsError::NoPositives) => (None, None),
            Err(e) => return Err(e.into()),
        };
        let g_fpr = match build_curve(data, CurveSpace::Roc) {
            Ok(roc) => curve_granularity(&roc, resolution)?.0,
            Err(MetricsError::DegenerateClasses) => None,
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            g_precision,
            g_recall,
            g_fpr,
            cardinality: cardinality(data.scores()),
            resolution,
        })
    }
}
