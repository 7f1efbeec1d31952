//! Measuring and repairing the operating-point structure of classifier scores.
//!
//! Verbalized probabilities emitted by black-box language models collapse onto a
//! handful of round values, leaving PR and ROC curves with only a few usable
//! operating points. This crate provides:
//!
//! - [`metrics`]: confusion matrices, PR/ROC curves, AUCs, ECE and KDE.
//! - [`granularity`]: the operational granularity of a curve along one axis.
//! - [`enrich`]: rank-preserving uniform noise and a trained noise calibrator.
//! - [`simulator`]: synthetic verbalizers with rounding bias and miscalibration.
//! - [`records`]: the prediction-record schema, ingestion and aggregation baselines.
//! - [`bias`]: rounding-bias diagnostics on written score strings.

pub mod bias;
pub mod enrich;
pub mod granularity;
pub mod metrics;
pub mod records;
pub mod rng;
pub mod simulator;

pub use granularity::{granularity, GranularityReport, DEFAULT_RESOLUTION};
pub use metrics::{
    auroc, build_curve, cardinality, confusion_at_threshold, ece, kde_density, prauc,
    ConfusionMatrix, CurvePoint, CurveSpace, MetricsError, OperatingCurve, PraucMethod,
    ReliabilityReport, ScoredDataset,
};
pub use records::PredictionRecord;
