//! Score enrichment: spreading tied verbalized scores into distinct values.

pub mod supervised;
pub mod unsupervised;

use serde::{Deserialize, Serialize};

pub use supervised::{EnrichmentModel, NoiseMode, TrainConfig, Variant};
pub use unsupervised::{enrich_unsupervised, next_larger};

/// Original and enriched scores, aligned by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedScores {
    pub original: Vec<f64>,
    pub enriched: Vec<f64>,
    pub seed: u64,
}
