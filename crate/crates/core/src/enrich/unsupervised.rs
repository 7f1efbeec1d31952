//! Rank-preserving uniform noise.
//!
//! Each score is raised by `U(0, gap)` where `gap` is the distance to the next
//! larger distinct score (with 0 and 1 always counted as observed values),
//! minus a small guard. Scores that were strictly ordered stay strictly
//! ordered; tied scores are broken at random.

use rand::Rng;

use super::EnrichedScores;
use crate::rng::stream_rng;

/// Keeps enriched scores strictly below the next larger original.
pub const GAP_GUARD: f64 = 1e-9;

/// Smallest element of `uniques` (sorted ascending) strictly greater than `x`.
pub fn next_larger(x: f64, uniques: &[f64]) -> Option<f64> {
    let idx = uniques.partition_point(|&u| u <= x);
    uniques.get(idx).copied()
}

/// Sorted distinct scores together with 0 and 1.
pub fn support(scores: &[f64]) -> Vec<f64> {
    let mut uniques: Vec<f64> = scores.iter().map(|s| s + 0.0).chain([0.0, 1.0]).collect();
    uniques.sort_by(f64::total_cmp);
    uniques.dedup();
    uniques
}

pub fn enrich_unsupervised(scores: &[f64], seed: u64) -> EnrichedScores {
    let uniques = support(scores);
    let enriched = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let bound = next_larger(s, &uniques).map_or(0.0, |nl| (nl - s - GAP_GUARD).max(0.0));
            if bound == 0.0 {
                return s;
            }
            let mut rng = stream_rng(seed, i as u64);
            s + rng.random::<f64>() * bound
        })
        .collect();
    EnrichedScores {
        original: scores.to_vec(),
        enriched,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::cardinality;
    use proptest::prelude::*;

    const U: [f64; 4] = [0.0, 0.2, 0.6, 1.0];

    #[test]
    fn next_larger_examples() {
        assert_eq!(next_larger(0.2, &U), Some(0.6));
        assert_eq!(next_larger(1.0, &U), None);
        assert_eq!(next_larger(0.6, &U), Some(1.0));
        assert_eq!(next_larger(0.3, &U), Some(0.6));
    }

    #[test]
    fn noise_stays_below_next_value() {
        let scores = [0.2, 0.6, 0.2, 0.2];
        for seed in 0..50 {
            let e = enrich_unsupervised(&scores, seed);
            for (&o, &v) in scores.iter().zip(&e.enriched) {
                let nl = next_larger(o, &U).unwrap();
                assert!(v >= o && v < nl - GAP_GUARD + 1e-15, "{o} -> {v}");
            }
        }
    }

    #[test]
    fn top_score_unchanged() {
        let e = enrich_unsupervised(&[1.0, 0.5, 1.0], 3);
        assert_eq!(e.enriched[0], 1.0);
        assert_eq!(e.enriched[2], 1.0);
    }

    #[test]
    fn grid_scores_become_distinct() {
        let scores: Vec<f64> = (0..5000).map(|i| (i % 20) as f64 * 0.05).collect();
        let e = enrich_unsupervised(&scores, 1);
        assert_eq!(cardinality(&e.enriched), 5000);
    }

    #[test]
    fn deterministic_given_seed() {
        let scores = [0.1, 0.1, 0.4];
        assert_eq!(enrich_unsupervised(&scores, 8), enrich_unsupervised(&scores, 8));
        assert_ne!(enrich_unsupervised(&scores, 8).enriched, enrich_unsupervised(&scores, 9).enriched);
    }

    proptest! {
        #[test]
        fn strict_order_preserved(
            steps in prop::collection::vec(0u32..=20, 1..60),
            seed in any::<u64>(),
        ) {
            let scores: Vec<f64> = steps.iter().map(|&k| k as f64 * 0.05).collect();
            let e = enrich_unsupervised(&scores, seed);
            for i in 0..scores.len() {
                prop_assert!(e.enriched[i] >= scores[i] && e.enriched[i] <= 1.0);
                for j in 0..scores.len() {
                    if scores[i] < scores[j] {
                        prop_assert!(e.enriched[i] < e.enriched[j]);
                    }
                }
            }
        }
    }
}
