use opgrain_core::enrich::{enrich_unsupervised, next_larger};
use opgrain_core::enrich::unsupervised::support;
use opgrain_core::metrics::{auroc, build_curve, cardinality, prauc, CurveSpace, PraucMethod, ScoredDataset};
use opgrain_core::records::{read_csv, read_jsonl, write_csv, write_jsonl};
use opgrain_core::simulator::{simulate, RoundingScheme, SimulatorConfig};
use opgrain_core::{granularity, GranularityReport};
use proptest::prelude::*;

fn grid_scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..=20).prop_map(|k| f64::from(k) * 0.05), 2..80)
}

fn labeled() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec((0u32..=10).prop_map(|k| f64::from(k) / 10.0), n),
        )
    })
}

proptest! {
    #[test]
    fn enrichment_stays_below_next_larger(scores in grid_scores(), seed in any::<u64>()) {
        let e = enrich_unsupervised(&scores, seed);
        let uniques = support(&scores);
        for (&s, &x) in scores.iter().zip(&e.enriched) {
            prop_assert!(x >= s);
            if let Some(next) = next_larger(s, &uniques) {
                prop_assert!(x < next);
            }
        }
    }

    #[test]
    fn enrichment_never_merges_values(scores in grid_scores(), seed in any::<u64>()) {
        let e = enrich_unsupervised(&scores, seed);
        prop_assert!(cardinality(&e.enriched) >= cardinality(&scores));
    }

    #[test]
    fn granularity_is_a_resolution_multiple(points in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let g = granularity(&points, 1e-3).unwrap().unwrap();
        prop_assert!(g > 0.0 && g <= 1.0);
        let steps = g * 1000.0;
        prop_assert!((steps - steps.round()).abs() < 1e-9);
    }

    #[test]
    fn adding_points_never_coarsens(points in prop::collection::vec(0.0f64..=1.0, 1..15), extra in 0.0f64..=1.0) {
        let before = granularity(&points, 1e-3).unwrap().unwrap();
        let mut more = points.clone();
        more.push(extra);
        let after = granularity(&more, 1e-3).unwrap().unwrap();
        prop_assert!(after <= before);
    }

    #[test]
    fn curve_areas_are_probabilities((labels, scores) in labeled()) {
        prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
        let data = ScoredDataset::new(labels, scores).unwrap();
        for value in [
            auroc(&data).unwrap(),
            prauc(&data, PraucMethod::Trapezoid).unwrap(),
            prauc(&data, PraucMethod::AveragePrecision).unwrap(),
        ] {
            prop_assert!((0.0..=1.0).contains(&value));
        }
        let roc = build_curve(&data, CurveSpace::Roc).unwrap();
        prop_assert!(roc.points.iter().all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
    }

    #[test]
    fn score_reversal_mirrors_auroc((labels, scores) in labeled()) {
        prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
        let forward = auroc(&ScoredDataset::new(labels.clone(), scores.clone()).unwrap()).unwrap();
        let reversed: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let backward = auroc(&ScoredDataset::new(labels, reversed).unwrap()).unwrap();
        prop_assert!((forward + backward - 1.0).abs() < 1e-12);
    }
}

#[test]
fn simulated_grid_scores_have_grid_cardinality() {
    for seed in 0..3 {
        let sim = simulate(&SimulatorConfig::single(3000, 0.8, RoundingScheme::GRID_005, seed)).unwrap();
        let scores: Vec<f64> = sim.records.iter().filter_map(|r| r.score_pos).collect();
        assert!(cardinality(&scores) <= 21);
    }
}

#[test]
fn enrichment_refines_simulated_granularity() {
    let sim = simulate(&SimulatorConfig::single(2000, 0.8, RoundingScheme::GRID_005, 4)).unwrap();
    let labels: Vec<bool> = sim.records.iter().map(|r| r.label == Some(1)).collect();
    let scores: Vec<f64> = sim.records.iter().filter_map(|r| r.score_pos).collect();
    let before = GranularityReport::from_dataset(&ScoredDataset::new(labels.clone(), scores.clone()).unwrap(), 1e-4).unwrap();
    let e = enrich_unsupervised(&scores, 4);
    let after = GranularityReport::from_dataset(&ScoredDataset::new(labels, e.enriched).unwrap(), 1e-4).unwrap();
    assert!(after.g_recall.unwrap() < before.g_recall.unwrap());
    assert!(after.g_fpr.unwrap() < before.g_fpr.unwrap());
}

#[test]
fn jsonl_and_csv_keep_scores() {
    let mut config = SimulatorConfig::single(200, 0.8, RoundingScheme::TWO_DECIMALS, 6);
    config.sample_jitter_sd = 0.05;
    let records = simulate(&config).unwrap().records;

    let mut jsonl = Vec::new();
    write_jsonl(&mut jsonl, None, &records).unwrap();
    assert_eq!(read_jsonl(jsonl.as_slice()).unwrap().records, records);

    let mut csv = Vec::new();
    write_csv(&mut csv, &records).unwrap();
    let back = read_csv(csv.as_slice()).unwrap().records;
    assert_eq!(back.len(), records.len());
    for (a, b) in back.iter().zip(&records) {
        assert_eq!((a.label, a.score_pos, &a.samples_pos), (b.label, b.score_pos, &b.samples_pos));
    }
}
