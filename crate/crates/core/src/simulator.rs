//! Synthetic verbalizing classifier.
//!
//! Each record belongs to a subpopulation. Its latent probability is
//! `u = sigmoid(a * x + b)` with `x ~ N(0, 1)`, and its label is drawn from
//! `Bernoulli(u)`, so `u` is calibrated by construction. The slope `a` is tuned
//! by bisection so the latent AUROC matches the subpopulation's target. The
//! verbalized score is the calibration map applied to `u`, then rounded the
//! way language models tend to round.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{auroc, prauc, MetricsError, PraucMethod, ScoredDataset};
use crate::records::PredictionRecord;
use crate::rng::stream_rng;

/// Largest latent AUROC the bisection is asked to reach.
pub const MAX_AUROC_TARGET: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulatorError {
    #[error("n must be at least 1")]
    EmptyPopulation,
    #[error("at least one subpopulation is required")]
    NoSubpops,
    #[error("subpopulation weights must be non-negative and sum to 1, got {0}")]
    Weights(f64),
    #[error("rounding probabilities must be non-negative and sum to 1, got {0}")]
    Rounding(f64),
    #[error("latent AUROC target {0} is unreachable; targets must lie in [0.5, {MAX_AUROC_TARGET}]")]
    UnreachableTarget(f64),
    #[error("sample_jitter_sd must be finite and non-negative, got {0}")]
    Jitter(f64),
    #[error("latent scores ({latent}) do not align with records ({records})")]
    Misaligned { latent: usize, records: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Probabilities of rounding to the 0.05 grid, the 0.1 grid, or two decimals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundingScheme {
    pub p_grid_005: f64,
    pub p_grid_01: f64,
    pub p_two_decimals: f64,
}

impl RoundingScheme {
    pub const GRID_005: Self = Self {
        p_grid_005: 1.0,
        p_grid_01: 0.0,
        p_two_decimals: 0.0,
    };

    pub const TWO_DECIMALS: Self = Self {
        p_grid_005: 0.0,
        p_grid_01: 0.0,
        p_two_decimals: 1.0,
    };

    pub fn validate(&self) -> Result<(), SimulatorError> {
        let parts = [self.p_grid_005, self.p_grid_01, self.p_two_decimals];
        let total: f64 = parts.iter().sum();
        if parts.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(SimulatorError::Rounding(total));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMap {
    Identity,
    Inverted,
    /// Adds a constant and clamps to `[0, 1]`.
    Shifted(f64),
}

impl CalibrationMap {
    pub fn apply(&self, u: f64) -> f64 {
        match self {
            CalibrationMap::Identity => u,
            CalibrationMap::Inverted => 1.0 - u,
            CalibrationMap::Shifted(delta) => (u + delta).clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subpopulation {
    pub weight: f64,
    pub latent_auroc_target: f64,
    pub calibration_map: CalibrationMap,
    pub rounding: RoundingScheme,
    /// Intercept `b` of the latent logit; moves the subpopulation's prevalence
    /// and the region of the score axis it occupies.
    #[serde(default)]
    pub logit_offset: f64,
}

fn default_samples() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub n: usize,
    pub subpops: Vec<Subpopulation>,
    #[serde(default = "default_samples")]
    pub samples_per_record: usize,
    #[serde(default)]
    pub sample_jitter_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimulatorConfig {
    /// One subpopulation with identity calibration.
    pub fn single(n: usize, target: f64, rounding: RoundingScheme, seed: u64) -> Self {
        Self {
            n,
            subpops: vec![Subpopulation {
                weight: 1.0,
                latent_auroc_target: target,
                calibration_map: CalibrationMap::Identity,
                rounding,
                logit_offset: 0.0,
            }],
            samples_per_record: default_samples(),
            sample_jitter_sd: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        if self.n == 0 {
            return Err(SimulatorError::EmptyPopulation);
        }
        if self.subpops.is_empty() {
            return Err(SimulatorError::NoSubpops);
        }
        let total: f64 = self.subpops.iter().map(|s| s.weight).sum();
        if self.subpops.iter().any(|s| !(s.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(SimulatorError::Weights(total));
        }
        for s in &self.subpops {
            s.rounding.validate()?;
            if !(0.5..=MAX_AUROC_TARGET).contains(&s.latent_auroc_target) {
                return Err(SimulatorError::UnreachableTarget(s.latent_auroc_target));
            }
        }
        if !(self.sample_jitter_sd >= 0.0 && self.sample_jitter_sd.is_finite()) {
            return Err(SimulatorError::Jitter(self.sample_jitter_sd));
        }
        Ok(())
    }
}

/// Rounds half-up to a multiple of `units` hundredths.
fn round_to_hundredths(v: f64, units: u32) -> f64 {
    let steps = (v * 100.0 / units as f64 + 0.5 + 1e-9).floor();
    (steps * units as f64 / 100.0).clamp(0.0, 1.0)
}

/// Rounds `u` to the 0.05 grid, the 0.1 grid, or two decimals, chosen with the
/// scheme's probabilities.
pub fn quantize<R: Rng + ?Sized>(u: f64, scheme: &RoundingScheme, rng: &mut R) -> f64 {
    let u = u.clamp(0.0, 1.0);
    let draw: f64 = rng.random();
    let units = if draw < scheme.p_grid_005 {
        5
    } else if draw < scheme.p_grid_005 + scheme.p_grid_01 {
        10
    } else {
        1
    };
    round_to_hundredths(u, units)
}

/// Two-decimal string of a quantized score.
pub fn score_text(score: f64) -> String {
    format!("{score:.2}")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GRID_LO: f64 = -8.0;
const GRID_HI: f64 = 8.0;
const GRID_STEPS: usize = 4000;

/// AUROC of `sigmoid(a x + b)` against labels drawn from it, with `x ~ N(0, 1)`,
/// by quadrature of `P(x_pos > x_neg)`.
pub fn latent_auroc(a: f64, b: f64) -> f64 {
    let dx = (GRID_HI - GRID_LO) / GRID_STEPS as f64;
    let xs: Vec<f64> = (0..=GRID_STEPS).map(|i| GRID_LO + i as f64 * dx).collect();
    let phi = |x: f64| (-0.5 * x * x).exp();
    let pos: Vec<f64> = xs.iter().map(|&x| phi(x) * sigmoid(a * x + b)).collect();
    let neg: Vec<f64> = xs.iter().map(|&x| phi(x) * (1.0 - sigmoid(a * x + b))).collect();
    let z_pos: f64 = pos.iter().sum();
    let z_neg: f64 = neg.iter().sum();
    // Midpoint-style cumulative: negatives strictly below plus half the cell.
    let mut cdf_neg = 0.0;
    let mut total = 0.0;
    for i in 0..xs.len() {
        total += pos[i] * (cdf_neg + 0.5 * neg[i]);
        cdf_neg += neg[i];
    }
    total / (z_pos * z_neg)
}

/// Slope `a` at which the latent AUROC equals `target` for intercept `b`.
pub fn solve_slope(target: f64, b: f64) -> Result<f64, SimulatorError> {
    if !(0.5..=MAX_AUROC_TARGET).contains(&target) {
        return Err(SimulatorError::UnreachableTarget(target));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while latent_auroc(hi, b) < target {
        hi *= 2.0;
        if hi > 1e4 {
            return Err(SimulatorError::UnreachableTarget(target));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if latent_auroc(mid, b) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub records: Vec<PredictionRecord>,
    /// Un-quantized calibrated probability per record.
    pub latent: Vec<f64>,
    /// Subpopulation index per record.
    pub subpop: Vec<usize>,
}

pub fn simulate(config: &SimulatorConfig) -> Result<Simulation, SimulatorError> {
    config.validate()?;
    let slopes = config
        .subpops
        .iter()
        .map(|s| solve_slope(s.latent_auroc_target, s.logit_offset))
        .collect::<Result<Vec<_>, _>>()?;
    let jitter = Normal::new(0.0, config.sample_jitter_sd).map_err(|_| SimulatorError::Jitter(config.sample_jitter_sd))?;

    let mut sim = Simulation {
        records: Vec::with_capacity(config.n),
        latent: Vec::with_capacity(config.n),
        subpop: Vec::with_capacity(config.n),
    };
    for i in 0..config.n {
        let mut rng = stream_rng(config.seed, i as u64);
        let draw: f64 = rng.random();
        let mut k = 0;
        let mut acc = config.subpops[0].weight;
        while draw >= acc && k + 1 < config.subpops.len() {
            k += 1;
            acc += config.subpops[k].weight;
        }
        let sp = &config.subpops[k];

        let x: f64 = StandardNormal.sample(&mut rng);
        let u = sigmoid(slopes[k] * x + sp.logit_offset);
        let label = rng.random::<f64>() < u;

        let score = quantize(sp.calibration_map.apply(u), &sp.rounding, &mut rng);
        let samples = (0..config.samples_per_record)
            .map(|_| {
                let noisy = (u + jitter.sample(&mut rng)).clamp(0.0, 1.0);
                quantize(sp.calibration_map.apply(noisy), &sp.rounding, &mut rng)
            })
            .collect();

        let mut record = PredictionRecord::new(format!("rec-{i:06}"));
        record.dataset_id = Some(format!("subpop-{k}"));
        record.label = Some(u8::from(label));
        record.score_pos = Some(score);
        record.score_pos_text = Some(score_text(score));
        record.score_neg = Some(round_to_hundredths(1.0 - score, 1));
        record.samples_pos = samples;
        sim.records.push(record);
        sim.latent.push(u);
        sim.subpop.push(k);
    }
    Ok(sim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleMetrics {
    pub auroc: f64,
    pub prauc: f64,
}

/// Metrics of the un-quantized latent scores: the ranking ceiling.
pub fn latent_oracle_metrics(
    records: &[PredictionRecord],
    latent: &[f64],
) -> Result<OracleMetrics, SimulatorError> {
    if records.len() != latent.len() {
        return Err(SimulatorError::Misaligned {
            latent: latent.len(),
            records: records.len(),
        });
    }
    let labels = records.iter().map(|r| r.label == Some(1)).collect();
    let data = ScoredDataset::new(labels, latent.to_vec())?;
    Ok(OracleMetrics {
        auroc: auroc(&data)?,
        prauc: prauc(&data, PraucMethod::Trapezoid)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::cardinality;
    use rand::SeedableRng;

    #[test]
    fn quantize_examples() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(quantize(0.633, &RoundingScheme::GRID_005, &mut rng), 0.65);
        assert_eq!(quantize(0.625, &RoundingScheme::GRID_005, &mut rng), 0.65);
        let grid01 = RoundingScheme {
            p_grid_005: 0.0,
            p_grid_01: 1.0,
            p_two_decimals: 0.0,
        };
        for scheme in [RoundingScheme::GRID_005, grid01, RoundingScheme::TWO_DECIMALS] {
            assert_eq!(quantize(0.5, &scheme, &mut rng), 0.5);
        }
        assert_eq!(quantize(0.05, &grid01, &mut rng), 0.1);
        assert_eq!(quantize(0.125, &RoundingScheme::TWO_DECIMALS, &mut rng), 0.13);
        assert_eq!(quantize(1.0, &RoundingScheme::GRID_005, &mut rng), 1.0);
    }

    #[test]
    fn score_text_has_two_decimals() {
        assert_eq!(score_text(0.7), "0.70");
        assert_eq!(score_text(0.65), "0.65");
        assert_eq!(score_text(1.0), "1.00");
    }

    #[test]
    fn quadrature_matches_known_limits() {
        assert!((latent_auroc(0.0, 0.0) - 0.5).abs() < 1e-6);
        assert!(latent_auroc(2.0, 0.0) > latent_auroc(1.0, 0.0));
        let a = solve_slope(0.85, 0.0).unwrap();
        assert!((latent_auroc(a, 0.0) - 0.85).abs() < 1e-9);
    }

    #[test]
    fn unreachable_targets_rejected() {
        assert!(matches!(solve_slope(0.9995, 0.0), Err(SimulatorError::UnreachableTarget(_))));
        let cfg = SimulatorConfig::single(10, 0.9995, RoundingScheme::GRID_005, 1);
        assert!(simulate(&cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimulatorConfig::single(10, 0.8, RoundingScheme::GRID_005, 1);
        cfg.subpops[0].weight = 0.7;
        assert!(matches!(cfg.validate(), Err(SimulatorError::Weights(_))));
        let mut cfg = SimulatorConfig::single(10, 0.8, RoundingScheme::GRID_005, 1);
        cfg.subpops[0].rounding.p_grid_01 = 0.5;
        assert!(matches!(cfg.validate(), Err(SimulatorError::Rounding(_))));
    }

    #[test]
    fn grid_rounding_bounds_cardinality() {
        let cfg = SimulatorConfig::single(3000, 0.8, RoundingScheme::GRID_005, 4);
        let sim = simulate(&cfg).unwrap();
        let scores: Vec<f64> = sim.records.iter().map(|r| r.score_pos.unwrap()).collect();
        assert!(cardinality(&scores) <= 21);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut cfg = SimulatorConfig::single(200, 0.8, RoundingScheme::TWO_DECIMALS, 9);
        cfg.sample_jitter_sd = 0.1;
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        cfg.seed = 10;
        let other = simulate(&cfg).unwrap();
        cfg.seed = 9;
        assert_ne!(simulate(&cfg).unwrap().latent, other.latent);
    }

    #[test]
    fn latent_auroc_hits_target() {
        let cfg = SimulatorConfig::single(5000, 0.85, RoundingScheme::GRID_005, 2);
        let sim = simulate(&cfg).unwrap();
        let oracle = latent_oracle_metrics(&sim.records, &sim.latent).unwrap();
        assert!((oracle.auroc - 0.85).abs() < 0.02, "{}", oracle.auroc);
    }

    #[test]
    fn inverted_subpop_ranks_backwards() {
        let mut cfg = SimulatorConfig::single(3000, 0.85, RoundingScheme::TWO_DECIMALS, 5);
        cfg.subpops[0].calibration_map = CalibrationMap::Inverted;
        let sim = simulate(&cfg).unwrap();
        let data = crate::records::to_dataset(&sim.records, |r| r.score_pos).unwrap();
        assert!(auroc(&data).unwrap() < 0.5);
    }

    #[test]
    fn heavy_rounding_loses_ranking() {
        let cfg = SimulatorConfig::single(5000, 0.9, RoundingScheme::GRID_005, 6);
        let sim = simulate(&cfg).unwrap();
        let oracle = latent_oracle_metrics(&sim.records, &sim.latent).unwrap();
        let data = crate::records::to_dataset(&sim.records, |r| r.score_pos).unwrap();
        assert!(oracle.auroc >= auroc(&data).unwrap());
    }
}
