//! Trained noise calibrator.
//!
//! A two-hidden-layer ReLU network maps verbalized class scores to a logit; a
//! learnable scale `w` controls how much Gaussian noise is added to that logit
//! before the sigmoid:
//!
//! ```text
//! p = sigmoid(f(features) + z / w),   z ~ N(0, 1)
//! loss = mean BCE(p, y) + lambda * |w|
//! ```
//!
//! Small `w` means more noise and more distinct outputs; the penalty pushes `w`
//! down while the cross-entropy pushes it up wherever noise hurts ranking.
//! The ablation modes replace the adaptive noise term by a constant bias `1/w`
//! and either leave the input clean, perturb it, or append `z` as an extra input.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::EnrichedScores;
use crate::metrics::{prauc, MetricsError, PraucMethod, ScoredDataset};
use crate::records::PredictionRecord;
use crate::rng::{derive_seed, keyed_rng, stream_rng};

pub const MODEL_VERSION: u32 = 1;
/// Standard deviation of the input perturbation in `InputAdditive` mode.
pub const INPUT_NOISE_SD: f64 = 0.001;
pub const PROB_CLAMP: f64 = 1e-12;
/// Floor applied to `w` after every optimizer step.
pub const MIN_W: f64 = 1e-3;
pub const MIN_TRAIN_ROWS: usize = 20;
/// Training sets up to this size use a single full batch.
pub const FULL_BATCH_LIMIT: usize = 4096;
pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_LAMBDA: f64 = 0.01;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SupervisedError {
    #[error("feature vector has length {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {MIN_TRAIN_ROWS} training rows, got {0}")]
    TooFewRows(usize),
    #[error("training data contains a single class")]
    SingleClass,
    #[error("record {0} has no temperature-0 score")]
    MissingScore(String),
    #[error("record {0} has no label")]
    MissingLabel(String),
    #[error("record {0} has no temperature-1 sample")]
    MissingSamples(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("every grid cell failed: {0}")]
    AllCellsFailed(String),
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, SupervisedError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Temperature-0 class scores only.
    OneCall,
    /// Temperature-0 class scores plus one temperature-1 sample.
    TwoCall,
}

impl Variant {
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = vec!["score_pos".to_string(), "score_neg".to_string()];
        if *self == Variant::TwoCall {
            names.extend(["sample_pos".to_string(), "sample_neg".to_string()]);
        }
        names
    }

    pub fn n_features(&self) -> usize {
        match self {
            Variant::OneCall => 2,
            Variant::TwoCall => 4,
        }
    }

    pub fn calls_per_instance(&self) -> u32 {
        match self {
            Variant::OneCall => 1,
            Variant::TwoCall => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Noise term `z / w` added to the logit.
    #[default]
    Adaptive,
    /// Constant bias `1 / w`; no noise.
    None,
    /// Constant bias `1 / w`; inputs perturbed by small Gaussian noise.
    InputAdditive,
    /// Constant bias `1 / w`; `z` appended to the network input.
    Feature,
}

/// Random draws consumed by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub z: f64,
    /// Standard-normal draws, one per feature; scaled by [`INPUT_NOISE_SD`]
    /// in `InputAdditive` mode and ignored otherwise.
    pub input: Vec<f64>,
}

impl Noise {
    pub fn zero(n_features: usize) -> Self {
        Self {
            z: 0.0,
            input: vec![0.0; n_features],
        }
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R, n_features: usize) -> Self {
        let z = StandardNormal.sample(rng);
        let input = (0..n_features).map(|_| StandardNormal.sample(rng)).collect();
        Self { z, input }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentModel {
    pub version: u32,
    pub variant: Variant,
    pub noise_mode: NoiseMode,
    /// Input, two hidden, and output widths.
    pub layer_dims: Vec<usize>,
    /// Per layer, `out x in` row-major.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub w: f64,
    pub lambda: f64,
    pub feature_spec: Vec<String>,
}

/// Parameter gradients with the model's shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub w: f64,
}

fn input_dim(variant: Variant, mode: NoiseMode) -> usize {
    variant.n_features() + usize::from(mode == NoiseMode::Feature)
}

/// Hidden width `2^(features + 1)`.
pub fn hidden_width(variant: Variant) -> usize {
    1 << (variant.n_features() + 1)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl EnrichmentModel {
    /// Model with all weights and biases zero and `w = 1`.
    pub fn zeros(variant: Variant, noise_mode: NoiseMode, lambda: f64) -> Self {
        let h = hidden_width(variant);
        let layer_dims = vec![input_dim(variant, noise_mode), h, h, 1];
        let weights = layer_dims
            .windows(2)
            .map(|d| vec![vec![0.0; d[0]]; d[1]])
            .collect();
        let biases = layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Self {
            version: MODEL_VERSION,
            variant,
            noise_mode,
            layer_dims,
            weights,
            biases,
            w: 1.0,
            lambda,
            feature_spec: variant.feature_names(),
        }
    }

    /// Uniform fan-based initialization, zero biases, `w = 1`.
    pub fn xavier<R: Rng + ?Sized>(variant: Variant, noise_mode: NoiseMode, lambda: f64, rng: &mut R) -> Self {
        let mut model = Self::zeros(variant, noise_mode, lambda);
        for (layer, d) in model.weights.iter_mut().zip(model.layer_dims.windows(2)) {
            let limit = (6.0 / (d[0] + d[1]) as f64).sqrt();
            for row in layer.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.random_range(-limit..=limit);
                }
            }
        }
        model
    }

    pub fn n_features(&self) -> usize {
        self.variant.n_features()
    }

    /// Checks that shapes agree with `layer_dims`, mode and variant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SupervisedError::MalformedModel(m.to_string()));
        if self.layer_dims.len() != 4 || self.layer_dims[3] != 1 {
            return bad("expected two hidden layers and one output");
        }
        if self.layer_dims[0] != input_dim(self.variant, self.noise_mode) {
            return bad("input width does not match variant and noise mode");
        }
        if self.weights.len() != 3 || self.biases.len() != 3 {
            return bad("expected three weight layers");
        }
        for (l, d) in self.layer_dims.windows(2).enumerate() {
            if self.weights[l].len() != d[1]
                || self.weights[l].iter().any(|r| r.len() != d[0])
                || self.biases[l].len() != d[1]
            {
                return bad("layer shape mismatch");
            }
        }
        if !(self.w > 0.0 && self.w.is_finite()) {
            return bad("w must be positive and finite");
        }
        Ok(())
    }

    /// Flat parameter vector: per layer weights then biases, then `w`.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for (layer, bias) in self.weights.iter().zip(&self.biases) {
            for row in layer {
                p.extend_from_slice(row);
            }
            p.extend_from_slice(bias);
        }
        p.push(self.w);
        p
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        let mut i = 0;
        for (layer, bias) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for row in layer.iter_mut() {
                let n = row.len();
                row.copy_from_slice(&p[i..i + n]);
                i += n;
            }
            let n = bias.len();
            bias.copy_from_slice(&p[i..i + n]);
            i += n;
        }
        self.w = p[i];
    }

    fn compile(&self) -> Net {
        Net {
            dims: self.layer_dims.clone(),
            mode: self.noise_mode,
            n_features: self.n_features(),
            params: self.params_flat(),
        }
    }

    /// Probability for one feature vector under the given noise draw.
    pub fn forward(&self, features: &[f64], noise: &Noise) -> Result<f64> {
        if features.len() != self.n_features() {
            return Err(SupervisedError::DimensionMismatch {
                expected: self.n_features(),
                got: features.len(),
            });
        }
        let net = self.compile();
        let mut ws = Workspace::new(&net.dims);
        Ok(net.forward(features, noise, &mut ws).1)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        batch.check(self.n_features())?;
        let net = self.compile();
        Ok(net.loss_and_grad(batch, self.lambda, None))
    }

    pub fn gradients(&self, batch: &Batch) -> Result<ModelGradients> {
        batch.check(self.n_features())?;
        let net = self.compile();
        let mut grad = vec![0.0; net.params.len()];
        net.loss_and_grad(batch, self.lambda, Some(&mut grad));
        let mut shaped = self.clone();
        shaped.set_params_flat(&grad);
        Ok(ModelGradients {
            weights: shaped.weights,
            biases: shaped.biases,
            w: shaped.w,
        })
    }

    /// Loss and gradient in [`Self::params_flat`] order.
    pub fn loss_and_gradient_flat(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        batch.check(self.n_features())?;
        let net = self.compile();
        let mut grad = vec![0.0; net.params.len()];
        let loss = net.loss_and_grad(batch, self.lambda, Some(&mut grad));
        Ok((loss, grad))
    }
}

/// Labeled rows with the noise draws each row consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub noise: Vec<Noise>,
}

impl Batch {
    fn check(&self, n_features: usize) -> Result<()> {
        if self.features.is_empty() {
            return Err(SupervisedError::TooFewRows(0));
        }
        if self.labels.len() != self.features.len() || self.noise.len() != self.features.len() {
            return Err(SupervisedError::InvalidConfig("batch columns differ in length".into()));
        }
        if let Some(f) = self.features.iter().find(|f| f.len() != n_features) {
            return Err(SupervisedError::DimensionMismatch {
                expected: n_features,
                got: f.len(),
            });
        }
        Ok(())
    }
}

/// Flat-parameter network used for computation.
struct Net {
    dims: Vec<usize>,
    mode: NoiseMode,
    n_features: usize,
    params: Vec<f64>,
}

/// Per-row activation buffers, reused across rows.
struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Workspace {
    fn new(dims: &[usize]) -> Self {
        let widest = dims.iter().copied().max().unwrap_or(1);
        Self {
            acts: dims.iter().map(|&d| vec![0.0; d]).collect(),
            delta: vec![0.0; widest],
            delta_next: vec![0.0; widest],
        }
    }
}

impl Net {
    fn w(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    /// Logit term added to the network output, and its derivative in `w`.
    fn noise_term(&self, z: f64) -> (f64, f64) {
        let w = self.w();
        let c = if self.mode == NoiseMode::Adaptive { z } else { 1.0 };
        (c / w, -c / (w * w))
    }

    /// Returns `(logit, probability)`; fills `ws.acts`.
    fn forward(&self, features: &[f64], noise: &Noise, ws: &mut Workspace) -> (f64, f64) {
        let input = &mut ws.acts[0];
        input[..self.n_features].copy_from_slice(features);
        match self.mode {
            NoiseMode::InputAdditive => {
                for (x, e) in input.iter_mut().zip(&noise.input) {
                    *x += INPUT_NOISE_SD * e;
                }
            }
            NoiseMode::Feature => input[self.n_features] = noise.z,
            NoiseMode::Adaptive | NoiseMode::None => {}
        }
        let layers = self.dims.len() - 1;
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let (prev, rest) = ws.acts.split_at_mut(l + 1);
            let x = &prev[l];
            let out = &mut rest[0];
            let wmat = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            for j in 0..n_out {
                let row = &wmat[j * n_in..(j + 1) * n_in];
                let mut s = bias[j];
                for k in 0..n_in {
                    s += row[k] * x[k];
                }
                out[j] = if l + 1 < layers { s.max(0.0) } else { s };
            }
            off += n_in * n_out + n_out;
        }
        let logit = ws.acts[layers][0] + self.noise_term(noise.z).0;
        (logit, sigmoid(logit))
    }

    /// Mean BCE plus `lambda |w|`; accumulates the gradient when requested.
    fn loss_and_grad(&self, batch: &Batch, lambda: f64, mut grad: Option<&mut [f64]>) -> f64 {
        let mut ws = Workspace::new(&self.dims);
        let n = batch.features.len() as f64;
        let layers = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }
        let w_index = self.params.len() - 1;

        let mut total = 0.0;
        for ((x, &y), noise) in batch.features.iter().zip(&batch.labels).zip(&batch.noise) {
            let (_, p) = self.forward(x, noise, &mut ws);
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= if y { pc.ln() } else { (1.0 - pc).ln() };

            let Some(g) = grad.as_deref_mut() else { continue };
            // The clamp flattens the loss outside its range.
            let dlogit = if p == pc { (p - f64::from(u8::from(y))) / n } else { 0.0 };
            g[w_index] += dlogit * self.noise_term(noise.z).1;

            ws.delta[0] = dlogit;
            for l in (0..layers).rev() {
                let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
                let o = offsets[l];
                let x_in = &ws.acts[l];
                for j in 0..n_out {
                    let d = ws.delta[j];
                    if d == 0.0 {
                        continue;
                    }
                    let grow = &mut g[o + j * n_in..o + (j + 1) * n_in];
                    for k in 0..n_in {
                        grow[k] += d * x_in[k];
                    }
                    g[o + n_in * n_out + j] += d;
                }
                if l > 0 {
                    let wmat = &self.params[o..o + n_in * n_out];
                    for k in 0..n_in {
                        let mut s = 0.0;
                        for j in 0..n_out {
                            s += wmat[j * n_in + k] * ws.delta[j];
                        }
                        // ReLU derivative from the stored post-activation.
                        ws.delta_next[k] = if x_in[k] > 0.0 { s } else { 0.0 };
                    }
                    std::mem::swap(&mut ws.delta, &mut ws.delta_next);
                }
            }
        }
        let w = self.w();
        if let Some(g) = grad {
            g[w_index] += lambda * w.signum();
        }
        total / n + lambda * w.abs()
    }

    fn predict(&self, features: &[Vec<f64>], noise: &[Noise]) -> Vec<f64> {
        let mut ws = Workspace::new(&self.dims);
        features
            .iter()
            .zip(noise)
            .map(|(x, nz)| self.forward(x, nz, &mut ws).1)
            .collect()
    }
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Training rows; `groups` holds the source record index of each row so that
/// rows from one record never straddle the train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRows {
    pub variant: Variant,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub groups: Vec<usize>,
}

impl TrainingRows {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn base_features(record: &PredictionRecord) -> Result<[f64; 2]> {
    let p = record
        .score_pos
        .ok_or_else(|| SupervisedError::MissingScore(record.id.clone()))?;
    Ok([p, record.score_neg.unwrap_or(1.0 - p)])
}

/// Inference features: temperature-0 scores, plus the first sample for two-call.
pub fn record_features(record: &PredictionRecord, variant: Variant) -> Result<Vec<f64>> {
    let mut f = base_features(record)?.to_vec();
    if variant == Variant::TwoCall {
        let s = *record
            .samples_pos
            .first()
            .ok_or_else(|| SupervisedError::MissingSamples(record.id.clone()))?;
        f.extend([s, 1.0 - s]);
    }
    Ok(f)
}

/// One row per record (one-call) or one row per (record, sample) pair (two-call).
pub fn build_training_rows(records: &[PredictionRecord], variant: Variant) -> Result<TrainingRows> {
    let mut rows = TrainingRows {
        variant,
        features: Vec::new(),
        labels: Vec::new(),
        groups: Vec::new(),
    };
    for (i, r) in records.iter().enumerate() {
        let label = r.label.ok_or_else(|| SupervisedError::MissingLabel(r.id.clone()))? == 1;
        let base = base_features(r)?;
        match variant {
            Variant::OneCall => {
                rows.features.push(base.to_vec());
                rows.labels.push(label);
                rows.groups.push(i);
            }
            Variant::TwoCall => {
                if r.samples_pos.is_empty() {
                    return Err(SupervisedError::MissingSamples(r.id.clone()));
                }
                for &s in &r.samples_pos {
                    rows.features.push(vec![base[0], base[1], s, 1.0 - s]);
                    rows.labels.push(label);
                    rows.groups.push(i);
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// `None` selects full batch up to [`FULL_BATCH_LIMIT`] rows, else
    /// [`DEFAULT_BATCH_SIZE`].
    pub batch_size: Option<usize>,
    pub noise_mode: NoiseMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.01, 0.05, 0.1],
            lambdas: vec![1e-4, 1e-3, 1e-2, 1e-1],
            max_epochs: 50,
            patience: 5,
            val_fraction: 0.2,
            seed: 0,
            batch_size: None,
            noise_mode: NoiseMode::Adaptive,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SupervisedError::InvalidConfig(m.to_string()));
        if self.learning_rates.is_empty() || self.learning_rates.iter().any(|&lr| !(lr > 0.0)) {
            return bad("learning rates must be positive and non-empty");
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|&l| !(l >= 0.0)) {
            return bad("lambdas must be non-negative and non-empty");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if self.max_epochs == 0 || self.patience > self.max_epochs {
            return bad("need 0 < patience <= max_epochs");
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_prauc: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLog {
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_prauc: Option<f64>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub cells: Vec<CellLog>,
    /// Index into `cells` of the selected model.
    pub best_cell: usize,
    pub n_train_rows: usize,
    pub n_val_rows: usize,
}

/// Stratified split of record groups; returns (train, val) row indices.
fn split_rows(rows: &TrainingRows, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut group_label: Vec<(usize, bool)> = Vec::new();
    for (&g, &y) in rows.groups.iter().zip(&rows.labels) {
        if group_label.last().map(|(lg, _)| *lg) != Some(g) {
            group_label.push((g, y));
        }
    }
    group_label.sort_unstable_by_key(|(g, _)| *g);
    group_label.dedup_by_key(|(g, _)| *g);

    let mut rng = stream_rng(derive_seed(seed, "split"), 0);
    let mut val_groups = std::collections::HashSet::new();
    for class in [true, false] {
        let mut groups: Vec<usize> = group_label.iter().filter(|(_, y)| *y == class).map(|(g, _)| *g).collect();
        if groups.len() < 2 {
            return Err(SupervisedError::SingleClass);
        }
        groups.shuffle(&mut rng);
        let take = ((groups.len() as f64 * val_fraction).round() as usize).clamp(1, groups.len() - 1);
        val_groups.extend(groups.into_iter().take(take));
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| val_groups.contains(&rows.groups[i]));
    Ok((train, val))
}

struct CellResult {
    log: CellLog,
    params: Option<Vec<f64>>,
}

struct TrainData<'a> {
    rows: &'a TrainingRows,
    train: Vec<usize>,
    val_features: Vec<Vec<f64>>,
    val_labels: Vec<bool>,
    val_noise: Vec<Noise>,
    init: EnrichmentModel,
}

fn train_cell(data: &TrainData, config: &TrainConfig, lr: f64, lambda: f64) -> CellResult {
    let mut model = data.init.clone();
    model.lambda = lambda;
    let mut net = model.compile();
    let mut adam = Adam::new(lr, net.params.len());
    let n_features = data.rows.variant.n_features();
    let batch_size = config.batch_size.unwrap_or(if data.train.len() <= FULL_BATCH_LIMIT {
        data.train.len()
    } else {
        DEFAULT_BATCH_SIZE
    });

    let mut log = CellLog {
        learning_rate: lr,
        lambda,
        epochs: Vec::new(),
        best_epoch: None,
        best_val_prauc: None,
        aborted: None,
    };
    let mut best_params = None;
    let mut stale = 0;
    let mut order = data.train.clone();
    let mut grad = vec![0.0; net.params.len()];

    for epoch in 0..config.max_epochs {
        let mut rng: ChaCha8Rng = stream_rng(derive_seed(config.seed, "epoch"), epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch = Batch {
                features: chunk.iter().map(|&i| data.rows.features[i].clone()).collect(),
                labels: chunk.iter().map(|&i| data.rows.labels[i]).collect(),
                noise: chunk.iter().map(|_| Noise::draw(&mut rng, n_features)).collect(),
            };
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = net.loss_and_grad(&batch, lambda, Some(&mut grad));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                tracing::warn!(lr, lambda, epoch, "non-finite loss; aborting grid cell");
                log.aborted = Some(format!("non-finite loss at epoch {epoch}"));
                return CellResult { log, params: best_params };
            }
            loss_sum += loss * chunk.len() as f64;
            adam.step(&mut net.params, &grad);
            let last = net.params.len() - 1;
            net.params[last] = net.params[last].max(MIN_W);
        }

        let probs = net.predict(&data.val_features, &data.val_noise);
        let val_prauc = ScoredDataset::new(data.val_labels.clone(), probs)
            .and_then(|d| prauc(&d, PraucMethod::Trapezoid))
            .unwrap_or(f64::NAN);
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_prauc,
            w: net.w(),
        });
        if val_prauc > log.best_val_prauc.unwrap_or(f64::NEG_INFINITY) {
            log.best_val_prauc = Some(val_prauc);
            log.best_epoch = Some(epoch);
            best_params = Some(net.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    CellResult { log, params: best_params }
}

/// Grid search over learning rate and penalty weight; each cell trains with
/// Adam and early stopping on validation PRAUC, keeping its best epoch. The
/// cell with the highest validation PRAUC wins.
pub fn train(rows: &TrainingRows, config: &TrainConfig) -> Result<(EnrichmentModel, TrainingLog)> {
    config.validate()?;
    if rows.len() < MIN_TRAIN_ROWS {
        return Err(SupervisedError::TooFewRows(rows.len()));
    }
    if rows.labels.iter().all(|&y| y) || rows.labels.iter().all(|&y| !y) {
        return Err(SupervisedError::SingleClass);
    }
    let n_features = rows.variant.n_features();
    if let Some(f) = rows.features.iter().find(|f| f.len() != n_features) {
        return Err(SupervisedError::DimensionMismatch {
            expected: n_features,
            got: f.len(),
        });
    }

    let (train_idx, val_idx) = split_rows(rows, config.val_fraction, config.seed)?;
    let mut val_rng = stream_rng(derive_seed(config.seed, "validation-noise"), 0);
    let mut init_rng = stream_rng(derive_seed(config.seed, "init"), 0);
    let data = TrainData {
        rows,
        val_features: val_idx.iter().map(|&i| rows.features[i].clone()).collect(),
        val_labels: val_idx.iter().map(|&i| rows.labels[i]).collect(),
        val_noise: val_idx.iter().map(|_| Noise::draw(&mut val_rng, n_features)).collect(),
        train: train_idx,
        init: EnrichmentModel::xavier(rows.variant, config.noise_mode, DEFAULT_LAMBDA, &mut init_rng),
    };

    let grid: Vec<(f64, f64)> = config
        .learning_rates
        .iter()
        .flat_map(|&lr| config.lambdas.iter().map(move |&l| (lr, l)))
        .collect();
    let results: Vec<CellResult> = grid
        .par_iter()
        .map(|&(lr, lambda)| train_cell(&data, config, lr, lambda))
        .collect();

    let best = results
        .iter()
        .enumerate()
        .filter(|(_, r)| r.params.is_some())
        .fold(None::<(usize, f64)>, |acc, (i, r)| {
            let score = r.log.best_val_prauc.unwrap_or(f64::NEG_INFINITY);
            match acc {
                Some((_, s)) if s >= score => acc,
                _ => Some((i, score)),
            }
        });
    let Some((best_cell, _)) = best else {
        let reasons: Vec<String> = results.iter().filter_map(|r| r.log.aborted.clone()).collect();
        return Err(SupervisedError::AllCellsFailed(reasons.join("; ")));
    };

    let mut model = data.init.clone();
    model.lambda = results[best_cell].log.lambda;
    model.set_params_flat(results[best_cell].params.as_ref().expect("filtered above"));
    let log = TrainingLog {
        n_train_rows: data.train.len(),
        n_val_rows: data.val_labels.len(),
        cells: results.into_iter().map(|r| r.log).collect(),
        best_cell,
    };
    Ok((model, log))
}

/// Per-record noise keyed by `(seed, record id)`.
pub fn record_noise(seed: u64, id: &str, n_features: usize) -> Noise {
    Noise::draw(&mut keyed_rng(seed, id), n_features)
}

/// Applies a trained model to records; the original column is `score_pos`.
pub fn enrich_supervised(model: &EnrichmentModel, records: &[PredictionRecord], seed: u64) -> Result<EnrichedScores> {
    model.validate()?;
    let net = model.compile();
    let mut ws = Workspace::new(&net.dims);
    let mut original = Vec::with_capacity(records.len());
    let mut enriched = Vec::with_capacity(records.len());
    for r in records {
        let features = record_features(r, model.variant)?;
        let noise = record_noise(seed, &r.id, model.n_features());
        original.push(features[0]);
        enriched.push(net.forward(&features, &noise, &mut ws).1);
    }
    Ok(EnrichedScores {
        original,
        enriched,
        seed,
    })
}
