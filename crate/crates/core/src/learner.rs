//! Desk-scale learning task: Gaussian-cluster classification split non-IID
//! across clients, a linear softmax model trained with local mini-batch SGD,
//! and server-side aggregation.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;
use crate::ClientId;

/// Held-out test set size.
pub const TEST_SET_SIZE: usize = 2000;

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("invalid population config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss during local training of client {0}")]
    NonFiniteLoss(ClientId),
    #[error("parameter dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no reports to aggregate")]
    EmptyCohort,
    #[error("invalid training parameters: {0}")]
    InvalidParams(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Self {
        assert_eq!(features.len(), dim * labels.len(), "feature/label count mismatch");
        Self {
            dim,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// The dataset concatenated with itself.
    pub fn doubled(&self) -> Self {
        let mut features = self.features.clone();
        features.extend_from_slice(&self.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&self.labels);
        Self::new(self.dim, features, labels)
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPartition {
    pub client: ClientId,
    pub data: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSpec {
    pub n_clients: usize,
    pub dim: usize,
    pub classes: usize,
    pub dirichlet_alpha: f64,
    pub samples_per_client: (usize, usize),
    /// Standard deviation of the class-centre draw; clusters have unit variance.
    pub center_spread: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            n_clients: 200,
            dim: 16,
            classes: 10,
            dirichlet_alpha: 0.1,
            samples_per_client: (20, 100),
            center_spread: 1.0,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::InvalidConfig(m.to_string()));
        if self.n_clients == 0 {
            return bad("n_clients must be >= 1");
        }
        if self.dim == 0 || self.classes < 2 {
            return bad("dim must be >= 1 and classes >= 2");
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return bad("dirichlet_alpha must be positive");
        }
        let (lo, hi) = self.samples_per_client;
        if lo == 0 || hi < lo {
            return bad("samples_per_client must satisfy 1 <= lo <= hi");
        }
        if !(self.center_spread > 0.0 && self.center_spread.is_finite()) {
            return bad("center_spread must be positive");
        }
        Ok(())
    }
}

/// Generated clients plus a class-balanced test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub partitions: Vec<DataPartition>,
    pub test: Dataset,
    pub centers: Vec<Vec<f64>>,
    pub classes: usize,
}

impl Population {
    pub fn client_ids(&self) -> Vec<ClientId> {
        self.partitions.iter().map(|p| p.client).collect()
    }

    pub fn partition(&self, client: ClientId) -> Option<&DataPartition> {
        self.partitions.get(client.0 as usize).filter(|p| p.client == client)
    }
}

fn draw_point(rng: &mut impl Rng, center: &[f64], out: &mut Vec<f64>) {
    for &c in center {
        let z: f64 = StandardNormal.sample(rng);
        out.push(c + z);
    }
}

fn dirichlet(rng: &mut impl Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut w: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        // every gamma draw underflowed: fall back to a single random class
        w.iter_mut().for_each(|x| *x = 0.0);
        w[rng.random_range(0..k)] = 1.0;
    }
    w
}

fn categorical(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Draws class centres, per-client Dirichlet class mixtures and samples.
/// Deterministic in `seed`.
pub fn generate_population(spec: &PopulationSpec, seed: u64) -> Result<Population, LearnerError> {
    spec.validate()?;
    let mut rng = stream_rng(seed, 0x706f_7075, 0);
    let spread = Normal::new(0.0, spec.center_spread).expect("validated spread");
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| spread.sample(&mut rng)).collect())
        .collect();

    let (lo, hi) = spec.samples_per_client;
    let partitions = (0..spec.n_clients)
        .map(|i| {
            let mut rng = stream_rng(seed, 0x6461_7461, i as u64);
            let mix = dirichlet(&mut rng, spec.dirichlet_alpha, spec.classes);
            let n = rng.random_range(lo..=hi);
            let mut features = Vec::with_capacity(n * spec.dim);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let y = categorical(&mut rng, &mix);
                draw_point(&mut rng, &centers[y], &mut features);
                labels.push(y);
            }
            DataPartition {
                client: ClientId(i as u32),
                data: Dataset::new(spec.dim, features, labels),
            }
        })
        .collect();

    let mut rng = stream_rng(seed, 0x7465_7374, 0);
    let mut features = Vec::with_capacity(TEST_SET_SIZE * spec.dim);
    let mut labels = Vec::with_capacity(TEST_SET_SIZE);
    for i in 0..TEST_SET_SIZE {
        let y = i % spec.classes;
        draw_point(&mut rng, &centers[y], &mut features);
        labels.push(y);
    }
    Ok(Population {
        partitions,
        test: Dataset::new(spec.dim, features, labels),
        centers,
        classes: spec.classes,
    })
}

/// Flattened weights of a linear softmax classifier: `classes × dim` weights
/// (row per class) followed by `classes` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub params: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
    pub version: u64,
}

impl GlobalModel {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self {
            params: vec![0.0; param_count(dim, classes)],
            dim,
            classes,
            version: 0,
        }
    }

    /// Parameters drawn i.i.d. from `N(0, scale²)`; `scale = 0` gives zeros.
    pub fn random(dim: usize, classes: usize, scale: f64, seed: u64) -> Self {
        let mut m = Self::zeros(dim, classes);
        if scale > 0.0 {
            let mut rng = stream_rng(seed, 0x696e_6974, 0);
            for p in m.params.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = scale * z;
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Nearest-centre classifier expressed as a linear model:
    /// `w_c = μ_c`, `b_c = −|μ_c|²/2`.
    pub fn from_centers(centers: &[Vec<f64>]) -> Self {
        let classes = centers.len();
        let dim = centers[0].len();
        let mut m = Self::zeros(dim, classes);
        for (c, mu) in centers.iter().enumerate() {
            m.params[c * dim..(c + 1) * dim].copy_from_slice(mu);
            m.params[dim * classes + c] = -0.5 * mu.iter().map(|x| x * x).sum::<f64>();
        }
        m
    }

    /// Little-endian dump: magic `FSIM`, format version (u32), parameter
    /// count (u64), then the parameters as f64.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(
        mut input: R,
        dim: usize,
        classes: usize,
    ) -> Result<Self, LearnerError> {
        let io = |e: std::io::Error| LearnerError::Checkpoint(e.to_string());
        let mut header = [0u8; 16];
        input.read_exact(&mut header).map_err(io)?;
        if &header[..4] != CHECKPOINT_MAGIC {
            return Err(LearnerError::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(LearnerError::Checkpoint(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let expected = param_count(dim, classes);
        if n != expected {
            return Err(LearnerError::DimensionMismatch { expected, got: n });
        }
        let mut params = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut buf).map_err(io)?;
            params.push(f64::from_le_bytes(buf));
        }
        Ok(Self {
            params,
            dim,
            classes,
            version: 0,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FSIM";
const CHECKPOINT_VERSION: u32 = 1;

pub fn param_count(dim: usize, classes: usize) -> usize {
    dim * classes + classes
}

fn logits(params: &[f64], x: &[f64], classes: usize, out: &mut [f64]) {
    let dim = x.len();
    for (c, o) in out.iter_mut().enumerate().take(classes) {
        let w = &params[c * dim..(c + 1) * dim];
        *o = params[dim * classes + c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// In-place log-softmax; returns nothing, leaves log-probabilities in `z`.
fn log_softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

/// Cross-entropy of one sample.
pub fn sample_loss(params: &[f64], x: &[f64], y: usize, classes: usize) -> f64 {
    let mut z = vec![0.0; classes];
    logits(params, x, classes, &mut z);
    log_softmax(&mut z);
    -z[y]
}

/// Cross-entropy of one sample and its gradient, accumulated into `grad`
/// with weight `scale`.
pub fn accumulate_gradient(
    params: &[f64],
    x: &[f64],
    y: usize,
    classes: usize,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let dim = x.len();
    let mut z = vec![0.0; classes];
    logits(params, x, classes, &mut z);
    log_softmax(&mut z);
    let loss = -z[y];
    for c in 0..classes {
        let g = (z[c].exp() - if c == y { 1.0 } else { 0.0 }) * scale;
        for (gw, xi) in grad[c * dim..(c + 1) * dim].iter_mut().zip(x) {
            *gw += g * xi;
        }
        grad[dim * classes + c] += g;
    }
    loss
}

/// Local optimisation settings shared by every client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Standard deviation of the initial global parameters.
    pub init_scale: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 20,
            lr: 0.01,
            init_scale: 1.0,
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LearnerError::InvalidParams(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(LearnerError::InvalidParams("lr must be finite and >= 0".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(LearnerError::InvalidParams(
                "init_scale must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainReport {
    pub client: ClientId,
    pub delta: Vec<f64>,
    pub per_sample_losses: Vec<f64>,
    pub sample_count: usize,
    pub compute_seconds: f64,
    pub steps: usize,
}

/// Mini-batch SGD on the client's partition starting from `model`.
/// `per_sample_latency` only feeds the reported compute time.
pub fn local_train(
    model: &GlobalModel,
    partition: &DataPartition,
    params: &TrainParams,
    per_sample_latency: f64,
    seed: u64,
) -> Result<LocalTrainReport, LearnerError> {
    params.validate()?;
    let data = &partition.data;
    if data.dim() != model.dim {
        return Err(LearnerError::DimensionMismatch {
            expected: model.dim,
            got: data.dim(),
        });
    }
    let classes = model.classes;
    let mut w = model.params.clone();
    let mut grad = vec![0.0; w.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = stream_rng(seed, 0x7367_6421, partition.client.0 as u64);
    let mut steps = 0;
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(params.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, y) = data.sample(i);
                accumulate_gradient(&w, x, y, classes, scale, &mut grad);
            }
            for (p, g) in w.iter_mut().zip(&grad) {
                *p -= params.lr * g;
            }
            steps += 1;
        }
    }
    let per_sample_losses: Vec<f64> = (0..data.len())
        .map(|i| {
            let (x, y) = data.sample(i);
            sample_loss(&w, x, y, classes)
        })
        .collect();
    if per_sample_losses.iter().any(|l| !l.is_finite()) || w.iter().any(|p| !p.is_finite()) {
        return Err(LearnerError::NonFiniteLoss(partition.client));
    }
    let delta = w.iter().zip(&model.params).map(|(a, b)| a - b).collect();
    Ok(LocalTrainReport {
        client: partition.client,
        delta,
        sample_count: data.len(),
        per_sample_losses,
        compute_seconds: (data.len() * params.epochs) as f64 * per_sample_latency,
        steps,
    })
}

/// Mean cross-entropy of `model` over a dataset.
pub fn mean_loss(model: &GlobalModel, data: &Dataset) -> f64 {
    (0..data.len())
        .map(|i| {
            let (x, y) = data.sample(i);
            sample_loss(&model.params, x, y, model.classes)
        })
        .sum::<f64>()
        / data.len().max(1) as f64
}

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
pub fn evaluate(model: &GlobalModel, test: &Dataset) -> Result<f64, LearnerError> {
    if test.is_empty() {
        return Err(LearnerError::EmptyTestSet);
    }
    let mut z = vec![0.0; model.classes];
    let correct = (0..test.len())
        .filter(|&i| {
            let (x, y) = test.sample(i);
            logits(&model.params, x, model.classes, &mut z);
            let mut best = 0;
            for c in 1..model.classes {
                if z[c] > z[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorKind {
    FedAvg,
    #[default]
    Yogi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub server_lr: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            kind: AggregatorKind::Yogi,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            server_lr: 0.01,
        }
    }
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<(), LearnerError> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.tau > 0.0
            && self.server_lr > 0.0
            && self.server_lr.is_finite();
        if ok {
            Ok(())
        } else {
            Err(LearnerError::InvalidParams(
                "aggregator needs beta1, beta2 in [0,1), tau > 0, server_lr > 0".into(),
            ))
        }
    }
}

/// Server optimiser state; the moments are only used by Yogi.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorState {
    pub config: AggregatorConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AggregatorState {
    /// First moment starts at zero, second at τ².
    pub fn new(config: AggregatorConfig, dim: usize) -> Self {
        Self {
            config,
            first_moment: vec![0.0; dim],
            second_moment: vec![config.tau * config.tau; dim],
        }
    }

    /// Applies the sample-weighted mean delta of `reports` to `model`.
    /// Reports are reduced in ascending client order.
    pub fn aggregate(
        &mut self,
        model: &mut GlobalModel,
        reports: &[&LocalTrainReport],
    ) -> Result<(), LearnerError> {
        if reports.is_empty() {
            return Err(LearnerError::EmptyCohort);
        }
        let dim = model.params.len();
        if self.first_moment.len() != dim {
            return Err(LearnerError::DimensionMismatch {
                expected: dim,
                got: self.first_moment.len(),
            });
        }
        if let Some(r) = reports.iter().find(|r| r.delta.len() != dim) {
            return Err(LearnerError::DimensionMismatch {
                expected: dim,
                got: r.delta.len(),
            });
        }
        let mut sorted: Vec<&LocalTrainReport> = reports.to_vec();
        sorted.sort_by_key(|r| r.client);
        let total: f64 = sorted.iter().map(|r| r.sample_count as f64).sum();
        let mut mean = vec![0.0; dim];
        for r in &sorted {
            let w = if total > 0.0 {
                r.sample_count as f64 / total
            } else {
                1.0 / sorted.len() as f64
            };
            for (m, d) in mean.iter_mut().zip(&r.delta) {
                *m += w * d;
            }
        }
        match self.config.kind {
            AggregatorKind::FedAvg => {
                for (p, d) in model.params.iter_mut().zip(&mean) {
                    *p += d;
                }
            }
            AggregatorKind::Yogi => {
                let AggregatorConfig {
                    beta1,
                    beta2,
                    tau,
                    server_lr,
                    ..
                } = self.config;
                for i in 0..dim {
                    let d = mean[i];
                    let d2 = d * d;
                    let m = beta1 * self.first_moment[i] + (1.0 - beta1) * d;
                    let v = self.second_moment[i];
                    let v = v - (1.0 - beta2) * d2 * sign(v - d2);
                    self.first_moment[i] = m;
                    self.second_moment[i] = v;
                    model.params[i] += server_lr * m / (v.sqrt() + tau);
                }
            }
        }
        model.version += 1;
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
