//! Dense feed-forward classifier: ReLU hidden layers, softmax output,
//! cross-entropy loss, backpropagation and Adam.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::FeatureVector;
use crate::{stream_rng, MIN_KEY_LEN, NUM_CLASSES};

/// Model files carry this version; anything else is refused on load.
pub const FORMAT_VERSION: u32 = 1;
/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
/// Standard deviations below this are treated as zero variance.
const MIN_STD: f64 = 1e-12;
/// Samples per gradient work unit. Fixed so the reduction order, and thus the
/// result, does not depend on the number of threads.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("expected {expected} input features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("model expects schema {expected:?}, features are {got:?}")]
    Schema { expected: String, got: String },
    #[error("label {0} outside the {NUM_CLASSES} key-length classes")]
    Label(usize),
    #[error("training data needs at least two classes, found {0}")]
    TooFewClasses(usize),
    #[error("training data is empty")]
    Empty,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid layer dimensions {0:?}")]
    Layers(Vec<usize>),
    #[error("model file format version {0} is not supported (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// One fully connected layer; `weights` is row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], biases: vec![0.0; outputs] }
    }

    fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.gen_range(-limit..=limit)).collect();
        Dense { inputs, outputs, weights, biases: vec![0.0; outputs] }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

/// A stack of dense layers. All but the last use ReLU; the last is softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(NnError::Layers(dims.to_vec()));
    }
    Ok(())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `probs` against class `label`, with the probability floored at 1e-12.
pub fn loss(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Index of the largest entry; ties go to the smaller index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Parameter gradients in layer order, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            weights: mlp.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: mlp.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        self.weights.iter_mut().chain(self.biases.iter_mut()).flatten().for_each(|x| *x *= s);
    }

    /// Flat `(weights₀, biases₀, weights₁, …)` view, matching [`Mlp::params_mut`].
    fn slices(&self) -> Vec<&[f64]> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).collect()
    }
}

/// Per-batch sums returned alongside gradients.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Mlp { layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        check_dims(dims)?;
        Ok(Mlp { layers: dims.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect() })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].inputs];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()]).collect()
    }

    /// Post-activation outputs of every layer, input first.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(acts.last().expect("input pushed"), &mut z);
            if i == last {
                z = softmax(&z);
            } else {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Class probabilities for an already-normalised input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(NnError::Dimension { expected: self.input_dim(), got: x.len() });
        }
        Ok(self.activations(x).pop().expect("output layer"))
    }

    /// Adds the gradient of the loss on one sample into `grads`.
    fn accumulate(&self, x: &[f64], label: usize, grads: &mut Gradients, stats: &mut BatchStats) {
        let acts = self.activations(x);
        let probs = acts.last().expect("output layer");
        stats.loss_sum += loss(probs, label);
        stats.correct += (argmax(probs) == label) as usize;
        stats.count += 1;

        // fused softmax + cross-entropy: dL/dz = p - onehot
        let mut delta = probs.clone();
        delta[label] -= 1.0;
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &acts[li];
            let gw = &mut grads.weights[li];
            for (o, d) in delta.iter().enumerate() {
                grads.biases[li][o] += d;
                if *d != 0.0 {
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(input).for_each(|(g, a)| *g += d * a);
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, d) in delta.iter().enumerate() {
                    if *d != 0.0 {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
                    }
                }
                // ReLU derivative, taken as 0 at 0
                prev.iter_mut().zip(input).for_each(|(p, a)| {
                    if *a <= 0.0 {
                        *p = 0.0
                    }
                });
                delta = prev;
            }
        }
    }

    /// Gradient of the mean batch loss with respect to every weight and bias.
    pub fn gradients(&self, batch: &[(&[f64], usize)]) -> Result<(Gradients, BatchStats)> {
        if batch.is_empty() {
            return Err(NnError::Empty);
        }
        for (x, label) in batch {
            if x.len() != self.input_dim() {
                return Err(NnError::Dimension { expected: self.input_dim(), got: x.len() });
            }
            if *label >= self.output_dim() {
                return Err(NnError::Label(*label));
            }
        }
        let partials: Vec<(Gradients, BatchStats)> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = Gradients::zeros_like(self);
                let mut s = BatchStats::default();
                for (x, label) in chunk {
                    self.accumulate(x, *label, &mut g, &mut s);
                }
                (g, s)
            })
            .collect();
        let mut total = Gradients::zeros_like(self);
        let mut stats = BatchStats::default();
        for (g, s) in &partials {
            total.add(g);
            stats.loss_sum += s.loss_sum;
            stats.correct += s.correct;
            stats.count += s.count;
        }
        total.scale(1.0 / batch.len() as f64);
        Ok((total, stats))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, mlp: &Mlp) -> Self {
        let shapes: Vec<usize> = mlp.layers.iter().flat_map(|l| [l.weights.len(), l.biases.len()]).collect();
        AdamState {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update of `mlp` along `grads`.
    pub fn step(&mut self, mlp: &mut Mlp, grads: &Gradients) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in mlp.params_mut().into_iter().zip(grads.slices()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam(AdamConfig),
    /// Plain gradient descent; with a full-size batch this is the sanity mode.
    Sgd {
        lr: f64,
    },
}

/// Per-feature z-score parameters fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer { means: vec![0.0; dim], stds: vec![1.0; dim] }
    }

    pub fn fit<'a, I: IntoIterator<Item = &'a [f64]>>(rows: I, dim: usize) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for r in &rows {
            sum.iter_mut().zip(*r).for_each(|(s, x)| *s += x);
            n += 1;
        }
        let means: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        for r in &rows {
            sq.iter_mut().zip(*r).zip(&means).for_each(|((s, x), m)| *s += (x - m) * (x - m));
        }
        let stds = sq.iter().map(|s| (s / n.max(1) as f64).sqrt()).collect();
        Normalizer { means, stds }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// `(x − mean) / std`; zero-variance features map to 0.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.len() {
            return Err(NnError::Dimension { expected: self.len(), got: x.len() });
        }
        Ok(x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| if *s < MIN_STD { 0.0 } else { (v - m) / s })
            .collect())
    }
}

/// Class index of key length `k` (`k − 3`).
pub fn class_of(key_length: usize) -> Result<usize> {
    key_length.checked_sub(MIN_KEY_LEN).filter(|&c| c < NUM_CLASSES).ok_or(NnError::Label(key_length))
}

pub fn key_length_of(class: usize) -> usize {
    class + MIN_KEY_LEN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub hidden: Vec<usize>,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            validation_fraction: 0.20,
            hidden: vec![128, 128],
            optimizer: Optimizer::Adam(AdamConfig::default()),
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(NnError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(NnError::Config(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.hidden.contains(&0) {
            return Err(NnError::Config("hidden layers need at least one unit".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_loss: Option<f64>,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub train_samples: usize,
    pub validation_samples: usize,
}

/// Raw (unnormalised) feature rows with key-length class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledSet {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// A trained classifier together with its input scaling and schema tag.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub schema_id: String,
    pub mlp: Mlp,
    pub normalizer: Normalizer,
    pub seed: u64,
}

impl NetworkModel {
    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.mlp.dims()
    }

    /// Class probabilities for a raw feature row.
    pub fn predict_proba_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(&self.normalizer.apply(row)?)
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<usize> {
        Ok(key_length_of(argmax(&self.predict_proba_row(row)?)))
    }

    fn check_schema(&self, features: &FeatureVector) -> Result<()> {
        if features.schema_id != self.schema_id {
            return Err(NnError::Schema { expected: self.schema_id.clone(), got: features.schema_id.clone() });
        }
        Ok(())
    }

    pub fn predict_proba(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        self.check_schema(features)?;
        self.predict_proba_row(&features.values)
    }

    /// Most probable key length (3..=25); ties go to the shorter key.
    pub fn predict(&self, features: &FeatureVector) -> Result<usize> {
        self.check_schema(features)?;
        self.predict_row(&features.values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            format_version: u32,
        }
        let probe: Probe = serde_json::from_str(s)?;
        if probe.format_version != FORMAT_VERSION {
            return Err(NnError::Version(probe.format_version));
        }
        let file: ModelFile = serde_json::from_str(s)?;
        file.into_model()
    }
}

#[derive(Serialize, Deserialize)]
struct NormalizerFile {
    means: Vec<f64>,
    stds: Vec<f64>,
}

/// On-disk layout: weights as nested `[layer][output][input]` arrays.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    schema_id: String,
    layer_dims: Vec<usize>,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
    normalizer: NormalizerFile,
    seed: u64,
}

impl From<&NetworkModel> for ModelFile {
    fn from(m: &NetworkModel) -> Self {
        ModelFile {
            format_version: FORMAT_VERSION,
            schema_id: m.schema_id.clone(),
            layer_dims: m.layer_dims(),
            weights: m
                .mlp
                .layers
                .iter()
                .map(|l| l.weights.chunks_exact(l.inputs).map(<[f64]>::to_vec).collect())
                .collect(),
            biases: m.mlp.layers.iter().map(|l| l.biases.clone()).collect(),
            normalizer: NormalizerFile { means: m.normalizer.means.clone(), stds: m.normalizer.stds.clone() },
            seed: m.seed,
        }
    }
}

impl ModelFile {
    fn into_model(self) -> Result<NetworkModel> {
        let dims = self.layer_dims;
        check_dims(&dims).map_err(|_| NnError::Corrupt(format!("layer_dims {dims:?}")))?;
        if self.weights.len() != dims.len() - 1 || self.biases.len() != dims.len() - 1 {
            return Err(NnError::Corrupt("layer count does not match layer_dims".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, (w, b)) in self.weights.into_iter().zip(self.biases).enumerate() {
            let (inputs, outputs) = (dims[i], dims[i + 1]);
            if w.len() != outputs || w.iter().any(|r| r.len() != inputs) || b.len() != outputs {
                return Err(NnError::Corrupt(format!("layer {i} shape does not match {inputs}x{outputs}")));
            }
            layers.push(Dense { inputs, outputs, weights: w.concat(), biases: b });
        }
        let normalizer = Normalizer { means: self.normalizer.means, stds: self.normalizer.stds };
        if normalizer.means.len() != dims[0] || normalizer.stds.len() != dims[0] {
            return Err(NnError::Corrupt("normalizer length does not match input dimension".into()));
        }
        Ok(NetworkModel { schema_id: self.schema_id, mlp: Mlp { layers }, normalizer, seed: self.seed })
    }
}

fn evaluate(mlp: &Mlp, rows: &[Vec<f64>], labels: &[usize]) -> (f64, f64) {
    let (loss_sum, correct) = rows
        .par_iter()
        .zip(labels)
        .map(|(x, &y)| {
            let p = mlp.forward(x).expect("dimension checked");
            (loss(&p, y), (argmax(&p) == y) as usize)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0.0, 0), |(l, c), (a, b)| (l + a, c + b));
    let n = rows.len().max(1) as f64;
    (loss_sum / n, correct as f64 / n)
}

/// Fits a classifier on `data` (labels are class indices `0..23`).
///
/// A seeded shuffle holds out `validation_fraction` of the rows once; the
/// normaliser is fitted on the remaining training rows; weights start from a
/// seeded Glorot-uniform draw and each epoch visits the training rows in a
/// fresh seeded order.
pub fn train(data: &LabeledSet, schema_id: &str, config: &TrainConfig) -> Result<(NetworkModel, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(NnError::Empty);
    }
    let dim = data.rows[0].len();
    if let Some(bad) = data.rows.iter().find(|r| r.len() != dim) {
        return Err(NnError::Dimension { expected: dim, got: bad.len() });
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(NnError::Label(key_length_of(bad)));
    }
    let mut present = data.labels.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(NnError::TooFewClasses(present.len()));
    }

    let mut split_rng = stream_rng(config.seed, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut split_rng);
    let n_val = ((data.len() as f64 * config.validation_fraction).round() as usize).min(data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let normalizer = Normalizer::fit(train_idx.iter().map(|&i| data.rows[i].as_slice()), dim);
    let norm = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        idx.iter().map(|&i| (normalizer.apply(&data.rows[i]).expect("dimension checked"), data.labels[i])).unzip()
    };
    let (train_x, train_y) = norm(train_idx);
    let (val_x, val_y) = norm(val_idx);

    let mut dims = vec![dim];
    dims.extend(&config.hidden);
    dims.push(NUM_CLASSES);
    let mut mlp = Mlp::glorot(&dims, &mut stream_rng(config.seed, 1))?;

    let mut adam = match config.optimizer {
        Optimizer::Adam(c) => Some(AdamState::new(c, &mlp)),
        Optimizer::Sgd { .. } => None,
    };
    let mut shuffle_rng = stream_rng(config.seed, 2);
    let mut positions: Vec<usize> = (0..train_x.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        positions.shuffle(&mut shuffle_rng);
        let mut totals = BatchStats::default();
        for chunk in positions.chunks(config.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (train_x[i].as_slice(), train_y[i])).collect();
            let (grads, stats) = mlp.gradients(&batch)?;
            totals.loss_sum += stats.loss_sum;
            totals.correct += stats.correct;
            totals.count += stats.count;
            match (&mut adam, config.optimizer) {
                (Some(state), _) => state.step(&mut mlp, &grads),
                (None, Optimizer::Sgd { lr }) => sgd_step(&mut mlp, &grads, lr),
                (None, Optimizer::Adam(_)) => unreachable!("adam state built above"),
            }
        }
        let (validation_loss, validation_accuracy) = if val_x.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(&mlp, &val_x, &val_y);
            (Some(l), Some(a))
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: totals.loss_sum / totals.count as f64,
            train_accuracy: totals.correct as f64 / totals.count as f64,
            validation_loss,
            validation_accuracy,
        };
        log::info!(
            "epoch {}/{}: loss {:.4} acc {:.4} val_acc {}",
            stats.epoch,
            config.epochs,
            stats.train_loss,
            stats.train_accuracy,
            stats.validation_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
        history.push(stats);
    }

    let model = NetworkModel { schema_id: schema_id.to_string(), mlp, normalizer, seed: config.seed };
    let history = TrainHistory { epochs: history, train_samples: train_x.len(), validation_samples: val_x.len() };
    Ok((model, history))
}

fn sgd_step(mlp: &mut Mlp, grads: &Gradients, lr: f64) {
    for (p, g) in mlp.params_mut().into_iter().zip(grads.slices()) {
        p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
    }
}

/// Mean loss of `mlp` over a labelled set of normalised rows.
pub fn mean_loss(mlp: &Mlp, rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    evaluate(mlp, rows, labels).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_mlp(dims: &[usize], seed: u64) -> Mlp {
        let mut rng = stream_rng(seed, 0);
        let mut mlp = Mlp::glorot(dims, &mut rng).unwrap();
        for l in &mut mlp.layers {
            l.biases.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        mlp
    }

    fn batch_loss(mlp: &Mlp, batch: &[(Vec<f64>, usize)]) -> f64 {
        batch.iter().map(|(x, y)| loss(&mlp.forward(x).unwrap(), *y)).sum::<f64>() / batch.len() as f64
    }

    #[test]
    fn normalizer_examples() {
        let n = Normalizer { means: vec![10.0, 5.0, 0.066], stds: vec![2.0, 1.0, 0.0] };
        assert_eq!(n.apply(&[14.0, 5.0, 0.066]).unwrap(), vec![2.0, 0.0, 0.0]);
        assert!(n.apply(&[1.0]).is_err());
        let rows = [vec![1.0, 0.066], vec![3.0, 0.066]];
        let fitted = Normalizer::fit(rows.iter().map(|r| r.as_slice()), 2);
        assert_eq!(fitted.means, vec![2.0, 0.066]);
        assert_eq!(fitted.stds[0], 1.0);
        for r in &rows {
            let z = fitted.apply(r).unwrap();
            assert!(z.iter().all(|v| v.is_finite()));
            assert_eq!(z[1], 0.0);
        }
    }

    #[test]
    fn zero_network_is_uniform() {
        let mlp = Mlp::zeros(&[77, 128, 128, 23]).unwrap();
        let p = mlp.forward(&[0.3; 77]).unwrap();
        assert!(p.iter().all(|&v| close(v, 1.0 / 23.0, 1e-15)));
        assert!(close(loss(&p, 4), 23f64.ln(), 1e-12));
        assert!(close(23f64.ln(), 3.1355, 1e-4));
    }

    #[test]
    fn toy_network_by_hand() {
        // 2-2-2, all weights 1, biases 0, input [1, -1]: hidden z = [0, 0] → ReLU 0,
        // output z = [0, 0] → softmax [0.5, 0.5]
        let mut mlp = Mlp::zeros(&[2, 2, 2]).unwrap();
        for l in &mut mlp.layers {
            l.weights.iter_mut().for_each(|w| *w = 1.0);
        }
        assert_eq!(mlp.forward(&[1.0, -1.0]).unwrap(), vec![0.5, 0.5]);
        assert!(mlp.forward(&[1.0]).is_err());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[0.0, 1.0], 1), 0.0);
        assert!(close(loss(&[0.5, 0.5], 0), 2f64.ln(), 1e-15));
        let floored = loss(&[1.0, 0.0], 1);
        assert!(floored.is_finite());
        assert!(close(floored, -(1e-12f64).ln(), 1e-9));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(key_length_of(argmax(&[1.0, 0.0])), 3);
        let mut v = vec![0.0; 23];
        v[22] = 1.0;
        assert_eq!(key_length_of(argmax(&v)), 25);
        assert_eq!(class_of(3).unwrap(), 0);
        assert_eq!(class_of(25).unwrap(), 22);
        assert!(class_of(2).is_err() && class_of(26).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut worst: f64 = 0.0;
        for seed in 0..5 {
            let mlp = random_mlp(&[5, 4, 4, 3], seed);
            let mut rng = stream_rng(seed, 9);
            let batch: Vec<(Vec<f64>, usize)> =
                (0..4).map(|_| ((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(0..3))).collect();
            let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
            let (g, _) = mlp.gradients(&refs).unwrap();
            let h = 1e-5;
            for li in 0..mlp.layers.len() {
                for wi in 0..mlp.layers[li].weights.len() {
                    let mut plus = mlp.clone();
                    plus.layers[li].weights[wi] += h;
                    let mut minus = mlp.clone();
                    minus.layers[li].weights[wi] -= h;
                    let fd = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch)) / (2.0 * h);
                    let an = g.weights[li][wi];
                    worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
                }
                for bi in 0..mlp.layers[li].biases.len() {
                    let mut plus = mlp.clone();
                    plus.layers[li].biases[bi] += h;
                    let mut minus = mlp.clone();
                    minus.layers[li].biases[bi] -= h;
                    let fd = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch)) / (2.0 * h);
                    let an = g.biases[li][bi];
                    worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
                }
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_model_output_bias_gradient() {
        let mlp = Mlp::zeros(&[3, 4, 5]).unwrap();
        let x = [0.0; 3];
        let (g, _) = mlp.gradients(&[(&x, 2)]).unwrap();
        let expected: Vec<f64> = (0..5).map(|i| 0.2 - if i == 2 { 1.0 } else { 0.0 }).collect();
        assert_eq!(g.biases[1], expected);
    }

    #[test]
    fn duplicated_sample_gives_same_gradient() {
        let mlp = random_mlp(&[4, 6, 3], 3);
        let x = [0.1, -0.4, 0.9, 0.2];
        let (one, _) = mlp.gradients(&[(&x, 1)]).unwrap();
        let (two, _) = mlp.gradients(&[(&x, 1), (&x, 1)]).unwrap();
        for (a, b) in one.slices().into_iter().zip(two.slices()) {
            for (u, v) in a.iter().zip(b) {
                assert!(close(*u, *v, 1e-15));
            }
        }
    }

    #[test]
    fn gradient_is_independent_of_chunking() {
        let mlp = random_mlp(&[6, 5, 4], 8);
        let mut rng = stream_rng(1, 1);
        let data: Vec<(Vec<f64>, usize)> =
            (0..50).map(|_| ((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(0..4))).collect();
        let refs: Vec<(&[f64], usize)> = data.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let a = mlp.gradients(&refs).unwrap();
        let b =
            rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| mlp.gradients(&refs).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut mlp = Mlp::zeros(&[2, 2]).unwrap();
        let before = mlp.clone();
        let grads = Gradients { weights: vec![vec![0.5, -2.0, 0.0, 1e-3]], biases: vec![vec![0.0, 3.0]] };
        let mut adam = AdamState::new(AdamConfig::default(), &mlp);
        adam.step(&mut mlp, &grads);
        let lr = 0.001;
        let expect = |g: f64| if g == 0.0 { 0.0 } else { -lr * g.signum() };
        for (i, g) in grads.weights[0].iter().enumerate() {
            let moved = mlp.layers[0].weights[i] - before.layers[0].weights[i];
            assert!(close(moved, expect(*g), 1e-7), "{moved} vs {}", expect(*g));
        }
        assert_eq!(mlp.layers[0].biases[0], 0.0);
    }

    #[test]
    fn adam_zero_gradient_and_determinism() {
        let mut a = random_mlp(&[3, 3, 2], 4);
        let start = a.clone();
        let zero = Gradients::zeros_like(&a);
        let mut state = AdamState::new(AdamConfig::default(), &a);
        state.step(&mut a, &zero);
        assert_eq!(a, start);

        let g = Gradients {
            weights: a.layers.iter().map(|l| vec![0.3; l.weights.len()]).collect(),
            biases: a.layers.iter().map(|l| vec![-0.1; l.biases.len()]).collect(),
        };
        let mut b = start.clone();
        let mut c = start.clone();
        let (mut sb, mut sc) = (AdamState::new(AdamConfig::default(), &b), AdamState::new(AdamConfig::default(), &c));
        for _ in 0..2 {
            sb.step(&mut b, &g);
            sc.step(&mut c, &g);
        }
        assert_eq!(b, c);
    }

    fn separable(n: usize, seed: u64) -> LabeledSet {
        let mut rng = stream_rng(seed, 0);
        let mut set = LabeledSet::default();
        for _ in 0..n {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let y: f64 = rng.gen_range(-1.0..1.0);
            if (x + y).abs() < 0.1 {
                continue;
            }
            set.rows.push(vec![x * 50.0 + 100.0, y]);
            set.labels.push(if x + y > 0.0 { 1 } else { 0 });
        }
        set
    }

    #[test]
    fn learns_a_separable_problem() {
        let data = separable(2000, 1);
        let config = TrainConfig { seed: 5, hidden: vec![16, 16], ..Default::default() };
        let (model, history) = train(&data, "TOY", &config).unwrap();
        assert_eq!(history.epochs.len(), 10);
        let last = history.epochs.last().unwrap();
        assert!(last.train_accuracy >= 0.95, "{last:?}");
        assert!(last.validation_accuracy.unwrap() >= 0.95, "{last:?}");
        assert_eq!(model.layer_dims(), vec![2, 16, 16, 23]);
    }

    #[test]
    fn training_is_deterministic() {
        let data = separable(400, 2);
        let config = TrainConfig { seed: 9, epochs: 3, hidden: vec![8], ..Default::default() };
        let (m1, h1) = train(&data, "TOY", &config).unwrap();
        let (m2, h2) = train(&data, "TOY", &config).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn full_batch_descent_never_increases_loss() {
        let data = separable(120, 3);
        let mut mlp = random_mlp(&[2, 8, 8, 23], 11);
        let norm = Normalizer::fit(data.rows.iter().map(|r| r.as_slice()), 2);
        let rows: Vec<Vec<f64>> = data.rows.iter().map(|r| norm.apply(r).unwrap()).collect();
        let refs: Vec<(&[f64], usize)> = rows.iter().zip(&data.labels).map(|(x, y)| (x.as_slice(), *y)).collect();
        let mut prev = mean_loss(&mlp, &rows, &data.labels);
        for _ in 0..200 {
            let (g, _) = mlp.gradients(&refs).unwrap();
            sgd_step(&mut mlp, &g, 0.01);
            let cur = mean_loss(&mlp, &rows, &data.labels);
            assert!(cur <= prev + 1e-9, "{cur} > {prev}");
            prev = cur;
        }
    }

    #[test]
    fn sgd_sanity_mode_through_train() {
        let data = separable(200, 4);
        let config = TrainConfig {
            seed: 1,
            epochs: 20,
            batch_size: 1000,
            hidden: vec![8],
            optimizer: Optimizer::Sgd { lr: 0.05 },
            ..Default::default()
        };
        let (_, h) = train(&data, "TOY", &config).unwrap();
        for w in h.epochs.windows(2) {
            assert!(w[1].train_loss <= w[0].train_loss + 1e-9);
        }
    }

    #[test]
    fn training_errors() {
        let one_class = LabeledSet { rows: vec![vec![1.0], vec![2.0]], labels: vec![4, 4] };
        assert!(matches!(train(&one_class, "X", &TrainConfig::default()), Err(NnError::TooFewClasses(1))));
        assert!(matches!(train(&LabeledSet::default(), "X", &TrainConfig::default()), Err(NnError::Empty)));
        let bad = TrainConfig { validation_fraction: 1.0, ..Default::default() };
        let two = LabeledSet { rows: vec![vec![1.0], vec![2.0]], labels: vec![0, 1] };
        assert!(matches!(train(&two, "X", &bad), Err(NnError::Config(_))));
        // fewer rows than a batch still trains
        let small = TrainConfig { epochs: 1, ..Default::default() };
        assert!(train(&two, "X", &small).is_ok());
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = stream_rng(21, 0);
        let model = NetworkModel {
            schema_id: "FINAL".into(),
            mlp: random_mlp(&[6, 5, 23], 21),
            normalizer: Normalizer { means: (0..6).map(|i| i as f64 * 0.1).collect(), stds: vec![0.7; 6] },
            seed: 21,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let back = NetworkModel::load(&path).unwrap();
        assert_eq!(back, model);
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = model.predict_proba_row(&x).unwrap();
            let b = back.predict_proba_row(&x).unwrap();
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        let fv = FeatureVector { schema_id: "MODEL_1".into(), values: vec![0.0; 6] };
        assert!(matches!(back.predict(&fv), Err(NnError::Schema { .. })));

        let text = fs::read_to_string(&path).unwrap();
        assert!(NetworkModel::from_json(&text[..text.len() / 2]).is_err());
        let bumped = text.replace("\"format_version\":1", "\"format_version\":2");
        assert!(matches!(NetworkModel::from_json(&bumped), Err(NnError::Version(2))));
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let p = softmax(&z);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
