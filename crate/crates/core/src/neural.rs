//! Softmax-coupled feedforward networks mapping socioeconomic features to a
//! per-household distribution over load patterns.
//!
//! A [`SoftmaxModel`] is a list of sigmoid MLP heads whose scalar outputs are
//! concatenated into K intermediate values and normalized with a softmax.
//! The pattern-dependent ensemble has one single-output head per pattern, each
//! reading its own feature subset; the unified benchmark has one head with K
//! outputs. Both train through the same code path.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::PatternDistribution;
use crate::ingest::{DayClass, SocioRecord};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NeuralError {
    #[error("network expects {expected} inputs, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("non-finite activation in head {head}")]
    NonFiniteActivation { head: usize },
    #[error("series differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadSplit([f64; 3]),
    #[error("training diverged at epoch {epoch} (non-finite loss or parameters)")]
    DivergedLoss { epoch: usize },
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Per-pattern loss: the root of the mean squared residual over households.
/// `predicted` and `truth` hold one K-vector per household.
pub fn loss(predicted: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<f64>, NeuralError> {
    if predicted.len() != truth.len() {
        return Err(NeuralError::LengthMismatch(predicted.len(), truth.len()));
    }
    let Some(first) = truth.first() else {
        return Ok(Vec::new());
    };
    let k = first.len();
    let mut sums = vec![0.0; k];
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != k || t.len() != k {
            return Err(NeuralError::LengthMismatch(p.len(), t.len()));
        }
        for j in 0..k {
            let r = t[j] - p[j];
            sums[j] += r * r;
        }
    }
    let n = truth.len() as f64;
    Ok(sums.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// Mean of the per-pattern losses.
pub fn average_loss(predicted: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, NeuralError> {
    let l = loss(predicted, truth)?;
    Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major, `outputs x inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs)
                .map(|_| rng.random_range(-bound..=bound))
                .collect(),
            biases: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.biases[o];
            out.push(sigmoid(z));
        }
    }
}

/// Fully connected network with a sigmoid after every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(inputs: usize, hidden_layers: usize, width: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = inputs;
        for _ in 0..hidden_layers {
            layers.push(DenseLayer::glorot(fan_in, width, rng));
            fan_in = width;
        }
        layers.push(DenseLayer::glorot(fan_in, outputs, rng));
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Activations of every layer, input first.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.forward(acts.last().expect("non-empty"), &mut out);
            acts.push(out);
        }
        acts
    }

    /// Accumulates parameter gradients into `grad` (same layout as the flat
    /// parameter view) given dL/d(output activations).
    fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grad: &mut [f64]) {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.weights.len() + l.biases.len();
        }
        let mut delta: Vec<f64> = grad_out
            .iter()
            .zip(acts.last().expect("output"))
            .map(|(g, a)| g * a * (1.0 - a))
            .collect();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[li];
            let base = offsets[li];
            let (gw, gb) = grad[base..base + layer.weights.len() + layer.biases.len()]
                .split_at_mut(layer.weights.len());
            for o in 0..layer.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
                gb[o] += d;
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    let d = delta[o];
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= a * (1.0 - a);
                }
                delta = prev;
            }
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub hidden_layers: usize,
    pub width: usize,
    pub input_names: Vec<String>,
}

/// One MLP reading a subset of the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub spec: NetworkSpec,
    /// Positions of `spec.input_names` in the model's feature vector.
    pub input_indices: Vec<usize>,
    pub mlp: Mlp,
}

/// Standardization parameters over the full feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Zero mean / unit variance per column; constant columns keep unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a Vec<f64>>, dim: usize) -> Self {
        let rows: Vec<&Vec<f64>> = rows.into_iter().collect();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// One single-output head per pattern.
    Ensemble,
    /// One head with K outputs.
    Unified,
}

/// How gradients flow during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Summed per-pattern losses backpropagated through the shared softmax.
    #[default]
    Joint,
    /// Each head fits its own target directly; softmax only at prediction time.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    pub version: u32,
    pub kind: ModelKind,
    pub feature_names: Vec<String>,
    pub heads: Vec<Head>,
    pub scaler: Scaler,
    pub seed: u64,
    #[serde(default)]
    pub log: TrainingLog,
}

fn resolve(feature_names: &[String], inputs: &[String]) -> Result<Vec<usize>, NeuralError> {
    if inputs.is_empty() {
        return Err(NeuralError::InvalidSpec("empty input set".into()));
    }
    inputs
        .iter()
        .map(|name| {
            feature_names
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| NeuralError::InvalidSpec(format!("unknown feature {name}")))
        })
        .collect()
}

fn check_shape(hidden_layers: usize, width: usize) -> Result<(), NeuralError> {
    if hidden_layers == 0 || width == 0 {
        return Err(NeuralError::InvalidSpec(format!(
            "need at least one hidden layer of width >= 1, got {hidden_layers} x {width}"
        )));
    }
    Ok(())
}

impl SoftmaxModel {
    /// Pattern-dependent ensemble: head k reads `subsets[k]`.
    pub fn ensemble(
        feature_names: &[String],
        subsets: &[Vec<String>],
        hidden_layers: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self, NeuralError> {
        check_shape(hidden_layers, width)?;
        if subsets.is_empty() {
            return Err(NeuralError::InvalidSpec("no patterns".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = subsets
            .iter()
            .map(|names| {
                let input_indices = resolve(feature_names, names)?;
                Ok(Head {
                    spec: NetworkSpec {
                        hidden_layers,
                        width,
                        input_names: names.clone(),
                    },
                    mlp: Mlp::new(input_indices.len(), hidden_layers, width, 1, &mut rng),
                    input_indices,
                })
            })
            .collect::<Result<_, NeuralError>>()?;
        Ok(Self {
            version: CHECKPOINT_VERSION,
            kind: ModelKind::Ensemble,
            feature_names: feature_names.to_vec(),
            heads,
            scaler: Scaler::identity(feature_names.len()),
            seed,
            log: TrainingLog::default(),
        })
    }

    /// Single network with `k` outputs over one shared input set.
    pub fn unified(
        feature_names: &[String],
        inputs: &[String],
        k: usize,
        hidden_layers: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self, NeuralError> {
        check_shape(hidden_layers, width)?;
        if k == 0 {
            return Err(NeuralError::InvalidSpec("no patterns".into()));
        }
        let input_indices = resolve(feature_names, inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(input_indices.len(), hidden_layers, width, k, &mut rng);
        Ok(Self {
            version: CHECKPOINT_VERSION,
            kind: ModelKind::Unified,
            feature_names: feature_names.to_vec(),
            heads: vec![Head {
                spec: NetworkSpec {
                    hidden_layers,
                    width,
                    input_names: inputs.to_vec(),
                },
                input_indices,
                mlp,
            }],
            scaler: Scaler::identity(feature_names.len()),
            seed,
            log: TrainingLog::default(),
        })
    }

    pub fn num_patterns(&self) -> usize {
        self.heads.iter().map(|h| h.mlp.outputs()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.heads.iter().map(|h| h.mlp.num_params()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.heads
            .iter()
            .flat_map(|h| h.mlp.params().copied())
            .collect()
    }

    pub fn set_params(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params(), "parameter count");
        for (p, v) in self
            .heads
            .iter_mut()
            .flat_map(|h| h.mlp.params_mut())
            .zip(values)
        {
            *p = *v;
        }
    }

    fn params_finite(&self) -> bool {
        self.heads.iter().all(|h| h.mlp.params().all(|p| p.is_finite()))
    }

    /// Intermediate values and their softmax for an already-scaled feature vector.
    pub fn forward_scaled(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NeuralError> {
        if x.len() != self.feature_names.len() {
            return Err(NeuralError::ArityMismatch {
                expected: self.feature_names.len(),
                got: x.len(),
            });
        }
        let mut intermediate = Vec::with_capacity(self.num_patterns());
        for (h, head) in self.heads.iter().enumerate() {
            let input: Vec<f64> = head.input_indices.iter().map(|&i| x[i]).collect();
            let out = head.mlp.forward_trace(&input).pop().expect("output layer");
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NeuralError::NonFiniteActivation { head: h });
            }
            intermediate.extend(out);
        }
        let normalized = softmax(&intermediate);
        Ok((intermediate, normalized))
    }

    /// Forward pass on a raw feature vector (scaling applied here).
    pub fn forward(&self, features: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NeuralError> {
        if features.len() != self.feature_names.len() {
            return Err(NeuralError::ArityMismatch {
                expected: self.feature_names.len(),
                got: features.len(),
            });
        }
        self.forward_scaled(&self.scaler.apply(features))
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>, NeuralError> {
        Ok(self.forward(features)?.1)
    }

    /// Predicted pattern distribution for a surveyed household.
    pub fn predict_distribution(
        &self,
        socio: &SocioRecord,
        day_class: DayClass,
    ) -> Result<PatternDistribution, NeuralError> {
        Ok(PatternDistribution {
            household_id: socio.household_id.clone(),
            day_class,
            probs: self.predict(&socio.feature_vector())?,
        })
    }

    /// Summed per-pattern loss over a batch of scaled rows and its gradient
    /// with respect to every parameter (flat layout of [`Self::params`]).
    pub fn loss_and_gradient(
        &self,
        xs: &[&[f64]],
        targets: &[&[f64]],
        coupling: Coupling,
    ) -> Result<(f64, Vec<f64>), NeuralError> {
        if xs.len() != targets.len() {
            return Err(NeuralError::LengthMismatch(xs.len(), targets.len()));
        }
        let k = self.num_patterns();
        let b = xs.len();
        let mut traces = Vec::with_capacity(b);
        let mut outputs = Vec::with_capacity(b);
        for x in xs {
            let mut per_head = Vec::with_capacity(self.heads.len());
            let mut z = Vec::with_capacity(k);
            for head in &self.heads {
                let input: Vec<f64> = head.input_indices.iter().map(|&i| x[i]).collect();
                let t = head.mlp.forward_trace(&input);
                z.extend_from_slice(t.last().expect("output"));
                per_head.push(t);
            }
            let q = match coupling {
                Coupling::Joint => softmax(&z),
                Coupling::Independent => z,
            };
            traces.push(per_head);
            outputs.push(q);
        }

        let mut msq = vec![0.0; k];
        for (q, p) in outputs.iter().zip(targets) {
            if p.len() != k {
                return Err(NeuralError::ArityMismatch {
                    expected: k,
                    got: p.len(),
                });
            }
            for j in 0..k {
                let r = p[j] - q[j];
                msq[j] += r * r;
            }
        }
        msq.iter_mut().for_each(|m| *m /= b as f64);
        let roots: Vec<f64> = msq.iter().map(|m| m.sqrt()).collect();
        let total: f64 = roots.iter().sum();

        let mut grad = vec![0.0; self.num_params()];
        let offsets: Vec<usize> = self
            .heads
            .iter()
            .scan(0, |acc, h| {
                let start = *acc;
                *acc += h.mlp.num_params();
                Some(start)
            })
            .collect();
        for n in 0..b {
            let q = &outputs[n];
            let p = targets[n];
            let g: Vec<f64> = (0..k)
                .map(|j| {
                    if roots[j] > 0.0 {
                        (q[j] - p[j]) / (b as f64 * roots[j])
                    } else {
                        0.0
                    }
                })
                .collect();
            let dz: Vec<f64> = match coupling {
                Coupling::Joint => {
                    let dot: f64 = g.iter().zip(q).map(|(a, c)| a * c).sum();
                    (0..k).map(|j| q[j] * (g[j] - dot)).collect()
                }
                Coupling::Independent => g,
            };
            let mut pos = 0;
            for (h, head) in self.heads.iter().enumerate() {
                let outs = head.mlp.outputs();
                let len = head.mlp.num_params();
                head.mlp.backward(
                    &traces[n][h],
                    &dz[pos..pos + outs],
                    &mut grad[offsets[h]..offsets[h] + len],
                );
                pos += outs;
            }
        }
        Ok((total, grad))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NeuralError> {
        let m: Self =
            serde_json::from_str(s).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        if m.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Version(m.version));
        }
        Ok(m)
    }
}

/// Households with features and target distributions, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub household_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn num_patterns(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Seeded shuffle into train/validation/test by the given fractions.
    pub fn random(n: usize, fractions: [f64; 3], seed: u64) -> Result<Self, NeuralError> {
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(NeuralError::BadSplit(fractions));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
        let test = idx.split_off((n_train + n_val).min(n));
        let val = idx.split_off(n_train.min(idx.len()));
        let split = Self {
            train: idx,
            val,
            test,
        };
        for (name, part) in [("train", &split.train), ("validation", &split.val), ("test", &split.test)] {
            if part.is_empty() {
                return Err(NeuralError::EmptySplit(name));
            }
        }
        Ok(split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
    pub coupling: Coupling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: 32,
            learning_rate: 0.1,
            patience: 20,
            seed: 0,
            coupling: Coupling::Joint,
        }
    }
}

/// Summed per-pattern loss of the model's normalized outputs on `rows`.
pub fn evaluate(model: &SoftmaxModel, data: &Dataset, rows: &[usize]) -> Result<f64, NeuralError> {
    let (pred, truth) = predictions(model, data, rows)?;
    Ok(loss(&pred, &truth)?.iter().sum())
}

fn predictions(
    model: &SoftmaxModel,
    data: &Dataset,
    rows: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), NeuralError> {
    let pred = rows
        .iter()
        .map(|&i| model.predict(&data.features[i]))
        .collect::<Result<Vec<_>, _>>()?;
    let truth = rows.iter().map(|&i| data.targets[i].clone()).collect();
    Ok((pred, truth))
}

/// Minibatch SGD with early stopping on validation loss. The returned model
/// is the best-validation checkpoint with its scaler fitted on the training
/// rows.
pub fn train(
    mut model: SoftmaxModel,
    data: &Dataset,
    split: &Split,
    cfg: &TrainConfig,
) -> Result<SoftmaxModel, NeuralError> {
    if split.train.is_empty() {
        return Err(NeuralError::EmptySplit("train"));
    }
    if split.val.is_empty() {
        return Err(NeuralError::EmptySplit("validation"));
    }
    if data.feature_names != model.feature_names {
        return Err(NeuralError::ArityMismatch {
            expected: model.feature_names.len(),
            got: data.feature_names.len(),
        });
    }
    model.scaler = Scaler::fit(split.train.iter().map(|&i| &data.features[i]), data.feature_names.len());
    let scaled: Vec<Vec<f64>> = data.features.iter().map(|x| model.scaler.apply(x)).collect();

    let eval = |m: &SoftmaxModel, rows: &[usize]| -> Result<f64, NeuralError> {
        let mut pred = Vec::with_capacity(rows.len());
        let mut truth = Vec::with_capacity(rows.len());
        for &i in rows {
            pred.push(m.forward_scaled(&scaled[i])?.1);
            truth.push(data.targets[i].clone());
        }
        Ok(loss(&pred, &truth)?.iter().sum())
    };

    let mut log = TrainingLog::default();
    let mut best_val = eval(&model, &split.val)?;
    log.epochs.push(EpochLog {
        epoch: 0,
        train_loss: eval(&model, &split.train)?,
        val_loss: best_val,
    });
    let mut best = model.clone();
    let mut since_best = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = split.train.clone();
    let batch = cfg.batch_size.max(1);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| scaled[i].as_slice()).collect();
            let ts: Vec<&[f64]> = chunk.iter().map(|&i| data.targets[i].as_slice()).collect();
            let (l, grad) = model.loss_and_gradient(&xs, &ts, cfg.coupling)?;
            if !l.is_finite() {
                return Err(NeuralError::DivergedLoss { epoch });
            }
            if cfg.learning_rate != 0.0 {
                for (p, g) in model
                    .heads
                    .iter_mut()
                    .flat_map(|h| h.mlp.params_mut())
                    .zip(&grad)
                {
                    *p -= cfg.learning_rate * g;
                }
            }
        }
        if !model.params_finite() {
            return Err(NeuralError::DivergedLoss { epoch });
        }
        let train_loss = eval(&model, &split.train)?;
        let val_loss = eval(&model, &split.val)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(NeuralError::DivergedLoss { epoch });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    best.seed = model.seed;
    best.log = log;
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub hidden_layers: usize,
    pub width: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub hidden_layers: Vec<usize>,
    pub widths: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            hidden_layers: vec![3],
            widths: vec![64],
            learning_rates: vec![0.1, 0.03, 0.01],
        }
    }
}

impl Grid {
    pub fn cells(&self) -> Vec<GridCell> {
        let mut cells = Vec::new();
        for &hidden_layers in &self.hidden_layers {
            for &width in &self.widths {
                for &learning_rate in &self.learning_rates {
                    cells.push(GridCell {
                        hidden_layers,
                        width,
                        learning_rate,
                    });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: GridCell,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best: GridCell,
    pub model: SoftmaxModel,
    pub table: Vec<GridRow>,
}

impl GridResult {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("hidden_layers,width,learning_rate,val_loss\n");
        for r in &self.table {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.cell.hidden_layers, r.cell.width, r.cell.learning_rate, r.val_loss
            ));
        }
        s
    }
}

/// Trains one model per grid cell and keeps the lowest validation loss
/// (earliest cell on ties).
pub fn grid_search<F>(
    grid: &Grid,
    data: &Dataset,
    split: &Split,
    base: &TrainConfig,
    build: F,
) -> Result<GridResult, NeuralError>
where
    F: Fn(&GridCell) -> Result<SoftmaxModel, NeuralError> + Sync,
{
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(NeuralError::EmptyGrid);
    }
    let trained: Vec<(GridCell, SoftmaxModel, f64)> = cells
        .par_iter()
        .map(|cell| {
            let cfg = TrainConfig {
                learning_rate: cell.learning_rate,
                ..*base
            };
            let model = train(build(cell)?, data, split, &cfg)?;
            let val = evaluate(&model, data, &split.val)?;
            Ok((*cell, model, val))
        })
        .collect::<Result<_, NeuralError>>()?;

    let table = trained
        .iter()
        .map(|(cell, _, val)| GridRow {
            cell: *cell,
            val_loss: *val,
        })
        .collect();
    let (best, model, _) = trained
        .into_iter()
        .reduce(|a, b| if b.2 < a.2 { b } else { a })
        .expect("non-empty grid");
    Ok(GridResult { best, model, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[1.0, 2.0]);
        assert!((p[0] - 0.268941).abs() < 1e-6);
        assert!((p[1] - 0.731059).abs() < 1e-6);
        let e = std::f64::consts::E;
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        let shifted = softmax(&[1.0 + 7.5, 2.0 + 7.5]);
        assert!((p[0] - shifted[0]).abs() < 1e-15);
        assert_eq!(softmax(&[0.3; 4]), vec![0.25; 4]);
    }

    #[test]
    fn loss_examples() {
        let truth = vec![vec![0.5, 0.5], vec![0.2, 0.8]];
        assert_eq!(loss(&truth, &truth).unwrap(), vec![0.0, 0.0]);
        let pred = vec![vec![0.4, 0.6], vec![0.5, 0.5]];
        let l = loss(&pred, &truth).unwrap();
        assert!((l[0] - 0.223607).abs() < 1e-6);
        assert!((l[0] - (0.05f64).sqrt()).abs() < 1e-15);
        assert_eq!(
            loss(&pred[..1], &truth),
            Err(NeuralError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn zero_weights_equal_biases_give_uniform() {
        let mut m = SoftmaxModel::ensemble(&names(3), &[vec!["f0".into()], vec!["f1".into()], vec!["f2".into()]], 2, 4, 1).unwrap();
        let zeros = vec![0.0; m.num_params()];
        m.set_params(&zeros);
        let (inter, norm) = m.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert!(inter.iter().all(|&v| v == 0.5));
        assert!(norm.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn arity_and_layout_errors() {
        let m = SoftmaxModel::ensemble(&names(2), &[vec!["f0".into()], vec!["f1".into()]], 1, 3, 0).unwrap();
        assert_eq!(
            m.forward(&[1.0]),
            Err(NeuralError::ArityMismatch { expected: 2, got: 1 })
        );
        assert!(SoftmaxModel::ensemble(&names(2), &[vec![]], 1, 3, 0).is_err());
        assert!(SoftmaxModel::ensemble(&names(2), &[vec!["zz".into()]], 1, 3, 0).is_err());
        assert!(SoftmaxModel::ensemble(&names(2), &[vec!["f0".into()]], 0, 3, 0).is_err());
        assert!(SoftmaxModel::unified(&names(2), &["f0".into()], 3, 1, 0, 0).is_err());
    }

    #[test]
    fn head_arity_follows_subsets() {
        let subsets = vec![
            vec!["f0".to_string(), "f3".to_string()],
            vec!["f1".to_string(), "f2".to_string(), "f4".to_string()],
        ];
        let m = SoftmaxModel::ensemble(&names(5), &subsets, 2, 4, 9).unwrap();
        assert_eq!(m.heads[0].mlp.inputs(), 2);
        assert_eq!(m.heads[1].mlp.inputs(), 3);
        assert_eq!(m.heads[1].input_indices, vec![1, 2, 4]);
        // 2x4 + 4, 4x4 + 4, 4x1 + 1
        assert_eq!(m.heads[0].mlp.num_params(), 12 + 20 + 5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = SoftmaxModel::unified(&names(3), &names(3), 4, 2, 5, 3).unwrap();
        let back = SoftmaxModel::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);
        let bad = m.to_json().replace("\"version\": 1", "\"version\": 9");
        assert_eq!(SoftmaxModel::from_json(&bad), Err(NeuralError::Version(9)));
    }

    #[test]
    fn split_fractions() {
        let s = Split::random(100, [0.7, 0.15, 0.15], 4).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(
            Split::random(3, [0.7, 0.15, 0.15], 0),
            Err(NeuralError::EmptySplit("validation"))
        );
        assert!(Split::random(10, [0.5, 0.5, 0.5], 0).is_err());
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random_range(0.0..1.0);
            let b: f64 = rng.random_range(0.0..1.0);
            features.push(vec![a, b]);
            targets.push(softmax(&[0.8 * a, 0.8 * b]));
        }
        Dataset {
            household_ids: (0..n).map(|i| i.to_string()).collect(),
            feature_names: names(2),
            features,
            targets,
        }
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let data = toy_data(40, 1);
        let split = Split::random(40, [0.7, 0.15, 0.15], 1).unwrap();
        let model = SoftmaxModel::ensemble(&names(2), &[vec!["f0".into()], vec!["f1".into()]], 1, 4, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 0.0,
            patience: 100,
            ..TrainConfig::default()
        };
        let trained = train(model.clone(), &data, &split, &cfg).unwrap();
        assert_eq!(trained.params(), model.params());
        let first = trained.log.epochs[0];
        assert!(trained
            .log
            .epochs
            .iter()
            .all(|e| e.train_loss == first.train_loss && e.val_loss == first.val_loss));
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(60, 2);
        let split = Split::random(60, [0.7, 0.15, 0.15], 2).unwrap();
        let build = || SoftmaxModel::ensemble(&names(2), &[vec!["f0".into()], vec!["f1".into()]], 1, 4, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        let a = train(build(), &data, &split, &cfg).unwrap();
        let b = train(build(), &data, &split, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn single_cell_grid() {
        let data = toy_data(40, 3);
        let split = Split::random(40, [0.7, 0.15, 0.15], 3).unwrap();
        let grid = Grid {
            hidden_layers: vec![1],
            widths: vec![3],
            learning_rates: vec![0.2],
        };
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let res = grid_search(&grid, &data, &split, &cfg, |c| {
            SoftmaxModel::ensemble(&names(2), &[vec!["f0".into()], vec!["f1".into()]], c.hidden_layers, c.width, 0)
        })
        .unwrap();
        assert_eq!(res.best, grid.cells()[0]);
        assert_eq!(res.table.len(), 1);
        let empty = Grid {
            hidden_layers: vec![],
            ..grid
        };
        assert!(matches!(
            grid_search(&empty, &data, &split, &cfg, |_| unreachable!()),
            Err(NeuralError::EmptyGrid)
        ));
    }
}
