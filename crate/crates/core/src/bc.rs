//! Behavioral cloning: a small tanh MLP regressed onto expert actions with
//! plain minibatch gradient descent.
//!
//! The objective is the summed squared action error over a batch,
//! `L = sum_i |pi(s_i) - a_i|^2`. Minibatch updates step along the gradient
//! of the per-sample mean so the learning rate does not depend on the batch
//! size; [`bc_loss`] still reports the sum.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{split, Dataset, FeatureVector, Sample, FEATURE_COUNT, FEATURE_SCHEMA_ID};
use crate::flightdyn::ControlInput;
use crate::seeds::{self, stream};
use crate::{Error, Result};

pub const POLICY_FORMAT: &str = "bc-policy";
pub const POLICY_VERSION: u32 = 1;
pub const DEFAULT_LAYER_SIZES: [usize; 4] = [FEATURE_COUNT, 32, 32, 2];

/// Fully connected layer with tanh activation. `weights` is row-major
/// `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    fn forward_into(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.biases))
        {
            let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
            *o = z.tanh();
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_val_loss: Option<f64>,
    pub best_eval_metric: Option<f64>,
}

/// Per-feature standardization applied before the first layer:
/// `x' = (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Smallest scale used for a feature that barely varies in the data. Without
/// it, near-constant features (pitch attitude in level flight) blow small
/// excursions up into many standard deviations.
const MIN_INPUT_SCALE: f64 = 0.01;

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation of each feature over `samples`.
    pub fn fit(samples: &[Sample]) -> Self {
        let n = samples.len().max(1) as f64;
        let mut mean = vec![0.0; FEATURE_COUNT];
        for s in samples {
            for (m, x) in mean.iter_mut().zip(s.features.as_slice()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; FEATURE_COUNT];
        for s in samples {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(s.features.as_slice()) {
                *v += (x - m) * (x - m);
            }
        }
        let scale = var.iter().map(|v| (v / n).sqrt().max(MIN_INPUT_SCALE)).collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (((o, x), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.scale) {
            *o = (x - m) / s;
        }
    }
}

/// The cloned policy: input standardization and MLP parameters, plus the
/// feature layout they expect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub input_norm: InputNorm,
    pub layers: Vec<Dense>,
    pub feature_schema: String,
    pub meta: TrainingMeta,
}

impl Policy {
    pub fn zeros(layer_sizes: &[usize]) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least an input and an output layer");
        Self {
            input_norm: InputNorm::identity(layer_sizes[0]),
            layers: layer_sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            feature_schema: FEATURE_SCHEMA_ID.to_string(),
            meta: TrainingMeta::default(),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Self {
        let mut p = Self::zeros(layer_sizes);
        let mut rng = seeds::rng(seeds::derive(seed, stream::INIT, 0));
        for layer in &mut p.layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
        }
        p.meta.seed = seed;
        p
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].in_dim];
        sizes.extend(self.layers.iter().map(|l| l.out_dim));
        sizes
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w = *it.next().unwrap();
            }
        }
    }

    pub fn check_schema(&self) -> Result<()> {
        if self.feature_schema != FEATURE_SCHEMA_ID {
            return Err(Error::Schema {
                expected: FEATURE_SCHEMA_ID.into(),
                found: self.feature_schema.clone(),
            });
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("policy has no layers"));
        }
        let sizes = self.layer_sizes();
        if sizes[0] != FEATURE_COUNT || *sizes.last().unwrap() != 2 {
            return Err(Error::invalid(format!(
                "policy maps {} -> {}, expected {FEATURE_COUNT} -> 2",
                sizes[0],
                sizes.last().unwrap()
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::invalid(format!(
                    "layer {i} output does not feed layer {}",
                    i + 1
                )));
            }
        }
        let norm = &self.input_norm;
        if norm.mean.len() != FEATURE_COUNT || norm.scale.len() != FEATURE_COUNT {
            return Err(Error::invalid("input normalization has the wrong length"));
        }
        if norm.mean.iter().any(|m| !m.is_finite()) || norm.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(
                "input normalization must be finite with positive scales",
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.biases.len() != l.out_dim {
                return Err(Error::invalid(format!("layer {i}: parameter count mismatch")));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("layer {i}: non-finite parameter")));
            }
        }
        Ok(())
    }

    /// Raw network output `[yoke_pitch, yoke_roll]`.
    pub fn predict(&self, features: &FeatureVector) -> [f64; 2] {
        let mut acts = Activations::new(self);
        acts.run(self, features.as_slice());
        let out = acts.output();
        [out[0], out[1]]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = PolicyHeader {
            format: POLICY_FORMAT.into(),
            version: POLICY_VERSION,
            feature_schema: self.feature_schema.clone(),
            layer_sizes: self.layer_sizes(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        serde_json::to_writer(&mut *w, self)?;
        w.write_all(b"\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Policy> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), &path.display().to_string())
    }

    pub fn read_from(reader: impl BufRead, what: &str) -> Result<Policy> {
        let malformed = |line: usize, message: String| Error::Malformed {
            what: what.to_string(),
            line,
            message,
        };
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| malformed(1, "empty policy file".into()))?
            .map_err(|e| malformed(1, e.to_string()))?;
        let header: PolicyHeader = serde_json::from_str(&header).map_err(|e| malformed(1, e.to_string()))?;
        if header.format != POLICY_FORMAT || header.version != POLICY_VERSION {
            return Err(Error::Schema {
                expected: format!("{POLICY_FORMAT} v{POLICY_VERSION}"),
                found: format!("{} v{}", header.format, header.version),
            });
        }
        if header.feature_schema != FEATURE_SCHEMA_ID {
            return Err(Error::Schema {
                expected: FEATURE_SCHEMA_ID.into(),
                found: header.feature_schema,
            });
        }
        let body = lines
            .next()
            .ok_or_else(|| malformed(2, "missing policy body".into()))?
            .map_err(|e| malformed(2, e.to_string()))?;
        let policy: Policy = serde_json::from_str(&body).map_err(|e| malformed(2, e.to_string()))?;
        policy.check_schema()?;
        policy.check_shapes()?;
        if policy.layer_sizes() != header.layer_sizes {
            return Err(Error::invalid(format!(
                "header declares layers {:?} but body has {:?}",
                header.layer_sizes,
                policy.layer_sizes()
            )));
        }
        Ok(policy)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyHeader {
    format: String,
    version: u32,
    feature_schema: String,
    layer_sizes: Vec<usize>,
}

/// Per-layer outputs of one forward pass, reused across samples.
struct Activations {
    input: Vec<f64>,
    layers: Vec<Vec<f64>>,
}

impl Activations {
    fn new(policy: &Policy) -> Self {
        Self {
            input: vec![0.0; policy.layers[0].in_dim],
            layers: policy.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
        }
    }

    fn run(&mut self, policy: &Policy, x: &[f64]) {
        policy.input_norm.apply(x, &mut self.input);
        for (i, layer) in policy.layers.iter().enumerate() {
            let (before, rest) = self.layers.split_at_mut(i);
            let input = if i == 0 { &self.input } else { &before[i - 1] };
            layer.forward_into(input, &mut rest[0]);
        }
    }

    fn output(&self) -> &[f64] {
        self.layers.last().unwrap()
    }

    fn layer_input(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.input
        } else {
            &self.layers[i - 1]
        }
    }
}

/// The policy's action for one observation.
pub fn forward(policy: &Policy, features: &FeatureVector) -> Result<ControlInput> {
    policy.check_schema()?;
    let [p, r] = policy.predict(features);
    Ok(ControlInput::new(p, r))
}

/// Loss over a batch: the summed squared error and its per-sample mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub sum: f64,
    pub mean: f64,
}

pub fn bc_loss(policy: &Policy, batch: &[Sample]) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("bc_loss on an empty batch"));
    }
    let mut acts = Activations::new(policy);
    let sum: f64 = batch
        .iter()
        .map(|s| {
            acts.run(policy, s.features.as_slice());
            squared_error(acts.output(), &s.action)
        })
        .sum();
    Ok(BatchLoss {
        sum,
        mean: sum / batch.len() as f64,
    })
}

fn squared_error(out: &[f64], action: &ControlInput) -> f64 {
    let dp = out[0] - action.yoke_pitch;
    let dr = out[1] - action.yoke_roll;
    dp * dp + dr * dr
}

/// Gradient of the summed loss, laid out like [`Policy::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(policy: &Policy) -> Self {
        Self {
            weights: policy.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: policy.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    fn clear(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.fill(0.0);
        }
    }
}

/// Scratch buffers for backpropagation.
struct Backprop {
    acts: Activations,
    deltas: Vec<Vec<f64>>,
}

impl Backprop {
    fn new(policy: &Policy) -> Self {
        Self {
            acts: Activations::new(policy),
            deltas: policy.layers.iter().map(|l| vec![0.0; l.out_dim]).collect(),
        }
    }

    /// Adds the gradient of `|pi(s) - a|^2` for one sample into `grads`.
    fn accumulate(&mut self, policy: &Policy, sample: &Sample, grads: &mut Gradients) {
        self.acts.run(policy, sample.features.as_slice());
        let last = policy.layers.len() - 1;
        let target = [sample.action.yoke_pitch, sample.action.yoke_roll];
        for (d, (y, t)) in self.deltas[last].iter_mut().zip(self.acts.output().iter().zip(target)) {
            *d = 2.0 * (y - t) * (1.0 - y * y);
        }
        for i in (0..=last).rev() {
            let layer = &policy.layers[i];
            let input = self.acts.layer_input(i);
            let delta = &self.deltas[i];
            for (o, &d) in delta.iter().enumerate() {
                grads.biases[i][o] += d;
                let row = &mut grads.weights[i][o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if i > 0 {
                let (lower, upper) = self.deltas.split_at_mut(i);
                let prev = &mut lower[i - 1];
                let delta = &upper[0];
                let prev_out = &self.acts.layers[i - 1];
                for (j, p) in prev.iter_mut().enumerate() {
                    let back: f64 = delta
                        .iter()
                        .enumerate()
                        .map(|(o, d)| d * layer.weights[o * layer.in_dim + j])
                        .sum();
                    *p = back * (1.0 - prev_out[j] * prev_out[j]);
                }
            }
        }
    }
}

/// Exact gradient of [`bc_loss`]'s sum with respect to every parameter.
pub fn bc_grad(policy: &Policy, batch: &[Sample]) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::invalid("bc_grad on an empty batch"));
    }
    let mut grads = Gradients::zeros_like(policy);
    let mut bp = Backprop::new(policy);
    for s in batch {
        bp.accumulate(policy, s, &mut grads);
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs between rollout evaluations.
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// Held-out rollouts per evaluation.
    pub eval_trials: usize,
    /// Seconds per held-out rollout.
    pub eval_duration: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 64,
            max_epochs: 300,
            eval_every: 10,
            patience: 5,
            seed: 1,
            val_fraction: 0.2,
            eval_trials: 10,
            eval_duration: 30.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("train.learning_rate must be > 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::invalid(
                "train.batch_size, max_epochs, eval_every and patience must be >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("train.val_fraction must be in [0, 1)"));
        }
        if self.eval_trials == 0 || !(self.eval_duration > 0.0 && self.eval_duration.is_finite()) {
            return Err(Error::invalid(
                "train.eval_trials must be >= 1 and train.eval_duration > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-sample mean over the training split.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Rollout metric, on evaluation epochs only.
    pub eval_metric: Option<f64>,
}

/// Loss and evaluation history of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingCurve {
    pub fn evaluations(&self) -> usize {
        self.epochs.iter().filter(|e| e.eval_metric.is_some()).count()
    }

    /// Tab-separated table, one row per epoch; epoch 0 is the untrained policy.
    pub fn write_table(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch\ttrain_loss\tval_loss\tavg_heading_error")?;
        writeln!(w, "0\t{}\t\t", self.initial_train_loss)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                e.epoch,
                e.train_loss,
                opt(e.val_loss),
                opt(e.eval_metric)
            )?;
        }
        Ok(())
    }
}

fn mean_loss(policy: &Policy, samples: &[Sample], epoch: usize) -> Result<f64> {
    let loss = bc_loss(policy, samples)?.mean;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            epoch,
            message: format!("mean loss is {loss}"),
        });
    }
    Ok(loss)
}

/// Trains a policy on `dataset`.
///
/// Every `eval_every` epochs `eval_hook` scores the current policy (lower is
/// better). Training stops after `max_epochs` or once `patience` consecutive
/// evaluations fail to improve on the best score; the best-scoring snapshot
/// is returned.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    eval_hook: &mut dyn FnMut(&Policy) -> Result<f64>,
) -> Result<(Policy, TrainingCurve)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let (train_set, val_set) = split(dataset, config.val_fraction, config.seed)?;
    let train_samples = &train_set.samples;
    if train_samples.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }

    let mut policy = Policy::init(&DEFAULT_LAYER_SIZES, config.seed);
    policy.input_norm = InputNorm::fit(train_samples);
    let mut rng = seeds::rng(seeds::derive(config.seed, stream::SHUFFLE, 0));
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut grads = Gradients::zeros_like(&policy);
    let mut bp = Backprop::new(&policy);
    let mut batch: Vec<Sample> = Vec::with_capacity(config.batch_size);

    let initial_train_loss = mean_loss(&policy, train_samples, 0)?;
    let mut curve = TrainingCurve {
        initial_train_loss,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, Policy)> = None;
    let mut stale = 0usize;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_samples[i]));
            grads.clear();
            for s in &batch {
                bp.accumulate(&policy, s, &mut grads);
            }
            let step = config.learning_rate / batch.len() as f64;
            for (layer, (gw, gb)) in policy.layers.iter_mut().zip(grads.weights.iter().zip(&grads.biases)) {
                for (w, g) in layer.weights.iter_mut().zip(gw) {
                    *w -= step * g;
                }
                for (b, g) in layer.biases.iter_mut().zip(gb) {
                    *b -= step * g;
                }
            }
        }

        let train_loss = mean_loss(&policy, train_samples, epoch)?;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(mean_loss(&policy, &val_set.samples, epoch)?)
        };
        let mut record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            eval_metric: None,
        };

        let mut stop = false;
        if epoch % config.eval_every == 0 || epoch == config.max_epochs {
            let metric = eval_hook(&policy)?;
            record.eval_metric = Some(metric);
            let improved = match &best {
                Some((b, _)) => metric < *b,
                None => true,
            };
            if improved {
                best = Some((metric, policy.clone()));
                curve.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    stop = epoch < config.max_epochs;
                }
            }
        }
        curve.epochs.push(record);
        if stop {
            curve.stopped_early = true;
            break;
        }
    }

    let (best_metric, mut best_policy) = best.expect("the final epoch is always evaluated");
    let best_record = &curve.epochs[curve.best_epoch - 1];
    best_policy.meta = TrainingMeta {
        seed: config.seed,
        epochs: curve.epochs.len(),
        best_epoch: curve.best_epoch,
        final_train_loss: best_record.train_loss,
        final_val_loss: best_record.val_loss,
        best_eval_metric: Some(best_metric),
    };
    Ok((best_policy, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::flightdyn::SimParams;

    fn sample(f: [f64; 8], yp: f64, yr: f64) -> Sample {
        Sample {
            features: FeatureVector(f),
            action: ControlInput::new(yp, yr),
            trial_id: 0,
            t: 0.0,
        }
    }

    fn random_batch(seed: u64, n: usize) -> Vec<Sample> {
        let mut rng = seeds::rng(seed);
        (0..n)
            .map(|_| {
                let mut f = [0.0; 8];
                for v in &mut f {
                    *v = rng.random_range(-1.5..1.5);
                }
                sample(f, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            })
            .collect()
    }

    /// Central-difference estimate of the summed-loss gradient.
    fn numeric_grad(policy: &Policy, batch: &[Sample], h: f64) -> Vec<f64> {
        let base = policy.params();
        let mut probe = policy.clone();
        (0..base.len())
            .map(|i| {
                let mut p = base.clone();
                p[i] = base[i] + h;
                probe.set_params(&p);
                let up = bc_loss(&probe, batch).unwrap().sum;
                p[i] = base[i] - h;
                probe.set_params(&p);
                let down = bc_loss(&probe, batch).unwrap().sum;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn zero_policy_outputs_zero() {
        let p = Policy::zeros(&DEFAULT_LAYER_SIZES);
        let c = forward(&p, &FeatureVector([3.0, -1.0, 2.0, 0.5, 0.1, 9.0, -4.0, 1.0])).unwrap();
        assert_eq!(c, ControlInput::NEUTRAL);
    }

    #[test]
    fn outputs_stay_inside_open_interval() {
        let p = Policy::init(&DEFAULT_LAYER_SIZES, 3);
        let mut rng = seeds::rng(4);
        for _ in 0..1_000_000 {
            let mut f = [0.0; 8];
            for v in &mut f {
                *v = rng.random_range(-10.0..10.0);
            }
            let [a, b] = p.predict(&FeatureVector(f));
            assert!(a > -1.0 && a < 1.0 && b > -1.0 && b < 1.0);
        }
    }

    #[test]
    fn forward_is_repeatable() {
        let p = Policy::init(&DEFAULT_LAYER_SIZES, 3);
        let f = FeatureVector([0.1, 0.9, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2]);
        let a = forward(&p, &f).unwrap();
        assert_eq!(a, forward(&p, &f).unwrap());
    }

    #[test]
    fn loss_examples() {
        // Single layer 8 -> 2 whose biases produce exactly tanh(b).
        let mut p = Policy::zeros(&[8, 2]);
        p.layers[0].biases = vec![0.1f64.atanh(), 0.2f64.atanh()];
        let batch = vec![sample([0.0; 8], 0.0, 0.0)];
        let l = bc_loss(&p, &batch).unwrap();
        assert!((l.sum - 0.05).abs() < 1e-15, "{}", l.sum);

        let [a, b] = p.predict(&FeatureVector([0.0; 8]));
        let perfect = vec![sample([0.0; 8], a, b)];
        assert_eq!(bc_loss(&p, &perfect).unwrap().sum, 0.0);

        let batch = random_batch(2, 7);
        let doubled: Vec<Sample> = batch.iter().chain(&batch).copied().collect();
        let q = Policy::init(&DEFAULT_LAYER_SIZES, 1);
        let single = bc_loss(&q, &batch).unwrap();
        let double = bc_loss(&q, &doubled).unwrap();
        assert_eq!(double.sum, 2.0 * single.sum);
        assert_eq!(double.mean, single.mean);

        assert!(bc_loss(&q, &[]).is_err());
        assert!(bc_grad(&q, &[]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let p = Policy::init(&DEFAULT_LAYER_SIZES, 100 + seed);
            let batch = random_batch(200 + seed, 6);
            let analytic = bc_grad(&p, &batch).unwrap().flatten();
            let numeric = numeric_grad(&p, &batch, 1e-5);
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {i}: analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn gradient_is_additive_over_samples() {
        let p = Policy::init(&DEFAULT_LAYER_SIZES, 9);
        let batch = random_batch(10, 2);
        let both = bc_grad(&p, &batch).unwrap().flatten();
        let a = bc_grad(&p, &batch[..1]).unwrap().flatten();
        let b = bc_grad(&p, &batch[1..]).unwrap().flatten();
        for ((g, x), y) in both.iter().zip(&a).zip(&b) {
            assert!((g - (x + y)).abs() <= 1e-12 * g.abs().max(1.0));
        }
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let p = Policy::init(&DEFAULT_LAYER_SIZES, 12);
        let batch: Vec<Sample> = random_batch(13, 5)
            .into_iter()
            .map(|mut s| {
                let [a, b] = p.predict(&s.features);
                s.action = ControlInput {
                    yoke_pitch: a,
                    yoke_roll: b,
                };
                s
            })
            .collect();
        assert_eq!(bc_grad(&p, &batch).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let mut p = Policy::zeros(&DEFAULT_LAYER_SIZES);
        p.feature_schema = "other/v9".into();
        assert!(matches!(
            forward(&p, &FeatureVector([0.0; 8])),
            Err(Error::Schema { .. })
        ));

        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert!(matches!(
            Policy::read_from(buf.as_slice(), "p"),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = Policy::init(&DEFAULT_LAYER_SIZES, 1);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let broken = text.replacen("[8,32,32,2]", "[8,32,16,2]", 1);
        assert!(Policy::read_from(broken.as_bytes(), "p").is_err());
    }

    #[test]
    fn policy_round_trip() {
        let p = Policy::init(&DEFAULT_LAYER_SIZES, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.policy");
        p.save(&path).unwrap();
        let q = Policy::load(&path).unwrap();
        assert_eq!(p, q);
        let f = FeatureVector([0.3, 0.95, -0.1, 0.05, 0.2, -0.4, 0.01, -0.3]);
        assert_eq!(forward(&p, &f).unwrap(), forward(&q, &f).unwrap());
    }

    fn toy_dataset() -> Dataset {
        let mut rng = seeds::rng(5);
        let mut samples = Vec::new();
        for trial in 0..5 {
            for k in 0..100 {
                let mut f = [0.0; 8];
                for v in &mut f {
                    *v = rng.random_range(-1.0..1.0);
                }
                samples.push(Sample {
                    features: FeatureVector(f),
                    action: ControlInput::new(0.5 * f[2] - 0.2 * f[4], 0.7 * f[0] - 0.3 * f[5]),
                    trial_id: trial,
                    t: k as f64 * 0.05,
                });
            }
        }
        let task = crate::expert::sample_task(0.0, 1, 5.0, &SimParams::default());
        Dataset::new(samples, DatasetMeta::new(SimParams::default(), vec![task; 5]))
    }

    #[test]
    fn constant_hook_with_patience_one_stops_at_second_evaluation() {
        let d = toy_dataset();
        let cfg = TrainConfig {
            eval_every: 1,
            patience: 1,
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let (_, curve) = train(&d, &cfg, &mut |_| Ok(3.0)).unwrap();
        assert_eq!(curve.evaluations(), 2);
        assert!(curve.stopped_early);
        assert_eq!(curve.best_epoch, 1);
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let d = toy_dataset();
        let cfg = TrainConfig {
            max_epochs: 20,
            ..TrainConfig::default()
        };
        let mut hook = |p: &Policy| Ok(bc_loss(p, &d.samples)?.mean);
        let (a, ca) = train(&d, &cfg, &mut hook).unwrap();
        let (b, cb) = train(&d, &cfg, &mut hook).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(ca.epochs[0].train_loss < ca.initial_train_loss);
        assert!(ca.epochs.last().unwrap().train_loss < 0.2 * ca.initial_train_loss);
    }

    #[test]
    fn divergence_is_reported() {
        let mut d = toy_dataset();
        d.samples[17].features.0[3] = f64::INFINITY;
        let err = train(&d, &TrainConfig::default(), &mut |_| Ok(0.0)).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let d = Dataset::new(vec![], DatasetMeta::new(SimParams::default(), vec![]));
        assert!(train(&d, &TrainConfig::default(), &mut |_| Ok(0.0)).is_err());
    }
}
