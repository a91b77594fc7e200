//! Desk-scale classifiers trained with plain SGD.
//!
//! Two architectures share one flat parameter vector layout:
//!
//! * logistic regression (`hidden_units == 0`): `W[K][D]`, then `b[K]`
//! * one-hidden-layer MLP: `W1[H][D]`, `b1[H]`, `W2[K][H]`, `b2[K]`
//!
//! All matrices are row-major. Every accumulation runs in a fixed order so
//! that training is bit-reproducible.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    /// 0 selects logistic regression.
    #[serde(default)]
    pub hidden_units: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            num_classes,
            hidden_units: 0,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_units: usize, num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            num_classes,
            hidden_units,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn is_logistic(&self) -> bool {
        self.hidden_units == 0
    }

    /// Total parameter count L.
    pub fn param_count(&self) -> usize {
        let (d, h, k) = (self.input_dim, self.hidden_units, self.num_classes);
        if h == 0 {
            k * d + k
        } else {
            h * d + h + k * h + k
        }
    }

    /// Layer shapes as `(rows, cols)` of each weight matrix, in storage order.
    /// Each matrix is followed by a bias of length `rows`.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        if self.is_logistic() {
            vec![(self.num_classes, self.input_dim)]
        } else {
            vec![
                (self.hidden_units, self.input_dim),
                (self.num_classes, self.hidden_units),
            ]
        }
    }
}

/// Flat model state Θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters(Vec<f64>);

impl Parameters {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Parameters(vec![0.0; spec.param_count()])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Parameters(values)
    }

    /// Per-layer uniform draw in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, weights
    /// then bias for each layer.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let mut values = Vec::with_capacity(spec.param_count());
        for (rows, cols) in spec.layers() {
            let bound = 1.0 / (cols as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            values.extend((0..rows * cols + rows).map(|_| dist.sample(&mut rng)));
        }
        Parameters(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &Parameters) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::Internal(format!(
                "parameter length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        let sq: f64 = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sq.sqrt())
    }

    /// Little-endian byte image, used for hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchSize {
    #[default]
    Full,
    Size(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: BatchSize,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if self.batch_size == BatchSize::Size(0) {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_params(params: &Parameters, spec: &ModelSpec) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Config(format!(
            "parameter vector has length {}, model expects {}",
            params.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

fn check_input(x: &[f64], spec: &ModelSpec) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(Error::Config(format!(
            "feature vector has length {}, model expects {}",
            x.len(),
            spec.input_dim
        )));
    }
    Ok(())
}

/// `out[r] = b[r] + sum_c w[r][c] * x[c]`, summed left to right.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// Replaces logits with probabilities; returns log of the partition
/// function (`max + ln(sum exp(z - max))`).
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Scratch buffers for one forward/backward pass.
struct Pass {
    logits: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    delta_hidden: Vec<f64>,
}

impl Pass {
    fn new(spec: &ModelSpec) -> Self {
        Pass {
            logits: vec![0.0; spec.num_classes],
            hidden_pre: vec![0.0; spec.hidden_units],
            hidden: vec![0.0; spec.hidden_units],
            probs: vec![0.0; spec.num_classes],
            delta_hidden: vec![0.0; spec.hidden_units],
        }
    }

    /// Fills `probs`; returns the log-partition value.
    fn forward(&mut self, theta: &[f64], spec: &ModelSpec, x: &[f64]) -> f64 {
        let (d, h, k) = (spec.input_dim, spec.hidden_units, spec.num_classes);
        if h == 0 {
            let (w, b) = theta.split_at(k * d);
            affine(w, b, x, &mut self.probs);
        } else {
            let (w1, rest) = theta.split_at(h * d);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(k * h);
            affine(w1, b1, x, &mut self.hidden_pre);
            for (a, &z) in self.hidden.iter_mut().zip(&self.hidden_pre) {
                *a = z.max(0.0);
            }
            affine(w2, b2, &self.hidden, &mut self.probs);
        }
        self.logits.copy_from_slice(&self.probs);
        softmax_in_place(&mut self.probs)
    }

    /// Adds this sample's cross-entropy gradient into `grad`; `probs` must hold
    /// the forward output for `x`.
    fn backward(&mut self, theta: &[f64], spec: &ModelSpec, x: &[f64], label: usize, grad: &mut [f64]) {
        let (d, h, k) = (spec.input_dim, spec.hidden_units, spec.num_classes);
        self.probs[label] -= 1.0;
        let delta = &self.probs;
        if h == 0 {
            let (gw, gb) = grad.split_at_mut(k * d);
            for c in 0..k {
                let row = &mut gw[c * d..(c + 1) * d];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += delta[c] * xi;
                }
                gb[c] += delta[c];
            }
            return;
        }
        let w2 = &theta[h * d + h..h * d + h + k * h];
        let (gw1, rest) = grad.split_at_mut(h * d);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(k * h);
        for c in 0..k {
            let row = &mut gw2[c * h..(c + 1) * h];
            for (g, a) in row.iter_mut().zip(&self.hidden) {
                *g += delta[c] * a;
            }
            gb2[c] += delta[c];
        }
        for j in 0..h {
            let mut back = 0.0;
            for c in 0..k {
                back += w2[c * h + j] * delta[c];
            }
            self.delta_hidden[j] = if self.hidden_pre[j] > 0.0 { back } else { 0.0 };
        }
        for j in 0..h {
            let dj = self.delta_hidden[j];
            let row = &mut gw1[j * d..(j + 1) * d];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += dj * xi;
            }
            gb1[j] += dj;
        }
    }
}

/// Class probabilities for one input.
pub fn forward(params: &Parameters, spec: &ModelSpec, x: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    check_params(params, spec)?;
    check_input(x, spec)?;
    let mut pass = Pass::new(spec);
    pass.forward(params.as_slice(), spec, x);
    Ok(pass.probs)
}

/// Argmax class; ties go to the lowest index.
pub fn predict(params: &Parameters, spec: &ModelSpec, x: &[f64]) -> Result<usize> {
    let probs = forward(params, spec, x)?;
    Ok(argmax(&probs))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best
}

/// Sums loss and gradient over `batch` into `grad` (which must be zeroed by
/// the caller). Returns `(loss_sum, count)`.
fn accumulate<'a, I>(theta: &[f64], spec: &ModelSpec, batch: I, grad: &mut [f64]) -> Result<(f64, usize)>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut pass = Pass::new(spec);
    let mut loss = 0.0;
    let mut n = 0;
    for s in batch {
        check_input(&s.features, spec)?;
        if s.label >= spec.num_classes {
            return Err(Error::Config(format!(
                "label {} out of range for {} classes",
                s.label, spec.num_classes
            )));
        }
        let log_z = pass.forward(theta, spec, &s.features);
        // -ln p_y, taken from the logits so it stays finite when p_y underflows.
        loss += log_z - pass.logits[s.label];
        pass.backward(theta, spec, &s.features, s.label, grad);
        n += 1;
    }
    Ok((loss, n))
}

/// Mean cross-entropy over `batch` and its exact gradient.
pub fn loss_and_gradient(params: &Parameters, spec: &ModelSpec, batch: &[Sample]) -> Result<(f64, Parameters)> {
    spec.validate()?;
    check_params(params, spec)?;
    if batch.is_empty() {
        return Err(Error::Usage("loss_and_gradient needs a non-empty batch".into()));
    }
    let mut grad = vec![0.0; params.len()];
    let (loss, n) = accumulate(params.as_slice(), spec, batch, &mut grad)?;
    let n = n as f64;
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok(((loss / n).max(0.0), Parameters(grad)))
}

fn sgd_step<'a, I>(theta: &mut [f64], spec: &ModelSpec, batch: I, lr: f64, grad: &mut [f64]) -> Result<()>
where
    I: IntoIterator<Item = &'a Sample>,
{
    grad.iter_mut().for_each(|g| *g = 0.0);
    let (_, n) = accumulate(theta, spec, batch, grad)?;
    let n = n as f64;
    for (t, g) in theta.iter_mut().zip(grad.iter()) {
        *t -= lr * (g / n);
    }
    Ok(())
}

/// Runs `cfg.local_epochs` epochs of SGD on `train`, starting from a copy of
/// `global`. Full-batch epochs use the stored sample order; mini-batch epochs
/// draw a fresh permutation from `seed` each epoch.
pub fn local_train(
    global: &Parameters,
    spec: &ModelSpec,
    train: &[Sample],
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<Parameters> {
    spec.validate()?;
    cfg.validate()?;
    check_params(global, spec)?;
    if train.is_empty() {
        return Err(Error::EmptyShard);
    }
    let mut theta = global.as_slice().to_vec();
    let mut grad = vec![0.0; theta.len()];
    match cfg.batch_size {
        BatchSize::Full => {
            for _ in 0..cfg.local_epochs {
                sgd_step(&mut theta, spec, train, cfg.learning_rate, &mut grad)?;
            }
        }
        BatchSize::Size(b) => {
            let mut rng = rng_from(seed);
            let mut order: Vec<usize> = (0..train.len()).collect();
            for _ in 0..cfg.local_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(b) {
                    let batch = chunk.iter().map(|&i| &train[i]);
                    sgd_step(&mut theta, spec, batch, cfg.learning_rate, &mut grad)?;
                }
            }
        }
    }
    Ok(Parameters(theta))
}

/// Number of argmax-correct predictions on `samples`.
pub fn count_correct(params: &Parameters, spec: &ModelSpec, samples: &[Sample]) -> Result<usize> {
    spec.validate()?;
    check_params(params, spec)?;
    let mut pass = Pass::new(spec);
    let mut correct = 0;
    for s in samples {
        check_input(&s.features, spec)?;
        pass.forward(params.as_slice(), spec, &s.features);
        if argmax(&pass.probs) == s.label {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Predicted class per sample, in order.
pub fn predict_all(params: &Parameters, spec: &ModelSpec, samples: &[Sample]) -> Result<Vec<usize>> {
    spec.validate()?;
    check_params(params, spec)?;
    let mut pass = Pass::new(spec);
    samples
        .iter()
        .map(|s| {
            check_input(&s.features, spec)?;
            pass.forward(params.as_slice(), spec, &s.features);
            Ok(argmax(&pass.probs))
        })
        .collect()
}

/// Fraction of correct predictions, or `None` for an empty test set.
pub fn evaluate_accuracy(params: &Parameters, spec: &ModelSpec, test: &[Sample]) -> Result<Option<f64>> {
    if test.is_empty() {
        return Ok(None);
    }
    let correct = count_correct(params, spec, test)?;
    Ok(Some(correct as f64 / test.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(features: Vec<f64>, label: usize) -> Sample {
        Sample::new(features, label)
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::logistic(4, 3).param_count(), 15);
        assert_eq!(ModelSpec::mlp(4, 5, 3).param_count(), 4 * 5 + 5 + 5 * 3 + 3);
    }

    #[test]
    fn zero_logistic_is_uniform() {
        let spec = ModelSpec::logistic(3, 4);
        let p = forward(&Parameters::zeros(&spec), &spec, &[0.3, -2.0, 5.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn binary_output_sums_to_one() {
        let spec = ModelSpec::mlp(3, 4, 2);
        let params = Parameters::init(&spec, 3);
        let p = forward(&params, &spec, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p.len(), 2);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let spec = ModelSpec::logistic(3, 2);
        let err = forward(&Parameters::zeros(&spec), &spec, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_logistic_loss_is_ln_k() {
        let spec = ModelSpec::logistic(2, 10);
        let (loss, _) = loss_and_gradient(&Parameters::zeros(&spec), &spec, &[sample(vec![0.5, 0.1], 7)]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_has_same_loss_and_gradient() {
        let spec = ModelSpec::mlp(3, 4, 3);
        let params = Parameters::init(&spec, 11);
        let s = sample(vec![0.2, -0.4, 0.9], 1);
        let (l1, g1) = loss_and_gradient(&params, &spec, std::slice::from_ref(&s)).unwrap();
        let (l2, g2) = loss_and_gradient(&params, &spec, &[s.clone(), s]).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_batch_is_usage_error() {
        let spec = ModelSpec::logistic(2, 2);
        assert!(matches!(
            loss_and_gradient(&Parameters::zeros(&spec), &spec, &[]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let spec = ModelSpec::mlp(2, 3, 2);
        let global = Parameters::init(&spec, 5);
        let train = vec![sample(vec![1.0, 0.0], 0), sample(vec![0.0, 1.0], 1), sample(vec![0.5, 0.5], 1)];
        for batch_size in [BatchSize::Full, BatchSize::Size(2)] {
            let cfg = TrainerConfig {
                learning_rate: 0.0,
                local_epochs: 3,
                batch_size,
            };
            assert_eq!(local_train(&global, &spec, &train, &cfg, 9).unwrap(), global);
        }
    }

    #[test]
    fn one_full_batch_epoch_is_one_gradient_step() {
        let spec = ModelSpec::logistic(2, 3);
        let global = Parameters::init(&spec, 1);
        let train = vec![sample(vec![1.0, 0.2], 0), sample(vec![0.1, 1.0], 2)];
        let cfg = TrainerConfig {
            learning_rate: 0.3,
            local_epochs: 1,
            batch_size: BatchSize::Full,
        };
        let out = local_train(&global, &spec, &train, &cfg, 0).unwrap();
        let (_, g) = loss_and_gradient(&global, &spec, &train).unwrap();
        for ((o, t), gi) in out.as_slice().iter().zip(global.as_slice()).zip(g.as_slice()) {
            assert_eq!(*o, t - 0.3 * gi);
        }
    }

    #[test]
    fn empty_shard_signals_skip() {
        let spec = ModelSpec::logistic(2, 2);
        let cfg = TrainerConfig {
            learning_rate: 0.1,
            local_epochs: 1,
            batch_size: BatchSize::Full,
        };
        assert!(matches!(
            local_train(&Parameters::zeros(&spec), &spec, &[], &cfg, 0),
            Err(Error::EmptyShard)
        ));
    }

    #[test]
    fn minibatch_training_is_reproducible() {
        let spec = ModelSpec::mlp(2, 4, 3);
        let global = Parameters::init(&spec, 2);
        let train: Vec<Sample> = (0..17)
            .map(|i| sample(vec![(i as f64).sin(), (i as f64 * 0.7).cos()], i % 3))
            .collect();
        let cfg = TrainerConfig {
            learning_rate: 0.2,
            local_epochs: 4,
            batch_size: BatchSize::Size(5),
        };
        let a = local_train(&global, &spec, &train, &cfg, 77).unwrap();
        let b = local_train(&global, &spec, &train, &cfg, 77).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        let c = local_train(&global, &spec, &train, &cfg, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn accuracy_counts_and_ties() {
        // Zero model: every class ties, so argmax is class 0.
        let spec = ModelSpec::logistic(1, 2);
        let params = Parameters::zeros(&spec);
        let test = vec![sample(vec![1.0], 0), sample(vec![1.0], 1), sample(vec![2.0], 0), sample(vec![3.0], 1)];
        assert_eq!(evaluate_accuracy(&params, &spec, &test).unwrap(), Some(0.5));
        assert_eq!(evaluate_accuracy(&params, &spec, &[]).unwrap(), None);
    }

    #[test]
    fn perfect_model_scores_one() {
        // Logits z0 = -x, z1 = x: positive features map to class 1.
        let spec = ModelSpec::logistic(1, 2);
        let params = Parameters::from_vec(vec![-1.0, 1.0, 0.0, 0.0]);
        let test = vec![sample(vec![-2.0], 0), sample(vec![0.5], 1), sample(vec![3.0], 1)];
        assert_eq!(evaluate_accuracy(&params, &spec, &test).unwrap(), Some(1.0));
    }
}
