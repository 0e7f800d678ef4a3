//! Adam, the training loop, cross-validation splits and evaluation metrics.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::{OwnedTargets, TabularDataset, TargetScaler};
use crate::model::{DakModel, ModelError, ParamKind};
use crate::vi::{EllMode, LikelihoodConfig};

/// Monte-Carlo samples used for classification predictions.
pub const PREDICTIVE_SAMPLES: usize = 20;
pub const ECE_BINS: usize = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, term: String },
    #[error("parameter/gradient shape mismatch at index {0}")]
    Shape(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("cannot split {n} items into {k} folds")]
    Folds { n: usize, k: usize },
    #[error("empty dataset")]
    Empty,
}

/// How a parameter is treated by [`AdamState::step`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRole {
    Frozen,
    /// Updated without weight decay.
    Plain,
    /// Updated with decoupled weight decay.
    Decayed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]], lr: f64, weight_decay: f64) -> Self {
        let sizes = shapes.iter().map(|s| s.iter().product::<usize>());
        let m: Vec<Vec<f64>> = sizes.map(|n| vec![0.0; n]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn for_params(params: &[Tensor], lr: f64, weight_decay: f64) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(Tensor::shape).collect();
        Self::new(&shapes, lr, weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected step that decreases a loss with gradient `grads`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], roles: &[UpdateRole]) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() || roles.len() != params.len() {
            return Err(TrainError::Shape(params.len().min(grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.shape() != p.shape() {
                return Err(TrainError::Shape(i));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            if roles[i] == UpdateRole::Frozen {
                continue;
            }
            let decay = if roles[i] == UpdateRole::Decayed { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((p, &g), (mi, vi)) in params[i]
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + decay * *p);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Extractor, scales and variational parameters trained jointly.
    Full,
    /// Only the variational parameters move; the extractor comes from
    /// [`pretrain`] or a checkpoint.
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mode: TrainMode,
    /// `0` selects the closed-form expected log-likelihood.
    pub mc_samples: usize,
    pub seed: u64,
    /// Global gradient-norm cap; off by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 512,
            lr: 1e-3,
            weight_decay: 5e-4,
            mode: TrainMode::Full,
            mc_samples: 0,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn ell_mode(&self) -> EllMode {
        EllMode::from_samples(self.mc_samples)
    }

    pub fn validate(&self, lik: &LikelihoodConfig) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!("weight decay {}", self.weight_decay)));
        }
        if self.mc_samples == 0 && !lik.is_regression() {
            return Err(TrainError::Config("closed form requires a regression likelihood".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("clip norm {c}")));
            }
        }
        Ok(())
    }

    fn frozen(&self) -> Vec<ParamKind> {
        match self.mode {
            TrainMode::Full => vec![],
            TrainMode::FineTune => vec![ParamKind::Extractor, ParamKind::HeadScale],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Averages over the epoch's minibatches of full-data-scaled ELBO terms.
    pub elbo: f64,
    pub ell: f64,
    pub kl: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

/// Validation data in original target units plus the scaler that maps
/// model outputs back to them.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub data: &'a TabularDataset,
    pub scaler: TargetScaler,
}

fn split_batches(order: &[usize], batch: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch)
}

/// Maximizes the ELBO with Adam. `train` carries the targets the model is
/// fitted to (standardized, for regression).
pub fn fit(
    model: &mut DakModel,
    train: &TabularDataset,
    valid: Option<Validation>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    cfg.validate(model.likelihood())?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(TrainError::Empty);
    }
    let named = model.params();
    let frozen = cfg.frozen();
    let roles: Vec<UpdateRole> = named
        .iter()
        .map(|p| {
            if frozen.contains(&p.kind) {
                UpdateRole::Frozen
            } else if p.kind.is_deterministic() {
                UpdateRole::Decayed
            } else {
                UpdateRole::Plain
            }
        })
        .collect();
    let names: Vec<String> = named.iter().map(|p| p.name.clone()).collect();
    let mut params: Vec<Tensor> = named.into_iter().map(|p| p.tensor).collect();
    let mut adam = AdamState::for_params(&params, cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mode = cfg.ell_mode();
    let start = Instant::now();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut elbo_sum, mut ell_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for rows in split_batches(&order, cfg.batch_size) {
            let batch = train.subset(rows);
            let seed: u64 = rng.gen();
            let mut tape = Tape::new();
            let diag = |term: String| TrainError::NonFinite { epoch, step, term };
            let g = match model.elbo_graph(&mut tape, &batch.x, batch.y.as_targets(), mode, n, seed, &frozen) {
                Ok(g) => g,
                Err(ModelError::Autodiff(AutodiffError::NonFinite { op })) => {
                    return Err(diag(format!("value in {op} while building the ELBO")))
                }
                Err(e) => return Err(e.into()),
            };
            let (elbo, ell, kl) = (tape.value(g.elbo).item(), tape.value(g.ell).item(), tape.value(g.kl).item());
            if !ell.is_finite() {
                return Err(diag("expected log-likelihood".into()));
            }
            if !kl.is_finite() {
                return Err(diag("KL".into()));
            }
            let grads = tape.backward(g.elbo)?;
            let mut loss_grads: Vec<Tensor> = Vec::with_capacity(params.len());
            for (i, v) in g.params.iter().enumerate() {
                let mut gt = grads.wrt(*v);
                if !gt.all_finite() {
                    return Err(diag(format!("gradient of {}", names[i])));
                }
                gt.data_mut().iter_mut().for_each(|x| *x = -*x);
                loss_grads.push(gt);
            }
            if let Some(cap) = cfg.clip_norm {
                clip_global_norm(&mut loss_grads, &roles, cap);
            }
            adam.step(&mut params, &loss_grads, &roles)?;
            model.assign(&params).map_err(|e| diag(format!("parameter after update ({e})")))?;
            elbo_sum += elbo;
            ell_sum += ell;
            kl_sum += kl;
            batches += 1;
            step += 1;
        }
        let mut record = EpochRecord {
            epoch: epoch + 1,
            elbo: elbo_sum / batches as f64,
            ell: ell_sum / batches as f64,
            kl: kl_sum / batches as f64,
            val_rmse: None,
            val_acc: None,
            seconds: 0.0,
        };
        if let Some(v) = valid {
            let m = evaluate(model, v.data, &v.scaler, cfg.seed)?;
            record.val_rmse = m.rmse;
            record.val_acc = m.accuracy;
        }
        record.seconds = start.elapsed().as_secs_f64();
        history.push(record);
    }
    Ok(history)
}

fn clip_global_norm(grads: &mut [Tensor], roles: &[UpdateRole], cap: f64) {
    let norm: f64 = grads
        .iter()
        .zip(roles)
        .filter(|(_, r)| **r != UpdateRole::Frozen)
        .flat_map(|(g, _)| g.data().iter().map(|x| x * x))
        .sum::<f64>()
        .sqrt();
    if norm > cap {
        let f = cap / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= f));
    }
}

/// Settings for deterministic pre-training of the extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

/// Trains the extractor alone with a temporary linear readout on the
/// squashed features: mean squared error for regression, cross-entropy for
/// classification. Returns the mean loss per epoch.
pub fn pretrain(model: &mut DakModel, train: &TabularDataset, cfg: &PretrainConfig) -> Result<Vec<f64>, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Empty);
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch size must be positive".into()));
    }
    let outputs = model.likelihood().outputs();
    let units = model.spec().units;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = model.mlp().layers();
    let all = model.params();
    let extractor = 2 * layers + 1;
    let mut params: Vec<Tensor> = all[..extractor].iter().map(|p| p.tensor.clone()).collect();
    let scale = (1.0 / units as f64).sqrt();
    params.push(Tensor::new(
        vec![units, outputs],
        (0..units * outputs).map(|_| rng.gen_range(-scale..scale)).collect(),
    )?);
    params.push(Tensor::zeros(&[outputs]));
    let mut roles = vec![UpdateRole::Decayed; params.len()];
    roles[extractor + 1] = UpdateRole::Plain;
    let mut adam = AdamState::for_params(&params, cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let rest: Vec<Tensor> = all[extractor..].iter().map(|p| p.tensor.clone()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for (step, rows) in split_batches(&order, cfg.batch_size).enumerate() {
            let batch = train.subset(rows);
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let mlp_vars = crate::nn::MlpVars {
                weights: (0..layers).map(|l| vars[2 * l]).collect(),
                biases: (0..layers).map(|l| vars[2 * l + 1]).collect(),
            };
            let xv = tape.constant(batch.x.clone());
            let h = model.mlp().graph(&mut tape, &mlp_vars, xv).map_err(ModelError::from)?;
            let f = model.embedding().graph(&mut tape, vars[2 * layers], h).map_err(ModelError::from)?;
            let out = tape.matmul(f, vars[extractor])?;
            let out = tape.add_bias(out, vars[extractor + 1])?;
            let loss = match &batch.y {
                OwnedTargets::Real(y) => {
                    let yv = tape.constant(Tensor::column(y.clone()));
                    let r = tape.sub(out, yv)?;
                    let r2 = tape.square(r)?;
                    tape.mean(r2)?
                }
                OwnedTargets::Labels(y) => {
                    let ls = tape.log_softmax(out)?;
                    let mut onehot = Tensor::zeros(&[y.len(), outputs]);
                    for (i, &c) in y.iter().enumerate() {
                        onehot.data_mut()[i * outputs + c] = -1.0 / y.len() as f64;
                    }
                    let oh = tape.constant(onehot);
                    let picked = tape.mul(ls, oh)?;
                    tape.sum(picked)?
                }
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    term: "pre-training loss".into(),
                });
            }
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
            adam.step(&mut params, &grads, &roles)?;
            total += value;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    let mut merged: Vec<Tensor> = params[..extractor].to_vec();
    merged.extend(rest);
    model.assign(&merged)?;
    Ok(losses)
}

/// One cross-validation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Shuffled `k`-fold split; the first `n mod k` folds get one extra item.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>, TrainError> {
    if k < 2 || k > n {
        return Err(TrainError::Folds { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let valid = order[start..start + size].to_vec();
        let train = order[..start].iter().chain(&order[start + size..]).copied().collect();
        folds.push(Fold { train, valid });
        start += size;
    }
    Ok(folds)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nlpd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ece: Option<f64>,
    pub seconds: f64,
}

pub fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum();
    (s / y.len() as f64).sqrt()
}

/// Mean negative log predictive density of `N(mean, var)`.
pub fn nlpd(mean: &[f64], var: &[f64], y: &[f64]) -> f64 {
    let s: f64 = mean
        .iter()
        .zip(var)
        .zip(y)
        .map(|((m, v), t)| 0.5 * (2.0 * PI * v).ln() + (t - m) * (t - m) / (2.0 * v))
        .sum();
    s / y.len() as f64
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    hits as f64 / labels.len() as f64
}

pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let s: f64 = probs.iter().zip(labels).map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln()).sum();
    s / labels.len() as f64
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> f64 {
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    let mut hit = vec![0.0; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let c = argmax(p);
        let confidence = p[c];
        let b = ((confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += confidence;
        hit[b] += f64::from(u8::from(c == y));
    }
    let n = labels.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hit[b] - conf[b]).abs() / n)
        .sum()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Test metrics. `data` holds model-scale features and original-unit
/// targets; `scaler` maps regression outputs back to those units.
pub fn evaluate(model: &DakModel, data: &TabularDataset, scaler: &TargetScaler, seed: u64) -> Result<Metrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    let start = Instant::now();
    let mut m = Metrics::default();
    match (&data.y, *model.likelihood()) {
        (OwnedTargets::Real(y), LikelihoodConfig::GaussianRegression { noise_variance }) => {
            let (mean, var) = model.predict_moments(&data.x)?;
            let mean: Vec<f64> = mean.iter().map(|&v| scaler.inverse(v)).collect();
            let var: Vec<f64> = var.iter().map(|&v| (v + noise_variance) * scaler.std * scaler.std).collect();
            m.rmse = Some(rmse(&mean, y));
            m.nlpd = Some(nlpd(&mean, &var, y));
        }
        (OwnedTargets::Labels(y), LikelihoodConfig::SoftmaxClassification { .. }) => {
            let probs = model.class_probabilities(&data.x, PREDICTIVE_SAMPLES, seed)?;
            m.accuracy = Some(accuracy(&probs, y));
            m.nll = Some(nll(&probs, y));
            m.ece = Some(ece(&probs, y, ECE_BINS));
        }
        _ => {
            return Err(TrainError::Config("target kind does not match likelihood".into()));
        }
    }
    m.seconds = start.elapsed().as_secs_f64();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Domain;
    use crate::head::Squash;
    use crate::model::ModelSpec;

    fn toy_data(n: usize, seed: u64) -> TabularDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (2.0 * x).sin() + 0.05 * rng.gen_range(-1.0..1.0)).collect();
        TabularDataset::new(
            vec!["x".into(), "y".into()],
            Tensor::new(vec![n, 1], xs).unwrap(),
            OwnedTargets::Real(ys),
        )
        .unwrap()
    }

    fn spec(lik: LikelihoodConfig) -> ModelSpec {
        ModelSpec {
            widths: vec![1, 16, 8],
            units: 2,
            level: 3,
            domain: Domain::unit(),
            lengthscale: 1.0,
            squash: Squash::Sigmoid,
            likelihood: lik,
        }
    }

    #[test]
    fn adam_zero_gradient_only_decays() {
        let mut p = vec![Tensor::column(vec![1.0, -2.0]), Tensor::column(vec![3.0])];
        let g = vec![Tensor::zeros(&[2, 1]), Tensor::zeros(&[1, 1])];
        let mut adam = AdamState::for_params(&p, 0.1, 0.0);
        for _ in 0..10 {
            adam.step(&mut p, &g, &[UpdateRole::Decayed, UpdateRole::Plain]).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        let mut adam = AdamState::for_params(&p, 0.1, 0.5);
        adam.step(&mut p, &g, &[UpdateRole::Decayed, UpdateRole::Plain]).unwrap();
        assert!((p[0].data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p[1].data(), &[3.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![Tensor::column(vec![0.0, 0.0])];
        let g = vec![Tensor::column(vec![3.0, -0.02])];
        let mut adam = AdamState::for_params(&p, 0.01, 0.0);
        adam.step(&mut p, &g, &[UpdateRole::Plain]).unwrap();
        assert!((p[0].data()[0] + 0.01).abs() < 1e-8);
        assert!((p[0].data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut adam = AdamState::for_params(&p, 0.05, 0.0);
        for _ in 0..2000 {
            let x = p[0].item();
            let g = vec![Tensor::scalar(2.0 * (x - 3.0))];
            adam.step(&mut p, &g, &[UpdateRole::Plain]).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = vec![Tensor::column(vec![0.0, 0.0])];
        let mut adam = AdamState::for_params(&p, 0.01, 0.0);
        assert!(adam.step(&mut p, &[Tensor::scalar(1.0)], &[UpdateRole::Plain]).is_err());
    }

    #[test]
    fn kfold_examples() {
        let folds = kfold(10, 5, 3).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.valid.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.valid.len() == 2 && f.train.len() == 8));
        assert_eq!(folds, kfold(10, 5, 3).unwrap());
        let sizes: Vec<usize> = kfold(7, 5, 0).unwrap().iter().map(|f| f.valid.len()).collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        assert!(kfold(3, 5, 0).is_err());
        assert!(kfold(3, 1, 0).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((nlpd(&[0.0, 1.0], &[1.0, 1.0], &[0.0, 1.0]) - 0.918_938_533_204_672_7).abs() < 1e-15);
        let uniform = vec![vec![0.1; 10]; 20];
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        // ties resolve to class 0, which is right for 2 of the 20
        assert!((accuracy(&uniform, &labels) - 0.1).abs() < 1e-15);
        assert!((nll(&uniform, &labels) - 10f64.ln()).abs() < 1e-12);
        let e = ece(&uniform, &labels, ECE_BINS);
        assert!(e.abs() < 1e-12, "{e}");
        let sure = vec![vec![1.0, 0.0]; 4];
        assert!((ece(&sure, &[0, 0, 1, 1], ECE_BINS) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = toy_data(10, 0);
        let mut model = DakModel::new(spec(LikelihoodConfig::regression(0.01).unwrap()), 0).unwrap();
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(fit(&mut model, &data, None, &cfg).unwrap().is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn fit_improves_elbo_and_is_deterministic() {
        let data = toy_data(30, 1);
        let cfg = TrainConfig {
            epochs: 150,
            batch_size: 30,
            lr: 0.01,
            weight_decay: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = DakModel::new(spec(LikelihoodConfig::regression(0.01).unwrap()), 2).unwrap();
            let h = fit(&mut model, &data, None, &cfg).unwrap();
            (model, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(m1, m2);
        let strip = |h: &[EpochRecord]| h.iter().map(|r| (r.elbo, r.ell, r.kl)).collect::<Vec<_>>();
        assert_eq!(strip(&h1), strip(&h2));
        assert!(h1.last().unwrap().elbo > h1[0].elbo);
    }

    #[test]
    fn fine_tune_freezes_extractor() {
        let data = toy_data(20, 2);
        let mut model = DakModel::new(spec(LikelihoodConfig::regression(0.05).unwrap()), 3).unwrap();
        let checksum = |m: &DakModel| {
            m.params()
                .into_iter()
                .filter(|p| p.kind.is_deterministic())
                .map(|p| p.tensor)
                .collect::<Vec<_>>()
        };
        let before = checksum(&model);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 7,
            mode: TrainMode::FineTune,
            mc_samples: 3,
            ..TrainConfig::default()
        };
        fit(&mut model, &data, None, &cfg).unwrap();
        assert_eq!(checksum(&model), before);
    }

    #[test]
    fn pretrain_reduces_loss() {
        let data = toy_data(40, 3);
        let mut model = DakModel::new(spec(LikelihoodConfig::regression(0.05).unwrap()), 4).unwrap();
        let variational: Vec<Tensor> =
            model.params().into_iter().filter(|p| !p.kind.is_deterministic()).map(|p| p.tensor).collect();
        let cfg = PretrainConfig {
            epochs: 200,
            batch_size: 40,
            lr: 0.01,
            weight_decay: 0.0,
            seed: 1,
        };
        let losses = pretrain(&mut model, &data, &cfg).unwrap();
        assert!(losses.last().unwrap() < &(0.5 * losses[0]));
        let after: Vec<Tensor> =
            model.params().into_iter().filter(|p| !p.kind.is_deterministic()).map(|p| p.tensor).collect();
        assert_eq!(after, variational);
    }

    #[test]
    fn classification_requires_mc() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(&LikelihoodConfig::classification(3).unwrap()).is_err());
    }

    #[test]
    fn evaluate_does_not_mutate() {
        let data = toy_data(12, 4);
        let model = DakModel::new(spec(LikelihoodConfig::regression(0.05).unwrap()), 4).unwrap();
        let before = model.clone();
        let m = evaluate(&model, &data, &TargetScaler::identity(), 0).unwrap();
        assert!(m.rmse.unwrap() >= 0.0 && m.nlpd.unwrap().is_finite());
        assert_eq!(model, before);
    }

    #[test]
    fn nan_is_reported() {
        let mut data = toy_data(8, 5);
        if let OwnedTargets::Real(y) = &mut data.y {
            y[3] = 1e200;
        }
        let mut model = DakModel::new(spec(LikelihoodConfig::regression(1e-300).unwrap()), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let err = fit(&mut model, &data, None, &cfg).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    }
}
