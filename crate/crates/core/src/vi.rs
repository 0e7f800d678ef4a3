//! Evidence lower bound: expected log-likelihood and KL terms.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Tape, Tensor, Var};
use crate::head::{draw_noise, DakHead, HeadError, HeadVars, VariationalGaussian};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViError {
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("noise variance must be positive and finite, got {0}")]
    NoiseVariance(f64),
    #[error("classification needs at least two classes, got {0}")]
    Classes(usize),
    #[error("the closed-form expected log-likelihood exists only for Gaussian regression")]
    ClosedFormNeedsRegression,
    #[error("{0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("variances must be positive")]
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LikelihoodConfig {
    GaussianRegression { noise_variance: f64 },
    SoftmaxClassification { classes: usize },
}

impl LikelihoodConfig {
    pub fn regression(noise_variance: f64) -> Result<Self, ViError> {
        if !(noise_variance > 0.0 && noise_variance.is_finite()) {
            return Err(ViError::NoiseVariance(noise_variance));
        }
        Ok(Self::GaussianRegression { noise_variance })
    }

    pub fn classification(classes: usize) -> Result<Self, ViError> {
        if classes < 2 {
            return Err(ViError::Classes(classes));
        }
        Ok(Self::SoftmaxClassification { classes })
    }

    /// Number of heads (output functions) the likelihood consumes.
    pub fn outputs(&self) -> usize {
        match *self {
            Self::GaussianRegression { .. } => 1,
            Self::SoftmaxClassification { classes } => classes,
        }
    }

    pub fn is_regression(&self) -> bool {
        matches!(self, Self::GaussianRegression { .. })
    }

    fn validate(&self) -> Result<(), ViError> {
        match *self {
            Self::GaussianRegression { noise_variance } => Self::regression(noise_variance).map(|_| ()),
            Self::SoftmaxClassification { classes } => Self::classification(classes).map(|_| ()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Targets<'a> {
    Real(&'a [f64]),
    Labels(&'a [usize]),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(y) => y.len(),
            Targets::Labels(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EllMode {
    ClosedForm,
    MonteCarlo { samples: usize },
}

impl EllMode {
    /// `0` selects the closed form.
    pub fn from_samples(samples: usize) -> Self {
        if samples == 0 {
            EllMode::ClosedForm
        } else {
            EllMode::MonteCarlo { samples }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub expected_log_likelihood: f64,
    pub kl: f64,
    pub elbo: f64,
    /// Per head: one entry per unit, then the bias.
    pub kl_terms: Vec<f64>,
}

impl ElboBreakdown {
    pub fn new(expected_log_likelihood: f64, kl_terms: Vec<f64>) -> Self {
        let kl: f64 = kl_terms.iter().sum();
        Self {
            expected_log_likelihood,
            kl,
            elbo: expected_log_likelihood - kl,
            kl_terms,
        }
    }
}

/// `KL(q ‖ p)` between diagonal Gaussians with log-variance parameters.
pub fn kl_diag_gaussians(q: &VariationalGaussian, p: &VariationalGaussian) -> Result<f64, ViError> {
    if q.dim() != p.dim() {
        return Err(ViError::Shape(format!("KL between dims {} and {}", q.dim(), p.dim())));
    }
    let mut total = 0.0;
    for i in 0..q.dim() {
        let (vq, vp) = (q.variance(i), p.variance(i));
        if !(vq > 0.0 && vp > 0.0) {
            return Err(ViError::Variance);
        }
        let d = q.mean()[i] - p.mean()[i];
        total += vq / vp + d * d / vp - (q.log_var()[i] - p.log_var()[i]) - 1.0;
    }
    Ok(0.5 * total)
}

/// KL of each unit posterior and the bias posterior against the standard prior.
pub fn head_kl_terms(head: &DakHead) -> Result<Vec<f64>, ViError> {
    let prior = VariationalGaussian::standard(head.grid_size());
    let mut out = Vec::with_capacity(head.units() + 1);
    for unit in head.unit_posteriors() {
        out.push(kl_diag_gaussians(unit, &prior)?);
    }
    out.push(kl_diag_gaussians(head.bias(), &VariationalGaussian::standard(1))?);
    Ok(out)
}

fn gaussian_const(n: usize, noise_variance: f64) -> f64 {
    -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * n as f64 * noise_variance.ln()
}

fn check_targets(heads: &[DakHead], features: &Tensor, targets: Targets, lik: &LikelihoodConfig) -> Result<usize, ViError> {
    lik.validate()?;
    let (n, _) = features.dims2()?;
    if targets.len() != n {
        return Err(ViError::Shape(format!("{} targets for {n} rows", targets.len())));
    }
    if heads.len() != lik.outputs() {
        return Err(ViError::Shape(format!(
            "likelihood needs {} heads, got {}",
            lik.outputs(),
            heads.len()
        )));
    }
    match (targets, lik) {
        (Targets::Real(_), LikelihoodConfig::GaussianRegression { .. }) => Ok(n),
        (Targets::Labels(labels), LikelihoodConfig::SoftmaxClassification { classes }) => {
            if let Some(&label) = labels.iter().find(|&&l| l >= *classes) {
                return Err(ViError::Label { label, classes: *classes });
            }
            Ok(n)
        }
        _ => Err(ViError::Shape("target kind does not match likelihood".into())),
    }
}

/// `E_q[log N(y | f, σ_f²)]` from predictive moments.
pub fn gaussian_ell_from_moments(y: &[f64], mean: &[f64], var: &[f64], noise_variance: f64) -> f64 {
    let sq: f64 = y
        .iter()
        .zip(mean.iter().zip(var))
        .map(|(yi, (m, v))| (yi - m) * (yi - m) + v)
        .sum();
    gaussian_const(y.len(), noise_variance) - sq / (2.0 * noise_variance)
}

pub fn expected_loglik_closed(
    head: &DakHead,
    features: &Tensor,
    y: &[f64],
    lik: &LikelihoodConfig,
) -> Result<f64, ViError> {
    let LikelihoodConfig::GaussianRegression { noise_variance } = *lik else {
        return Err(ViError::ClosedFormNeedsRegression);
    };
    check_targets(std::slice::from_ref(head), features, Targets::Real(y), lik)?;
    let (mean, var) = head.forward_closed_form(features)?;
    Ok(gaussian_ell_from_moments(y, &mean, &var, noise_variance))
}

/// Full-data log-likelihood of each Monte-Carlo draw; the expected
/// log-likelihood estimate is their mean.
pub fn loglik_per_sample(
    heads: &[DakHead],
    features: &Tensor,
    targets: Targets,
    lik: &LikelihoodConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>, ViError> {
    if samples == 0 {
        return Err(ViError::ZeroSamples);
    }
    let n = check_targets(heads, features, targets, lik)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims: Vec<usize> = heads.iter().map(|h| h.units() * h.grid_size()).collect();
    let noise = draw_noise(&dims, samples, &mut rng);
    let mut draws = Vec::with_capacity(heads.len());
    for (head, noise) in heads.iter().zip(&noise) {
        let phi = head.basis().activations(features)?;
        draws.push(head.samples_from_activations(&phi, noise));
    }
    let mut out = Vec::with_capacity(samples);
    match (targets, *lik) {
        (Targets::Real(y), LikelihoodConfig::GaussianRegression { noise_variance }) => {
            let c = gaussian_const(n, noise_variance);
            for s in 0..samples {
                let f = draws[0].row(s);
                let sq: f64 = y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
                out.push(c - sq / (2.0 * noise_variance));
            }
        }
        (Targets::Labels(labels), LikelihoodConfig::SoftmaxClassification { classes }) => {
            let mut logits = vec![0.0; classes];
            for s in 0..samples {
                let mut total = 0.0;
                for (i, &label) in labels.iter().enumerate() {
                    for (c, l) in logits.iter_mut().enumerate() {
                        *l = draws[c].at(s, i);
                    }
                    total += logits[label] - autodiff::log_sum_exp(&logits);
                }
                out.push(total);
            }
        }
        _ => unreachable!("checked by check_targets"),
    }
    Ok(out)
}

pub fn expected_loglik_mc(
    heads: &[DakHead],
    features: &Tensor,
    targets: Targets,
    lik: &LikelihoodConfig,
    samples: usize,
    seed: u64,
) -> Result<f64, ViError> {
    let per = loglik_per_sample(heads, features, targets, lik, samples, seed)?;
    Ok(per.iter().sum::<f64>() / samples as f64)
}

/// ELBO on a minibatch of `features.rows` out of `data_size` points. The
/// likelihood term is scaled by `data_size / batch`; KL enters once.
pub fn elbo(
    heads: &[DakHead],
    features: &Tensor,
    targets: Targets,
    lik: &LikelihoodConfig,
    mode: EllMode,
    data_size: usize,
    seed: u64,
) -> Result<ElboBreakdown, ViError> {
    let n = check_targets(heads, features, targets, lik)?;
    let ell = match mode {
        EllMode::ClosedForm => {
            let Targets::Real(y) = targets else {
                return Err(ViError::ClosedFormNeedsRegression);
            };
            expected_loglik_closed(&heads[0], features, y, lik)?
        }
        EllMode::MonteCarlo { samples } => expected_loglik_mc(heads, features, targets, lik, samples, seed)?,
    };
    let scale = if n == 0 { 0.0 } else { data_size as f64 / n as f64 };
    let mut kl_terms = Vec::new();
    for head in heads {
        kl_terms.extend(head_kl_terms(head)?);
    }
    Ok(ElboBreakdown::new(scale * ell, kl_terms))
}

/// Graph for `½ Σ (exp(s) + m² − s − 1)`, the KL to a standard normal.
pub fn kl_standard_graph(tape: &mut Tape, mean: Var, log_var: Var) -> Result<Var, AutodiffError> {
    let n = tape.value(mean).len() as f64;
    let e = tape.exp(log_var)?;
    let m2 = tape.square(mean)?;
    let a = tape.add(e, m2)?;
    let b = tape.sub(a, log_var)?;
    let s = tape.sum(b)?;
    tape.scale(s, 0.5, -0.5 * n)
}

/// Total KL of one head as a scalar graph.
pub fn head_kl_graph(tape: &mut Tape, vars: &HeadVars) -> Result<Var, AutodiffError> {
    let w = kl_standard_graph(tape, vars.means, vars.log_vars)?;
    let b = kl_standard_graph(tape, vars.bias_mean, vars.bias_log_var)?;
    tape.add(w, b)
}

/// Closed-form expected log-likelihood graph from `[N, 1]` moment graphs,
/// multiplied by `scale`.
pub fn gaussian_ell_closed_graph(
    tape: &mut Tape,
    mean: Var,
    var: Var,
    y: &[f64],
    noise_variance: f64,
    scale: f64,
) -> Result<Var, AutodiffError> {
    let yv = tape.constant(Tensor::column(y.to_vec()));
    let r = tape.sub(yv, mean)?;
    let r2 = tape.square(r)?;
    let t = tape.add(r2, var)?;
    let s = tape.sum(t)?;
    tape.scale(
        s,
        -scale / (2.0 * noise_variance),
        scale * gaussian_const(y.len(), noise_variance),
    )
}

/// Monte-Carlo Gaussian expected log-likelihood from `[N, S]` draws.
pub fn gaussian_ell_mc_graph(
    tape: &mut Tape,
    draws: Var,
    y: &[f64],
    noise_variance: f64,
    scale: f64,
) -> Result<Var, AutodiffError> {
    let (n, s_count) = tape.value(draws).dims2()?;
    let mut yb = Vec::with_capacity(n * s_count);
    for &yi in y {
        yb.extend(std::iter::repeat(yi).take(s_count));
    }
    let yv = tape.constant(Tensor::new(vec![n, s_count], yb)?);
    let r = tape.sub(yv, draws)?;
    let r2 = tape.square(r)?;
    let s = tape.sum(r2)?;
    tape.scale(
        s,
        -scale / (2.0 * noise_variance * s_count as f64),
        scale * gaussian_const(n, noise_variance),
    )
}

/// Monte-Carlo softmax expected log-likelihood from one `[N, S]` draw graph
/// per class.
pub fn softmax_ell_mc_graph(
    tape: &mut Tape,
    draws: &[Var],
    labels: &[usize],
    scale: f64,
) -> Result<Var, AutodiffError> {
    let classes = draws.len();
    let (n, s_count) = tape.value(draws[0]).dims2()?;
    for &d in draws {
        let shape = tape.value(d).shape();
        if shape != [n, s_count] {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_ell",
                lhs: vec![n, s_count],
                rhs: shape.to_vec(),
            });
        }
    }
    if labels.len() != n {
        return Err(AutodiffError::ShapeMismatch {
            op: "softmax_ell",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&index) = labels.iter().find(|&&l| l >= classes) {
        return Err(AutodiffError::Index {
            op: "softmax_ell",
            index,
            extent: classes,
        });
    }
    let values: Vec<&Tensor> = draws.iter().map(|&d| tape.value(d)).collect();
    let mut total = 0.0;
    // softmax probabilities laid out [class][i * S + s]
    let mut probs = vec![vec![0.0; n * s_count]; classes];
    let mut logits = vec![0.0; classes];
    for i in 0..n {
        for s in 0..s_count {
            for c in 0..classes {
                logits[c] = values[c].at(i, s);
            }
            let lse = autodiff::log_sum_exp(&logits);
            total += logits[labels[i]] - lse;
            for c in 0..classes {
                probs[c][i * s_count + s] = (logits[c] - lse).exp();
            }
        }
    }
    let factor = scale / s_count as f64;
    let labels = labels.to_vec();
    let vjp = Box::new(move |g: &Tensor| {
        let g = g.item() * factor;
        probs
            .iter()
            .enumerate()
            .map(|(c, p)| {
                let data = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| {
                        let hit = if labels[k / s_count] == c { 1.0 } else { 0.0 };
                        g * (hit - pk)
                    })
                    .collect();
                Tensor::new(vec![n, s_count], data).expect("draw shape")
            })
            .collect()
    });
    tape.custom(draws, Tensor::scalar(factor * total), vjp)
}
