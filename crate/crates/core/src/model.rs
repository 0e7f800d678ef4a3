//! A complete model: extractor, embedding and one head per output.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Tape, Tensor, Var};
use crate::grid::Domain;
use crate::head::{draw_noise, DakHead, HeadError, HeadNoise, HeadVars, InducedBasis, Squash};
use crate::kernels::{KernelError, LaplaceKernel};
use crate::nn::{Embedding, Mlp, MlpVars, NnError};
use crate::vi::{self, ElboBreakdown, EllMode, LikelihoodConfig, Targets, ViError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Vi(#[from] ViError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("expected {expected} parameter tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("parameter {name}: shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid model spec: {0}")]
    Spec(String),
}

/// Architecture and likelihood of a [`DakModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// MLP widths from the input dimension to `D_w`.
    pub widths: Vec<usize>,
    /// Number of base GPs `P`.
    pub units: usize,
    pub level: u32,
    pub domain: Domain,
    pub lengthscale: f64,
    pub squash: Squash,
    pub likelihood: LikelihoodConfig,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(ModelError::Spec(format!("bad widths {:?}", self.widths)));
        }
        if self.units == 0 {
            return Err(ModelError::Spec("need at least one unit".into()));
        }
        if self.squash.natural_domain() != self.domain {
            return Err(ModelError::Spec(format!(
                "squash {} needs domain ({}, {}), got ({}, {})",
                self.squash.name(),
                self.squash.natural_domain().lo(),
                self.squash.natural_domain().hi(),
                self.domain.lo(),
                self.domain.hi()
            )));
        }
        LaplaceKernel::new(self.lengthscale)?;
        match self.likelihood {
            LikelihoodConfig::GaussianRegression { noise_variance } => {
                LikelihoodConfig::regression(noise_variance)?;
            }
            LikelihoodConfig::SoftmaxClassification { classes } => {
                LikelihoodConfig::classification(classes)?;
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    /// MLP and embedding weights.
    Extractor,
    /// The per-unit scales `σ_p`.
    HeadScale,
    /// Means and log-variances of `q`.
    Variational,
}

impl ParamKind {
    pub fn is_deterministic(self) -> bool {
        !matches!(self, ParamKind::Variational)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Scalar graphs produced by [`DakModel::elbo_graph`]; `params` aligns with
/// [`DakModel::params`].
#[derive(Debug, Clone)]
pub struct ElboGraph {
    pub params: Vec<Var>,
    pub elbo: Var,
    pub ell: Var,
    pub kl: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DakModel {
    spec: ModelSpec,
    mlp: Mlp,
    embedding: Embedding,
    heads: Vec<DakHead>,
}

impl DakModel {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::init(&spec.widths, rng.gen())?;
        let embedding = Embedding::init(spec.feature_dim(), spec.units, spec.squash, spec.domain, rng.gen())?;
        let basis = Arc::new(InducedBasis::new(
            LaplaceKernel::new(spec.lengthscale)?,
            spec.level,
            spec.domain,
        )?);
        let heads = (0..spec.likelihood.outputs())
            .map(|_| DakHead::new(basis.clone(), spec.units))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            spec,
            mlp,
            embedding,
            heads,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn likelihood(&self) -> &LikelihoodConfig {
        &self.spec.likelihood
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn heads(&self) -> &[DakHead] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [DakHead] {
        &mut self.heads
    }

    /// `[N, P]` squashed features.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(crate::nn::extract(&self.mlp, &self.embedding, x)?)
    }

    /// Closed-form predictive mean and variance of the latent function
    /// (regression models).
    pub fn predict_moments(&self, x: &Tensor) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if !self.spec.likelihood.is_regression() {
            return Err(ViError::ClosedFormNeedsRegression.into());
        }
        Ok(self.heads[0].forward_closed_form(&self.features(x)?)?)
    }

    pub fn draw_noise(&self, samples: usize, seed: u64) -> Vec<HeadNoise> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims: Vec<usize> = self.heads.iter().map(|h| h.units() * h.grid_size()).collect();
        draw_noise(&dims, samples, &mut rng)
    }

    /// `[S, N]` draws of each output.
    pub fn predict_draws(&self, x: &Tensor, samples: usize, seed: u64) -> Result<Vec<Tensor>, ModelError> {
        if samples == 0 {
            return Err(HeadError::ZeroSamples.into());
        }
        let features = self.features(x)?;
        let phi = self.heads[0].basis().activations(&features)?;
        let noise = self.draw_noise(samples, seed);
        Ok(self
            .heads
            .iter()
            .zip(&noise)
            .map(|(h, nz)| h.samples_from_activations(&phi, nz))
            .collect())
    }

    /// Monte-Carlo averaged softmax probabilities, `[N][C]`.
    pub fn class_probabilities(&self, x: &Tensor, samples: usize, seed: u64) -> Result<Vec<Vec<f64>>, ModelError> {
        let draws = self.predict_draws(x, samples, seed)?;
        let n = draws[0].shape()[1];
        let classes = draws.len();
        let mut out = vec![vec![0.0; classes]; n];
        let mut logits = vec![0.0; classes];
        for (i, probs) in out.iter_mut().enumerate() {
            for s in 0..samples {
                for c in 0..classes {
                    logits[c] = draws[c].at(s, i);
                }
                let lse = autodiff::log_sum_exp(&logits);
                for c in 0..classes {
                    probs[c] += (logits[c] - lse).exp() / samples as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn elbo(
        &self,
        x: &Tensor,
        targets: Targets,
        mode: EllMode,
        data_size: usize,
        seed: u64,
    ) -> Result<ElboBreakdown, ModelError> {
        let features = self.features(x)?;
        Ok(vi::elbo(&self.heads, &features, targets, &self.spec.likelihood, mode, data_size, seed)?)
    }

    /// Every trainable tensor, in a fixed order.
    pub fn params(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for l in 0..self.mlp.layers() {
            out.push(NamedTensor {
                name: format!("mlp.{l}.weight"),
                kind: ParamKind::Extractor,
                tensor: self.mlp.weights()[l].clone(),
            });
            out.push(NamedTensor {
                name: format!("mlp.{l}.bias"),
                kind: ParamKind::Extractor,
                tensor: self.mlp.biases()[l].clone(),
            });
        }
        out.push(NamedTensor {
            name: "embed.weight".into(),
            kind: ParamKind::Extractor,
            tensor: self.embedding.weight().clone(),
        });
        for (c, head) in self.heads.iter().enumerate() {
            let means: Vec<f64> = head.unit_posteriors().iter().flat_map(|u| u.mean().to_vec()).collect();
            let log_vars: Vec<f64> = head.unit_posteriors().iter().flat_map(|u| u.log_var().to_vec()).collect();
            let entries = [
                ("scales", ParamKind::HeadScale, head.scales().to_vec()),
                ("means", ParamKind::Variational, means),
                ("log_vars", ParamKind::Variational, log_vars),
                ("bias_mean", ParamKind::Variational, head.bias().mean().to_vec()),
                ("bias_log_var", ParamKind::Variational, head.bias().log_var().to_vec()),
            ];
            for (name, kind, data) in entries {
                out.push(NamedTensor {
                    name: format!("head.{c}.{name}"),
                    kind,
                    tensor: Tensor::column(data),
                });
            }
        }
        out
    }

    /// Replaces every parameter; tensors in [`params`](Self::params) order.
    pub fn assign(&mut self, tensors: &[Tensor]) -> Result<(), ModelError> {
        let current = self.params();
        if tensors.len() != current.len() {
            return Err(ModelError::ParamCount {
                expected: current.len(),
                got: tensors.len(),
            });
        }
        for (cur, new) in current.iter().zip(tensors) {
            if cur.tensor.shape() != new.shape() {
                return Err(ModelError::ParamShape {
                    name: cur.name.clone(),
                    expected: cur.tensor.shape().to_vec(),
                    got: new.shape().to_vec(),
                });
            }
            if !new.all_finite() {
                return Err(ModelError::Spec(format!("parameter {} is not finite", cur.name)));
            }
        }
        let layers = self.mlp.layers();
        let mut it = tensors.iter();
        for l in 0..layers {
            self.mlp.weights_mut()[l] = it.next().expect("counted").clone();
            self.mlp.biases_mut()[l] = it.next().expect("counted").clone();
        }
        *self.embedding.weight_mut() = it.next().expect("counted").clone();
        for head in &mut self.heads {
            let scales = it.next().expect("counted");
            let means = it.next().expect("counted");
            let log_vars = it.next().expect("counted");
            let bias_mean = it.next().expect("counted");
            let bias_log_var = it.next().expect("counted");
            head.assign_flat(
                scales.data(),
                means.data(),
                log_vars.data(),
                bias_mean.item(),
                bias_log_var.item(),
            );
        }
        Ok(())
    }

    /// ELBO graph on a minibatch. Parameters whose kind is in `frozen`
    /// enter as constants. Monte-Carlo noise is drawn from `seed` exactly
    /// as in [`elbo`](Self::elbo).
    #[allow(clippy::too_many_arguments)]
    pub fn elbo_graph(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        targets: Targets,
        mode: EllMode,
        data_size: usize,
        seed: u64,
        frozen: &[ParamKind],
    ) -> Result<ElboGraph, ModelError> {
        let lik = self.spec.likelihood;
        let (n, _) = x.dims2()?;
        if targets.len() != n {
            return Err(ViError::Shape(format!("{} targets for {n} rows", targets.len())).into());
        }
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|p| {
                if frozen.contains(&p.kind) {
                    tape.constant(p.tensor)
                } else {
                    tape.leaf(p.tensor)
                }
            })
            .collect();
        let layers = self.mlp.layers();
        let mlp_vars = MlpVars {
            weights: (0..layers).map(|l| params[2 * l]).collect(),
            biases: (0..layers).map(|l| params[2 * l + 1]).collect(),
        };
        let emb_var = params[2 * layers];
        let head_vars: Vec<HeadVars> = (0..self.heads.len())
            .map(|c| {
                let b = 2 * layers + 1 + 5 * c;
                HeadVars {
                    scales: params[b],
                    means: params[b + 1],
                    log_vars: params[b + 2],
                    bias_mean: params[b + 3],
                    bias_log_var: params[b + 4],
                }
            })
            .collect();

        let xv = tape.constant(x.clone());
        let h = self.mlp.graph(tape, &mlp_vars, xv)?;
        let f = self.embedding.graph(tape, emb_var, h)?;
        let phi = self.heads[0].basis().activation_graph(tape, f)?;
        let scale = if n == 0 { 0.0 } else { data_size as f64 / n as f64 };

        let ell = match (mode, targets, lik) {
            (EllMode::ClosedForm, Targets::Real(y), LikelihoodConfig::GaussianRegression { noise_variance }) => {
                let (mean, var) = self.heads[0].closed_form_graph(tape, &head_vars[0], phi)?;
                vi::gaussian_ell_closed_graph(tape, mean, var, y, noise_variance, scale)?
            }
            (EllMode::ClosedForm, _, _) => return Err(ViError::ClosedFormNeedsRegression.into()),
            (EllMode::MonteCarlo { samples }, _, _) => {
                if samples == 0 {
                    return Err(ViError::ZeroSamples.into());
                }
                let noise = self.draw_noise(samples, seed);
                let draws = self
                    .heads
                    .iter()
                    .zip(&head_vars)
                    .zip(&noise)
                    .map(|((head, vars), nz)| head.mc_graph(tape, vars, phi, nz))
                    .collect::<Result<Vec<_>, _>>()?;
                match (targets, lik) {
                    (Targets::Real(y), LikelihoodConfig::GaussianRegression { noise_variance }) => {
                        vi::gaussian_ell_mc_graph(tape, draws[0], y, noise_variance, scale)?
                    }
                    (Targets::Labels(labels), LikelihoodConfig::SoftmaxClassification { classes }) => {
                        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                            return Err(ViError::Label { label, classes }.into());
                        }
                        vi::softmax_ell_mc_graph(tape, &draws, labels, scale)?
                    }
                    _ => return Err(ViError::Shape("target kind does not match likelihood".into()).into()),
                }
            }
        };
        let mut kl = vi::head_kl_graph(tape, &head_vars[0])?;
        for vars in &head_vars[1..] {
            let k = vi::head_kl_graph(tape, vars)?;
            kl = tape.add(kl, k)?;
        }
        let elbo = tape.sub(ell, kl)?;
        Ok(ElboGraph { params, elbo, ell, kl })
    }
}
