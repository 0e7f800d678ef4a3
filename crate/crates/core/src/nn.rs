//! ReLU multilayer perceptron, linear embedding and squash.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{matmul_raw, AutodiffError, Tape, Tensor, Var};
use crate::grid::Domain;
use crate::head::Squash;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("layer widths must be nonempty and positive, got {0:?}")]
    Widths(Vec<usize>),
    #[error("input has {got} columns, network expects {expected}")]
    Input { expected: usize, got: usize },
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    Parameter {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Layers `widths[0] → … → widths[k]`; ReLU between layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    /// `[fan_in, fan_out]` per layer.
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Tape handles for an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

fn check_widths(widths: &[usize]) -> Result<(), NnError> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(NnError::Widths(widths.to_vec()));
    }
    Ok(())
}

impl Mlp {
    /// He-scaled Gaussian weights, zero biases. A single width is the
    /// identity map with no parameters.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self, NnError> {
        check_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            weights.push(Tensor::new(vec![fan_in, fan_out], data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(widths: &[usize], weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self, NnError> {
        check_widths(widths)?;
        let layers = widths.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(NnError::Widths(widths.to_vec()));
        }
        for (l, pair) in widths.windows(2).enumerate() {
            if weights[l].shape() != pair {
                return Err(NnError::Parameter {
                    name: format!("weight {l}"),
                    expected: pair.to_vec(),
                    got: weights[l].shape().to_vec(),
                });
            }
            if biases[l].shape() != [pair[1]] {
                return Err(NnError::Parameter {
                    name: format!("bias {l}"),
                    expected: vec![pair[1]],
                    got: biases[l].shape().to_vec(),
                });
            }
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("nonempty widths")
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Tensor] {
        &mut self.biases
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize, NnError> {
        let (n, d) = x.dims2()?;
        if d != self.input_dim() {
            return Err(NnError::Input {
                expected: self.input_dim(),
                got: d,
            });
        }
        Ok(n)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let n = self.check_input(x)?;
        let mut h = x.data().to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let mut next = matmul_raw(&h, w.data(), n, fan_in, fan_out);
            let last = l + 1 == self.layers();
            for row in next.chunks_mut(fan_out) {
                for (v, bias) in row.iter_mut().zip(b.data()) {
                    *v += bias;
                    if !last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = next;
        }
        Ok(Tensor::new(vec![n, self.output_dim()], h)?)
    }

    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> MlpVars {
        let mut put = |t: &Tensor| if frozen { tape.constant(t.clone()) } else { tape.leaf(t.clone()) };
        MlpVars {
            weights: self.weights.iter().map(&mut put).collect(),
            biases: self.biases.iter().map(&mut put).collect(),
        }
    }

    pub fn graph(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var, NnError> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        for l in 0..self.layers() {
            let z = tape.matmul(h, vars.weights[l])?;
            let z = tape.add_bias(z, vars.biases[l])?;
            h = if l + 1 == self.layers() { z } else { tape.relu(z)? };
        }
        Ok(h)
    }
}

/// Bias-free linear map `R^{D_w} → R^P` followed by a squash into the grid domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    /// `[D_w, P]`
    weight: Tensor,
    squash: Squash,
    domain: Domain,
}

impl Embedding {
    /// Weights drawn from `N(0, 1/D_w)`.
    pub fn init(input: usize, units: usize, squash: Squash, domain: Domain, seed: u64) -> Result<Self, NnError> {
        check_widths(&[input, units])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / input as f64).sqrt()).expect("positive std");
        let data = (0..input * units).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            weight: Tensor::new(vec![input, units], data)?,
            squash,
            domain,
        })
    }

    pub fn from_parts(weight: Tensor, squash: Squash, domain: Domain) -> Result<Self, NnError> {
        let (d, p) = weight.dims2()?;
        check_widths(&[d, p])?;
        Ok(Self { weight, squash, domain })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn squash(&self) -> Squash {
        self.squash
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor, NnError> {
        let (n, d) = h.dims2()?;
        if d != self.input_dim() {
            return Err(NnError::Input {
                expected: self.input_dim(),
                got: d,
            });
        }
        let mut out = matmul_raw(h.data(), self.weight.data(), n, d, self.units());
        for v in &mut out {
            *v = self.squash.apply(*v, self.domain);
        }
        Ok(Tensor::new(vec![n, self.units()], out)?)
    }

    pub fn graph(&self, tape: &mut Tape, weight: Var, h: Var) -> Result<Var, NnError> {
        let z = tape.matmul(h, weight)?;
        Ok(self.squash.graph(tape, z, self.domain)?)
    }
}

/// `squash(MLP(X) · W)`, the `[N, P]` features fed to the head.
pub fn extract(mlp: &Mlp, emb: &Embedding, x: &Tensor) -> Result<Tensor, NnError> {
    if mlp.output_dim() != emb.input_dim() {
        return Err(NnError::Input {
            expected: emb.input_dim(),
            got: mlp.output_dim(),
        });
    }
    emb.forward(&mlp.forward(x)?)
}
