//! The additive GP head compiled into a sparse Bayesian linear layer.
//!
//! Each of the `P` base GPs is replaced by its interpolant on a shared
//! dyadic grid `U`. Writing that interpolant through the inverse Cholesky
//! factor `R` of `k(U, U)` gives the kernel activation
//! `φ(h) = k(h, U) R ∈ R^M`, and the unit becomes `φ(h)ᵀ z_p` with
//! `z_p ~ N(0, I)` under the prior. The head output is
//! `f(x) = Σ_p σ_p φ(h_p(x))ᵀ z_p + μ`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Tape, Tensor, Var};
use crate::grid::{inverse_chol_factor, sorted_dyadic, Domain, DyadicGrid, GridError, SparseUpperFactor};
use crate::kernels::LaplaceKernel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("features must be finite")]
    NonFiniteFeatures,
    #[error("features have {got} columns, head has {expected} units")]
    UnitMismatch { expected: usize, got: usize },
    #[error("mean and log-variance lengths differ ({mean} vs {log_var})")]
    VariationalShape { mean: usize, log_var: usize },
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("factor dimension {factor} does not match grid size {grid}")]
    FactorMismatch { factor: usize, grid: usize },
    #[error("head needs at least one unit")]
    NoUnits,
}

/// Monotone map of R into a grid domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Squash {
    /// Logistic sigmoid rescaled onto the domain, paired with `(0, 1)`.
    Sigmoid,
    /// `tanh` rescaled onto the domain, paired with `(−1, 1)`.
    ScaledTanh,
}

/// Relative margin kept between squashed features and the domain ends, so
/// saturated sigmoid/tanh values stay strictly inside.
const SQUASH_MARGIN: f64 = 1e-12;

impl Squash {
    fn affine(domain: Domain) -> (f64, f64) {
        let factor = 0.5 * domain.width() * (1.0 - 2.0 * SQUASH_MARGIN);
        (factor, 0.5 * (domain.lo() + domain.hi()))
    }

    pub fn apply(self, x: f64, domain: Domain) -> f64 {
        let (factor, shift) = Self::affine(domain);
        let t = match self {
            Squash::Sigmoid => 2.0 * autodiff::sigmoid(x) + -1.0,
            Squash::ScaledTanh => x.tanh(),
        };
        factor * t + shift
    }

    /// Domain this squash is intended for.
    pub fn natural_domain(self) -> Domain {
        match self {
            Squash::Sigmoid => Domain::unit(),
            Squash::ScaledTanh => Domain::symmetric(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Squash::Sigmoid => "sigmoid",
            Squash::ScaledTanh => "scaled-tanh",
        }
    }

    /// Differentiable version on a tape; bit-identical to [`apply`](Self::apply).
    pub fn graph(self, tape: &mut Tape, x: Var, domain: Domain) -> Result<Var, AutodiffError> {
        let (factor, shift) = Self::affine(domain);
        let t = match self {
            Squash::Sigmoid => {
                let s = tape.sigmoid(x)?;
                tape.scale(s, 2.0, -1.0)?
            }
            Squash::ScaledTanh => tape.tanh(x)?,
        };
        tape.scale(t, factor, shift)
    }
}

/// Elementwise squash of raw features into the grid domain.
pub fn embed_feature_range(features: &Tensor, squash: Squash, domain: Domain) -> Tensor {
    let data = features.data().iter().map(|&x| squash.apply(x, domain)).collect();
    Tensor::new(features.shape().to_vec(), data).expect("shape preserved")
}

/// Kernel, grid and factor shared by every unit of one or more heads.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedBasis {
    kernel: LaplaceKernel,
    grid: DyadicGrid,
    factor: SparseUpperFactor,
}

impl InducedBasis {
    pub fn new(kernel: LaplaceKernel, level: u32, domain: Domain) -> Result<Self, HeadError> {
        let grid = sorted_dyadic(level, domain)?;
        let factor = inverse_chol_factor(&kernel, &grid)?;
        Ok(Self {
            kernel,
            grid,
            factor,
        })
    }

    /// Uses a caller-supplied factor; only dimensions are checked.
    pub fn with_factor(
        kernel: LaplaceKernel,
        grid: DyadicGrid,
        factor: SparseUpperFactor,
    ) -> Result<Self, HeadError> {
        if factor.dim() != grid.len() {
            return Err(HeadError::FactorMismatch {
                factor: factor.dim(),
                grid: grid.len(),
            });
        }
        Ok(Self {
            kernel,
            grid,
            factor,
        })
    }

    pub fn kernel(&self) -> &LaplaceKernel {
        &self.kernel
    }

    pub fn grid(&self) -> &DyadicGrid {
        &self.grid
    }

    pub fn factor(&self) -> &SparseUpperFactor {
        &self.factor
    }

    /// Grid size `M`.
    pub fn size(&self) -> usize {
        self.grid.len()
    }

    /// `φ(h) = k(h, U) R`.
    pub fn activation(&self, h: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.size()];
        let mut scratch = vec![0.0; self.size()];
        self.activation_into(h, &mut out, &mut scratch);
        out
    }

    /// Writes `φ(h)` into `out`, using `scratch` for `k(h, U)`.
    pub fn activation_into(&self, h: f64, out: &mut [f64], scratch: &mut [f64]) {
        for (s, &u) in scratch.iter_mut().zip(self.grid.points()) {
            *s = self.kernel.eval(h, u);
        }
        self.factor.transpose_apply_into(scratch, out);
    }

    /// `φ(h)` and `dφ/dh`. The derivative of `|h - u|` is taken as 0 at `h = u`.
    pub fn activation_with_derivative(
        &self,
        h: f64,
        phi: &mut [f64],
        dphi: &mut [f64],
        scratch: &mut [f64],
    ) {
        self.activation_into(h, phi, scratch);
        for (s, &u) in scratch.iter_mut().zip(self.grid.points()) {
            *s = self.kernel.d_first(h, u);
        }
        self.factor.transpose_apply_into(scratch, dphi);
    }

    /// Activations of an `[N, P]` feature matrix as `[N, P·M]`; the block
    /// `[i, p·M .. (p+1)·M]` holds `φ(features[i, p])`.
    pub fn activations(&self, features: &Tensor) -> Result<Tensor, HeadError> {
        let (n, p) = features.dims2()?;
        if !features.all_finite() {
            return Err(HeadError::NonFiniteFeatures);
        }
        let m = self.size();
        let mut data = vec![0.0; n * p * m];
        let mut scratch = vec![0.0; m];
        for (k, &h) in features.data().iter().enumerate() {
            self.activation_into(h, &mut data[k * m..(k + 1) * m], &mut scratch);
        }
        Ok(Tensor::new(vec![n, p * m], data)?)
    }

    /// Kernel activation as a differentiable op on an `[N, P]` input.
    pub fn activation_graph(&self, tape: &mut Tape, features: Var) -> Result<Var, HeadError> {
        let value = tape.value(features).clone();
        let (n, p) = value.dims2()?;
        if !value.all_finite() {
            return Err(HeadError::NonFiniteFeatures);
        }
        let m = self.size();
        let mut phi = vec![0.0; n * p * m];
        let mut dphi = vec![0.0; n * p * m];
        let mut scratch = vec![0.0; m];
        for (k, &h) in value.data().iter().enumerate() {
            let span = k * m..(k + 1) * m;
            let (dst, dst_d) = (&mut phi[span.clone()], &mut dphi[span]);
            self.activation_with_derivative(h, dst, dst_d, &mut scratch);
        }
        let out = Tensor::new(vec![n, p * m], phi)?;
        let vjp = Box::new(move |g: &Tensor| {
            let grad: Vec<f64> = g
                .data()
                .chunks(m)
                .zip(dphi.chunks(m))
                .map(|(gc, dc)| gc.iter().zip(dc).map(|(a, b)| a * b).sum())
                .collect();
            vec![Tensor::new(vec![n, p], grad).expect("input shape")]
        });
        Ok(tape.custom(&[features], out, vjp)?)
    }
}

/// Mean-field Gaussian `N(mean, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl VariationalGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self, HeadError> {
        if mean.len() != log_var.len() {
            return Err(HeadError::VariationalShape {
                mean: mean.len(),
                log_var: log_var.len(),
            });
        }
        Ok(Self { mean, log_var })
    }

    /// `N(0, I)` of the given dimension.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn mean_mut(&mut self) -> &mut [f64] {
        &mut self.mean
    }

    pub fn log_var_mut(&mut self) -> &mut [f64] {
        &mut self.log_var
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.log_var[i].exp()
    }
}

/// Standard-normal draws used by one Monte-Carlo pass over a head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNoise {
    samples: usize,
    /// `[S, P·M]` noise for the unit weights.
    pub z: Vec<f64>,
    /// `[S]` noise for the bias.
    pub mu: Vec<f64>,
}

impl HeadNoise {
    pub fn samples(&self) -> usize {
        self.samples
    }
}

/// Draws noise for several heads, sample-major: for each sample, each head
/// takes its `P·M` weight draws followed by one bias draw.
pub fn draw_noise(weight_dims: &[usize], samples: usize, rng: &mut ChaCha8Rng) -> Vec<HeadNoise> {
    let mut out: Vec<HeadNoise> = weight_dims
        .iter()
        .map(|&d| HeadNoise {
            samples,
            z: Vec::with_capacity(samples * d),
            mu: Vec::with_capacity(samples),
        })
        .collect();
    for _ in 0..samples {
        for (noise, &d) in out.iter_mut().zip(weight_dims) {
            noise.z.extend((0..d).map(|_| -> f64 { StandardNormal.sample(rng) }));
            let b: f64 = StandardNormal.sample(rng);
            noise.mu.push(b);
        }
    }
    out
}

/// P base-GP units over one shared [`InducedBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct DakHead {
    basis: Arc<InducedBasis>,
    scales: Vec<f64>,
    units: Vec<VariationalGaussian>,
    bias: VariationalGaussian,
}

/// Tape handles for the trainable parameters of one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// `[P, 1]`
    pub scales: Var,
    /// `[P·M, 1]`
    pub means: Var,
    /// `[P·M, 1]`
    pub log_vars: Var,
    /// `[1, 1]`
    pub bias_mean: Var,
    /// `[1, 1]`
    pub bias_log_var: Var,
}

impl DakHead {
    /// Scales `1/√P`; `q` equal to the prior.
    pub fn new(basis: Arc<InducedBasis>, units: usize) -> Result<Self, HeadError> {
        if units == 0 {
            return Err(HeadError::NoUnits);
        }
        let m = basis.size();
        Ok(Self {
            basis,
            scales: vec![1.0 / (units as f64).sqrt(); units],
            units: (0..units).map(|_| VariationalGaussian::standard(m)).collect(),
            bias: VariationalGaussian::standard(1),
        })
    }

    pub fn from_parts(
        basis: Arc<InducedBasis>,
        scales: Vec<f64>,
        units: Vec<VariationalGaussian>,
        bias: VariationalGaussian,
    ) -> Result<Self, HeadError> {
        if scales.is_empty() {
            return Err(HeadError::NoUnits);
        }
        if scales.len() != units.len() {
            return Err(HeadError::UnitMismatch {
                expected: scales.len(),
                got: units.len(),
            });
        }
        let m = basis.size();
        for u in &units {
            if u.dim() != m {
                return Err(HeadError::VariationalShape {
                    mean: u.dim(),
                    log_var: m,
                });
            }
        }
        if bias.dim() != 1 {
            return Err(HeadError::VariationalShape {
                mean: bias.dim(),
                log_var: 1,
            });
        }
        Ok(Self {
            basis,
            scales,
            units,
            bias,
        })
    }

    pub fn basis(&self) -> &Arc<InducedBasis> {
        &self.basis
    }

    pub fn units(&self) -> usize {
        self.scales.len()
    }

    pub fn grid_size(&self) -> usize {
        self.basis.size()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn scales_mut(&mut self) -> &mut [f64] {
        &mut self.scales
    }

    pub fn unit(&self, p: usize) -> &VariationalGaussian {
        &self.units[p]
    }

    pub fn unit_mut(&mut self, p: usize) -> &mut VariationalGaussian {
        &mut self.units[p]
    }

    pub fn unit_posteriors(&self) -> &[VariationalGaussian] {
        &self.units
    }

    pub fn bias(&self) -> &VariationalGaussian {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut VariationalGaussian {
        &mut self.bias
    }

    /// `φ(h)` for a single scalar input.
    pub fn kernel_activation(&self, h: f64) -> Vec<f64> {
        self.basis.activation(h)
    }

    fn check_features(&self, features: &Tensor) -> Result<usize, HeadError> {
        let (n, p) = features.dims2()?;
        if p != self.units() {
            return Err(HeadError::UnitMismatch {
                expected: self.units(),
                got: p,
            });
        }
        if !features.all_finite() {
            return Err(HeadError::NonFiniteFeatures);
        }
        Ok(n)
    }

    /// Predictive mean and variance from precomputed activations `[N, P·M]`.
    pub fn moments_from_activations(&self, phi: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let m = self.grid_size();
        let pm = self.units() * m;
        let rows = phi.len() / pm;
        let mut mean = vec![self.bias.mean[0]; rows];
        let mut var = vec![self.bias.variance(0); rows];
        for i in 0..rows {
            let row = &phi.data()[i * pm..(i + 1) * pm];
            for (p, unit) in self.units.iter().enumerate() {
                let block = &row[p * m..(p + 1) * m];
                let sigma = self.scales[p];
                let mut dot = 0.0;
                let mut quad = 0.0;
                for j in 0..m {
                    dot += block[j] * unit.mean[j];
                    quad += block[j] * block[j] * unit.log_var[j].exp();
                }
                mean[i] += sigma * dot;
                var[i] += sigma * sigma * quad;
            }
        }
        (mean, var)
    }

    /// Closed-form predictive moments of `f` at each row of `[N, P]` features.
    pub fn forward_closed_form(&self, features: &Tensor) -> Result<(Vec<f64>, Vec<f64>), HeadError> {
        self.check_features(features)?;
        let phi = self.basis.activations(features)?;
        Ok(self.moments_from_activations(&phi))
    }

    /// `[S, N]` reparameterised draws of `f` given activations and noise.
    pub fn samples_from_activations(&self, phi: &Tensor, noise: &HeadNoise) -> Tensor {
        let m = self.grid_size();
        let pm = self.units() * m;
        let rows = phi.len() / pm;
        let s_count = noise.samples;
        let mut weights = vec![0.0; pm];
        let mut out = Vec::with_capacity(s_count * rows);
        for s in 0..s_count {
            let eps = &noise.z[s * pm..(s + 1) * pm];
            for (p, unit) in self.units.iter().enumerate() {
                for j in 0..m {
                    let k = p * m + j;
                    let z = unit.mean[j] + (0.5 * unit.log_var[j]).exp() * eps[k];
                    weights[k] = self.scales[p] * z;
                }
            }
            let mu = self.bias.mean[0] + (0.5 * self.bias.log_var[0]).exp() * noise.mu[s];
            for i in 0..rows {
                let row = &phi.data()[i * pm..(i + 1) * pm];
                let f: f64 = row.iter().zip(&weights).map(|(a, b)| a * b).sum();
                out.push(f + mu);
            }
        }
        Tensor::new(vec![s_count, rows], out).expect("sample layout")
    }

    /// `S` Monte-Carlo draws of `f` at `[N, P]` features, as `[S, N]`.
    pub fn forward_mc(&self, features: &Tensor, samples: usize, seed: u64) -> Result<Tensor, HeadError> {
        if samples == 0 {
            return Err(HeadError::ZeroSamples);
        }
        self.check_features(features)?;
        let phi = self.basis.activations(features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = draw_noise(&[self.units() * self.grid_size()], samples, &mut rng);
        Ok(self.samples_from_activations(&phi, &noise[0]))
    }

    /// Stacks parameters as tape inputs (leaves, or constants when frozen).
    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> HeadVars {
        let mut put = |t: Tensor| if frozen { tape.constant(t) } else { tape.leaf(t) };
        let means: Vec<f64> = self.units.iter().flat_map(|u| u.mean.iter().copied()).collect();
        let log_vars: Vec<f64> = self.units.iter().flat_map(|u| u.log_var.iter().copied()).collect();
        HeadVars {
            scales: put(Tensor::column(self.scales.clone())),
            means: put(Tensor::column(means)),
            log_vars: put(Tensor::column(log_vars)),
            bias_mean: put(Tensor::column(self.bias.mean.clone())),
            bias_log_var: put(Tensor::column(self.bias.log_var.clone())),
        }
    }

    /// Writes flat parameter buffers (same layout as [`bind`](Self::bind)).
    pub fn assign_flat(
        &mut self,
        scales: &[f64],
        means: &[f64],
        log_vars: &[f64],
        bias_mean: f64,
        bias_log_var: f64,
    ) {
        let m = self.grid_size();
        self.scales.copy_from_slice(scales);
        for (p, unit) in self.units.iter_mut().enumerate() {
            unit.mean.copy_from_slice(&means[p * m..(p + 1) * m]);
            unit.log_var.copy_from_slice(&log_vars[p * m..(p + 1) * m]);
        }
        self.bias.mean[0] = bias_mean;
        self.bias.log_var[0] = bias_log_var;
    }

    /// `[P·M, P]` block indicator: row `p·M + j` has a one in column `p`.
    fn expansion(&self) -> Tensor {
        let m = self.grid_size();
        let p = self.units();
        let mut e = Tensor::zeros(&[p * m, p]);
        for unit in 0..p {
            for j in 0..m {
                e.data_mut()[(unit * m + j) * p + unit] = 1.0;
            }
        }
        e
    }

    /// Scales repeated per grid coordinate, `[P·M, 1]`.
    fn expanded_scales(&self, tape: &mut Tape, vars: &HeadVars) -> Result<Var, AutodiffError> {
        let e = tape.constant(self.expansion());
        tape.matmul(e, vars.scales)
    }

    /// Closed-form predictive mean and variance graphs, each `[N, 1]`.
    pub fn closed_form_graph(
        &self,
        tape: &mut Tape,
        vars: &HeadVars,
        phi: Var,
    ) -> Result<(Var, Var), AutodiffError> {
        let sig = self.expanded_scales(tape, vars)?;
        let w_mean = tape.mul(sig, vars.means)?;
        let raw_mean = tape.matmul(phi, w_mean)?;
        let mean = tape.add_bias(raw_mean, vars.bias_mean)?;

        let sig2 = tape.square(sig)?;
        let s = tape.exp(vars.log_vars)?;
        let w_var = tape.mul(sig2, s)?;
        let phi2 = tape.square(phi)?;
        let raw_var = tape.matmul(phi2, w_var)?;
        let bias_var = tape.exp(vars.bias_log_var)?;
        let var = tape.add_bias(raw_var, bias_var)?;
        Ok((mean, var))
    }

    /// Reparameterised sample graph `[N, S]` using fixed noise.
    pub fn mc_graph(
        &self,
        tape: &mut Tape,
        vars: &HeadVars,
        phi: Var,
        noise: &HeadNoise,
    ) -> Result<Var, AutodiffError> {
        let pm = self.units() * self.grid_size();
        let s_count = noise.samples;
        let ones = tape.constant(Tensor::filled(&[1, s_count], 1.0));

        // eps laid out [P·M, S]
        let mut eps = vec![0.0; pm * s_count];
        for s in 0..s_count {
            for k in 0..pm {
                eps[k * s_count + s] = noise.z[s * pm + k];
            }
        }
        let eps = tape.constant(Tensor::new(vec![pm, s_count], eps)?);

        let half = tape.scale(vars.log_vars, 0.5, 0.0)?;
        let std = tape.exp(half)?;
        let std_b = tape.matmul(std, ones)?;
        let shift = tape.mul(std_b, eps)?;
        let mean_b = tape.matmul(vars.means, ones)?;
        let z = tape.add(mean_b, shift)?;
        let sig = self.expanded_scales(tape, vars)?;
        let sig_b = tape.matmul(sig, ones)?;
        let w = tape.mul(sig_b, z)?;
        let f = tape.matmul(phi, w)?;

        let eps_mu = tape.constant(Tensor::new(vec![1, s_count], noise.mu.clone())?);
        let bhalf = tape.scale(vars.bias_log_var, 0.5, 0.0)?;
        let bstd = tape.exp(bhalf)?;
        let bstd_b = tape.matmul(bstd, ones)?;
        let bshift = tape.mul(bstd_b, eps_mu)?;
        let bmean_b = tape.matmul(vars.bias_mean, ones)?;
        let mu = tape.add(bmean_b, bshift)?;
        tape.add_bias(f, mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn basis(level: u32, theta: f64) -> Arc<InducedBasis> {
        Arc::new(InducedBasis::new(LaplaceKernel::new(theta).unwrap(), level, Domain::unit()).unwrap())
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn random_head(rng: &mut ChaCha8Rng, level: u32, p: usize) -> DakHead {
        let b = basis(level, 1.0);
        let m = b.size();
        let units = (0..p)
            .map(|_| {
                VariationalGaussian::new(
                    (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    (0..m).map(|_| rng.gen_range(-2.0..0.5)).collect(),
                )
                .unwrap()
            })
            .collect();
        let scales = (0..p).map(|_| rng.gen_range(0.2..1.2)).collect();
        let bias = VariationalGaussian::new(vec![rng.gen_range(-0.5..0.5)], vec![rng.gen_range(-2.0..0.0)]).unwrap();
        DakHead::from_parts(b, scales, units, bias).unwrap()
    }

    #[test]
    fn activation_reproduces_kernel_on_grid() {
        for level in 1..=6 {
            let b = basis(level, 1.0);
            let pts = b.grid().points().to_vec();
            let phis: Vec<Vec<f64>> = pts.iter().map(|&u| b.activation(u)).collect();
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    let k = b.kernel().eval(pts[i], pts[j]);
                    assert!((dot(&phis[i], &phis[j]) - k).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn single_point_activation() {
        let b = basis(1, 1.0);
        assert_eq!(b.activation(0.5), vec![1.0]);
    }

    #[test]
    fn activation_norm_bounded_by_prior_variance() {
        let b = basis(4, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let h: f64 = rng.gen_range(0.0..1.0);
            let phi = b.activation(h);
            assert!(dot(&phi, &phi) <= 1.0 + 1e-10);
        }
        // still total outside the domain
        let phi = b.activation(3.0);
        assert!(phi.iter().all(|v| v.is_finite()));
        assert!(dot(&phi, &phi) <= 1.0 + 1e-10);
    }

    #[test]
    fn approximation_error_shrinks_with_level() {
        let xs: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let mut prev = f64::INFINITY;
        for level in [2, 4, 6, 8] {
            let b = basis(level, 1.0);
            let phis: Vec<Vec<f64>> = xs.iter().map(|&x| b.activation(x)).collect();
            let mut worst: f64 = 0.0;
            for i in 0..xs.len() {
                for j in 0..xs.len() {
                    let err = (dot(&phis[i], &phis[j]) - b.kernel().eval(xs[i], xs[j])).abs();
                    worst = worst.max(err);
                }
            }
            assert!(worst <= prev + 1e-10, "L={level}: {worst} > {prev}");
            prev = worst;
        }
    }

    #[test]
    fn closed_form_examples() {
        let b = basis(3, 1.0);
        let head = DakHead::new(b.clone(), 2).unwrap();
        let feats = Tensor::new(vec![3, 2], vec![0.1, 0.9, 0.4, 0.5, 0.77, 0.2]).unwrap();
        let (mean, _) = head.forward_closed_form(&feats).unwrap();
        assert!(mean.iter().all(|&m| m == 0.0));

        let mut one = DakHead::new(b.clone(), 1).unwrap();
        one.scales_mut()[0] = 1.0;
        one.bias_mut().log_var_mut()[0] = -800.0;
        let f1 = Tensor::new(vec![2, 1], vec![0.3, 0.61]).unwrap();
        let (_, var) = one.forward_closed_form(&f1).unwrap();
        for (i, &h) in [0.3, 0.61].iter().enumerate() {
            let phi = b.activation(h);
            assert!((var[i] - dot(&phi, &phi)).abs() < 1e-14);
        }

        let bad = Tensor::new(vec![1, 2], vec![0.5, f64::NAN]).unwrap();
        assert_eq!(head.forward_closed_form(&bad), Err(HeadError::NonFiniteFeatures));
        let wrong = Tensor::new(vec![1, 3], vec![0.5; 3]).unwrap();
        assert!(matches!(head.forward_closed_form(&wrong), Err(HeadError::UnitMismatch { .. })));
    }

    #[test]
    fn mean_is_linear_in_variational_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut head = random_head(&mut rng, 3, 3);
        head.bias_mut().mean_mut()[0] = 0.0;
        let feats = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let (m1, _) = head.forward_closed_form(&feats).unwrap();
        for p in 0..3 {
            for v in head.unit_mut(p).mean_mut() {
                *v *= 2.0;
            }
        }
        let (m2, _) = head.forward_closed_form(&feats).unwrap();
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn degenerate_variances_collapse_samples_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = random_head(&mut rng, 3, 2);
        for p in 0..2 {
            head.unit_mut(p).log_var_mut().fill(-50.0);
        }
        head.bias_mut().log_var_mut()[0] = -50.0;
        let feats = Tensor::new(vec![3, 2], vec![0.2, 0.3, 0.5, 0.5, 0.9, 0.1]).unwrap();
        let (mean, _) = head.forward_closed_form(&feats).unwrap();
        let samples = head.forward_mc(&feats, 16, 4).unwrap();
        for s in 0..16 {
            for i in 0..3 {
                assert!((samples.at(s, i) - mean[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mc_is_deterministic_and_rejects_zero_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = random_head(&mut rng, 2, 2);
        let feats = Tensor::new(vec![2, 2], vec![0.2, 0.3, 0.5, 0.5]).unwrap();
        let a = head.forward_mc(&feats, 10, 77).unwrap();
        let b = head.forward_mc(&feats, 10, 77).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(head.forward_mc(&feats, 0, 1), Err(HeadError::ZeroSamples));
    }

    #[test]
    fn squash_examples() {
        assert_eq!(Squash::Sigmoid.apply(0.0, Domain::unit()), 0.5);
        assert_eq!(Squash::ScaledTanh.apply(0.0, Domain::symmetric()), 0.0);
        for x in [-1e300, -800.0, -30.0, -3.0, 0.1, 5.0, 30.0, 800.0, 1e300] {
            assert!(Domain::unit().contains_open(Squash::Sigmoid.apply(x, Domain::unit())));
            assert!(Domain::symmetric().contains_open(Squash::ScaledTanh.apply(x, Domain::symmetric())));
        }
        let t = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let e = embed_feature_range(&t, Squash::Sigmoid, Domain::unit());
        assert_eq!(e.data()[0], 0.5);
    }

    #[test]
    fn graph_matches_pure_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let head = random_head(&mut rng, 3, 3);
        let feats = Tensor::new(vec![5, 3], (0..15).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let (mean, var) = head.forward_closed_form(&feats).unwrap();

        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let vars = head.bind(&mut tape, false);
        let phi = head.basis().activation_graph(&mut tape, f).unwrap();
        let (gm, gv) = head.closed_form_graph(&mut tape, &vars, phi).unwrap();
        for i in 0..5 {
            assert!((tape.value(gm).data()[i] - mean[i]).abs() < 1e-12);
            assert!((tape.value(gv).data()[i] - var[i]).abs() < 1e-12);
        }

        let samples = head.forward_mc(&feats, 6, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise = draw_noise(&[3 * head.grid_size()], 6, &mut rng);
        let g = head.mc_graph(&mut tape, &vars, phi, &noise[0]).unwrap();
        for s in 0..6 {
            for i in 0..5 {
                assert!((tape.value(g).at(i, s) - samples.at(s, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activation_adjoint_matches_finite_differences() {
        let b = basis(4, 0.7);
        let x = Tensor::new(vec![3, 2], vec![0.13, 0.41, 0.66, 0.2, 0.93, 0.58]).unwrap();
        let bb = b.clone();
        let err = autodiff::grad_check(
            move |tape, v| {
                let phi = bb.activation_graph(tape, v).map_err(|_| AutodiffError::NonFinite { op: "phi" })?;
                let sq = tape.square(phi)?;
                let w = tape.constant(Tensor::new(
                    tape.value(sq).shape().to_vec(),
                    (0..tape.value(sq).len()).map(|i| 1.0 + 0.1 * i as f64).collect(),
                )?);
                let s = tape.mul(sq, w)?;
                let t = tape.sum(s)?;
                let lin = tape.mul(phi, w)?;
                let u = tape.sum(lin)?;
                tape.add(t, u)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "err = {err}");
    }
}
