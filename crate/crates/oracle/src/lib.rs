//! Dense reference implementations used to check the sparse model.
//!
//! Everything here is `O(N³)` and meant for tests and the `verify`
//! command: exact GP regression, dense Cholesky factors, Monte-Carlo
//! moment estimates, Gaussian KL with full covariances, the marginal
//! likelihood of the interpolated-prior model, and least squares.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use dak_core::head::DakHead;
use dak_core::{LaplaceKernel, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("matrix is not positive definite{0}")]
    NotPositiveDefinite(&'static str),
    #[error("need at least {need} samples, got {got}")]
    Samples { need: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Adds `1e-10 · trace / N` to the diagonal once, then factors.
fn jittered_cholesky(mut k: DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = k.nrows();
    if n == 0 || k.ncols() != n {
        return Err(OracleError::Dimension(format!("{}x{} is not a square matrix", k.nrows(), k.ncols())));
    }
    let jitter = 1e-10 * k.trace() / n as f64;
    for i in 0..n {
        k[(i, i)] += jitter;
    }
    k.cholesky().ok_or(OracleError::NotPositiveDefinite(" after jitter"))
}

/// `exp(−(x − y)²)`.
pub fn squared_exponential(x: f64, y: f64) -> f64 {
    (-(x - y) * (x - y)).exp()
}

pub type KernelFn = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Exact GP regression with an arbitrary positive-definite kernel.
pub struct DenseGp {
    kernel: KernelFn,
    noise_variance: f64,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl DenseGp {
    pub fn new(kernel: KernelFn, noise_variance: f64, x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(OracleError::Dimension(format!("{} inputs and {} targets", x.len(), y.len())));
        }
        Ok(Self {
            kernel,
            noise_variance,
            x,
            y,
        })
    }

    /// One-dimensional inputs with a scalar kernel.
    pub fn one_dim(
        kernel: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        noise_variance: f64,
        x: &[f64],
        y: &[f64],
    ) -> Result<Self> {
        Self::new(
            Box::new(move |a: &[f64], b: &[f64]| kernel(a[0], b[0])),
            noise_variance,
            x.iter().map(|&v| vec![v]).collect(),
            y.to_vec(),
        )
    }

    fn gram(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| (self.kernel)(&a[i], &b[j]))
    }

    fn factor(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let mut k = self.gram(&self.x, &self.x);
        for i in 0..k.nrows() {
            k[(i, i)] += self.noise_variance;
        }
        jittered_cholesky(k)
    }

    /// Posterior mean and covariance of the latent function at `x_star`.
    pub fn exact_posterior(&self, x_star: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let chol = self.factor()?;
        let ks = self.gram(x_star, &self.x);
        let kss = self.gram(x_star, x_star);
        let alpha = chol.solve(&DVector::from_column_slice(&self.y));
        let mean = &ks * alpha;
        let v = chol.solve(&ks.transpose());
        let cov = kss - &ks * v;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok((mean.iter().copied().collect(), cov))
    }

    /// `log N(y | 0, K + σ_f² I)`.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let chol = self.factor()?;
        Ok(gaussian_log_density(&chol, &self.y))
    }
}

fn gaussian_log_density(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * yv.dot(&alpha) - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// `[Lᵀ]⁻¹` for `K = L Lᵀ`: the upper-triangular `R` with `Rᵀ K R = I`.
pub fn dense_inverse_chol(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k.nrows() != k.ncols() || k.nrows() == 0 {
        return Err(OracleError::Dimension(format!("{}x{} is not a square matrix", k.nrows(), k.ncols())));
    }
    let chol = k.clone().cholesky().ok_or(OracleError::NotPositiveDefinite(""))?;
    let lt = chol.l().transpose();
    let n = k.nrows();
    lt.solve_upper_triangular(&DMatrix::identity(n, n))
        .ok_or(OracleError::NotPositiveDefinite(" (singular factor)"))
}

pub fn tensor_to_matrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2().expect("matrix tensor");
    DMatrix::from_row_slice(r, c, t.data())
}

/// One draw from `N(0, K(xs, xs))` (jittered).
pub fn gp_sample(kernel: impl Fn(f64, f64) -> f64, xs: &[f64], seed: u64) -> Result<Vec<f64>> {
    let k = DMatrix::from_fn(xs.len(), xs.len(), |i, j| kernel(xs[i], xs[j]));
    let chol = jittered_cholesky(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(xs.len(), |_, _| StandardNormal.sample(&mut rng));
    Ok((chol.l() * z).iter().copied().collect())
}

/// Sample moments with standard errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McMoments {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// `σ̂ / √S`.
    pub se_mean: f64,
    /// Jackknife standard error of `variance`; infinite when `S = 2`.
    pub se_variance: f64,
    pub samples: usize,
}

pub fn moments(xs: &[f64]) -> Result<McMoments> {
    let s = xs.len();
    if s < 2 {
        return Err(OracleError::Samples { need: 2, got: s });
    }
    let sf = s as f64;
    // Two-pass for accuracy.
    let mean = xs.iter().sum::<f64>() / sf;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let variance = ss / (sf - 1.0);
    let se_variance = if s < 3 {
        f64::INFINITY
    } else {
        // Leave-one-out variances in closed form.
        let loo: Vec<f64> = xs
            .iter()
            .map(|x| (ss - (x - mean) * (x - mean) * sf / (sf - 1.0)) / (sf - 2.0))
            .collect();
        let bar = loo.iter().sum::<f64>() / sf;
        ((sf - 1.0) / sf * loo.iter().map(|v| (v - bar) * (v - bar)).sum::<f64>()).sqrt()
    };
    Ok(McMoments {
        mean,
        variance,
        se_mean: (variance / sf).sqrt(),
        se_variance,
        samples: s,
    })
}

/// Moments of `S` draws of `sampler`, seeded.
pub fn mc_moments(mut sampler: impl FnMut(&mut ChaCha8Rng) -> f64, samples: usize, seed: u64) -> Result<McMoments> {
    if samples < 2 {
        return Err(OracleError::Samples { need: 2, got: samples });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..samples).map(|_| sampler(&mut rng)).collect();
    moments(&xs)
}

/// `KL(N(m_q, S_q) ‖ N(m_p, S_p))` with full covariances.
pub fn kl_gaussians_dense(mq: &[f64], sq: &DMatrix<f64>, mp: &[f64], sp: &DMatrix<f64>) -> Result<f64> {
    let k = mq.len();
    if mp.len() != k || sq.shape() != (k, k) || sp.shape() != (k, k) {
        return Err(OracleError::Dimension("KL operands disagree".into()));
    }
    let cp = sp.clone().cholesky().ok_or(OracleError::NotPositiveDefinite(" (prior)"))?;
    let cq = sq.clone().cholesky().ok_or(OracleError::NotPositiveDefinite(" (posterior)"))?;
    let trace = cp.solve(sq).trace();
    let d = DVector::from_column_slice(mp) - DVector::from_column_slice(mq);
    let quad = d.dot(&cp.solve(&d));
    let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(0.5 * (trace + quad - k as f64 + logdet(&cp) - logdet(&cq)))
}

/// `log N(y | 0, K̃ + σ_f² I)` where `K̃_ij = Σ_p σ_p² k(h_ip, U) K_UU⁻¹ k(U, h_jp) + 1`
/// is the prior covariance of the interpolated additive model with a
/// standard-normal bias. Assembled densely, without the sparse factor.
pub fn approx_model_mll(head: &DakHead, features: &Tensor, y: &[f64], noise_variance: f64) -> Result<f64> {
    let (n, p) = features.dims2().map_err(|e| OracleError::Dimension(e.to_string()))?;
    if p != head.units() || y.len() != n {
        return Err(OracleError::Dimension(format!(
            "features {n}x{p}, {} targets, {} units",
            y.len(),
            head.units()
        )));
    }
    if n > 256 {
        return Err(OracleError::Dimension(format!("{n} points exceeds the dense limit of 256")));
    }
    let basis = head.basis();
    let kernel: &LaplaceKernel = basis.kernel();
    let u = basis.grid().points();
    let m = u.len();
    let kuu = DMatrix::from_fn(m, m, |i, j| kernel.eval(u[i], u[j]));
    let chol = kuu.cholesky().ok_or(OracleError::NotPositiveDefinite(" (grid Gram)"))?;
    let mut kt = DMatrix::from_element(n, n, 1.0);
    for (unit, &sigma) in head.scales().iter().enumerate() {
        let kxu = DMatrix::from_fn(n, m, |i, j| kernel.eval(features.at(i, unit), u[j]));
        let sol = chol.solve(&kxu.transpose());
        kt += (&kxu * sol) * (sigma * sigma);
    }
    for i in 0..n {
        kt[(i, i)] += noise_variance;
    }
    let kt = (&kt + kt.transpose()) * 0.5;
    Ok(gaussian_log_density(&jittered_cholesky(kt)?, y))
}

/// Ordinary least squares with an intercept; returns `[intercept, β…]`.
pub fn ols_fit(x: &Tensor, y: &[f64]) -> Result<Vec<f64>> {
    let (n, d) = x.dims2().map_err(|e| OracleError::Dimension(e.to_string()))?;
    if y.len() != n || n <= d {
        return Err(OracleError::Dimension(format!("{n} rows for {d} features")));
    }
    let a = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x.at(i, j - 1) });
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let beta = svd
        .solve(&b, 1e-12)
        .map_err(|e| OracleError::Dimension(e.to_string()))?;
    Ok(beta.iter().copied().collect())
}

pub fn ols_predict(beta: &[f64], x: &Tensor) -> Vec<f64> {
    (0..x.shape()[0])
        .map(|i| beta[0] + x.row(i).iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Random model instances for property checks.
pub mod fixtures {
    use std::sync::Arc;

    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use dak_core::grid::Domain;
    use dak_core::head::{DakHead, InducedBasis, VariationalGaussian};
    use dak_core::{LaplaceKernel, Tensor};

    /// A head with `1..=max_units` units on a level `1..=max_level` grid,
    /// random scales and a random mean-field posterior.
    pub fn random_head(rng: &mut impl Rng, max_units: usize, max_level: u32, domain: Domain) -> DakHead {
        let units = rng.gen_range(1..=max_units);
        let level = rng.gen_range(1..=max_level);
        let theta = rng.gen_range(0.3..3.0);
        let basis = Arc::new(
            InducedBasis::new(LaplaceKernel::new(theta).expect("positive"), level, domain).expect("valid grid"),
        );
        let m = basis.size();
        let mut gaussian = |dim: usize| {
            let mean = (0..dim).map(|_| 0.5 * normal(rng)).collect();
            let log_var = (0..dim).map(|_| rng.gen_range(-3.0..0.5)).collect();
            VariationalGaussian::new(mean, log_var).expect("finite")
        };
        let posteriors: Vec<VariationalGaussian> = (0..units).map(|_| gaussian(m)).collect();
        let bias = gaussian(1);
        let scales = (0..units).map(|_| rng.gen_range(0.2..1.5)).collect();
        DakHead::from_parts(basis, scales, posteriors, bias).expect("consistent parts")
    }

    /// `[n, p]` features drawn uniformly inside `domain`.
    pub fn random_features(rng: &mut impl Rng, n: usize, p: usize, domain: Domain) -> Tensor {
        let data = (0..n * p).map(|_| rng.gen_range(domain.lo()..domain.hi())).collect();
        Tensor::new(vec![n, p], data).expect("sized")
    }

    pub fn normal(rng: &mut impl Rng) -> f64 {
        StandardNormal.sample(rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_chol_examples() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_eq!(dense_inverse_chol(&eye).unwrap(), eye);
        let four = DMatrix::from_element(1, 1, 4.0);
        assert_eq!(dense_inverse_chol(&four).unwrap()[(0, 0)], 0.5);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(dense_inverse_chol(&bad).is_err());
    }

    #[test]
    fn moments_examples() {
        let m = mc_moments(|_| 3.0, 10, 0).unwrap();
        assert_eq!((m.mean, m.variance), (3.0, 0.0));
        assert!(mc_moments(|_| 0.0, 1, 0).is_err());
        let m = moments(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((m.variance - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn jackknife_matches_brute_force() {
        let xs: Vec<f64> = (0..9).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let m = moments(&xs).unwrap();
        let s = xs.len() as f64;
        let loo: Vec<f64> = (0..xs.len())
            .map(|i| {
                let rest: Vec<f64> = xs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
                moments(&rest).unwrap().variance
            })
            .collect();
        let bar = loo.iter().sum::<f64>() / s;
        let se = ((s - 1.0) / s * loo.iter().map(|v| (v - bar).powi(2)).sum::<f64>()).sqrt();
        assert!((se - m.se_variance).abs() < 1e-12);
    }
}
