//! One-dimensional Laplace kernel and additive combinations of it.

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::grid::DyadicGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("lengthscale must be positive and finite, got {0}")]
    BadLengthscale(f64),
    #[error("additive kernel needs one scale per unit ({scales} scales, {kernels} kernels)")]
    UnitCount { scales: usize, kernels: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// `k(x, y) = exp(-|x - y| / θ)` with unit variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceKernel {
    lengthscale: f64,
}

impl LaplaceKernel {
    pub fn new(lengthscale: f64) -> Result<Self, KernelError> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(KernelError::BadLengthscale(lengthscale));
        }
        Ok(Self { lengthscale })
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        (-(x - y).abs() / self.lengthscale).exp()
    }

    /// `∂k(h, u)/∂h`. Zero when `h == u`.
    #[inline]
    pub fn d_first(&self, h: f64, u: f64) -> f64 {
        let diff = u - h;
        if diff == 0.0 {
            0.0
        } else {
            diff.signum() * self.eval(h, u) / self.lengthscale
        }
    }

    /// Cross-covariance `[xs.len(), M]` against the grid in its stored order.
    pub fn cross_cov(&self, xs: &[f64], grid: &DyadicGrid) -> Tensor {
        let m = grid.len();
        let mut data = Vec::with_capacity(xs.len() * m);
        for &x in xs {
            data.extend(grid.points().iter().map(|&u| self.eval(x, u)));
        }
        Tensor::new(vec![xs.len(), m], data).expect("shape matches construction")
    }
}

impl Default for LaplaceKernel {
    fn default() -> Self {
        Self { lengthscale: 1.0 }
    }
}

/// `Σ_p σ_p² k_p(h_p, h'_p)` over P one-dimensional inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveKernelSpec {
    scales: Vec<f64>,
    kernels: Vec<LaplaceKernel>,
}

impl AdditiveKernelSpec {
    pub fn new(scales: Vec<f64>, kernels: Vec<LaplaceKernel>) -> Result<Self, KernelError> {
        if scales.len() != kernels.len() {
            return Err(KernelError::UnitCount {
                scales: scales.len(),
                kernels: kernels.len(),
            });
        }
        Ok(Self { scales, kernels })
    }

    pub fn units(&self) -> usize {
        self.scales.len()
    }

    pub fn eval(&self, h: &[f64], h_prime: &[f64]) -> Result<f64, KernelError> {
        if h.len() != self.units() || h_prime.len() != self.units() {
            return Err(KernelError::Dimension(format!(
                "expected {} coordinates, got {} and {}",
                self.units(),
                h.len(),
                h_prime.len()
            )));
        }
        Ok(self
            .scales
            .iter()
            .zip(&self.kernels)
            .zip(h.iter().zip(h_prime))
            .map(|((s, k), (&a, &b))| s * s * k.eval(a, b))
            .sum())
    }
}

fn check_projection(
    x: &[f64],
    x_prime: &[f64],
    w: &Tensor,
    scales: &[f64],
    lengthscale: f64,
) -> Result<(usize, usize), KernelError> {
    if !(lengthscale > 0.0 && lengthscale.is_finite()) {
        return Err(KernelError::BadLengthscale(lengthscale));
    }
    let (d, p) = w
        .dims2()
        .map_err(|e| KernelError::Dimension(e.to_string()))?;
    if x.len() != d || x_prime.len() != d || scales.len() != p {
        return Err(KernelError::Dimension(format!(
            "projection is {d}x{p}; inputs have {} and {} coordinates, {} scales",
            x.len(),
            x_prime.len(),
            scales.len()
        )));
    }
    Ok((d, p))
}

/// Additive Laplace kernel on linear projections `w_p^T x` with a shared
/// lengthscale: `Σ_p σ_p² exp(-Σ_d |w_{p,d}(x_d - x'_d)| / θ)`.
///
/// `w` is `[D, P]`; column `p` is the projection of unit `p`.
pub fn projected_additive_eval(
    x: &[f64],
    x_prime: &[f64],
    w: &Tensor,
    scales: &[f64],
    lengthscale: f64,
) -> Result<f64, KernelError> {
    let (d, p) = check_projection(x, x_prime, w, scales, lengthscale)?;
    let mut total = 0.0;
    for unit in 0..p {
        let dist: f64 = (0..d)
            .map(|dim| (w.at(dim, unit) * (x[dim] - x_prime[dim])).abs())
            .sum();
        total += scales[unit] * scales[unit] * (-dist / lengthscale).exp();
    }
    Ok(total)
}

/// The same kernel written as a sum over units of products of per-dimension
/// Laplace kernels with lengthscales `θ / |w_{p,d}|`.
pub fn per_dimension_lengthscale_eval(
    x: &[f64],
    x_prime: &[f64],
    w: &Tensor,
    scales: &[f64],
    lengthscale: f64,
) -> Result<f64, KernelError> {
    let (d, p) = check_projection(x, x_prime, w, scales, lengthscale)?;
    let mut total = 0.0;
    for unit in 0..p {
        let mut prod = scales[unit] * scales[unit];
        for dim in 0..d {
            let weight = w.at(dim, unit).abs();
            // Zero weight means infinite lengthscale: the factor is exactly 1.
            if weight == 0.0 {
                continue;
            }
            let k = LaplaceKernel::new(lengthscale / weight)?;
            prod *= k.eval(x[dim], x_prime[dim]);
        }
        total += prod;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{sorted_dyadic, Domain};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_examples() {
        let k1 = LaplaceKernel::new(1.0).unwrap();
        assert_eq!(k1.eval(0.5, 0.5), 1.0);
        assert!((k1.eval(0.0, 1.0) - 0.367_879_441_171_442_3).abs() < 1e-15);
        let k2 = LaplaceKernel::new(2.0).unwrap();
        assert!((k2.eval(0.0, 1.0) - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(LaplaceKernel::new(0.0).is_err());
        assert!(LaplaceKernel::new(f64::NAN).is_err());
    }

    #[test]
    fn cross_cov_examples() {
        let k = LaplaceKernel::new(1.0).unwrap();
        let g = sorted_dyadic(3, Domain::unit()).unwrap();
        let kuu = k.cross_cov(g.points(), &g);
        for i in 0..g.len() {
            assert_eq!(kuu.at(i, i), 1.0);
            for j in 0..g.len() {
                assert_eq!(kuu.at(i, j), kuu.at(j, i));
            }
        }
        let g1 = sorted_dyadic(1, Domain::unit()).unwrap();
        assert_eq!(k.cross_cov(&[0.5], &g1).data(), &[1.0]);
        assert_eq!(k.cross_cov(&[0.0], &g1).data(), &[(-0.5f64).exp()]);
    }

    #[test]
    fn derivative_is_zero_on_grid_points() {
        let k = LaplaceKernel::new(0.7).unwrap();
        assert_eq!(k.d_first(0.25, 0.25), 0.0);
        let h = 0.1;
        let fd = (k.eval(h + 1e-7, 0.4) - k.eval(h - 1e-7, 0.4)) / 2e-7;
        assert!((k.d_first(h, 0.4) - fd).abs() < 1e-7);
    }

    #[test]
    fn additive_kernel_sums_units() {
        let k = LaplaceKernel::new(1.0).unwrap();
        let spec = AdditiveKernelSpec::new(vec![1.0, 2.0], vec![k, k]).unwrap();
        let v = spec.eval(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - ((-1.0f64).exp() + 4.0)).abs() < 1e-15);
        assert!(AdditiveKernelSpec::new(vec![1.0], vec![k, k]).is_err());
        assert!(spec.eval(&[0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn projected_examples() {
        let w0 = Tensor::zeros(&[3, 2]);
        let v = projected_additive_eval(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0], &w0, &[0.5, 2.0], 1.0)
            .unwrap();
        assert!((v - 4.25).abs() < 1e-15);
        let w = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let v = projected_additive_eval(&[0.0], &[1.0], &w, &[1.0], 1.0).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn projection_identity_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let w = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s: Vec<f64> = (0..2).map(|_| rng.gen_range(0.1..2.0)).collect();
            let theta = rng.gen_range(0.2..3.0);
            let a = projected_additive_eval(&x, &y, &w, &s, theta).unwrap();
            let b = per_dimension_lengthscale_eval(&x, &y, &w, &s, theta).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(x in -5.0f64..5.0, y in -5.0f64..5.0, theta in 0.05f64..10.0) {
            let k = LaplaceKernel::new(theta).unwrap();
            prop_assert_eq!(k.eval(x, y), k.eval(y, x));
            let v = k.eval(x, y);
            prop_assert!(v > 0.0 || (x - y).abs() / theta > 700.0);
            prop_assert!(v <= 1.0);
        }
    }
}
