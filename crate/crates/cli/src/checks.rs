//! Oracle-backed invariant checks shared by `dak verify` and the
//! acceptance suite.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dak_core::grid::{Domain, SparseUpperFactor};
use dak_core::head::Squash;
use dak_core::kernels::{per_dimension_lengthscale_eval, projected_additive_eval};
use dak_core::model::{DakModel, ModelSpec};
use dak_core::vi::{self, EllMode, LikelihoodConfig, Targets};
use dak_core::{inverse_chol_factor, sorted_dyadic, Tape, Tensor, LaplaceKernel};
use dak_oracle::fixtures::{normal, random_features, random_head};
use dak_oracle::{approx_model_mll, dense_inverse_chol, moments, tensor_to_matrix};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// The measured statistic the verdict is based on.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name,
            passed,
            value,
            threshold,
            detail,
        }
    }
}

/// Perturbs one stored factor entry; used to show the reconstruction check
/// actually bites.
pub fn perturb_factor(factor: SparseUpperFactor, entry: usize, delta: f64) -> SparseUpperFactor {
    let (dim, cols, rows, mut values) = factor.into_parts();
    let k = entry % values.len();
    values[k] += delta;
    SparseUpperFactor::from_parts(dim, cols, rows, values).expect("layout unchanged")
}

fn gram(kernel: &LaplaceKernel, u: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(u.len(), u.len(), |i, j| kernel.eval(u[i], u[j]))
}

/// `‖Rᵀ K R − I‖_F < 1e-8`, `nnz ≤ 3M − 2` and agreement with the dense
/// factor, for L = 1..=max_level, three lengthscales and both domains.
pub fn factor_reconstruction(max_level: u32, fault: Option<f64>) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    let mut worst_dense: f64 = 0.0;
    let mut nnz_ok = true;
    let mut cases = 0;
    for domain in [Domain::unit(), Domain::symmetric()] {
        for theta in [0.3, 1.0, 3.0] {
            let kernel = LaplaceKernel::new(theta).expect("positive lengthscale");
            for level in 1..=max_level {
                let grid = sorted_dyadic(level, domain).expect("valid level");
                let mut factor = inverse_chol_factor(&kernel, &grid).expect("factor");
                if let Some(delta) = fault {
                    let mid = factor.nnz() / 2;
                    factor = perturb_factor(factor, mid, delta);
                }
                let m = grid.len();
                nnz_ok &= factor.nnz() <= 3 * m - 2;
                let r = tensor_to_matrix(&factor.densify());
                let k = gram(&kernel, grid.points());
                let err = (r.transpose() * &k * &r - DMatrix::identity(m, m)).norm();
                let dense = dense_inverse_chol(&k).expect("grid Gram is positive definite");
                let scale = dense.amax().max(1.0);
                worst = worst.max(err);
                worst_dense = worst_dense.max((&r - dense).amax() / scale);
                cases += 1;
            }
        }
    }
    let passed = worst < 1e-8 && worst_dense < 1e-8 && nnz_ok;
    CheckOutcome::new(
        "factor-reconstruction",
        passed,
        worst,
        1e-8,
        format!("{cases} grids; max dense-factor deviation {worst_dense:.2e}; nnz bound {}", if nnz_ok { "held" } else { "violated" }),
    )
}

/// Median factor-construction time at level `hi` over level `hi − 1`.
pub fn factor_scaling(hi: u32, reps: usize) -> CheckOutcome {
    let median = |level: u32| {
        let grid = sorted_dyadic(level, Domain::unit()).expect("valid level");
        let kernel = LaplaceKernel::default();
        let mut times: Vec<f64> = (0..reps)
            .map(|_| {
                let t = Instant::now();
                let f = inverse_chol_factor(&kernel, &grid).expect("factor");
                std::hint::black_box(&f);
                t.elapsed().as_secs_f64()
            })
            .collect();
        times.sort_by(f64::total_cmp);
        times[times.len() / 2]
    };
    // Warm the allocator and caches once before timing.
    let _ = median(hi - 1);
    let lo_t = median(hi - 1);
    let hi_t = median(hi);
    let ratio = hi_t / lo_t;
    CheckOutcome::new(
        "factor-scaling",
        ratio < 4.0,
        ratio,
        4.0,
        format!("median L={}: {:.3e}s, L={hi}: {:.3e}s", hi - 1, lo_t, hi_t),
    )
}

/// `φ(u_i)·φ(u_j) = k(u_i, u_j)` on the grid for L ≤ max_level and
/// `φ(x)·φ(x) ≤ 1 + 1e-10` on a 101-point sweep of the closed domain.
pub fn prior_interpolation(max_level: u32) -> CheckOutcome {
    let mut worst_pair: f64 = 0.0;
    let mut worst_norm = f64::NEG_INFINITY;
    for domain in [Domain::unit(), Domain::symmetric()] {
        for theta in [0.3, 1.0, 3.0] {
            let kernel = LaplaceKernel::new(theta).expect("positive lengthscale");
            for level in 1..=max_level {
                let basis = dak_core::InducedBasis::new(kernel.clone(), level, domain).expect("basis");
                let u = basis.grid().points();
                let phis: Vec<Vec<f64>> = u.iter().map(|&x| basis.activation(x)).collect();
                for i in 0..u.len() {
                    for j in 0..u.len() {
                        let dot: f64 = phis[i].iter().zip(&phis[j]).map(|(a, b)| a * b).sum();
                        worst_pair = worst_pair.max((dot - kernel.eval(u[i], u[j])).abs());
                    }
                }
                for s in 0..=100 {
                    let x = domain.lo() + domain.width() * s as f64 / 100.0;
                    let phi = basis.activation(x);
                    let norm: f64 = phi.iter().map(|v| v * v).sum();
                    worst_norm = worst_norm.max(norm - 1.0);
                }
            }
        }
    }
    CheckOutcome::new(
        "prior-interpolation",
        worst_pair < 1e-8 && worst_norm <= 1e-10,
        worst_pair,
        1e-8,
        format!("max φ·φ − 1 on sweep {worst_norm:.2e}"),
    )
}

/// Closed-form predictive moments and expected log-likelihood against
/// `samples` Monte-Carlo draws on `heads` random heads (P ≤ 8, L ≤ 5);
/// an instance passes when every statistic lies within 3 standard errors.
pub fn closed_form_vs_mc(heads: usize, samples: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    let mut worst_z: f64 = 0.0;
    for _ in 0..heads {
        let domain = if rng.gen() { Domain::unit() } else { Domain::symmetric() };
        let head = random_head(&mut rng, 8, 5, domain);
        let n = 3;
        let x = random_features(&mut rng, n, head.units(), domain);
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let noise_variance = rng.gen_range(0.1..1.0);
        let lik = LikelihoodConfig::regression(noise_variance).expect("positive");
        let (mean, var) = head.forward_closed_form(&x).expect("features in domain");
        let ell = vi::expected_loglik_closed(&head, &x, &y, &lik).expect("regression");
        let draws = head.forward_mc(&x, samples, rng.gen()).expect("samples > 0");

        // Per-draw log-likelihood assembled here, independently of vi.
        let c = -0.5 * n as f64 * (2.0 * std::f64::consts::PI * noise_variance).ln();
        let per: Vec<f64> = (0..samples)
            .map(|s| c - (0..n).map(|i| (y[i] - draws.at(s, i)).powi(2)).sum::<f64>() / (2.0 * noise_variance))
            .collect();
        // Moments at the first point plus the likelihood.
        let col: Vec<f64> = (0..samples).map(|s| draws.at(s, 0)).collect();
        let f = moments(&col).expect("samples ≥ 2");
        let l = moments(&per).expect("samples ≥ 2");
        let z = [
            (f.mean - mean[0]).abs() / f.se_mean,
            (f.variance - var[0]).abs() / f.se_variance,
            (l.mean - ell).abs() / l.se_mean,
        ];
        let zmax = z.iter().cloned().fold(0.0, f64::max);
        worst_z = worst_z.max(zmax);
        if zmax < 3.0 {
            passed += 1;
        }
    }
    let need = heads - heads / 20;
    CheckOutcome::new(
        "closed-form-vs-mc",
        passed >= need,
        passed as f64,
        need as f64,
        format!("{passed}/{heads} heads within 3 s.e. at S={samples}; largest z {worst_z:.2}"),
    )
}

/// The closed-form ELBO never exceeds the dense marginal likelihood of the
/// interpolated-prior model.
pub fn elbo_bound(instances: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..instances {
        let domain = if rng.gen() { Domain::unit() } else { Domain::symmetric() };
        let head = random_head(&mut rng, 4, 4, domain);
        let n = rng.gen_range(1..=64);
        let x = random_features(&mut rng, n, head.units(), domain);
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let noise = rng.gen_range(0.01..1.0);
        let lik = LikelihoodConfig::regression(noise).expect("positive");
        let elbo = vi::elbo(std::slice::from_ref(&head), &x, Targets::Real(&y), &lik, EllMode::ClosedForm, n, 0)
            .expect("valid instance")
            .elbo;
        let mll = approx_model_mll(&head, &x, &y, noise).expect("dense marginal likelihood");
        worst = worst.max(elbo - mll);
    }
    CheckOutcome::new(
        "elbo-bound",
        worst <= 1e-8,
        worst,
        1e-8,
        format!("{instances} instances; max ELBO − log marginal likelihood"),
    )
}

fn gradient_case(spec: ModelSpec, targets: &dyn Fn(&mut ChaCha8Rng, usize) -> TargetsOwned, mode: EllMode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DakModel::new(spec, rng.gen()).expect("valid spec");
    let params: Vec<Tensor> = model
        .params()
        .into_iter()
        .map(|p| {
            let mut t = p.tensor;
            t.data_mut().iter_mut().for_each(|v| *v += 0.3 * normal(&mut rng));
            t
        })
        .collect();
    model.assign(&params).expect("finite parameters");
    let n = 5;
    let d = model.spec().input_dim();
    let x = Tensor::new(vec![n, d], (0..n * d).map(|_| normal(&mut rng)).collect()).expect("sized");
    let owned = targets(&mut rng, n);
    let data_size = 40;
    let mc_seed = 7;

    let mut tape = Tape::new();
    let g = model
        .elbo_graph(&mut tape, &x, owned.as_targets(), mode, data_size, mc_seed, &[])
        .expect("graph");
    let grads = tape.backward(g.elbo).expect("scalar root");

    let eval = |ps: &[Tensor]| {
        let mut m = model.clone();
        m.assign(ps).expect("finite parameters");
        m.elbo(&x, owned.as_targets(), mode, data_size, mc_seed).expect("elbo").elbo
    };
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (k, v) in g.params.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for i in 0..params[k].len() {
            let orig = params[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let up = eval(&probe);
            probe[k].data_mut()[i] = orig - step;
            let down = eval(&probe);
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max((analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-8));
        }
    }
    worst
}

enum TargetsOwned {
    Real(Vec<f64>),
    Labels(Vec<usize>),
}

impl TargetsOwned {
    fn as_targets(&self) -> Targets<'_> {
        match self {
            Self::Real(y) => Targets::Real(y),
            Self::Labels(y) => Targets::Labels(y),
        }
    }
}

/// End-to-end ELBO gradient against central differences of the ELBO
/// value, over every parameter, on a 5-point batch. Covers the
/// closed-form regression ELBO and the Monte-Carlo softmax ELBO.
pub fn gradient_integrity(seed: u64) -> CheckOutcome {
    let base = |likelihood, squash: Squash| ModelSpec {
        widths: vec![3, 5, 4],
        units: 2,
        level: 2,
        domain: squash.natural_domain(),
        lengthscale: 1.0,
        squash,
        likelihood,
    };
    let regression = gradient_case(
        base(LikelihoodConfig::regression(1.0).expect("positive"), Squash::Sigmoid),
        &|rng, n| TargetsOwned::Real((0..n).map(|_| normal(rng)).collect()),
        EllMode::ClosedForm,
        seed,
    );
    let mc_regression = gradient_case(
        base(LikelihoodConfig::regression(1.0).expect("positive"), Squash::Sigmoid),
        &|rng, n| TargetsOwned::Real((0..n).map(|_| normal(rng)).collect()),
        EllMode::MonteCarlo { samples: 4 },
        seed + 1,
    );
    let classification = gradient_case(
        base(LikelihoodConfig::classification(3).expect("classes"), Squash::ScaledTanh),
        &|rng, n| TargetsOwned::Labels((0..n).map(|_| rng.gen_range(0..3)).collect()),
        EllMode::MonteCarlo { samples: 4 },
        seed + 2,
    );
    let worst = regression.max(mc_regression).max(classification);
    CheckOutcome::new(
        "gradient-integrity",
        worst < 1e-4,
        worst,
        1e-4,
        format!("max relative error: closed form {regression:.2e}, MC regression {mc_regression:.2e}, MC softmax {classification:.2e}"),
    )
}

/// Projected shared-lengthscale and per-dimension-lengthscale forms of the
/// additive Laplace kernel agree.
pub fn additive_identity(draws: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let d = rng.gen_range(1..=6);
        let p = rng.gen_range(1..=4);
        let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let x2: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let w = Tensor::new(vec![d, p], (0..d * p).map(|_| normal(&mut rng)).collect()).expect("sized");
        let scales: Vec<f64> = (0..p).map(|_| rng.gen_range(0.1..2.0)).collect();
        let theta = rng.gen_range(0.3..3.0);
        let a = projected_additive_eval(&x, &x2, &w, &scales, theta).expect("shapes agree");
        let b = per_dimension_lengthscale_eval(&x, &x2, &w, &scales, theta).expect("shapes agree");
        worst = worst.max((a - b).abs());
    }
    CheckOutcome::new(
        "additive-identity",
        worst < 1e-12,
        worst,
        1e-12,
        format!("{draws} random draws"),
    )
}

/// Options for the `verify` suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub mc_samples: usize,
    /// Added to one factor entry before the reconstruction check.
    pub fault: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            mc_samples: 200_000,
            fault: None,
        }
    }
}

/// The deterministic suite run by `dak verify`; timing checks are left to
/// `bench-grid`.
pub fn verify_suite(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    vec![
        factor_reconstruction(8, opts.fault),
        prior_interpolation(6),
        closed_form_vs_mc(20, opts.mc_samples, opts.seed),
        elbo_bound(50, opts.seed.wrapping_add(1)),
        gradient_integrity(opts.seed.wrapping_add(2)),
        additive_identity(100, opts.seed.wrapping_add(3)),
    ]
}

pub fn format_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(4).max(5);
    let mut out = format!("{:<width$}  result  {:>10}  {:>10}  detail\n", "check", "value", "threshold");
    for o in outcomes {
        out.push_str(&format!(
            "{:<width$}  {:<6}  {:>10.3e}  {:>10.1e}  {}\n",
            o.name,
            if o.passed { "pass" } else { "FAIL" },
            o.value,
            o.threshold,
            o.detail
        ));
    }
    out
}
