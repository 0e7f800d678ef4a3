use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dak_core::checkpoint::Checkpoint;
use dak_core::data::{OwnedTargets, TabularDataset};
use dak_core::grid::Domain;
use dak_core::model::{DakModel, ModelSpec};
use dak_core::nn::{extract, Embedding, Mlp};
use dak_core::train::{fit, TrainConfig, TrainMode};
use dak_core::vi::{self, EllMode, LikelihoodConfig, Targets};
use dak_core::{inverse_chol_factor, sorted_dyadic, DakHead, InducedBasis, LaplaceKernel, Squash, Tensor, VariationalGaussian};

fn domain(symmetric: bool) -> Domain {
    if symmetric {
        Domain::symmetric()
    } else {
        Domain::unit()
    }
}

/// Plain Cholesky; `None` if a pivot is not positive.
fn cholesky(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

fn random_head(rng: &mut ChaCha8Rng, units: usize, level: u32) -> DakHead {
    let basis = Arc::new(InducedBasis::new(LaplaceKernel::new(rng.gen_range(0.3..3.0)).unwrap(), level, Domain::unit()).unwrap());
    let m = basis.size();
    let unit = |rng: &mut ChaCha8Rng| {
        VariationalGaussian::new(
            (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..m).map(|_| rng.gen_range(-3.0..0.5)).collect(),
        )
        .unwrap()
    };
    let units_q = (0..units).map(|_| unit(rng)).collect();
    let scales = (0..units).map(|_| rng.gen_range(0.2..1.5)).collect();
    let bias = VariationalGaussian::new(vec![rng.gen_range(-1.0..1.0)], vec![rng.gen_range(-2.0..0.0)]).unwrap();
    DakHead::from_parts(basis, scales, units_q, bias).unwrap()
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Tensor {
    Tensor::new(vec![n, p], (0..n * p).map(|_| rng.gen_range(0.01..0.99)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn factor_is_sparse_upper_and_whitens(level in 1u32..=7, theta in 0.2f64..4.0, symmetric: bool) {
        let grid = sorted_dyadic(level, domain(symmetric)).unwrap();
        let kernel = LaplaceKernel::new(theta).unwrap();
        let r = inverse_chol_factor(&kernel, &grid).unwrap();
        let m = grid.len();
        prop_assert!(r.nnz() <= 3 * m - 2);
        for c in 0..m {
            let entries: Vec<(usize, f64)> = r.column(c).collect();
            prop_assert!(entries.len() <= 3);
            prop_assert!(entries.iter().all(|&(row, _)| row <= c));
            prop_assert!(entries.iter().any(|&(row, v)| row == c && v > 0.0));
        }
        let u = grid.points();
        let dense = r.densify();
        let at = |i: usize, j: usize| dense.data()[i * m + j];
        let mut err = 0.0;
        for a in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for (i, ui) in u.iter().enumerate() {
                    if at(i, a) == 0.0 {
                        continue;
                    }
                    for (j, uj) in u.iter().enumerate() {
                        s += at(i, a) * kernel.eval(*ui, *uj) * at(j, b);
                    }
                }
                let target = if a == b { 1.0 } else { 0.0 };
                err += (s - target) * (s - target);
            }
        }
        prop_assert!(err.sqrt() < 1e-8, "{}", err.sqrt());
    }

    #[test]
    fn factor_is_affine_invariant(level in 1u32..=8, theta in 0.2f64..4.0, lo in -5.0f64..5.0, width in 0.1f64..10.0) {
        let unit = inverse_chol_factor(&LaplaceKernel::new(theta).unwrap(), &sorted_dyadic(level, Domain::unit()).unwrap()).unwrap();
        let moved = inverse_chol_factor(
            &LaplaceKernel::new(theta * width).unwrap(),
            &sorted_dyadic(level, Domain::new(lo, lo + width).unwrap()).unwrap(),
        )
        .unwrap();
        let a: Vec<_> = unit.triplets().collect();
        let b: Vec<_> = moved.triplets().collect();
        prop_assert_eq!(a.len(), b.len());
        for ((ra, ca, va), (rb, cb, vb)) in a.into_iter().zip(b) {
            prop_assert_eq!((ra, ca), (rb, cb));
            prop_assert!((va - vb).abs() <= 1e-12 * va.abs().max(1.0), "{} vs {}", va, vb);
        }
    }

    #[test]
    fn gram_matrices_are_positive_definite(seed: u64, n in 2usize..=64, theta in 0.05f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        let k = LaplaceKernel::new(theta).unwrap();
        let gram: Vec<Vec<f64>> = xs.iter().map(|&a| xs.iter().map(|&b| k.eval(a, b)).collect()).collect();
        for (i, row) in gram.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                prop_assert_eq!(*v, gram[j][i]);
            }
        }
        prop_assert!(cholesky(&gram).is_some());
    }

    #[test]
    fn approximation_never_exceeds_prior_variance(theta in 0.1f64..5.0, level in 1u32..=8, x in 0.0f64..=1.0) {
        let basis = InducedBasis::new(LaplaceKernel::new(theta).unwrap(), level, Domain::unit()).unwrap();
        let phi = basis.activation(x);
        let q: f64 = phi.iter().map(|v| v * v).sum();
        prop_assert!(q <= 1.0 + 1e-10, "{}", q);
    }

    #[test]
    fn extractor_output_stays_inside_the_domain(seed: u64, x in prop::collection::vec(-1e300f64..1e300, 3), tanh: bool) {
        let squash = if tanh { Squash::ScaledTanh } else { Squash::Sigmoid };
        let d = squash.natural_domain();
        let mlp = Mlp::init(&[3, 6, 5], seed).unwrap();
        let emb = Embedding::init(5, 4, squash, d, seed ^ 1).unwrap();
        let h = extract(&mlp, &emb, &Tensor::new(vec![1, 3], x.clone()).unwrap()).unwrap();
        for &v in h.data() {
            prop_assert!(d.contains_open(v), "{} outside", v);
        }
        let again = extract(&mlp, &emb, &Tensor::new(vec![1, 3], x).unwrap()).unwrap();
        prop_assert_eq!(h, again);
    }

    #[test]
    fn closed_form_mean_is_linear_in_variational_means(seed: u64, units in 1usize..=4, level in 1u32..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = random_head(&mut rng, units, level);
        head.bias_mut().mean_mut()[0] = 0.0;
        let h = random_features(&mut rng, 7, units);
        let (m1, _) = head.forward_closed_form(&h).unwrap();
        for p in 0..units {
            head.unit_mut(p).mean_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
        let (m2, _) = head.forward_closed_form(&h).unwrap();
        for (a, b) in m1.iter().zip(&m2) {
            prop_assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn minibatch_terms_average_to_the_full_batch(seed: u64, units in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = random_head(&mut rng, units, 3);
        let lik = LikelihoodConfig::regression(0.1).unwrap();
        let (n, b) = (12, 4);
        let h = random_features(&mut rng, n, units);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let full = vi::elbo(std::slice::from_ref(&head), &h, Targets::Real(&y), &lik, EllMode::ClosedForm, n, 0).unwrap();
        let mut avg = 0.0;
        for start in (0..n).step_by(b) {
            let rows: Vec<f64> = h.data()[start * units..(start + b) * units].to_vec();
            let hb = Tensor::new(vec![b, units], rows).unwrap();
            let part = vi::elbo(std::slice::from_ref(&head), &hb, Targets::Real(&y[start..start + b]), &lik, EllMode::ClosedForm, n, 0).unwrap();
            avg += part.expected_log_likelihood / (n / b) as f64;
        }
        prop_assert!((avg - full.expected_log_likelihood).abs() <= 1e-10 * full.expected_log_likelihood.abs().max(1.0));
    }
}

#[test]
fn interpolation_error_does_not_grow_with_level() {
    let xs: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
    for theta in [0.1, 0.3, 1.0, 3.0] {
        let kernel = LaplaceKernel::new(theta).unwrap();
        let mut last = f64::INFINITY;
        for level in [2, 4, 6, 8] {
            let basis = InducedBasis::new(kernel.clone(), level, Domain::unit()).unwrap();
            let phis: Vec<Vec<f64>> = xs.iter().map(|&x| basis.activation(x)).collect();
            let mut worst: f64 = 0.0;
            for (i, a) in phis.iter().enumerate() {
                for (j, b) in phis.iter().enumerate() {
                    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                    worst = worst.max((dot - kernel.eval(xs[i], xs[j])).abs());
                }
            }
            assert!(worst <= last + 1e-10, "theta {theta} level {level}: {worst} after {last}");
            last = worst;
        }
    }
}

#[test]
fn prior_posterior_has_zero_kl() {
    let basis = Arc::new(InducedBasis::new(LaplaceKernel::default(), 4, Domain::unit()).unwrap());
    let head = DakHead::new(basis, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = random_features(&mut rng, 6, 3);
    let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lik = LikelihoodConfig::regression(0.05).unwrap();
    let b = vi::elbo(std::slice::from_ref(&head), &h, Targets::Real(&y), &lik, EllMode::ClosedForm, 6, 0).unwrap();
    assert_eq!(b.kl, 0.0);
    assert_eq!(b.elbo, b.expected_log_likelihood);
}

#[test]
fn sampled_likelihood_converges_to_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let samples = 1_000_000;
    for config in 0..10 {
        let units = rng.gen_range(1..=3);
        let level = rng.gen_range(1..=4);
        let head = random_head(&mut rng, units, level);
        let h = random_features(&mut rng, 3, units);
        let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let lik = LikelihoodConfig::regression(0.2).unwrap();
        let cf = vi::expected_loglik_closed(&head, &h, &y, &lik).unwrap();
        let draws = vi::loglik_per_sample(std::slice::from_ref(&head), &h, Targets::Real(&y), &lik, samples, config).unwrap();
        let mean = draws.iter().sum::<f64>() / samples as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
        let se = (var / samples as f64).sqrt();
        assert!((mean - cf).abs() <= 4.0 * se, "config {config}: {mean} vs {cf} (se {se})");
    }
}

fn toy_set() -> TabularDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 24;
    let x: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let y = (0..n).map(|i| (x[2 * i]).sin() + 0.5 * x[2 * i + 1]).collect();
    TabularDataset::new(vec!["a".into(), "b".into(), "y".into()], Tensor::new(vec![n, 2], x).unwrap(), OwnedTargets::Real(y)).unwrap()
}

fn small_spec() -> ModelSpec {
    ModelSpec {
        widths: vec![2, 8, 6],
        units: 3,
        level: 3,
        domain: Domain::unit(),
        lengthscale: 1.0,
        squash: Squash::Sigmoid,
        likelihood: LikelihoodConfig::regression(0.05).unwrap(),
    }
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let data = toy_set();
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 8,
        lr: 0.01,
        mc_samples: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = DakModel::new(small_spec(), 2).unwrap();
        let hist = fit(&mut model, &data, None, &cfg).unwrap();
        (model, hist)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    let strip = |h: &[dak_core::train::EpochRecord]| h.iter().map(|r| (r.elbo, r.ell, r.kl)).collect::<Vec<_>>();
    assert_eq!(strip(&ha), strip(&hb));

    let ck = Checkpoint {
        model: a,
        features: None,
        targets: None,
    };
    let back = Checkpoint::decode(&ck.encode()).unwrap();
    assert_eq!(back, ck);
    let probe = Tensor::new(vec![2, 2], vec![0.3, -0.1, 1.5, 2.0]).unwrap();
    assert_eq!(back.model.predict_moments(&probe).unwrap(), ck.model.predict_moments(&probe).unwrap());
}

#[test]
fn fine_tuning_leaves_the_extractor_untouched() {
    let data = toy_set();
    let mut model = DakModel::new(small_spec(), 4).unwrap();
    let before = model.clone();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 8,
        lr: 0.01,
        mode: TrainMode::FineTune,
        ..TrainConfig::default()
    };
    fit(&mut model, &data, None, &cfg).unwrap();
    assert_eq!(model.mlp(), before.mlp());
    assert_eq!(model.embedding(), before.embedding());
    assert_eq!(model.heads()[0].scales(), before.heads()[0].scales());
    assert_ne!(model.heads()[0].unit_posteriors(), before.heads()[0].unit_posteriors());
}
