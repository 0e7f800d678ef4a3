//! One-dimensional GP toy problem: 20 noisy training points on [−7, 7]
//! drawn from a zero-mean GP with kernel `exp(−(x − x')²)`, predictions on
//! 100 points spanning [−12, 12].

use std::io::Write;

use anyhow::{Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use dak_core::data::{OwnedTargets, Standardizer, TabularDataset};
use dak_core::head::Squash;
use dak_core::model::{DakModel, ModelSpec};
use dak_core::train::{self, TrainConfig, TrainMode};
use dak_core::vi::{EllMode, LikelihoodConfig};
use dak_core::Tensor;
use dak_oracle::{gp_sample, squared_exponential, DenseGp};

pub const TRAIN_POINTS: usize = 20;
pub const TEST_POINTS: usize = 100;
pub const TRAIN_RANGE: f64 = 7.0;
pub const TEST_RANGE: f64 = 12.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyOptions {
    /// Seeds the data; the exact-GP columns depend on nothing else.
    pub data_seed: u64,
    /// Seeds model initialization and training.
    pub seed: u64,
    pub noise_variance: f64,
    /// 0 trains on the closed-form ELBO.
    pub mc_samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub level: u32,
    pub lengthscale: f64,
    pub squash: Squash,
    /// Equally spaced training inputs instead of uniform draws.
    pub spaced: bool,
    /// Standardize inputs with the training mean and deviation.
    pub standardize: bool,
}

impl Default for ToyOptions {
    fn default() -> Self {
        Self {
            data_seed: 0,
            seed: 0,
            noise_variance: 0.01,
            mc_samples: 4,
            steps: 1000,
            lr: 0.01,
            level: 3,
            lengthscale: 1.0,
            squash: Squash::Sigmoid,
            spaced: false,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyData {
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub train_f: Vec<f64>,
    pub test_x: Vec<f64>,
    pub test_f: Vec<f64>,
}

pub fn toy_data(seed: u64, noise_variance: f64, spaced: bool) -> Result<ToyData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_x: Vec<f64> = if spaced {
        (0..TRAIN_POINTS)
            .map(|i| -TRAIN_RANGE + 2.0 * TRAIN_RANGE * i as f64 / (TRAIN_POINTS - 1) as f64)
            .collect()
    } else {
        (0..TRAIN_POINTS).map(|_| rng.gen_range(-TRAIN_RANGE..=TRAIN_RANGE)).collect()
    };
    let test_x: Vec<f64> = (0..TEST_POINTS)
        .map(|i| -TEST_RANGE + 2.0 * TEST_RANGE * i as f64 / (TEST_POINTS - 1) as f64)
        .collect();
    let all: Vec<f64> = train_x.iter().chain(&test_x).copied().collect();
    let f = gp_sample(squared_exponential, &all, rng.gen())?;
    let (train_f, test_f) = f.split_at(TRAIN_POINTS);
    let sd = noise_variance.sqrt();
    let train_y = train_f
        .iter()
        .map(|v| v + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Ok(ToyData {
        train_x,
        train_y,
        train_f: train_f.to_vec(),
        test_x,
        test_f: test_f.to_vec(),
    })
}

pub fn toy_spec(opts: &ToyOptions) -> Result<ModelSpec> {
    Ok(ModelSpec {
        widths: vec![1, 64, 32],
        units: 2,
        level: opts.level,
        domain: opts.squash.natural_domain(),
        lengthscale: opts.lengthscale,
        squash: opts.squash,
        likelihood: LikelihoodConfig::regression(opts.noise_variance)?,
    })
}

/// Mean and latent standard deviation at a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToySummary {
    /// DAK mean against the exact-GP mean at prediction points in [−7, 7].
    pub rmse_vs_exact: f64,
    /// Share of noiseless values inside the DAK ±2sd band on [−7, 7].
    pub coverage: f64,
    /// DAK mean against the noiseless function over all prediction points.
    pub test_rmse: f64,
    pub initial_elbo: f64,
    pub final_elbo: f64,
    pub in_range_points: usize,
}

pub struct ToyRun {
    pub data: ToyData,
    /// At training points then prediction points.
    pub exact: Band,
    pub dak: Band,
    pub summary: ToySummary,
}

fn exact_band(data: &ToyData, noise_variance: f64) -> Result<Band> {
    let gp = DenseGp::one_dim(squared_exponential, noise_variance, &data.train_x, &data.train_y)?;
    let at: Vec<Vec<f64>> = data.train_x.iter().chain(&data.test_x).map(|&x| vec![x]).collect();
    let (mean, cov) = gp.exact_posterior(&at)?;
    let sd = (0..at.len()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
    Ok(Band { mean, sd })
}

pub fn run_toy(opts: &ToyOptions) -> Result<ToyRun> {
    let data = toy_data(opts.data_seed, opts.noise_variance, opts.spaced)?;
    let exact = exact_band(&data, opts.noise_variance)?;

    let spec = toy_spec(opts)?;
    let mut model = DakModel::new(spec, opts.seed)?;
    let raw = Tensor::new(vec![TRAIN_POINTS, 1], data.train_x.clone())?;
    let scaler = if opts.standardize {
        Standardizer::fit(&raw)
    } else {
        Standardizer::identity(1)
    };
    let train_set = TabularDataset::new(
        vec!["x".into(), "y".into()],
        scaler.apply(&raw),
        OwnedTargets::Real(data.train_y.clone()),
    )?;
    let cfg = TrainConfig {
        epochs: opts.steps,
        batch_size: TRAIN_POINTS,
        lr: opts.lr,
        weight_decay: 0.0,
        mode: TrainMode::Full,
        mc_samples: opts.mc_samples,
        seed: opts.seed,
        clip_norm: None,
    };
    let elbo_now = |m: &DakModel| -> Result<f64> {
        Ok(m.elbo(&train_set.x, train_set.y.as_targets(), EllMode::ClosedForm, TRAIN_POINTS, 0)?.elbo)
    };
    let initial_elbo = elbo_now(&model)?;
    train::fit(&mut model, &train_set, None, &cfg).context("training the toy model")?;
    let final_elbo = elbo_now(&model)?;

    let all: Vec<f64> = data.train_x.iter().chain(&data.test_x).copied().collect();
    let (mean, var) = model.predict_moments(&scaler.apply(&Tensor::new(vec![all.len(), 1], all)?))?;
    let dak = Band {
        mean,
        sd: var.iter().map(|v| v.sqrt()).collect(),
    };

    let test_sq: f64 = (0..TEST_POINTS).map(|i| (dak.mean[TRAIN_POINTS + i] - data.test_f[i]).powi(2)).sum();
    let mut sq = 0.0;
    let mut covered = 0;
    let mut count = 0;
    for (i, &x) in data.test_x.iter().enumerate() {
        if x.abs() > TRAIN_RANGE {
            continue;
        }
        let k = TRAIN_POINTS + i;
        sq += (dak.mean[k] - exact.mean[k]).powi(2);
        if (data.test_f[i] - dak.mean[k]).abs() <= 2.0 * dak.sd[k] {
            covered += 1;
        }
        count += 1;
    }
    let summary = ToySummary {
        rmse_vs_exact: (sq / count as f64).sqrt(),
        coverage: covered as f64 / count as f64,
        test_rmse: (test_sq / TEST_POINTS as f64).sqrt(),
        initial_elbo,
        final_elbo,
        in_range_points: count,
    };
    Ok(ToyRun {
        data,
        exact,
        dak,
        summary,
    })
}

/// One row per prediction point, then one per training point. `y` is empty
/// on prediction rows.
pub fn write_toy_csv<W: Write>(run: &ToyRun, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["kind", "x", "y", "f", "exact_mean", "exact_lower", "exact_upper", "dak_mean", "dak_lower", "dak_upper"])?;
    let row = |kind: &str, x: f64, y: Option<f64>, f: f64, k: usize| -> Vec<String> {
        let (em, es) = (run.exact.mean[k], run.exact.sd[k]);
        let (dm, ds) = (run.dak.mean[k], run.dak.sd[k]);
        let mut r = vec![kind.to_string(), fmt(x), y.map(fmt).unwrap_or_default(), fmt(f)];
        r.extend([em, em - 2.0 * es, em + 2.0 * es, dm, dm - 2.0 * ds, dm + 2.0 * ds].map(fmt));
        r
    };
    for (i, &x) in run.data.test_x.iter().enumerate() {
        w.write_record(row("predict", x, None, run.data.test_f[i], TRAIN_POINTS + i))?;
    }
    for (i, &x) in run.data.train_x.iter().enumerate() {
        w.write_record(row("train", x, Some(run.data.train_y[i]), run.data.train_f[i], i))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::Writer::from_writer(out)
}

/// Shortest round-trip representation.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}
