//! k-fold training runs driven by an [`ExperimentConfig`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use dak_core::checkpoint::Checkpoint;
use dak_core::config::{DataSource, ExperimentConfig};
use dak_core::data::{OwnedTargets, Standardizer, TabularDataset, TargetScaler, TaskKind};
use dak_core::model::DakModel;
use dak_core::train::{self, EpochRecord, Metrics, PretrainConfig, TrainMode, Validation};

pub const SCHEMA: u32 = 1;

/// Reads the configured dataset and the number of classes it carries.
pub fn load_dataset(cfg: &ExperimentConfig, base: &Path) -> Result<(TabularDataset, Option<usize>)> {
    let ds = match &cfg.source {
        DataSource::Synthetic(spec) => spec.generate(cfg.train.seed),
        DataSource::Csv(path) => {
            let path = if path.is_absolute() { path.clone() } else { base.join(path) };
            let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            let (ds, report) = TabularDataset::from_csv(std::io::BufReader::new(file), cfg.task)
                .with_context(|| format!("reading {}", path.display()))?;
            if report.dropped_incomplete > 0 {
                eprintln!("{}: dropped {} incomplete rows", path.display(), report.dropped_incomplete);
            }
            if let Some(c) = report.classes {
                eprintln!("{}: {c} classes", path.display());
            }
            ds
        }
    };
    let classes = match &ds.y {
        OwnedTargets::Labels(l) => Some(l.iter().max().map_or(0, |m| m + 1)),
        OwnedTargets::Real(_) => None,
    };
    if cfg.task == TaskKind::Regression && classes.is_some() {
        bail!("regression task but the data carries labels");
    }
    Ok((ds, classes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_rows: usize,
    pub valid_rows: usize,
    pub final_elbo: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Wall time for pre-training, training and evaluation.
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema: u32,
    pub task: &'static str,
    pub rows: usize,
    pub folds: Vec<FoldReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlpd: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<Stat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece: Option<Stat>,
    pub seconds: Stat,
}

pub struct FoldRun {
    pub report: FoldReport,
    pub history: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
}

pub struct ExperimentRun {
    pub report: Report,
    pub folds: Vec<FoldRun>,
}

/// Fold worker count: `DAK_THREADS` if set, otherwise the machine's
/// parallelism, never more than the number of folds.
pub fn fold_threads(folds: usize) -> usize {
    let cap = std::env::var("DAK_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    cap.min(folds).max(1)
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(fold as u64 + 1))
}

fn run_fold(cfg: &ExperimentConfig, ds: &TabularDataset, classes: Option<usize>, fold: usize, split: &train::Fold) -> Result<FoldRun> {
    let start = Instant::now();
    let seed = fold_seed(cfg.train.seed, fold);
    let raw_train = ds.subset(&split.train);
    let raw_valid = ds.subset(&split.valid);
    let features = Standardizer::fit(&raw_train.x);
    let targets = match &raw_train.y {
        OwnedTargets::Real(y) => TargetScaler::fit(y),
        OwnedTargets::Labels(_) => TargetScaler::identity(),
    };
    let train_set = TabularDataset::new(
        raw_train.columns.clone(),
        features.apply(&raw_train.x),
        match &raw_train.y {
            OwnedTargets::Real(y) => OwnedTargets::Real(targets.forward(y)),
            labels => labels.clone(),
        },
    )?;
    let valid_set = TabularDataset::new(raw_valid.columns.clone(), features.apply(&raw_valid.x), raw_valid.y.clone())?;

    let spec = cfg.model_spec(ds.dim(), classes)?;
    let mut model = DakModel::new(spec, seed)?;
    if cfg.train.mode == TrainMode::FineTune && cfg.pretrain_epochs > 0 {
        let pre = PretrainConfig {
            epochs: cfg.pretrain_epochs,
            batch_size: cfg.train.batch_size,
            lr: cfg.train.lr,
            weight_decay: cfg.train.weight_decay,
            seed,
        };
        train::pretrain(&mut model, &train_set, &pre).with_context(|| format!("pre-training fold {fold}"))?;
    }
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let valid = Validation {
        data: &valid_set,
        scaler: targets,
    };
    let history = train::fit(&mut model, &train_set, Some(valid), &tc).with_context(|| format!("training fold {fold}"))?;
    let metrics = train::evaluate(&model, &valid_set, &targets, seed)?;
    let final_elbo = history.last().map_or(f64::NAN, |r| r.elbo);
    let report = FoldReport {
        fold,
        train_rows: split.train.len(),
        valid_rows: split.valid.len(),
        final_elbo,
        metrics,
        train_seconds: start.elapsed().as_secs_f64(),
    };
    let checkpoint = Checkpoint {
        model,
        features: Some(features),
        targets: matches!(ds.y, OwnedTargets::Real(_)).then_some(targets),
    };
    Ok(FoldRun {
        report,
        history,
        checkpoint,
    })
}

/// Trains and evaluates every fold. Results do not depend on `threads`.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &TabularDataset, classes: Option<usize>, threads: usize) -> Result<ExperimentRun> {
    cfg.validate()?;
    let splits = train::kfold(ds.len(), cfg.folds, cfg.train.seed)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<FoldRun>>>> = Mutex::new((0..splits.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, splits.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= splits.len() {
                    break;
                }
                let r = run_fold(cfg, ds, classes, k, &splits[k]);
                slots.lock().expect("no worker panicked")[k] = Some(r);
            });
        }
    });
    let folds = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.ok_or_else(|| anyhow!("fold did not run"))?)
        .collect::<Result<Vec<_>>>()?;

    let pick = |f: fn(&Metrics) -> Option<f64>| -> Option<Stat> {
        let v: Option<Vec<f64>> = folds.iter().map(|r| f(&r.report.metrics)).collect();
        v.map(|v| Stat::of(&v))
    };
    let report = Report {
        schema: SCHEMA,
        task: cfg.task.name(),
        rows: ds.len(),
        rmse: pick(|m| m.rmse),
        nlpd: pick(|m| m.nlpd),
        accuracy: pick(|m| m.accuracy),
        nll: pick(|m| m.nll),
        ece: pick(|m| m.ece),
        seconds: Stat::of(&folds.iter().map(|r| r.report.train_seconds).collect::<Vec<_>>()),
        folds: folds.iter().map(|r| r.report.clone()).collect(),
    };
    Ok(ExperimentRun { report, folds })
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    fold: usize,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Writes `metrics.json`, `history.jsonl` and `fold-<k>.ckpt` into `dir`.
pub fn write_experiment(run: &ExperimentRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let metrics = serde_json::to_string_pretty(&run.report)?;
    fs::write(dir.join("metrics.json"), metrics + "\n")?;
    let mut hist = BufWriter::new(File::create(dir.join("history.jsonl"))?);
    for f in &run.folds {
        for record in &f.history {
            serde_json::to_writer(&mut hist, &HistoryLine { fold: f.report.fold, record })?;
            hist.write_all(b"\n")?;
        }
    }
    hist.flush()?;
    for f in &run.folds {
        f.checkpoint.save(&dir.join(format!("fold-{}.ckpt", f.report.fold)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub schema: u32,
    pub rows: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Scores a checkpoint on raw data, applying the preprocessing stored in it.
pub fn evaluate_checkpoint(ck: &Checkpoint, ds: &TabularDataset, seed: u64) -> Result<EvalReport> {
    let features = ck.features.clone().unwrap_or_else(|| Standardizer::identity(ds.dim()));
    if features.mean.len() != ds.dim() {
        bail!("checkpoint expects {} features, data has {}", features.mean.len(), ds.dim());
    }
    let data = TabularDataset::new(ds.columns.clone(), features.apply(&ds.x), ds.y.clone())?;
    let targets = ck.targets.unwrap_or_else(TargetScaler::identity);
    let metrics = train::evaluate(&ck.model, &data, &targets, seed)?;
    Ok(EvalReport {
        schema: SCHEMA,
        rows: ds.len(),
        metrics,
    })
}
