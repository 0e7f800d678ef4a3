//! Flat `key = value` experiment configuration.
//!
//! One key per line; blank lines and `#` comments are ignored. Every key is
//! optional and falls back to the regression defaults below.
//!
//! ```text
//! task = regression            # or classification
//! data = wine.csv              # relative to the config file
//! # synthetic = linear:n=500,d=5,noise=0.1
//! hidden = 64,32,16            # MLP widths after the input; the last is D_w
//! units = 16
//! level = 3
//! squash = sigmoid             # or scaled-tanh
//! domain = 0,1                 # must match the squash
//! lengthscale = 1
//! noise_variance = 0.01
//! epochs = 100
//! batch_size = 512
//! lr = 0.001
//! weight_decay = 0.0005
//! mode = full                  # or fine-tune
//! mc_samples = 0               # 0 = closed form
//! clip_norm = none
//! pretrain_epochs = 50
//! folds = 5
//! seed = 0
//! out = runs/wine
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::{OwnedTargets, TabularDataset, TaskKind};
use crate::grid::{Domain, MAX_LEVEL};
use crate::head::Squash;
use crate::model::ModelSpec;
use crate::train::{TrainConfig, TrainMode};
use crate::vi::LikelihoodConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}: {reason}")]
    Value {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad synthetic spec {spec:?}: {reason}")]
    Synthetic { spec: String, reason: String },
}

/// Generated datasets for smoke tests and oracle comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyntheticSpec {
    /// `y = xᵀβ + ε` with standard-normal `x` and `β`, `ε ~ N(0, noise²)`.
    Linear { n: usize, d: usize, noise: f64 },
    /// Gaussian clusters with standard-normal centres scaled by 3.
    Blobs { n: usize, d: usize, classes: usize, spread: f64 },
}

const MAX_SYNTHETIC_ROWS: usize = 1 << 22;
const MAX_SYNTHETIC_DIM: usize = 4096;

impl SyntheticSpec {
    pub fn task(&self) -> TaskKind {
        match self {
            SyntheticSpec::Linear { .. } => TaskKind::Regression,
            SyntheticSpec::Blobs { .. } => TaskKind::Classification,
        }
    }

    pub fn generate(&self, seed: u64) -> TabularDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        match *self {
            SyntheticSpec::Linear { n, d, noise } => {
                let beta: Vec<f64> = (0..d).map(|_| normal()).collect();
                let x: Vec<f64> = (0..n * d).map(|_| normal()).collect();
                let y = (0..n)
                    .map(|i| {
                        let f: f64 = x[i * d..(i + 1) * d].iter().zip(&beta).map(|(a, b)| a * b).sum();
                        f + noise * normal()
                    })
                    .collect();
                build(d, "y", x, OwnedTargets::Real(y))
            }
            SyntheticSpec::Blobs { n, d, classes, spread } => {
                let centres: Vec<f64> = (0..classes * d).map(|_| 3.0 * normal()).collect();
                let mut x = Vec::with_capacity(n * d);
                let mut y = Vec::with_capacity(n);
                for i in 0..n {
                    let c = i % classes;
                    for j in 0..d {
                        x.push(centres[c * d + j] + spread * normal());
                    }
                    y.push(c);
                }
                build(d, "label", x, OwnedTargets::Labels(y))
            }
        }
    }
}

fn build(d: usize, target: &str, x: Vec<f64>, y: OwnedTargets) -> TabularDataset {
    let mut columns: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    columns.push(target.to_string());
    let n = y.len();
    TabularDataset::new(columns, Tensor::new(vec![n, d], x).expect("generated shape"), y).expect("generated dataset")
}

impl FromStr for SyntheticSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let err = |reason: &str| ConfigError::Synthetic {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        let (kind, rest) = s.trim().split_once(':').ok_or_else(|| err("expected kind:key=value,..."))?;
        let mut n = None;
        let mut d = None;
        let mut noise = None;
        let mut classes = None;
        let mut spread = None;
        for part in rest.split(',') {
            let (k, v) = part.split_once('=').ok_or_else(|| err("expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let int = |v: &str| v.parse::<usize>().map_err(|_| err("expected an integer"));
            let float = |v: &str| match v.parse::<f64>() {
                Ok(x) if x.is_finite() && x >= 0.0 => Ok(x),
                _ => Err(err("expected a non-negative number")),
            };
            let slot_taken = match k {
                "n" => n.replace(int(v)?).is_some(),
                "d" => d.replace(int(v)?).is_some(),
                "noise" => noise.replace(float(v)?).is_some(),
                "classes" => classes.replace(int(v)?).is_some(),
                "spread" => spread.replace(float(v)?).is_some(),
                _ => return Err(err("unknown key")),
            };
            if slot_taken {
                return Err(err("duplicate key"));
            }
        }
        let n = n.ok_or_else(|| err("missing n"))?;
        let d = d.ok_or_else(|| err("missing d"))?;
        if n == 0 || n > MAX_SYNTHETIC_ROWS || d == 0 || d > MAX_SYNTHETIC_DIM || n.saturating_mul(d) > MAX_SYNTHETIC_ROWS {
            return Err(err("size out of range"));
        }
        match kind.trim() {
            "linear" => {
                if classes.is_some() || spread.is_some() {
                    return Err(err("linear takes n, d, noise"));
                }
                Ok(SyntheticSpec::Linear {
                    n,
                    d,
                    noise: noise.unwrap_or(0.1),
                })
            }
            "blobs" => {
                if noise.is_some() {
                    return Err(err("blobs takes n, d, classes, spread"));
                }
                let classes = classes.unwrap_or(2);
                if !(2..=n).contains(&classes) {
                    return Err(err("classes must be in 2..=n"));
                }
                Ok(SyntheticSpec::Blobs {
                    n,
                    d,
                    classes,
                    spread: spread.unwrap_or(1.0),
                })
            }
            _ => Err(err("unknown kind")),
        }
    }
}

impl fmt::Display for SyntheticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticSpec::Linear { n, d, noise } => write!(f, "linear:n={n},d={d},noise={noise:?}"),
            SyntheticSpec::Blobs { n, d, classes, spread } => {
                write!(f, "blobs:n={n},d={d},classes={classes},spread={spread:?}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub source: DataSource,
    pub hidden: Vec<usize>,
    pub units: usize,
    pub level: u32,
    pub domain: Domain,
    pub squash: Squash,
    pub lengthscale: f64,
    pub noise_variance: f64,
    pub train: TrainConfig,
    pub pretrain_epochs: usize,
    pub folds: usize,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Regression,
            source: DataSource::Synthetic(SyntheticSpec::Linear {
                n: 500,
                d: 5,
                noise: 0.1,
            }),
            hidden: vec![64, 32, 16],
            units: 16,
            level: 3,
            domain: Domain::unit(),
            squash: Squash::Sigmoid,
            lengthscale: 1.0,
            noise_variance: 0.01,
            train: TrainConfig::default(),
            pretrain_epochs: 50,
            folds: 5,
            out: PathBuf::from("runs"),
        }
    }
}

const KEYS: &[&str] = &[
    "task",
    "data",
    "synthetic",
    "hidden",
    "units",
    "level",
    "squash",
    "domain",
    "lengthscale",
    "noise_variance",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "mode",
    "mc_samples",
    "clip_norm",
    "pretrain_epochs",
    "folds",
    "seed",
    "out",
];

fn parse_float(v: &str) -> Result<f64, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err("expected a finite number".into()),
    }
}

fn parse_int<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>().map_err(|_| "expected a non-negative integer".into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: "expected key = value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            };
            if seen.contains(&known) || (known == "data" && seen.contains(&"synthetic")) || (known == "synthetic" && seen.contains(&"data")) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(known);
            cfg.set(known, value).map_err(|reason| ConfigError::Value {
                line,
                key: key.to_string(),
                value: value.to_string(),
                reason,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "task" => {
                self.task = match v {
                    "regression" => TaskKind::Regression,
                    "classification" => TaskKind::Classification,
                    _ => return Err("expected regression or classification".into()),
                }
            }
            "data" => {
                if v.is_empty() {
                    return Err("empty path".into());
                }
                self.source = DataSource::Csv(PathBuf::from(v));
            }
            "synthetic" => self.source = DataSource::Synthetic(v.parse().map_err(|e: ConfigError| e.to_string())?),
            "hidden" => {
                let widths = v
                    .split(',')
                    .map(|w| parse_int::<usize>(w.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                if widths.contains(&0) {
                    return Err("widths must be positive".into());
                }
                self.hidden = widths;
            }
            "units" => self.units = parse_int(v)?,
            "level" => self.level = parse_int(v)?,
            "squash" => {
                self.squash = match v {
                    "sigmoid" => Squash::Sigmoid,
                    "scaled-tanh" => Squash::ScaledTanh,
                    _ => return Err("expected sigmoid or scaled-tanh".into()),
                }
            }
            "domain" => {
                let (lo, hi) = v.split_once(',').ok_or("expected lo,hi")?;
                self.domain = Domain::new(parse_float(lo.trim())?, parse_float(hi.trim())?).map_err(|e| e.to_string())?;
            }
            "lengthscale" => self.lengthscale = parse_float(v)?,
            "noise_variance" => self.noise_variance = parse_float(v)?,
            "epochs" => self.train.epochs = parse_int(v)?,
            "batch_size" => self.train.batch_size = parse_int(v)?,
            "lr" => self.train.lr = parse_float(v)?,
            "weight_decay" => self.train.weight_decay = parse_float(v)?,
            "mode" => {
                self.train.mode = match v {
                    "full" => TrainMode::Full,
                    "fine-tune" => TrainMode::FineTune,
                    _ => return Err("expected full or fine-tune".into()),
                }
            }
            "mc_samples" => self.train.mc_samples = parse_int(v)?,
            "clip_norm" => {
                self.train.clip_norm = if v == "none" { None } else { Some(parse_float(v)?) };
            }
            "pretrain_epochs" => self.pretrain_epochs = parse_int(v)?,
            "folds" => self.folds = parse_int(v)?,
            "seed" => self.train.seed = parse_int(v)?,
            "out" => {
                if v.is_empty() {
                    return Err("empty path".into());
                }
                self.out = PathBuf::from(v);
            }
            _ => unreachable!("key list is exhaustive"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.squash.natural_domain() != self.domain {
            let d = self.squash.natural_domain();
            return bad(format!(
                "squash {} requires domain {},{}; got {},{}",
                self.squash.name(),
                d.lo(),
                d.hi(),
                self.domain.lo(),
                self.domain.hi()
            ));
        }
        if self.train.mc_samples == 0 && self.task != TaskKind::Regression {
            return bad("closed form (mc_samples = 0) is only available for regression".into());
        }
        if let DataSource::Synthetic(s) = &self.source {
            if s.task() != self.task {
                return bad(format!("synthetic {} data does not suit a {} task", s, self.task.name()));
            }
        }
        if self.hidden.is_empty() {
            return bad("hidden needs at least one width".into());
        }
        if self.units == 0 {
            return bad("units must be positive".into());
        }
        if self.level == 0 || self.level > MAX_LEVEL {
            return bad(format!("level must be in 1..={MAX_LEVEL}"));
        }
        if !(self.lengthscale > 0.0) {
            return bad("lengthscale must be positive".into());
        }
        if !(self.noise_variance > 0.0) {
            return bad("noise_variance must be positive".into());
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        let lik = match self.task {
            TaskKind::Regression => LikelihoodConfig::regression(self.noise_variance).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            TaskKind::Classification => LikelihoodConfig::classification(2).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        };
        self.train.validate(&lik).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Model architecture for data with `input_dim` features (and `classes`
    /// labels for classification).
    pub fn model_spec(&self, input_dim: usize, classes: Option<usize>) -> Result<ModelSpec, ConfigError> {
        let likelihood = match self.task {
            TaskKind::Regression => LikelihoodConfig::regression(self.noise_variance),
            TaskKind::Classification => LikelihoodConfig::classification(classes.unwrap_or(0)),
        }
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden);
        Ok(ModelSpec {
            widths,
            units: self.units,
            level: self.level,
            domain: self.domain,
            lengthscale: self.lengthscale,
            squash: self.squash,
            likelihood,
        })
    }
}

fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return &line[..i];
        }
    }
    line
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task = {}", self.task.name())?;
        match &self.source {
            DataSource::Csv(p) => writeln!(f, "data = {}", p.display())?,
            DataSource::Synthetic(s) => writeln!(f, "synthetic = {s}")?,
        }
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        writeln!(f, "hidden = {}", hidden.join(","))?;
        writeln!(f, "units = {}", self.units)?;
        writeln!(f, "level = {}", self.level)?;
        writeln!(f, "squash = {}", self.squash.name())?;
        writeln!(f, "domain = {:?},{:?}", self.domain.lo(), self.domain.hi())?;
        writeln!(f, "lengthscale = {:?}", self.lengthscale)?;
        writeln!(f, "noise_variance = {:?}", self.noise_variance)?;
        writeln!(f, "epochs = {}", self.train.epochs)?;
        writeln!(f, "batch_size = {}", self.train.batch_size)?;
        writeln!(f, "lr = {:?}", self.train.lr)?;
        writeln!(f, "weight_decay = {:?}", self.train.weight_decay)?;
        let mode = match self.train.mode {
            TrainMode::Full => "full",
            TrainMode::FineTune => "fine-tune",
        };
        writeln!(f, "mode = {mode}")?;
        writeln!(f, "mc_samples = {}", self.train.mc_samples)?;
        match self.train.clip_norm {
            Some(c) => writeln!(f, "clip_norm = {c:?}")?,
            None => writeln!(f, "clip_norm = none")?,
        }
        writeln!(f, "pretrain_epochs = {}", self.pretrain_epochs)?;
        writeln!(f, "folds = {}", self.folds)?;
        writeln!(f, "seed = {}", self.train.seed)?;
        writeln!(f, "out = {}", self.out.display())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_config(seed: u64) -> ExperimentConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ExperimentConfig::default();
        cfg.task = if rng.gen_bool(0.5) {
            TaskKind::Regression
        } else {
            TaskKind::Classification
        };
        cfg.source = match (cfg.task, rng.gen_bool(0.5)) {
            (_, true) => DataSource::Csv(PathBuf::from(format!("data/set-{}.csv", rng.gen::<u16>()))),
            (TaskKind::Regression, false) => DataSource::Synthetic(SyntheticSpec::Linear {
                n: rng.gen_range(10..1000),
                d: rng.gen_range(1..20),
                noise: rng.gen_range(0.0..1.0),
            }),
            (TaskKind::Classification, false) => DataSource::Synthetic(SyntheticSpec::Blobs {
                n: rng.gen_range(10..1000),
                d: rng.gen_range(1..20),
                classes: rng.gen_range(2..10),
                spread: rng.gen_range(0.1..2.0),
            }),
        };
        cfg.hidden = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..128)).collect();
        cfg.units = rng.gen_range(1..32);
        cfg.level = rng.gen_range(1..10);
        cfg.squash = if rng.gen_bool(0.5) { Squash::Sigmoid } else { Squash::ScaledTanh };
        cfg.domain = cfg.squash.natural_domain();
        cfg.lengthscale = rng.gen_range(0.05..5.0);
        cfg.noise_variance = rng.gen_range(1e-4..1.0);
        cfg.train.epochs = rng.gen_range(0..500);
        cfg.train.batch_size = rng.gen_range(1..2048);
        cfg.train.lr = rng.gen_range(1e-5..0.1);
        cfg.train.weight_decay = rng.gen_range(0.0..1e-2);
        cfg.train.mode = if rng.gen_bool(0.5) { TrainMode::Full } else { TrainMode::FineTune };
        cfg.train.mc_samples = match cfg.task {
            TaskKind::Regression => rng.gen_range(0..64),
            TaskKind::Classification => rng.gen_range(1..64),
        };
        cfg.train.clip_norm = if rng.gen_bool(0.3) { Some(rng.gen_range(0.1..100.0)) } else { None };
        cfg.pretrain_epochs = rng.gen_range(0..100);
        cfg.folds = rng.gen_range(2..10);
        cfg.train.seed = rng.gen();
        cfg.out = PathBuf::from(format!("out/run-{}", rng.gen::<u16>()));
        cfg
    }

    #[test]
    fn parses_the_documented_example() {
        let text = "
# wine recipe
task = regression
data = wine.csv   # relative
hidden = 64, 32, 16
units = 16
level = 3
squash = sigmoid
domain = 0,1
noise_variance = 0.01
mc_samples = 0
out = runs/wine
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.source, DataSource::Csv("wine.csv".into()));
        assert_eq!(cfg.hidden, vec![64, 32, 16]);
        assert_eq!(cfg.train.batch_size, 512);
        assert_eq!(cfg.out, PathBuf::from("runs/wine"));
        let spec = cfg.model_spec(11, None).unwrap();
        assert_eq!(spec.widths, vec![11, 64, 32, 16]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            ExperimentConfig::parse("units = 3\nbogus = 1\n"),
            Err(ConfigError::UnknownKey {
                line: 2,
                key: "bogus".into()
            })
        );
        assert!(matches!(ExperimentConfig::parse("units\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            ExperimentConfig::parse("units = 1\nunits = 2\n"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(ExperimentConfig::parse("lr = abc\n"), Err(ConfigError::Value { line: 1, .. })));
        assert!(matches!(
            ExperimentConfig::parse("data = a.csv\nsynthetic = linear:n=5,d=1\n"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn domain_must_match_squash() {
        let err = ExperimentConfig::parse("squash = scaled-tanh\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        assert!(ExperimentConfig::parse("squash = scaled-tanh\ndomain = -1,1\n").is_ok());
    }

    #[test]
    fn closed_form_requires_regression() {
        let err = ExperimentConfig::parse("task = classification\nsynthetic = blobs:n=30,d=2,classes=3\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        assert!(ExperimentConfig::parse("task = classification\nsynthetic = blobs:n=30,d=2\nmc_samples = 8\n").is_ok());
    }

    #[test]
    fn synthetic_specs() {
        let s: SyntheticSpec = "linear:n=50,d=3,noise=0.2".parse().unwrap();
        assert_eq!(s, SyntheticSpec::Linear { n: 50, d: 3, noise: 0.2 });
        assert_eq!(s.to_string().parse::<SyntheticSpec>().unwrap(), s);
        let ds = s.generate(1);
        assert_eq!((ds.len(), ds.dim()), (50, 3));
        assert_eq!(ds, s.generate(1));
        let b: SyntheticSpec = "blobs:n=9,d=2,classes=3".parse().unwrap();
        assert_eq!(b.generate(0).y, OwnedTargets::Labels(vec![0, 1, 2, 0, 1, 2, 0, 1, 2]));
        for bad in ["linear", "linear:n=0,d=1", "cubic:n=2,d=1", "linear:n=5,d=1,n=3", "blobs:n=5,d=1,classes=9"] {
            assert!(bad.parse::<SyntheticSpec>().is_err(), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn round_trip(seed in any::<u64>()) {
            let cfg = random_config(seed);
            prop_assert!(cfg.validate().is_ok());
            let text = cfg.to_string();
            let back = ExperimentConfig::parse(&text).unwrap();
            prop_assert_eq!(&back, &cfg);
            prop_assert_eq!(back.to_string(), text);
        }
    }
}
