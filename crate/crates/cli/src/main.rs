use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dak_cli::bench::{bench_grid, dump_factor, parse_levels, write_bench_csv};
use dak_cli::checks::{format_table, verify_suite, VerifyOptions};
use dak_cli::experiment::{evaluate_checkpoint, fold_threads, load_dataset, run_experiment, write_experiment};
use dak_cli::toy::{run_toy, write_toy_csv, ToyOptions};
use dak_core::checkpoint::Checkpoint;
use dak_core::config::ExperimentConfig;
use dak_core::grid::Domain;

#[derive(Parser)]
#[command(name = "dak", version, about = "Deep additive kernel models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    /// Closed-form expected log-likelihood.
    Cf,
    /// Monte Carlo expected log-likelihood.
    Mc,
}

#[derive(clap::Args)]
struct EstimatorArgs {
    #[arg(long, value_enum)]
    mode: Option<Estimator>,
    /// Samples for the Monte Carlo estimator.
    #[arg(long)]
    mc_samples: Option<usize>,
}

const DEFAULT_MC: usize = 8;

impl EstimatorArgs {
    /// Resolved sample count; 0 means closed form.
    fn samples(&self, current: usize) -> Result<usize> {
        Ok(match (self.mode, self.mc_samples) {
            (Some(Estimator::Cf), Some(s)) if s > 0 => bail!("--mode cf conflicts with --mc-samples {s}"),
            (Some(Estimator::Cf), _) => 0,
            (Some(Estimator::Mc), Some(0)) => bail!("--mode mc needs --mc-samples > 0"),
            (Some(Estimator::Mc), Some(s)) => s,
            (Some(Estimator::Mc), None) if current == 0 => DEFAULT_MC,
            (_, Some(s)) => s,
            (_, None) => current,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite and print a pass/fail table.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples per head for the closed-form vs sampling comparison.
        #[arg(long, default_value_t = 200_000)]
        mc_samples: usize,
        /// Perturb one factor entry by this amount before checking.
        #[arg(long)]
        inject_fault: Option<f64>,
        /// Also write the results as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the one-dimensional toy problem and write a CSV for plotting.
    Toy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seed for the data; defaults to `--seed`.
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long, default_value = "toy")]
        out: PathBuf,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// k-fold training from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        estimator: EstimatorArgs,
    },
    /// Score a checkpoint on the dataset named in a config file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time factor construction and kernel activation per grid level.
    BenchGrid {
        /// Inclusive range such as `1..16`.
        #[arg(long, default_value = "1..16")]
        levels: String,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the sparse inverse Cholesky factor as triplets.
    DumpFactor {
        #[arg(long)]
        level: u32,
        #[arg(long, default_value_t = 1.0)]
        lengthscale: f64,
        /// `unit` for (0,1) or `symmetric` for (-1,1).
        #[arg(long, default_value = "unit")]
        domain: String,
        /// CSV file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify {
            seed,
            mc_samples,
            inject_fault,
            out,
        } => {
            let outcomes = verify_suite(&VerifyOptions {
                seed,
                mc_samples,
                fault: inject_fault,
            });
            print!("{}", format_table(&outcomes));
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&outcomes)? + "\n")?;
            }
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
            if !failed.is_empty() {
                eprintln!("failed: {}", failed.join(", "));
            }
            Ok(failed.is_empty())
        }
        Command::Toy {
            seed,
            data_seed,
            out,
            estimator,
        } => {
            let defaults = ToyOptions::default();
            let opts = ToyOptions {
                seed,
                data_seed: data_seed.unwrap_or(seed),
                mc_samples: estimator.samples(defaults.mc_samples)?,
                ..defaults
            };
            let run = run_toy(&opts)?;
            fs::create_dir_all(&out)?;
            write_toy_csv(&run, File::create(out.join("toy.csv"))?)?;
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&run.summary)? + "\n")?;
            println!(
                "rmse vs exact {:.4}, coverage {:.3}, elbo {:.4} -> {:.4}",
                run.summary.rmse_vs_exact, run.summary.coverage, run.summary.initial_elbo, run.summary.final_elbo
            );
            Ok(true)
        }
        Command::Train {
            config,
            seed,
            out,
            estimator,
        } => {
            let mut cfg = read_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.train.mc_samples = estimator.samples(cfg.train.mc_samples)?;
            let out = out.unwrap_or_else(|| cfg.out.clone());
            let (ds, classes) = load_dataset(&cfg, &config_dir(&config))?;
            let run = run_experiment(&cfg, &ds, classes, fold_threads(cfg.folds))?;
            write_experiment(&run, &out)?;
            let r = &run.report;
            for (name, stat) in [("rmse", &r.rmse), ("nlpd", &r.nlpd), ("accuracy", &r.accuracy), ("nll", &r.nll), ("ece", &r.ece)] {
                if let Some(s) = stat {
                    println!("{name}: {:.4} ± {:.4}", s.mean, s.std);
                }
            }
            println!("wrote {}", out.display());
            Ok(true)
        }
        Command::Eval {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let cfg = read_config(&config)?;
            let (ds, _) = load_dataset(&cfg, &config_dir(&config))?;
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let report = evaluate_checkpoint(&ck, &ds, seed.unwrap_or(cfg.train.seed))?;
            let json = serde_json::to_string_pretty(&report)? + "\n";
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    fs::write(dir.join("eval.json"), json)?;
                }
                None => print!("{json}"),
            }
            Ok(true)
        }
        Command::BenchGrid { levels, reps, seed, out } => {
            let (lo, hi) = parse_levels(&levels)?;
            let rows = bench_grid(lo, hi, reps, seed)?;
            let mut w = sink(out.as_deref())?;
            write_bench_csv(&rows, &mut w)?;
            w.flush()?;
            Ok(true)
        }
        Command::DumpFactor {
            level,
            lengthscale,
            domain,
            out,
        } => {
            let domain = match domain.as_str() {
                "unit" => Domain::unit(),
                "symmetric" => Domain::symmetric(),
                other => bail!("unknown domain {other:?}; expected unit or symmetric"),
            };
            let mut w = sink(out.as_deref())?;
            dump_factor(level, lengthscale, domain, &mut w)?;
            w.flush()?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
