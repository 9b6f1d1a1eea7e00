use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lvmgp_core::gp_prior;
use lvmgp_core::trainer::{self, ExperimentConfig, SuiteConfig};
use lvmgp_core::Result;

#[derive(Parser)]
#[command(name = "lvmgp", version, about = "Latent variable model with GP prior for noisy PDE data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a TOML experiment file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Leave wall-clock time out of metrics.csv.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Predictive statistics from a checkpoint on a regular grid.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Points per dimension.
        #[arg(long, default_value_t = 201)]
        grid: usize,
        #[arg(long, default_value_t = 512)]
        draws: usize,
        /// Directory for the prediction CSV files (defaults to the checkpoint's).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run a benchmark suite and write summary.csv.
    Benchmark {
        #[arg(long)]
        suite: PathBuf,
    },
    /// Check the truncated KL prior against the exact kernel.
    GpValidate {
        #[arg(long)]
        lengthscale: f64,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        terms: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            deterministic,
            output_dir,
            quiet,
        } => {
            let mut table: toml::Table = fs::read_to_string(&config)?.parse()?;
            if let Some(s) = seed {
                table.insert("seed".into(), toml::Value::Integer(s as i64));
            }
            if deterministic {
                table.insert("deterministic".into(), true.into());
            }
            if let Some(d) = output_dir {
                table.insert("output_dir".into(), d.to_string_lossy().into_owned().into());
            }
            let cfg = ExperimentConfig::from_table(table)?;
            let summary = trainer::run_experiment(&cfg, |row| {
                if !quiet {
                    eprintln!(
                        "step {:>6}  phase {}  lr {:.2e}  total {:.6e}  reg {:.4e}",
                        row.step, row.phase, row.lr, row.loss.total, row.loss.reg
                    );
                }
            })?;
            print!("{}", summary.metrics.to_csv());
            eprintln!("outputs written to {}", summary.output_dir.display());
        }
        Command::Predict {
            checkpoint,
            grid,
            draws,
            output_dir,
        } => {
            let (cfg, pred) = trainer::predict_checkpoint(&checkpoint, grid, draws)?;
            let dir = output_dir.unwrap_or_else(|| checkpoint.parent().map(PathBuf::from).unwrap_or_default());
            let spec = cfg.spec()?;
            trainer::write_prediction(&dir, &spec, &pred, None, cfg.svg)?;
            if let Some(l) = &pred.lambda {
                for (i, n) in spec.unknown_names.iter().enumerate() {
                    println!("{n}: mean {:.6} std {:.4e}", l.mean[i], l.std[i]);
                }
            }
            eprintln!("predictions written to {}", dir.display());
        }
        Command::Benchmark { suite } => {
            let suite = SuiteConfig::from_toml(&fs::read_to_string(&suite)?)?;
            let out = trainer::run_benchmark(&suite, |tag| eprintln!("running {tag}"))?;
            print!("{out}");
        }
        Command::GpValidate {
            lengthscale,
            samples,
            terms,
            seed,
            output,
        } => {
            let v = gp_prior::validate(lengthscale, samples, terms, seed)?;
            match output {
                Some(p) => fs::write(p, v.to_csv())?,
                None => print!("{}", v.to_csv()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
