use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metalora::config::RunConfig;
use metalora::meta::Method;
use metalora::runner::{self, RunnerError};

#[derive(Parser)]
#[command(
    name = "metalora",
    about = "Domain-generalization training for low-rank adapters: synthetic corpora, \
             ERM and meta-learning runs, EER/DET evaluation, adapter SVD analysis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

impl ConfigArgs {
    /// Parse the file and fold in the flag overrides; the merged result
    /// is what gets persisted by the commands.
    fn load(&self) -> Result<RunConfig, RunnerError> {
        let mut cfg = RunConfig::from_path(&self.config)?;
        if let Some(out) = &self.out {
            cfg.run.out_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.run.seeds = seeds.clone();
        }
        cfg.resolve().map_err(RunnerError::from)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic corpus to disk with a manifest and
    /// generation receipt.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus output directory.
        #[arg(long)]
        corpus_out: PathBuf,
        /// Regenerate over an existing non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model per seed; keeps the best checkpoint and an epoch
    /// log per seed plus a validation summary.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score trained checkpoints on the eval sets and aggregate EERs.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also export DET sweeps per (set, seed).
        #[arg(long)]
        det: bool,
    },
    /// Train and evaluate the cross-product of methods and ranks.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        ranks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "erm,mldg")]
        methods: Vec<String>,
    },
    /// Export adapter singular-value grids and effective-rank tables.
    Analyze {
        /// Checkpoint to analyze.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for the tables.
        #[arg(long)]
        out: PathBuf,
        /// Second checkpoint for a side-by-side effective-rank table.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
}

fn parse_methods(raw: &[String]) -> Result<Vec<Method>, RunnerError> {
    raw.iter()
        .map(|m| match m.as_str() {
            "erm" => Ok(Method::Erm),
            "mldg" => Ok(Method::Mldg),
            other => Err(RunnerError::Config(format!(
                "unknown method `{other}` (expected erm or mldg)"
            ))),
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    match cli.command {
        Command::Generate {
            config,
            corpus_out,
            force,
        } => {
            let cfg = config.load()?;
            let summary = runner::cmd_generate(&cfg, &corpus_out, force)?;
            println!(
                "wrote {} (train {}, dev {}, eval {})",
                summary.manifest.display(),
                summary.train_examples,
                summary.dev_examples,
                summary.eval_examples
            );
        }
        Command::Train { config } => {
            let cfg = config.load()?;
            let summary = runner::cmd_train(&cfg)?;
            for s in &summary.seeds {
                println!(
                    "seed {}: best epoch {} val EER {:.2}% ({} epochs{})",
                    s.seed,
                    s.best_epoch,
                    s.best_val_eer_pct,
                    s.epochs_run,
                    if s.stopped_early { ", early stop" } else { "" }
                );
            }
            match summary.val_eer_std_pct {
                Some(std) => println!(
                    "val EER {:.2} +/- {:.2} % over {} seeds",
                    summary.val_eer_mean_pct,
                    std,
                    summary.seeds.len()
                ),
                None => println!("val EER {:.2} %", summary.val_eer_mean_pct),
            }
        }
        Command::Eval { config, det } => {
            let cfg = config.load()?;
            let report = runner::cmd_eval(&cfg, det)?;
            for set in &report.sets {
                match set.eer_std_pct {
                    Some(std) => println!(
                        "{}: EER {:.2} +/- {:.2} % over {} seeds",
                        set.name,
                        set.eer_mean_pct,
                        std,
                        set.per_seed.len()
                    ),
                    None => println!("{}: EER {:.2} %", set.name, set.eer_mean_pct),
                }
            }
        }
        Command::Sweep {
            config,
            ranks,
            methods,
        } => {
            let cfg = config.load()?;
            let methods = parse_methods(&methods)?;
            let summary = runner::cmd_sweep(&cfg, &ranks, &methods)?;
            for row in &summary.rows {
                let cells: Vec<String> = row
                    .sets
                    .iter()
                    .map(|s| match s.eer_std_pct {
                        Some(std) => format!("{} {:.2}+/-{:.2}%", s.name, s.eer_mean_pct, std),
                        None => format!("{} {:.2}%", s.name, s.eer_mean_pct),
                    })
                    .collect();
                println!(
                    "{} rank {} ({} params): {}",
                    row.method,
                    row.rank,
                    row.trainable_params,
                    cells.join(", ")
                );
            }
        }
        Command::Analyze {
            checkpoint,
            out,
            compare,
        } => {
            let summary = runner::cmd_analyze(&checkpoint, &out, compare.as_deref())?;
            println!("wrote {}", summary.grids.display());
            println!("wrote {}", summary.effective_rank.display());
            if let Some(cmp) = summary.comparison {
                println!("wrote {}", cmp.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code().clamp(0, 255) as u8)
        }
    }
}
