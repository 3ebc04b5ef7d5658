//! Command line front end: train runs into archives, sweep pool sizes,
//! probe stored checkpoints, verify the hand-built network, export metric
//! streams as CSV, and re-analyze archives.
//!
//! Exit codes: 0 success, 1 failed construction verification, 2 config or
//! usage error, 3 runtime failure, 4 sweep with recorded per-run failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use plateaulab::error::Error;
use plateaulab::runner::{
    cmd_analyze, cmd_construct_verify, cmd_export_csv, cmd_probe, cmd_sweep, cmd_train,
};

#[derive(Parser)]
#[command(name = "plateaulab", version, about = "Learning-plateau experiments on small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training run from a JSON config into a fresh archive.
    Train {
        /// Run config file.
        config: PathBuf,
        /// Override a config field, e.g. --set train.lr=0.001 (repeatable).
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
    },
    /// Run a pool-size x seed grid of runs under one base directory.
    Sweep {
        /// Base run config; each cell overrides pool size and seed.
        config: PathBuf,
        /// Override a config field before deriving the grid (repeatable).
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
        /// Mapping-pool sizes to sweep (at least two distinct).
        #[arg(long = "pool-k", value_name = "K", num_args = 1.., required = true)]
        pool_ks: Vec<usize>,
        /// Seeds; the grid runs every (pool size, seed) pair.
        #[arg(long, value_name = "SEED", num_args = 1.., required = true)]
        seeds: Vec<u64>,
        /// Maximum concurrent runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Recompute probe reports from a stored checkpoint.
    Probe {
        /// Run archive directory.
        archive: PathBuf,
        /// Epoch boundary to probe (0 = initialization).
        #[arg(long)]
        epoch: usize,
    },
    /// Check the hand-built network against its closed-form targets.
    ConstructVerify {
        #[arg(long, default_value_t = 2)]
        n_factors: usize,
        #[arg(long, default_value_t = 2)]
        n_values: usize,
        /// Largest context length to score.
        #[arg(long, default_value_t = 4)]
        i_max: usize,
        /// Monte-Carlo samples per context length.
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        /// Sequences for the semantic/numeric equivalence stage.
        #[arg(long, default_value_t = 200)]
        equivalence: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full report as JSON to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Flatten archive metric streams into one CSV on stdout.
    ExportCsv {
        /// Run archive directories; none prints the header only.
        archives: Vec<PathBuf>,
    },
    /// Recompute run summaries, and the grid aggregate when possible.
    Analyze {
        /// Run archive directories.
        #[arg(required = true)]
        archives: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train { config, sets } => {
            let run = cmd_train(&config, &sets)?;
            let t = &run.summary.transition;
            let transition = match t.epoch {
                Some(e) => format!("transition at epoch {e}"),
                None => format!("no transition within {} epochs", t.plateau_length),
            };
            println!(
                "run {}: final accuracy {:.4}, {}; archive at {}",
                run.archive.run_id(),
                run.summary.final_accuracy,
                transition,
                run.archive.dir().display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            sets,
            pool_ks,
            seeds,
            workers,
        } => {
            let out = cmd_sweep(&config, &sets, &pool_ks, &seeds, workers)?;
            for r in out.report.runs.iter().filter(|r| r.error.is_some()) {
                eprintln!(
                    "run pool_k={} seed={} failed: {}",
                    r.pool_k,
                    r.seed,
                    r.error.as_deref().unwrap_or("unknown")
                );
            }
            println!(
                "sweep: {} runs, {} failed; report at {}",
                out.report.runs.len(),
                out.report.failed,
                out.report_path.display()
            );
            if out.report.failed > 0 {
                Ok(ExitCode::from(4))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
        Command::Probe { archive, epoch } => {
            for r in cmd_probe(&archive, epoch)? {
                println!(
                    "epoch {epoch} {} probe: score {:.6} at layer {} over {} sequences",
                    r.mode, r.score, r.best_layer, r.n_eval
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ConstructVerify {
            n_factors,
            n_values,
            i_max,
            samples,
            equivalence,
            seed,
            out,
        } => {
            let report = cmd_construct_verify(
                n_factors,
                n_values,
                i_max,
                samples,
                equivalence,
                seed,
                out.as_deref(),
            )?;
            let numeric = if report.numeric_skipped {
                "numeric stage skipped (capacity beyond exact precision)".to_string()
            } else {
                format!(
                    "{} argmax mismatches over {} sequences",
                    report.equivalence_mismatches, report.equivalence_sequences
                )
            };
            println!(
                "construct-verify {}x{} i<={}: max |closed-mc| srs {:.4} cls {:.4}; {}; {}",
                n_factors,
                n_values,
                i_max,
                report.max_abs_gap.0,
                report.max_abs_gap.1,
                numeric,
                if report.pass { "PASS" } else { "FAIL" }
            );
            if report.pass {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::ExportCsv { archives } => {
            print!("{}", cmd_export_csv(&archives)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Analyze { archives } => {
            let report = cmd_analyze(&archives)?;
            for (id, s) in &report.summaries {
                let transition = match s.transition.epoch {
                    Some(e) => format!("transition at epoch {e}"),
                    None => "censored".to_string(),
                };
                println!(
                    "run {id}: entropy {:.4}, final accuracy {:.4}, {}",
                    s.entropy, s.final_accuracy, transition
                );
            }
            match &report.aggregate {
                Some(agg) => {
                    let rho = agg
                        .entropy_plateau_spearman
                        .map(|r| format!("{r:.4}"))
                        .unwrap_or_else(|| "undefined".to_string());
                    println!(
                        "aggregate: {} entropy levels, entropy/plateau spearman {}",
                        agg.levels.len(),
                        rho
                    );
                }
                None => println!("aggregate: grid too shallow (needs >= 3 levels x 3 runs)"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
