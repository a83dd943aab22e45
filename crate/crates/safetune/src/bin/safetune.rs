//! Thin command-line front end over the library's run module.
//!
//! Exit codes: 0 success, 1 config/data error, 2 numeric failure, 3 IO failure.
//! `SAFETUNE_THREADS` caps the worker pool used by grid-parallel analyses.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use safetune::error::Result;
use safetune::run::{
    cmd_analyze, cmd_profile, cmd_report, cmd_train, load_config, AnalysisKind, REPORT_FILE,
};

#[derive(Parser)]
#[command(
    name = "safetune",
    about = "Selective adapter freezing for miniature transformers",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run from a TOML config and write its run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the freezing policy: safe, none, or random.
        #[arg(long)]
        policy: Option<String>,
    },
    /// Train one single-adapter variant per layer and tabulate the ablation.
    Profile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a post-hoc analysis against a completed run directory.
    Analyze {
        /// Completed run directory (must contain the final checkpoint).
        run_dir: PathBuf,
        /// One of: landscape, spectrum, penalty, trajectory.
        which: String,
    },
    /// Compare ≥2 completed runs; prints CSV with deltas vs the first run.
    Report {
        /// Run directories; the first is the comparison baseline.
        #[arg(num_args = 2..)]
        run_dirs: Vec<PathBuf>,
        /// Also write the table to DIR/report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, out, seed, policy } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out {
                cfg.out_dir = dir.to_string_lossy().into_owned();
            }
            if let Some(name) = policy {
                cfg = cfg.with_policy(&name)?;
            }
            let summary = cmd_train(&cfg)?;
            println!(
                "run complete: {} (valid acc {:.4}, {} freeze events, activation −{:.1}%, \
                 backward FLOPs −{:.1}%)",
                cfg.out_dir,
                summary.final_valid_accuracy,
                summary.freeze_count,
                summary.activation_reduction_pct,
                summary.backward_flop_reduction_pct,
            );
            Ok(())
        }
        Cmd::Profile { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(dir) = out {
                cfg.out_dir = dir.to_string_lossy().into_owned();
            }
            let rows = cmd_profile(&cfg)?;
            println!("layer  val_accuracy  activation_bytes");
            for r in rows {
                println!("{:>5}  {:>12.4}  {:>16}", r.layer, r.val_accuracy, r.activation_bytes);
            }
            println!("written to {}/profile.csv", cfg.out_dir);
            Ok(())
        }
        Cmd::Analyze { run_dir, which } => {
            let kind: AnalysisKind = which.parse()?;
            let path = cmd_analyze(&run_dir, kind)?;
            println!("analysis written to {}", path.display());
            Ok(())
        }
        Cmd::Report { run_dirs, out } => {
            let csv = cmd_report(&run_dirs)?;
            print!("{csv}");
            if let Some(dir) = out {
                let path = dir.join(REPORT_FILE);
                std::fs::write(&path, &csv)
                    .map_err(|e| safetune::Error::io(path.display().to_string(), e))?;
                println!("written to {}", path.display());
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
