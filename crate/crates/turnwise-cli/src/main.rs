//! `turnwise` — train, evaluate, sweep, and diagnose turn-credit policy
//! optimization runs in the attribute-elicitation dialogue environment.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use turnwise_core::config::RunConfig;
use turnwise_core::harness::{run_diagnose, run_eval, run_sweep, run_train, SweepSpec};

#[derive(Parser)]
#[command(
    name = "turnwise",
    version,
    about = "Closed-loop turn-credit policy optimization on a synthetic dialogue task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    /// `TURNWISE_<FIELD>` environment variables override file values,
    /// and the flags below override both.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads: 0 = default pool, 1 = sequential, n = n threads.
    #[arg(long)]
    parallelism: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> turnwise_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let env_vars: Vec<(String, String)> = std::env::vars().collect();
                RunConfig::from_toml_with_env("", &env_vars)?
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.to_string_lossy().into_owned();
        }
        if let Some(par) = self.parallelism {
            cfg.parallelism = par;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop; writes metrics, checkpoints, probe
    /// snapshots, and logs under the output directory.
    Train(ConfigArgs),
    /// Evaluate a checkpoint greedily on held-out prompts; writes
    /// eval.csv under the output directory.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint directory (e.g. runs/default/step_300).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train + evaluate every strategy×estimator cell over a shared
    /// seed list; writes sweep.csv under the output directory.
    Sweep {
        #[command(flatten)]
        common: ConfigArgs,
        /// TOML file with `seeds = [...]` and `[[cells]]` entries.
        #[arg(long)]
        cells: PathBuf,
    },
    /// Re-derive analysis CSVs (kendall, stability, slopes, agreement)
    /// from a finished run directory.
    Diagnose {
        /// Run directory produced by `train`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> turnwise_core::Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let run = run_train(&cfg)?;
            println!("run directory: {}", run.dir.display());
            println!("iterations: {}", run.history.len());
            if let Some(last) = run.history.last() {
                println!("final mean_outcome: {}", last.mean_outcome);
                println!("final mean_combined_score: {}", last.mean_combined_score);
                println!("final mean_kl: {}", last.mean_kl);
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let report = run_eval(&cfg, &checkpoint)?;
            println!(
                "prompts: {} × {} rollouts",
                report.prompts, report.rollouts_per_prompt
            );
            println!("mean_outcome: {}", report.mean_outcome);
            println!("mean_token_count: {}", report.mean_token_count);
            println!("mean_combined_score: {}", report.mean_combined_score);
        }
        Command::Sweep { common, cells } => {
            let cfg = common.resolve()?;
            let spec = SweepSpec::load(&cells)?;
            let out_dir = PathBuf::from(&cfg.out_dir);
            let results = run_sweep(&cfg, &spec, &out_dir)?;
            println!("sweep table: {}", out_dir.join("sweep.csv").display());
            for r in &results {
                println!(
                    "{} × {}: mean_outcome {} ± {} ({} seeds, {} failures)",
                    r.cell.strategy.as_str(),
                    r.cell.estimator.as_str(),
                    r.mean_outcome,
                    r.std_outcome,
                    r.seeds_completed,
                    r.failures
                );
            }
        }
        Command::Diagnose { out } => {
            let files = run_diagnose(&out)?;
            for p in [&files.kendall, &files.stability, &files.slopes, &files.agreement] {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
