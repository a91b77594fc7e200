use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedprio::config::{parse_config, ExperimentConfig};
use fedprio::experiment::{self, resolve_out_dir};
use fedprio::Error;

const DEFAULT_OUT: &str = "fedprio-out";

#[derive(Parser)]
#[command(name = "fedprio", version, about = "Federated learning with prioritized multi-criteria aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, env = "FEDPRIO_OUT_DIR")]
    out: Option<PathBuf>,
    /// Overrides `max_rounds`.
    #[arg(long)]
    max_rounds: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = parse_config(&self.config)?;
        if let Some(n) = self.max_rounds {
            cfg.max_rounds = n;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the config's criteria ordering.
    Run(Common),
    /// Run the baseline, single criteria and priority permutations.
    Sweep(Common),
    /// Grid-search the learning rate with the DS-only baseline.
    LrSearch {
        #[command(flatten)]
        common: Common,
        /// Comma-separated learning rates.
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        grid: Vec<f64>,
        /// Target accuracy; defaults to the config's first target.
        #[arg(long)]
        target: Option<f64>,
    },
}

enum Outcome {
    Ok,
    NotFound,
}

fn execute(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.load()?;
            let out = resolve_out_dir(common.out, &cfg, DEFAULT_OUT);
            experiment::run_single(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Sweep(common) => {
            let cfg = common.load()?;
            let out = resolve_out_dir(common.out, &cfg, DEFAULT_OUT);
            let outcome = experiment::run_sweep(&cfg, &out)?;
            println!("wrote {} runs to {}", outcome.runs.len(), out.display());
        }
        Command::LrSearch { common, grid, target } => {
            let cfg = common.load()?;
            let target = target.unwrap_or(cfg.targets[0]);
            let search = experiment::grid_search_lr(&cfg, &grid, target)?;
            println!("learning_rate,rounds");
            for t in &search.trials {
                let rounds = t.rounds.map_or_else(|| "NR".to_string(), |r| r.to_string());
                println!("{},{rounds}", t.learning_rate);
            }
            match search.chosen {
                Some(lr) => println!("chosen learning_rate={lr}"),
                None => {
                    println!("NOT-FOUND: no learning rate reached {target} on half the devices");
                    return Ok(Outcome::NotFound);
                }
            }
        }
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::NotFound) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
