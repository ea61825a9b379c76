//! Thin CLI over the library harness. Exit codes: 0 success, 2 config or
//! contract error, 3 numeric fault, 4 I/O or file-format error.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use parl::harness::{
    cmd_attack_eval, cmd_cka, cmd_gradviz, cmd_report, cmd_train, ExperimentConfig, Role,
};
use parl::{Error, Result};

#[derive(Parser)]
#[command(name = "parl", version, about = "Diverse-ensemble training and adversarial evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one ensemble per seed and write checkpoints plus metrics
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed override, e.g. 1,2,3
        #[arg(long)]
        seed_list: Option<String>,
        /// Output directory override
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for parallel seeds
        #[arg(long)]
        jobs: Option<usize>,
        /// Train the hold-out surrogate ensemble instead of the target
        #[arg(long)]
        surrogate: bool,
    },
    /// Sweep attacks against a trained run (black-box if --surrogate given)
    AttackEval {
        #[arg(long)]
        config: PathBuf,
        /// Run directory holding the target checkpoints
        #[arg(long)]
        target: PathBuf,
        /// Run directory holding surrogate checkpoints (black-box mode)
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[arg(long)]
        seed_list: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Layer-wise CKA profiles between the members of a trained run
    Cka {
        #[arg(long)]
        config: PathBuf,
        /// Run directory holding the checkpoints
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        seed_list: Option<String>,
    },
    /// Export per-member gradient saliency images for one test example
    Gradviz {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        /// Seed whose checkpoint to load (defaults to the first configured)
        #[arg(long)]
        seed: Option<u64>,
        /// Index into the evaluation subset
        #[arg(long)]
        index: usize,
    },
    /// Summarize a run directory and verify its recounts
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| Error::config(format!("bad seed '{s}' in --seed-list")))
        })
        .collect()
}

fn load_config(
    path: &PathBuf,
    seed_list: &Option<String>,
    out: &Option<PathBuf>,
) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(list) = seed_list {
        config.seeds = parse_seed_list(list)?;
    }
    if let Some(dir) = out {
        config.out_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn set_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(Error::config("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("could not size the worker pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed_list, out, jobs, surrogate } => {
            set_jobs(jobs)?;
            let config = load_config(&config, &seed_list, &out)?;
            let role = if surrogate { Role::Surrogate } else { Role::Target };
            let output = cmd_train(&config, role)?;
            println!("run directory: {}", output.run_dir.display());
            for s in &output.summaries {
                println!(
                    "seed {}: {} ({} steps, clean acc {})",
                    s.seed,
                    s.status,
                    s.steps,
                    s.clean_test_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                );
            }
            if output.summaries.iter().any(|s| s.status != "ok") {
                return Err(Error::numeric("at least one seed failed with a numeric fault"));
            }
            Ok(())
        }
        Command::AttackEval { config, target, surrogate, seed_list, out, jobs } => {
            set_jobs(jobs)?;
            let config = load_config(&config, &seed_list, &out)?;
            let output = cmd_attack_eval(&config, &target, surrogate.as_deref())?;
            println!("results: {}", output.results_path.display());
            for row in &output.rows {
                println!(
                    "seed {} {} {} eps {}: accuracy {:.4}",
                    row.seed, row.mode, row.attack, row.epsilon, row.accuracy
                );
            }
            Ok(())
        }
        Command::Cka { config, checkpoints, seed_list } => {
            let config = load_config(&config, &seed_list, &None)?;
            let output = cmd_cka(&config, &checkpoints)?;
            println!("cka profiles: {}", output.out_dir.display());
            for pair in &output.pairs {
                println!(
                    "seed {} pair {}-{}: overall {:.4}",
                    pair.seed, pair.i, pair.j, pair.overall
                );
            }
            Ok(())
        }
        Command::Gradviz { config, checkpoints, seed, index } => {
            let config = load_config(&config, &None, &None)?;
            let seed = seed.unwrap_or(config.seeds[0]);
            let output = cmd_gradviz(&config, &checkpoints, seed, index)?;
            println!("saliency: {}", output.out_dir.display());
            Ok(())
        }
        Command::Report { run } => {
            print!("{}", cmd_report(&run)?);
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
