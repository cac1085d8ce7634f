use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use fedprompt_cli::commands::{cmd_personalize, cmd_sweep, cmd_train, gen_data, run_dir};
use fedprompt_cli::{exit_code, ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "fedprompt", version, about = "Federated soft-prompt tuning simulator")]
struct Cli {
    /// TOML run configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory: the dataset directory for gen-data, the runs root otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic federated dataset plus stats and KL reports.
    GenData,
    /// Train the global prompt (stage one).
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Personalize the trained prompt on test clients (stage two).
    Personalize {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Run directory holding prompt_best.bin; defaults to <out>/<run_name>.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Train over the configured learning-rate grids and rank the cells.
    Sweep {
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let runs = cli.out.clone().unwrap_or_else(|| "runs".into());
    match cli.command {
        Command::GenData => {
            gen_data(&cfg, &cli.out.unwrap_or_else(|| "data".into()))?;
        }
        Command::Train { data } => {
            cmd_train(&cfg, &data, &runs)?;
        }
        Command::Personalize { data, run } => {
            let run = run.unwrap_or_else(|| run_dir(&runs, &cfg));
            cmd_personalize(&cfg, &data, &run)?;
        }
        Command::Sweep { data } => {
            let cells = cmd_sweep(&cfg, &data, &runs)?;
            let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
            if failed > 0 {
                log::warn!("{failed} of {} sweep cells failed", cells.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDPROMPT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
