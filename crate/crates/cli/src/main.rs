//! `mvdelay`: runs one experiment from a JSON config and writes a manifest,
//! CSV results and a one-line summary.

mod config;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{ExperimentConfig, ExperimentKind};
use experiments::RunError;
use output::OutputDir;

#[derive(Debug, Parser)]
#[command(name = "mvdelay", version, about = "Particle experiments for McKean-Vlasov SDEs with delay")]
struct Cli {
    /// Experiment kind; must match the config's `experiment` field if set.
    #[arg(value_enum)]
    experiment: ExperimentKind,
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Affects speed only.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: &Cli) -> Result<String, RunError> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.experiment = Some(cli.experiment);
    cfg.validate(cli.experiment)?;
    let dir = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("results"));
    let out = OutputDir::create(&dir)?;
    out.write_manifest(cli.experiment, &cfg, &experiments::outputs(cli.experiment, &cfg))?;
    experiments::run(cli.experiment, &cfg, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
