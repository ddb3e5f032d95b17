use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gatecluster_core::config::PipelineConfig;
use gatecluster_core::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(name = "gatecluster", version, about = "Feature-gated student clustering pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides paths.output.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "INTERPRET3C_THREADS")]
    threads: Option<usize>,

    /// Overrides train.seed.
    #[arg(long, global = true)]
    train_seed: Option<u64>,

    /// Overrides cluster.seed.
    #[arg(long, global = true)]
    cluster_seed: Option<u64>,

    /// Overrides any config key, e.g. `--set cluster.n_max=6`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write a synthetic course to the configured input paths.
    Simulate,
    /// Extract and scale weekly features.
    Extract,
    /// Train the gating model and extract masks.
    Train,
    /// Cluster students on their masked series.
    Cluster,
    /// Summarize clusters.
    Report,
    /// Run extract, train, cluster and report.
    Pipeline,
}

fn config_error(cause: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: stage=config cause={}", cause.to_string().replace('\n', " "));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(path) = cli.config.as_ref() else {
        return config_error("--config is required");
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.train_seed {
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(seed) = cli.cluster_seed {
        overrides.push(format!("cluster.seed={seed}"));
    }
    let mut config = match PipelineConfig::load(path, &overrides) {
        Ok(c) => c,
        Err(e) => return config_error(e),
    };
    if let Some(out) = &cli.output {
        config.paths.output = out.clone();
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return config_error("--threads must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return config_error(e);
        }
    }
    let run: fn(&PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> = match cli.command {
        Command::Simulate => pipeline::simulate,
        Command::Extract => pipeline::extract,
        Command::Train => pipeline::train,
        Command::Cluster => pipeline::cluster,
        Command::Report => pipeline::report,
        Command::Pipeline => pipeline::run_all,
    };
    match run(&config) {
        Ok(written) => {
            for p in written {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
