use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use upcs::config::{check_config, BackendChoice};
use upcs::error::PipelineError;
use upcs::pipeline::{Pipeline, StageName};

#[derive(Parser)]
#[command(
    name = "upcs",
    version,
    about = "Build debiased and unbiased persona sets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the initial persona set from seed prompts.
    Generate(RunArgs),
    /// Review and screen the initial set into the incomplete debiased set.
    Debias(RunArgs),
    /// Fill missing dimensions from similar personas (debiased set).
    Fill(RunArgs),
    /// Resample attributes from the configured distribution (unbiased set).
    Resample(RunArgs),
    /// Score dialogue transcripts for bias.
    Evaluate(RunArgs),
    /// Run generate, debias, fill and resample in order.
    RunAll(RunArgs),
    /// Check a config file and print the effective configuration.
    Validate(ConfigArg),
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long, default_value = "upcs.toml")]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing stage outputs.
    #[arg(long)]
    force: bool,
    /// Switches every provider to offline or remote backends.
    #[arg(long, value_enum)]
    backend: Option<Backend>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Remote,
}

fn pipeline(args: &RunArgs) -> Result<Pipeline, PipelineError> {
    let (mut config, violations) = check_config(&args.config.config)?;
    if !violations.is_empty() {
        return Err(PipelineError::Config(violations));
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(b) = args.backend {
        config.set_backend(match b {
            Backend::Mock => BackendChoice::Mock,
            Backend::Remote => BackendChoice::Remote,
        });
    }
    Pipeline::new(config, args.force)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let (stage, args) = match cli.command {
        Command::Validate(a) => {
            let (config, violations) = check_config(&a.config)?;
            print!("{}", config.to_toml());
            return if violations.is_empty() {
                eprintln!("config ok");
                Ok(())
            } else {
                Err(PipelineError::Config(violations))
            };
        }
        Command::RunAll(a) => {
            let p = pipeline(&a)?;
            let report = p.run_all()?;
            let dir = p.work_dir();
            for f in &report.outputs {
                println!("{}", dir.join(f).display());
            }
            return Ok(());
        }
        Command::Generate(a) => (StageName::Generate, a),
        Command::Debias(a) => (StageName::Debias, a),
        Command::Fill(a) => (StageName::Fill, a),
        Command::Resample(a) => (StageName::Resample, a),
        Command::Evaluate(a) => (StageName::Evaluate, a),
    };
    let p = pipeline(&args)?;
    let outcome = p.run_stage(stage)?;
    if stage == StageName::Evaluate {
        print_json(&outcome.report);
    } else {
        for f in &outcome.artifacts {
            println!("{}", p.work_dir().join(f).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("UPCS_LOG"))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                PipelineError::Config(vs) => {
                    for v in vs {
                        eprintln!("upcs: {v}");
                    }
                }
                _ => eprintln!("upcs: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
