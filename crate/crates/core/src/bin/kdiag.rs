use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use kdiag::config::validate_config;
use kdiag::pipeline::{Pipeline, PipelineError, Stage, StageOutcome};

/// Diagnose knowledge deficiencies of a language model and plan remedial data.
#[derive(Debug, Parser)]
#[command(name = "kdiag", version)]
struct Cli {
    /// TOML config file. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides paths.out_dir.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Skip stages whose inputs are unchanged (run-all only; single stages
    /// always skip unless --force).
    #[arg(long, global = true)]
    resume: bool,
    /// Overrides the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute a single stage even when it is up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and filter the fact corpus and query set.
    Ingest,
    /// Embed facts and queries.
    Embed,
    /// Retrieve the top-m facts for every query.
    Retrieve,
    /// Score priors and posteriors and flag deficiencies.
    Diagnose,
    /// Allocate example budgets and build synthesis prompts.
    Plan,
    /// Generate remedial examples.
    Synthesize,
    /// Order examples into the training manifest.
    Curriculum,
    /// Compare detection methods against golden-label truth.
    EvalDetect,
    /// Write the summary report.
    Report,
    /// Run every stage in order.
    RunAll,
    /// Validate the config and print the resolved values.
    CheckConfig,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = validate_config(cli.config.as_deref()).map_err(PipelineError::Config)?;
    if let Some(dir) = cli.out_dir {
        cfg.paths.out_dir = dir;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let stage = match cli.command {
        Command::CheckConfig => {
            let text = toml::to_string_pretty(&cfg).map_err(|e| PipelineError::Validation(e.to_string()))?;
            print!("{text}");
            return Ok(());
        }
        Command::RunAll => {
            let pipeline = Pipeline::open(cfg)?;
            for outcome in pipeline.run_all(cli.resume)? {
                print_outcome(&outcome);
            }
            return Ok(());
        }
        Command::Ingest => Stage::Ingest,
        Command::Embed => Stage::Embed,
        Command::Retrieve => Stage::Retrieve,
        Command::Diagnose => Stage::Diagnose,
        Command::Plan => Stage::Plan,
        Command::Synthesize => Stage::Synthesize,
        Command::Curriculum => Stage::Curriculum,
        Command::EvalDetect => Stage::EvalDetect,
        Command::Report => Stage::Report,
    };
    let pipeline = Pipeline::open(cfg)?;
    print_outcome(&pipeline.run_stage(stage, cli.force)?);
    Ok(())
}

fn print_outcome(o: &StageOutcome) {
    let state = if o.skipped { "skipped" } else { "done" };
    println!("{:<12} {state:<8} {}", o.stage, o.record.output_path.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = format!("{:?}", cli.command);
    match run(cli).with_context(|| format!("kdiag {} failed", command.to_lowercase())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = err.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            eprintln!("error: {err:#}");
            ExitCode::from(code as u8)
        }
    }
}
