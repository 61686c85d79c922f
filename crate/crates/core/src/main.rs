use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opinion_forge::adjudication::AdjudicationMode;
use opinion_forge::pipeline::{Config, Pipeline, PipelineError};

#[derive(Parser)]
#[command(
    name = "opinion-forge",
    version,
    about = "LLM opinion annotation pipeline for ASTE and ACOS"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Restrict optimize/annotate to one annotator (`adjudicator` selects
    /// the adjudication prompt in optimize).
    #[arg(long, global = true)]
    annotator: Option<String>,
    /// Adjudication mode: llm or majority.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<AdjudicationMode>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Split the dev set into ICL pool and evaluation half.
    Prepare,
    /// Pick the number of ICL demonstrations per annotator.
    Optimize,
    /// Annotate the test split.
    Annotate,
    /// Combine annotator runs.
    Adjudicate,
    /// Exact-match scores against gold.
    Evaluate,
    /// Inter-annotator agreement.
    Agreement,
    /// Render the final report.
    Report,
}

fn parse_mode(s: &str) -> Result<AdjudicationMode, String> {
    s.parse()
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| PipelineError::Usage("--config is required".into()))?;
    let mut config = Config::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let annotator = cli.annotator.as_deref();
    if annotator.is_some() && !matches!(cli.command, Command::Optimize | Command::Annotate) {
        return Err(PipelineError::Usage(
            "--annotator applies to optimize and annotate only".into(),
        ));
    }
    if cli.mode.is_some() && !matches!(cli.command, Command::Adjudicate) {
        return Err(PipelineError::Usage("--mode applies to adjudicate only".into()));
    }
    let pipeline = Pipeline::new(config);
    match cli.command {
        Command::Prepare => {
            let p = pipeline.prepare()?;
            println!("icl pool {}  eval half {}", p.icl_pool.len(), p.eval_half.len());
        }
        Command::Optimize => {
            for report in pipeline.optimize(annotator)? {
                let chosen = report.chosen();
                println!(
                    "{}: k = {}  F1 = {:.4}",
                    report.annotator_id, report.chosen_k, chosen.f1
                );
            }
        }
        Command::Annotate => pipeline.annotate(annotator)?,
        Command::Adjudicate => pipeline.adjudicate(cli.mode)?,
        Command::Evaluate => {
            pipeline.evaluate()?;
            let path = pipeline.reports_dir().join("metrics.txt");
            print!("{}", std::fs::read_to_string(&path).unwrap_or_default());
        }
        Command::Agreement => {
            pipeline.agreement()?;
            let path = pipeline.reports_dir().join("agreement.txt");
            print!("{}", std::fs::read_to_string(&path).unwrap_or_default());
        }
        Command::Report => print!("{}", pipeline.report()?),
    }
    log::info!("upstream calls: {}", pipeline.upstream_calls());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
