//! `gaga <stage> --config FILE [overrides]`
//!
//! Exit codes: 0 success, 1 internal error, 2 missing prerequisite,
//! 3 validation failure, 4 provider failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use gaga_core::config::{ConfigError, RunConfig};
use gaga_core::pipeline::{headline, parse_sweep, run_sweep, Pipeline, PipelineError, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Synth,
    Select,
    Annotate,
    BuildAnnoGraph,
    Align,
    Finetune,
    Evaluate,
    Pipeline,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Synth => Stage::Synth,
            StageArg::Select => Stage::Select,
            StageArg::Annotate => Stage::Annotate,
            StageArg::BuildAnnoGraph => Stage::BuildAnnoGraph,
            StageArg::Align => Stage::Align,
            StageArg::Finetune => Stage::Finetune,
            StageArg::Evaluate => Stage::Evaluate,
            StageArg::Pipeline => Stage::Pipeline,
        }
    }
}

/// Selective annotation, annotation-graph alignment and prototype fusion
/// for text-attributed graphs.
///
/// Stages read their inputs from the output directory and refuse artifacts
/// stamped with a different config hash. Flags override the config file.
#[derive(Debug, Parser)]
#[command(name = "gaga", version, after_help = "Exit codes: 0 ok, 1 internal, 2 missing prerequisite, 3 validation, 4 provider.\n\
Environment: GAGA_LLM_ENDPOINT, GAGA_LLM_API_KEY, GAGA_EMBED_ENDPOINT, GAGA_CACHE_DIR, RUST_LOG.")]
struct Cli {
    /// Stage to run; `pipeline` runs all of them in order.
    #[arg(value_enum)]
    stage: StageArg,

    /// TOML run config.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    /// Master seed [config default 0] (artifact default).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Weight of the prototype term in the alignment loss [config default 0.6] (reference setup).
    #[arg(long, value_name = "F")]
    alpha: Option<f64>,

    /// Number of prototypes k_p [config default 40] (reference setup).
    #[arg(long, value_name = "N")]
    kp: Option<usize>,

    /// Subgraph radius for alignment pairs [config default 2] (reference setup).
    #[arg(long, value_name = "N")]
    hops: Option<usize>,

    /// Fraction of nodes sent for annotation [config default 0.01] (reference setup).
    #[arg(long, value_name = "F")]
    budget: Option<f64>,

    /// Output directory [default gaga-out] (artifact default).
    #[arg(long, value_name = "DIR", default_value = "gaga-out")]
    out: PathBuf,

    /// Full pipeline once per value, e.g. alpha=0,0.2,0.4; keys: alpha, kp, budget, seed, hops.
    #[arg(long, value_name = "KEY=LIST")]
    sweep: Option<String>,
}

enum CliError {
    NoConfig(PathBuf),
    Pipeline(PipelineError),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Pipeline(e.into())
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(ConfigError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(CliError::NoConfig(cli.config.clone()))
        }
        Err(e) => return Err(e.into()),
    };
    let overrides = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("alpha", cli.alpha.map(|v| v.to_string())),
        ("k_p", cli.kp.map(|v| v.to_string())),
        ("hops", cli.hops.map(|v| v.to_string())),
        ("node_fraction", cli.budget.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let stage = Stage::from(cli.stage);
    if let Some(spec) = &cli.sweep {
        if !matches!(stage, Stage::Pipeline | Stage::Evaluate) {
            return Err(PipelineError::Validation(format!(
                "--sweep runs whole pipelines; use it with `pipeline` or `evaluate`, not `{}`",
                stage.name()
            ))
            .into());
        }
        let (key, values) = parse_sweep(spec)?;
        let csv = run_sweep(&cfg, &cli.out, &key, &values)?;
        println!("{}", csv.display());
        return Ok(());
    }
    let pipeline = Pipeline::new(cfg, &cli.out)?;
    pipeline.run(stage)?;
    if matches!(stage, Stage::Pipeline | Stage::Evaluate) {
        let report = pipeline.report()?;
        let (valid, test) = headline(&report);
        let show = |m: Option<f64>| m.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        let metric = match report.task {
            gaga_core::downstream::Task::Node => "accuracy",
            gaga_core::downstream::Task::Link => "mrr@10",
        };
        println!("{metric}: valid {} test {}", show(valid), show(test));
        if let Some(auc) = report.splits.get("test").and_then(|m| m.auc) {
            println!("auc: test {auc:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::NoConfig(path)) => {
            eprintln!("gaga: config file {} not found", path.display());
            ExitCode::from(2)
        }
        Err(CliError::Pipeline(e)) => {
            eprintln!("gaga: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
