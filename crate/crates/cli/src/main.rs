use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use stormgen::downscale::Variant;
use stormgen::error::Error;
use stormgen::pipeline::{Pipeline, PipelineConfig, Stage};
use tracing_subscriber::EnvFilter;

/// Run one stage of the downscaling pipeline, or all of them with `run`.
#[derive(Debug, Parser)]
#[command(name = "stormgen", version)]
struct Args {
    /// synth-world, upscale, fit-moments, bias-correct, fit-residuals,
    /// downscale, eqm, evaluate or run
    stage: Stage,

    /// TOML pipeline config
    #[arg(long)]
    config: PathBuf,

    /// Overrides the master seed from the config
    #[arg(long)]
    seed: Option<u64>,

    /// Restricts `downscale` to one variant (xstar, trend, trendvar)
    #[arg(long)]
    variant: Option<Variant>,
}

fn run(args: Args) -> Result<(), Error> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.variant.is_some() {
        cfg.variant = args.variant;
    }
    let pipeline = Pipeline::new(cfg)?;
    tracing::info!(
        config_hash = pipeline.config_hash(),
        output = %pipeline.output_dir().display(),
        "config loaded"
    );
    pipeline.run_stage(args.stage)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
