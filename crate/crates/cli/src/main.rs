use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use invmix_core::config::RunConfig;
use invmix_core::pipeline::{self, StageOutput};
use invmix_core::Error;

/// Few-shot augmentation by diffusion inversion, circle interpolation and
/// two-stage denoising on a toy conditional model.
#[derive(Debug, Parser)]
#[command(name = "invmix", version)]
struct Cli {
    /// Run configuration (`section.key = value` lines); defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (relative paths are placed under $OUT_ROOT when set).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// DDIM inference steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long = "split-ratio", global = true)]
    split_ratio: Option<f64>,
    #[arg(long, global = true)]
    expansion: Option<usize>,
    #[arg(long, global = true)]
    replacement: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural dataset.
    GenData,
    /// Pretrain the base denoiser on the generic corpus.
    Pretrain,
    /// Learn category concepts and shared adapters.
    LearnConcepts,
    /// Build the per-category inversion pools.
    Invert,
    /// Synthesize the augmented set.
    Synthesize,
    /// Diversity, faithfulness and downstream accuracy of the synthetic set.
    Evaluate,
    /// All stages from gen-data to evaluate.
    Pipeline,
    /// Diversity/faithfulness trade-off over split ratios.
    SweepSplit,
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    if let Some(v) = cli.steps {
        cfg.ddim_steps = v;
    }
    if let Some(v) = cli.split_ratio {
        cfg.split_ratio = v;
    }
    if let Some(v) = cli.expansion {
        cfg.expansion = v;
    }
    if let Some(v) = cli.replacement {
        cfg.replacement = v;
    }
    let out_root = std::env::var("OUT_ROOT").ok();
    let endpoint = std::env::var("SUFFIX_ENDPOINT").ok();
    cfg.apply_env(out_root.as_deref(), endpoint.as_deref());
    cfg.validate()?;
    Ok(cfg)
}

fn report(outputs: &[StageOutput]) {
    for o in outputs {
        println!("{}", o.dir.display());
        for note in &o.notes {
            println!("  {note}");
        }
        for (name, hash) in &o.artifacts {
            println!("  {hash}  {name}");
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = resolve(cli)?;
    log::info!("resolved configuration:\n{}", cfg.to_text());
    let outputs = match cli.command {
        Command::GenData => vec![pipeline::run_gen_data(&cfg)?],
        Command::Pretrain => vec![pipeline::run_pretrain(&cfg)?],
        Command::LearnConcepts => vec![pipeline::run_learn_concepts(&cfg)?],
        Command::Invert => vec![pipeline::run_invert(&cfg)?],
        Command::Synthesize => vec![pipeline::run_synthesize(&cfg)?],
        Command::Evaluate => vec![pipeline::run_evaluate(&cfg)?],
        Command::Pipeline => pipeline::run_pipeline(&cfg)?,
        Command::SweepSplit => vec![pipeline::run_sweep_split(&cfg)?],
    };
    report(&outputs);
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
