use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use semapop_core::pipeline::{ExperimentConfig, Pipeline, Stage};

#[derive(Parser)]
#[command(name = "semapop", version, about = "Persona-conditioned synthetic population pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    #[command(flatten)]
    Stage(StageCommand),
    /// Re-run a stage from its provenance.json alone.
    Replay { provenance: PathBuf },
}

#[derive(clap::Args)]
struct StageArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum StageCommand {
    Prepare(StageArgs),
    Personas(StageArgs),
    Embed(StageArgs),
    Train(StageArgs),
    Generate(StageArgs),
    Evaluate(StageArgs),
    Calibrate(StageArgs),
    Intervene(StageArgs),
    Report(StageArgs),
    /// Every stage in order.
    All(StageArgs),
}

impl StageCommand {
    fn split(&self) -> (Vec<Stage>, &StageArgs) {
        match self {
            StageCommand::Prepare(a) => (vec![Stage::Prepare], a),
            StageCommand::Personas(a) => (vec![Stage::Personas], a),
            StageCommand::Embed(a) => (vec![Stage::Embed], a),
            StageCommand::Train(a) => (vec![Stage::Train], a),
            StageCommand::Generate(a) => (vec![Stage::Generate], a),
            StageCommand::Evaluate(a) => (vec![Stage::Evaluate], a),
            StageCommand::Calibrate(a) => (vec![Stage::Calibrate], a),
            StageCommand::Intervene(a) => (vec![Stage::Intervene], a),
            StageCommand::Report(a) => (vec![Stage::Report], a),
            StageCommand::All(a) => (Stage::ALL.to_vec(), a),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Replay { provenance } => {
            let p = Pipeline::replay(&provenance).with_context(|| format!("replaying {}", provenance.display()))?;
            println!("{} replayed into {}", p.stage, p.config.output_dir.display());
        }
        Command::Stage(sc) => {
            let (stages, args) = sc.split();
            let mut cfg = ExperimentConfig::load(&args.config)
                .with_context(|| format!("loading {}", args.config.display()))?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(o) = &args.out {
                cfg.output_dir = o.clone();
            }
            let pipeline = Pipeline::new(cfg)?;
            for stage in stages {
                let prov = pipeline.run(stage).with_context(|| format!("stage `{stage}` failed"))?;
                println!("{stage}: {:.2}s, {} outputs", prov.elapsed_secs, prov.outputs.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
