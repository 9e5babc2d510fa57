//! Experiment command line.
//!
//! Every subcommand reads one TOML config (see [`mvprior::config`]) and
//! works inside its `paths.out_dir`. Artifacts are never overwritten
//! unless `--force` is given; re-running a command with an unchanged
//! config reproduces its outputs byte for byte.
//!
//! Exit codes: 0 on success, 1 on runtime failure (missing upstream
//! artifacts, I/O, numerical errors), 2 on config errors (unreadable or
//! invalid config, bad flag values).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvprior::config::ExperimentConfig;
use mvprior::pipeline::Pipeline;
use mvprior::Error;

#[derive(Parser)]
#[command(
    name = "mvprior",
    version,
    about = "Multi-view template detectors with transfer priors"
)]
struct Cli {
    /// Experiment configuration file (TOML).
    #[arg(short, long, global = true, default_value = "experiment.toml")]
    config: PathBuf,

    /// Overwrite existing output artifacts.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write world.bin.
    GenWorld,
    /// Sample the source/target training splits and the test maps.
    GenData,
    /// Train the bootstrap ensemble of source models.
    TrainSources,
    /// Build the configured prior matrix from the source models.
    LearnPrior,
    /// Train the target model on its split under the learned prior.
    TrainTarget,
    /// Detect on the test maps and write the metric tables.
    Eval,
    /// Render the SVG plots from the CSV tables.
    Report,
    /// Run the configured statistical protocol and write its table.
    RunProtocol,
    /// Write one relation's cell-pair set as plain text.
    DumpPairs {
        /// Relation name: cell, h, v, d1, d2 or mv.
        #[arg(long)]
        relation: String,
        /// Output file; defaults to pairs-<relation>.txt in the output dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: &Cli) -> mvprior::Result<()> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let cfg = ExperimentConfig::parse(&text)?;
    let pipeline = Pipeline::new(cfg, &text);
    let written = match &cli.command {
        Command::GenWorld => pipeline.gen_world(cli.force)?,
        Command::GenData => pipeline.gen_data(cli.force)?,
        Command::TrainSources => pipeline.train_sources(cli.force)?,
        Command::LearnPrior => pipeline.learn_prior(cli.force)?,
        Command::TrainTarget => pipeline.train_target(cli.force)?,
        Command::Eval => pipeline.eval(cli.force)?,
        Command::Report => pipeline.report(cli.force)?,
        Command::RunProtocol => pipeline.run_protocol(cli.force)?,
        Command::DumpPairs { relation, out } => {
            let (path, tau) = pipeline.dump_pairs(relation, out.clone(), cli.force)?;
            if let Some(tau) = tau {
                println!("patch radius tau = {tau}");
            }
            vec![path]
        }
    };
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ Error::Config(_)) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
