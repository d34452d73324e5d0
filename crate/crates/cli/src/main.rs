use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cvsim_core::CoreError;
use invaert::InvaertError;
use serde::Serialize;

mod analysis;
mod settings;
mod simulation;

use settings::{read_json, resolve, split_config, Global, UsageError};

#[derive(Debug, Parser)]
#[command(name = "invaert", version, about = "Circulation model simulation, training and amortized inversion")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Serialize)]
struct GlobalArgs {
    /// JSON config; flags given on the command line take precedence.
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Worker threads for every parallel section (default: all cores).
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    workers: Option<usize>,
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Integrate the model and write the trajectory and its outputs.
    Simulate(simulation::SimulateArgs),
    /// Jacobian spectra over the last cycles, with SR extrema and eigenvector moduli.
    Stiffness(simulation::StiffnessArgs),
    /// Simulate prior draws and write the split dataset.
    GenData(simulation::GenDataArgs),
    /// Train the emulator, the output density, the inverse model, or all of them.
    Train(analysis::TrainArgs),
    /// Decode latent draws for a complete output vector.
    Invert(analysis::InvertArgs),
    /// Complete a partially observed output with the flow, then invert.
    Impute(analysis::ImputeArgs),
    /// Sample the parameter set mapping to one output and analyse its spread.
    Manifold(analysis::ManifoldArgs),
    /// Per-component errors over a table of patient records, one column per bundle.
    EhrReport(analysis::EhrReportArgs),
    /// Noisy, partially observed records built from a dataset split.
    PseudoEhr(simulation::PseudoEhrArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Stiffness(_) => "stiffness",
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Invert(_) => "invert",
            Command::Impute(_) => "impute",
            Command::Manifold(_) => "manifold",
            Command::EhrReport(_) => "ehr-report",
            Command::PseudoEhr(_) => "pseudo-ehr",
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = cli.global.config.as_deref().map(|p| read_json(p, "config file")).transpose()?;
    let name = cli.command.name();
    let (global_file, section) = split_config(file.as_ref(), name)?;
    let global: Global = resolve(Some(&global_file), &cli.global, "global")?;
    let sec = section.as_ref();
    cvsim_core::parallel::with_workers(global.workers, || match &cli.command {
        Command::Simulate(a) => simulation::simulate(a, &global, sec),
        Command::Stiffness(a) => simulation::stiffness(a, &global, sec),
        Command::GenData(a) => simulation::gen_data(a, &global, sec),
        Command::PseudoEhr(a) => simulation::pseudo_ehr(a, &global, sec),
        Command::Train(a) => analysis::train(a, &global, sec),
        Command::Invert(a) => analysis::invert(a, &global, sec),
        Command::Impute(a) => analysis::impute(a, &global, sec),
        Command::Manifold(a) => analysis::manifold(a, &global, sec),
        Command::EhrReport(a) => analysis::ehr_report(a, &global, sec),
    })
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(e.downcast_ref::<CoreError>(), Some(CoreError::Parse(_) | CoreError::InvalidParameter(_)))
            || matches!(
                e.downcast_ref::<InvaertError>(),
                Some(InvaertError::Config(_) | InvaertError::Input(_) | InvaertError::Core(CoreError::Parse(_)))
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
