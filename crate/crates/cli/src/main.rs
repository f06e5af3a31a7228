mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::error::{CliError, Exit};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  runtime failure (I/O, network, training divergence)
  2  usage error: bad flags, unknown config keys, invalid values
  3  an input file does not exist
  4  an input file is malformed or has the wrong schema
  5  eval: deployment gate not passed
  6  replay: logged feedback not reproduced";

#[derive(Parser)]
#[command(name = "flight-tutor", version, about = "Straight-and-level flight tutor: demonstrations, behavioral cloning, evaluation and live tutoring sessions", after_help = EXIT_CODES)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file (sections: sim, expert, train, tutor, session, eval).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set tutor.d1=0.2. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Do not print the resolved configuration.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fly the scripted expert on randomized tasks and record a dataset.
    GenDemos(GenDemos),
    /// Train a policy by behavioral cloning.
    Train(Train),
    /// Evaluate a policy on unseen tasks against the deployment gate.
    Eval(Eval),
    /// Run the tutoring session server until interrupted.
    Serve(Serve),
    /// Re-run the tutor over a session log and verify it reproduces the log.
    Replay(Replay),
    /// Record a flight by a synthetic flawed student.
    SynthStudent(SynthStudent),
}

#[derive(Args)]
struct GenDemos {
    #[arg(long, default_value_t = 25)]
    trials: usize,
    /// Seconds per trial.
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Training-curve table; defaults to OUT with a .curve.tsv extension.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    policy: PathBuf,
    /// Overrides eval.trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Overrides eval.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Seconds per trial.
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-tick heading errors (trial, tick, heading_error) here.
    #[arg(long)]
    ticks: Option<PathBuf>,
}

#[derive(Args)]
struct Serve {
    /// Overrides session.policy.
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Args)]
struct Replay {
    #[arg(long)]
    log: PathBuf,
    /// Run as fast as possible instead of at the logged tick rate.
    #[arg(long)]
    fast: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudentKind {
    Expert,
    Overshooter,
    PitchNeglect,
}

#[derive(Args)]
struct SynthStudent {
    #[arg(long, value_enum)]
    flaw: StudentKind,
    /// Flaw strength in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    severity: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seconds.
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    /// Fly to this heading instead of a seeded random goal.
    #[arg(long)]
    target_heading: Option<f64>,
    #[arg(long, requires = "target_heading")]
    initial_heading: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(exit) => exit.into(),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit.into()
        }
    }
}

fn run(cli: Cli) -> Result<Exit, CliError> {
    let config = Config::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    if !cli.common.quiet {
        eprintln!("# resolved configuration\n{}", config.to_toml());
    }
    match cli.command {
        Command::GenDemos(a) => commands::gen_demos(&config, a.trials, a.duration, a.seed, &a.out),
        Command::Train(a) => commands::train(&config, &a.data, &a.out, a.seed, a.curve),
        Command::Eval(a) => commands::eval(
            &config,
            &a.policy,
            a.trials,
            a.seed,
            a.duration,
            a.out.as_deref(),
            a.ticks.as_deref(),
        ),
        Command::Serve(a) => commands::serve(config, a.policy),
        Command::Replay(a) => commands::replay(&a.log, a.fast),
        Command::SynthStudent(a) => {
            let flaw = match a.flaw {
                StudentKind::Expert => None,
                StudentKind::Overshooter => Some(tutor_core::eval::Flaw::Overshooter),
                StudentKind::PitchNeglect => Some(tutor_core::eval::Flaw::PitchNeglect),
            };
            let heading = a.target_heading.map(|t| (a.initial_heading.unwrap_or(0.0), t));
            commands::synth_student(&config, flaw, a.severity, a.seed, a.duration, heading, &a.out)
        }
    }
}
