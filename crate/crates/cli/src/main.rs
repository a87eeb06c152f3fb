//! `motorintent` command-line tool: synthetic data, training, evaluation
//! grids, ablations, replay and live decoding.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod stream;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ConfigArgs;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "motorintent",
    version,
    about = "Decode left/right arm motion intention from EEG"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the resolved pipeline configuration as TOML.
    Config(ConfigCmd),
    /// Train on a recording's training trials and evaluate on the rest.
    Train(TrainCmd),
    /// Evaluate every window-length × band cell.
    Grid(GridCmd),
    /// Retrain on named channel groups.
    Ablate(AblateCmd),
    /// Compare raw, covariance and tangent features, with and without differencing.
    Compare(CompareCmd),
    /// Run the online decoder over a recording or a live stream.
    Replay(ReplayCmd),
    /// Onset-aligned mean correct-class probability as CSV.
    Curve(CurveCmd),
    /// Create or inspect recordings.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Inspect model files.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Stream a recording as EEGF frames over TCP.
    Serve(ServeCmd),
}

#[derive(Debug, Args)]
struct ConfigCmd {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct TrainCmd {
    /// Recording file.
    #[arg(long)]
    recording: PathBuf,
    /// Where to write the trained model.
    #[arg(long)]
    model_out: PathBuf,
    /// Write the full evaluation report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct GridCmd {
    #[arg(long)]
    recording: PathBuf,
    /// Comma-separated window lengths in seconds [default: the 7 paper windows].
    #[arg(long, value_delimiter = ',')]
    windows: Option<Vec<f64>>,
    /// Comma-separated LOW-HIGH bands [default: the 9 paper bands].
    #[arg(long, value_delimiter = ',', value_parser = config::parse_band)]
    bands: Option<Vec<(f64, f64)>>,
    /// Write the accuracy table as CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct AblateCmd {
    #[arg(long)]
    recording: PathBuf,
    /// A group as NAME=CH1,CH2,...; repeatable [default: the four lobes].
    #[arg(long = "group", value_name = "NAME=CHANNELS")]
    groups: Vec<String>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct CompareCmd {
    #[arg(long)]
    recording: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Gate {
    /// One command per cue.
    Armed,
    /// A command whenever the vote changes.
    Edge,
}

#[derive(Debug, Args)]
struct ReplayCmd {
    #[arg(long)]
    model: PathBuf,
    /// Replay this recording at maximum speed and score it.
    #[arg(long, conflicts_with = "connect", required_unless_present = "connect")]
    recording: Option<PathBuf>,
    /// Decode a live EEGF stream from HOST:PORT.
    #[arg(long)]
    connect: Option<String>,
    /// Override the model's score threshold.
    #[arg(long)]
    delta: Option<f64>,
    /// Override the model's vote queue length.
    #[arg(long)]
    q: Option<usize>,
    /// Trials to score: test, all, or a comma-separated id list.
    #[arg(long, default_value = "test")]
    trials: String,
    /// Command gating; defaults to armed for recordings, edge for live streams.
    #[arg(long, value_enum)]
    gate: Option<Gate>,
    /// Write NDJSON events here instead of stdout.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Simulate the robot and write its telemetry (.csv or .ndjson).
    #[arg(long)]
    telemetry: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CurveCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    recording: PathBuf,
    /// Half-width of the time axis in seconds.
    #[arg(long, default_value_t = 2.0)]
    window: f64,
    /// Trials to include: test, all, or a comma-separated id list.
    #[arg(long, default_value = "test")]
    trials: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum DatasetCmd {
    /// Generate a synthetic two-class recording.
    Synth(SynthCmd),
    /// Summarize a recording as JSON.
    Inspect { path: PathBuf },
}

#[derive(Debug, Args)]
struct SynthCmd {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Class signal amplitude relative to the noise.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Electrode group carrying the class signal.
    #[arg(long)]
    group: Option<String>,
    /// Seconds the signal starts before the movement onset.
    #[arg(long)]
    lead: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum ModelCmd {
    /// Print every stored value in a readable form.
    Dump { path: PathBuf },
}

#[derive(Debug, Args)]
struct ServeCmd {
    #[arg(long)]
    recording: PathBuf,
    /// Send the channels and rate this model expects; otherwise all
    /// channels at --target-rate.
    #[arg(long)]
    model: Option<PathBuf>,
    /// TCP port on 127.0.0.1; 0 picks a free one.
    #[arg(long, default_value_t = 5555)]
    port: u16,
    /// Frames per second; 0 sends as fast as the client reads [default: the stream rate].
    #[arg(long)]
    rate: Option<f64>,
    /// Repeat the recording until the client disconnects.
    #[arg(long = "loop")]
    looped: bool,
    #[arg(long, default_value_t = 160.0)]
    target_rate: f64,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Config(c) => commands::print_config(&c.config),
        Command::Train(c) => {
            commands::train(&c.recording, &c.model_out, c.report.as_deref(), &c.config)
        }
        Command::Grid(c) => commands::grid(
            &c.recording,
            c.windows,
            c.bands,
            c.out.as_deref(),
            c.report.as_deref(),
            &c.config,
        ),
        Command::Ablate(c) => {
            commands::ablate(&c.recording, &c.groups, c.report.as_deref(), &c.config)
        }
        Command::Compare(c) => commands::compare(&c.recording, c.report.as_deref(), &c.config),
        Command::Replay(c) => {
            let gate = c.gate.map(|g| match g {
                Gate::Armed => motorintent::online::CommandGate::Armed,
                Gate::Edge => motorintent::online::CommandGate::Edge,
            });
            let opts = commands::ReplayArgs {
                delta: c.delta,
                q: c.q,
                trials: c.trials,
                gate,
                events: c.events,
                telemetry: c.telemetry,
                report: c.report,
            };
            match (c.recording, c.connect) {
                (Some(rec), _) => commands::replay_recording(&c.model, &rec, &opts),
                (None, Some(addr)) => commands::replay_live(&c.model, &addr, &opts),
                (None, None) => Err(CliError::Config("need --recording or --connect".into())),
            }
        }
        Command::Curve(c) => commands::curve(
            &c.model,
            &c.recording,
            c.window,
            &c.trials,
            c.out.as_deref(),
        ),
        Command::Dataset(DatasetCmd::Synth(c)) => {
            let overrides = commands::SynthOverrides {
                trials: c.trials,
                seed: c.seed,
                amplitude: c.amplitude,
                group: c.group,
                lead: c.lead,
            };
            commands::synth(&c.out, c.config.as_deref(), &overrides)
        }
        Command::Dataset(DatasetCmd::Inspect { path }) => commands::inspect(&path),
        Command::Model(ModelCmd::Dump { path }) => commands::dump(&path),
        Command::Serve(c) => commands::serve(
            &c.recording,
            c.model.as_deref(),
            c.port,
            c.rate,
            c.looped,
            c.target_rate,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
