use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use motorintent::dataset::synth::{generate, SynthConfig};
use motorintent::dataset::{
    detect_onsets, load_recording, save_recording, slice_epochs, Arm, Recording,
};
use motorintent::dsp::{resample, FilterSpec};
use motorintent::harness::{
    curve_csv, lobe_groups, onset_curve, replay, run_ablation, run_feature_comparison, run_grid,
    stream_rows, ReplayOptions, Session, TrialFilter, GRID_BANDS, GRID_WINDOWS,
};
use motorintent::model::DecoderModel;
use motorintent::online::{CommandGate, Event};
use motorintent::robot::{write_csv, write_ndjson, TargetMap};
use serde::Serialize;
use serde_json::json;

use crate::config::ConfigArgs;
use crate::error::CliError;
use crate::stream::{self, ServeOptions};

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path.display(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::Data(e.to_string()))?;
    writeln!(out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(path.display(), e))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p.display(), e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Recording, CliError> {
    Ok(load_recording(path)?)
}

fn load_model(path: &Path) -> Result<Arc<DecoderModel>, CliError> {
    Ok(Arc::new(DecoderModel::load(path)?))
}

fn parse_trials(spec: &str) -> Result<TrialFilter, CliError> {
    match spec.trim() {
        "test" => Ok(TrialFilter::Test),
        "all" => Ok(TrialFilter::All),
        list => {
            let ids = list
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<Result<BTreeSet<_>, _>>()
                .map_err(|e| CliError::Config(format!("bad trial list {list:?}: {e}")))?;
            Ok(TrialFilter::Only(ids))
        }
    }
}

pub fn print_config(args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let text = toml::to_string_pretty(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    print!("{text}");
    Ok(())
}

pub fn train(
    recording: &Path,
    model_out: &Path,
    report: Option<&Path>,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let session = Session::new(load(recording)?, &cfg)?;
    let (model, eval) = session.train()?;
    model.save(model_out)?;
    let c = eval.confusion.counts;
    println!(
        "test accuracy  {:.2}% over {} windows ({} train windows)",
        eval.accuracy, eval.test_windows, eval.train_windows
    );
    println!(
        "confusion      truth left: {} left / {} right; truth right: {} left / {} right",
        c[0][0], c[0][1], c[1][0], c[1][1]
    );
    println!(
        "trials         {} train, {} test",
        eval.train_trials.len(),
        eval.test_trials.len()
    );
    println!(
        "support        {} vectors, feature length {}",
        eval.support_vectors, eval.feature_len
    );
    println!(
        "training time  {:.2} s; window latency mean {:.0} µs",
        eval.train_seconds, eval.window_latency.mean_us
    );
    if !eval.mean_converged {
        println!("note           reference mean did not converge");
    }
    if let Some(p) = report {
        write_json(p, &eval)?;
    }
    Ok(())
}

pub fn grid(
    recording: &Path,
    windows: Option<Vec<f64>>,
    bands: Option<Vec<(f64, f64)>>,
    out: Option<&Path>,
    report: Option<&Path>,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let windows = windows.unwrap_or_else(|| GRID_WINDOWS.to_vec());
    let bands: Vec<FilterSpec> = bands
        .unwrap_or_else(|| GRID_BANDS.to_vec())
        .into_iter()
        .map(|(lo, hi)| FilterSpec {
            low_hz: lo,
            high_hz: hi,
            ..cfg.band
        })
        .collect();
    let session = Session::new(load(recording)?, &cfg)?;
    let result = run_grid(&session, &windows, &bands)?;
    write_text(out, &result.to_csv())?;
    if let Some(best) = result.best() {
        eprintln!(
            "best cell: {} s × {}–{} Hz at {:.2}%",
            best.window_seconds,
            best.band.low_hz,
            best.band.high_hz,
            best.accuracy.unwrap_or(f64::NAN)
        );
    }
    let failed = result.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} cells failed; see the report for reasons");
    }
    if let Some(p) = report {
        write_json(p, &result)?;
    }
    Ok(())
}

fn parse_group(spec: &str) -> Result<(String, Vec<String>), CliError> {
    let (name, chans) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("group {spec:?} should read NAME=CH1,CH2")))?;
    let chans: Vec<String> = chans
        .split(',')
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect();
    if chans.is_empty() {
        return Err(CliError::Config(format!("group {name:?} has no channels")));
    }
    Ok((name.trim().to_string(), chans))
}

pub fn ablate(
    recording: &Path,
    groups: &[String],
    report: Option<&Path>,
    args: &ConfigArgs,
) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let groups = if groups.is_empty() {
        lobe_groups()
    } else {
        groups
            .iter()
            .map(|g| parse_group(g))
            .collect::<Result<_, _>>()?
    };
    let session = Session::new(load(recording)?, &cfg)?;
    let rows = run_ablation(&session, &groups).map_err(|e| match e {
        motorintent::harness::HarnessError::Dataset(
            d @ motorintent::dataset::DatasetError::UnknownChannel(_),
        ) => CliError::Config(d.to_string()),
        other => other.into(),
    })?;
    println!("group,channels,accuracy,feature_len");
    for r in &rows {
        println!(
            "{},{},{:.2},{}",
            r.group,
            r.channels.join(" "),
            r.report.accuracy,
            r.report.feature_len
        );
    }
    if let Some(p) = report {
        write_json(p, &rows)?;
    }
    Ok(())
}

pub fn compare(recording: &Path, report: Option<&Path>, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let session = Session::new(load(recording)?, &cfg)?;
    let rows = run_feature_comparison(&session)?;
    println!("feature,derivative,accuracy,feature_len");
    for r in &rows {
        let kind = serde_json::to_value(r.feature)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        println!(
            "{kind},{},{:.2},{}",
            r.derivative, r.accuracy, r.feature_len
        );
    }
    if let Some(p) = report {
        write_json(p, &rows)?;
    }
    Ok(())
}

pub struct ReplayArgs {
    pub delta: Option<f64>,
    pub q: Option<usize>,
    pub trials: String,
    pub gate: Option<CommandGate>,
    pub events: Option<PathBuf>,
    pub telemetry: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

fn event_sink(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_events(out: &mut dyn Write, events: &[Event]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn replay_recording(
    model_path: &Path,
    recording: &Path,
    args: &ReplayArgs,
) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let rec = load(recording)?;
    let options = ReplayOptions {
        delta: args.delta,
        q: args.q,
        trials: parse_trials(&args.trials)?,
        gate: args.gate.unwrap_or(CommandGate::Armed),
        robot: args.telemetry.as_ref().map(|_| TargetMap::default()),
    };
    let report = replay(model, &rec, &options)?;
    write_events(&mut *event_sink(args.events.as_deref())?, &report.events)
        .map_err(|e| CliError::io("events", e))?;

    if let Some(p) = &args.telemetry {
        let out = create(p)?;
        let written = if p.extension().is_some_and(|e| e == "csv") {
            write_csv(out, &report.telemetry)
        } else {
            write_ndjson(out, &report.telemetry)
        };
        written.map_err(|e| CliError::io(p.display(), e))?;
    }

    let issued = report.trials.iter().filter(|t| t.command.is_some()).count();
    eprintln!(
        "window accuracy {:.2}% over {} windows; commands: {} of {} trials, {:.2}% correct, {} missed",
        report.window_accuracy,
        report.window_confusion.total(),
        issued,
        report.trials.len(),
        report.command_confusion.accuracy(),
        report.missed_trials
    );
    eprintln!(
        "push_sample latency: mean {:.1} µs, p99 {:.1} µs, max {:.1} µs over {} samples",
        report.latency.mean_us, report.latency.p99_us, report.latency.max_us, report.latency.count
    );
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    Ok(())
}

pub fn replay_live(model_path: &Path, addr: &str, args: &ReplayArgs) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let cfg = &model.preprocessing.config;
    let (delta, q) = (args.delta.unwrap_or(cfg.delta), args.q.unwrap_or(cfg.q));
    let gate = args.gate.unwrap_or(CommandGate::Edge);
    let mut sink = event_sink(args.events.as_deref())?;
    let summary = stream::decode_live(model, addr, delta, q, gate, &mut sink)?;
    eprintln!(
        "{} frames, {} predictions, {} commands, {} dropped; push_sample mean {:.1} µs, p99 {:.1} µs",
        summary.frames,
        summary.predictions,
        summary.commands,
        summary.dropped_frames,
        summary.latency.mean_us,
        summary.latency.p99_us
    );
    if let Some(p) = &args.report {
        write_json(p, &summary)?;
    }
    Ok(())
}

pub fn curve(
    model_path: &Path,
    recording: &Path,
    window: f64,
    trials: &str,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if !(window > 0.0) {
        return Err(CliError::Config(format!(
            "curve window {window} must be positive"
        )));
    }
    let model = load_model(model_path)?;
    let rec = load(recording)?;
    let points = onset_curve(model, &rec, &parse_trials(trials)?, window)?;
    write_text(out, &curve_csv(&points))
}

pub struct SynthOverrides {
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub amplitude: Option<f64>,
    pub group: Option<String>,
    pub lead: Option<f64>,
}

pub fn synth(out: &Path, config: Option<&Path>, o: &SynthOverrides) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthConfig::default(),
    };
    if let Some(t) = o.trials {
        cfg.trials = t;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(a) = o.amplitude {
        cfg.signal_amplitude = a;
    }
    if let Some(g) = &o.group {
        cfg.signal_group = g.clone();
    }
    if let Some(l) = o.lead {
        cfg.lead_seconds = l;
    }
    let rec = generate(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    save_recording(&rec, out)?;
    eprintln!(
        "wrote {}: {} trials, {} channels, {:.1} s at {} Hz",
        out.display(),
        rec.cues().len(),
        rec.channel_names().len(),
        rec.duration(),
        rec.rate()
    );
    Ok(())
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let rec = load(path)?;
    let defaults = motorintent::pipeline::PipelineConfig::default();
    let movements = detect_onsets(&rec, &defaults.onset);
    let epochs = slice_epochs(
        &rec,
        &movements,
        defaults.target_rate,
        defaults.pre_onset_seconds,
    );
    let count = |arm: Arm| rec.cues().iter().filter(|c| c.label == arm).count();
    let summary = json!({
        "rate": rec.rate(),
        "samples": rec.eeg().len(),
        "duration_s": rec.duration(),
        "channels": rec.channel_names(),
        "mocap_frames": rec.mocap().len(),
        "cues": { "left": count(Arm::Left), "right": count(Arm::Right) },
        "movements": movements.len(),
        "motion_epochs": epochs.motion().count(),
        "label_mismatches": epochs.label_mismatches,
        "generator": rec.generator(),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

pub fn dump(path: &Path) -> Result<(), CliError> {
    print!("{}", load_model(path)?.dump());
    Ok(())
}

pub fn serve(
    recording: &Path,
    model: Option<&Path>,
    port: u16,
    rate: Option<f64>,
    looped: bool,
    target_rate: f64,
) -> Result<(), CliError> {
    let rec = load(recording)?;
    let rows = match model {
        Some(m) => stream_rows(&*load_model(m)?, &rec)?,
        None => resample(rec.eeg(), target_rate)?,
    };
    let rate = rate.unwrap_or(rows.rate());
    if !(rate >= 0.0) {
        return Err(CliError::Config(format!(
            "rate {rate} must be non-negative"
        )));
    }
    let sent = stream::serve(&rows, &ServeOptions { port, rate, looped })?;
    log::info!("sent {sent} frames");
    Ok(())
}
