use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use motorintent::dataset::synth::{generate, SynthConfig};
use motorintent::dataset::Recording;
use motorintent::harness::{
    replay, run_train, stream_rows, EvalReport, ReplayOptions, TrialFilter,
};
use motorintent::model::DecoderModel;
use motorintent::online::wire::{write_frame, write_header, FrameReader};
use motorintent::online::{CommandGate, PredictorState};
use motorintent::pipeline::{window_at, PipelineConfig};

struct Fixture {
    recording: Recording,
    model: Arc<DecoderModel>,
    report: EvalReport,
}

/// One trained model shared by every test in this file.
fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let recording = generate(&SynthConfig {
            trials: 24,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let config = PipelineConfig {
            window_seconds: 1.0,
            eval_stride: 4,
            ..PipelineConfig::default()
        };
        let (model, report) = run_train(recording.clone(), &config).unwrap();
        Fixture {
            recording,
            model: Arc::new(model),
            report,
        }
    })
}

#[test]
fn streamed_features_equal_batch_features() {
    let fx = fixture();
    let rows = stream_rows(&fx.model, &fx.recording).unwrap();
    let batch = fx
        .model
        .preprocessor_with((0..fx.model.n_channels()).collect())
        .unwrap()
        .process_resampled(&rows)
        .unwrap();
    let w = fx.model.window();

    let mut state = PredictorState::from_model(fx.model.clone()).unwrap();
    let mut predictions = 0;
    let mut worst: f64 = 0.0;
    for (i, row) in rows.rows().enumerate() {
        let out = state.push_sample(row).unwrap();
        // Differencing consumes one row, then the window must fill.
        if i < w {
            assert!(out.is_none(), "prediction before the window filled at {i}");
            continue;
        }
        let p = out.expect("one prediction per sample once the window is full");
        assert_eq!(p.stream_index, i as i64);
        predictions += 1;
        let offline = fx
            .model
            .feature_map
            .extract(&window_at(&batch, p.stream_index, w))
            .unwrap();
        for (a, b) in state.last_feature().iter().zip(&offline) {
            worst = worst.max((a - b).abs());
        }
        let (f, _) = fx.model.score(&offline).unwrap();
        assert_eq!(f >= 0.0, p.decision_value >= 0.0, "label differs at {i}");
    }
    assert_eq!(predictions, rows.len() - w);
    assert!(worst <= 1e-12, "worst feature deviation {worst:e}");
}

#[test]
fn replay_reproduces_offline_test_accuracy() {
    let fx = fixture();
    let report = replay(fx.model.clone(), &fx.recording, &ReplayOptions::default()).unwrap();
    assert_eq!(report.window_confusion, fx.report.confusion);
    assert_eq!(report.window_accuracy, fx.report.accuracy);
    assert!(
        fx.report.accuracy >= 90.0,
        "accuracy {}",
        fx.report.accuracy
    );
}

#[test]
fn armed_gate_issues_at_most_one_command_per_trial() {
    let fx = fixture();
    let options = ReplayOptions {
        trials: TrialFilter::All,
        gate: CommandGate::Armed,
        ..ReplayOptions::default()
    };
    let report = replay(fx.model.clone(), &fx.recording, &options).unwrap();
    assert_eq!(report.trials.len(), 24);
    assert!(
        report.trials.iter().all(|t| t.commands <= 1),
        "{:?}",
        report.trials
    );
    let issued = report.trials.iter().filter(|t| t.commands == 1).count();
    assert_eq!(issued + report.missed_trials, 24);
    assert!(
        issued >= 20,
        "only {issued} of 24 trials produced a command"
    );
    let test: BTreeSet<usize> = fx.model.preprocessing.test_trials.iter().copied().collect();
    let correct = report
        .trials
        .iter()
        .filter(|t| test.contains(&t.trial) && t.command == Some(t.truth))
        .count();
    assert!(
        correct * 10 >= test.len() * 8,
        "{correct} of {} held-out commands correct",
        test.len()
    );
}

#[test]
fn edge_gate_only_fires_on_changes() {
    let fx = fixture();
    let options = ReplayOptions {
        trials: TrialFilter::All,
        gate: CommandGate::Edge,
        ..ReplayOptions::default()
    };
    let report = replay(fx.model.clone(), &fx.recording, &options).unwrap();
    let commands: Vec<_> = report.events.iter().filter_map(|e| e.command).collect();
    assert!(!commands.is_empty());
    assert!(commands.windows(2).all(|p| p[0] != p[1]));
}

#[test]
fn replay_drives_the_robot_to_commanded_targets() {
    let fx = fixture();
    let map = motorintent::robot::TargetMap::default();
    let options = ReplayOptions {
        trials: TrialFilter::All,
        robot: Some(map),
        ..ReplayOptions::default()
    };
    let report = replay(fx.model.clone(), &fx.recording, &options).unwrap();
    let rows = stream_rows(&fx.model, &fx.recording).unwrap();
    assert_eq!(report.telemetry.len(), rows.len());
    let last_cmd = report.events.iter().rev().find_map(|e| e.command).unwrap();
    let end = report.telemetry.last().unwrap();
    let target = match last_cmd {
        motorintent::dataset::Arm::Left => map.left,
        motorintent::dataset::Arm::Right => map.right,
    };
    assert_eq!(end.x_star, target);
}

#[test]
fn saved_model_replays_identically() {
    let fx = fixture();
    let mut bytes = Vec::new();
    fx.model.write_to(&mut bytes).unwrap();
    let loaded = Arc::new(DecoderModel::read_from(bytes.as_slice()).unwrap());
    assert_eq!(loaded.dump(), fx.model.dump());
    let a = replay(fx.model.clone(), &fx.recording, &ReplayOptions::default()).unwrap();
    let b = replay(loaded, &fx.recording, &ReplayOptions::default()).unwrap();
    assert_eq!(a.decision_values.len(), b.decision_values.len());
    for (x, y) in a.decision_values.iter().zip(&b.decision_values) {
        assert_eq!(x.0, y.0);
        assert_eq!(x.1.to_bits(), y.1.to_bits());
    }
}

#[test]
fn wire_frames_carry_the_stream() {
    let fx = fixture();
    let rows = stream_rows(&fx.model, &fx.recording).unwrap();
    let n = rows.n_channels();
    let mut buf = Vec::new();
    write_header(&mut buf, n as u16).unwrap();
    for (i, row) in rows.rows().take(500).enumerate() {
        write_frame(&mut buf, i as u32, row).unwrap();
    }
    let mut reader = FrameReader::new(buf.as_slice()).unwrap();
    assert_eq!(reader.n_channels(), n);
    let mut count = 0;
    while let Some((index, values)) = reader.next_frame().unwrap() {
        assert_eq!(index as usize, count);
        for (v, r) in values.iter().zip(rows.row(count)) {
            assert_eq!(*v, *r as f32 as f64);
        }
        count += 1;
    }
    assert_eq!(count, 500);
}
