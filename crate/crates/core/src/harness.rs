//! Evaluation harness: trial-level train/test splits, training runs, the
//! window × band grid, channel-group ablation, feature-variant comparison,
//! online replay and onset-aligned curves.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    detect_onsets, motion_windows, slice_epochs, training_set_from_processed, Arm, DatasetError,
    Epochs, Movement, Recording,
};
use crate::dsp::{resample, FilterSpec, SignalBlock};
use crate::model::{DecoderModel, ModelError, Preprocessing, LABEL_ENCODING};
use crate::online::{
    aggregate_onset_aligned, CommandGate, CurvePoint, Event, OnlineError, PredictorState,
};
use crate::pipeline::{
    ChannelSelection, ConfigError, FeatureKind, FeatureMap, PipelineConfig, Preprocessor,
};
use crate::robot::{RobotState, TargetMap, Telemetry};
use crate::svm::{self, SvmError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Dataset(#[from] DatasetError),

    #[error(transparent)]
    Svm(#[from] SvmError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Online(#[from] OnlineError),

    #[error("{0}")]
    Data(String),
}

impl From<crate::dsp::DspError> for HarnessError {
    fn from(e: crate::dsp::DspError) -> Self {
        HarnessError::Dataset(e.into())
    }
}

impl From<crate::features::FeatureError> for HarnessError {
    fn from(e: crate::features::FeatureError) -> Self {
        HarnessError::Dataset(e.into())
    }
}

/// 2×2 counts, rows = truth, columns = prediction, index 0 = left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[usize; 2]; 2],
}

impl Confusion {
    fn idx(arm: Arm) -> usize {
        match arm {
            Arm::Left => 0,
            Arm::Right => 1,
        }
    }

    pub fn add(&mut self, truth: Arm, predicted: Arm) {
        self.counts[Self::idx(truth)][Self::idx(predicted)] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        self.counts[0][0] + self.counts[1][1]
    }

    /// Percent correct; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            100.0 * self.correct() as f64 / self.total() as f64
        }
    }
}

/// Timing summary in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    pub fn from_samples(mut us: Vec<f64>) -> Self {
        if us.is_empty() {
            return LatencyStats::default();
        }
        us.sort_by(f64::total_cmp);
        let count = us.len();
        let p99 = us[((count as f64 * 0.99).ceil() as usize).clamp(1, count) - 1];
        LatencyStats {
            count,
            mean_us: us.iter().sum::<f64>() / count as f64,
            p99_us: p99,
            max_us: us[count - 1],
        }
    }
}

/// Result of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Resolved configuration.
    pub config: PipelineConfig,
    /// Test-window accuracy in percent.
    pub accuracy: f64,
    /// Mean of `y·f(s)` over the test windows; breaks accuracy ties.
    pub mean_margin: f64,
    pub confusion: Confusion,
    pub train_windows: usize,
    pub test_windows: usize,
    pub feature_len: usize,
    pub support_vectors: usize,
    pub smo_converged: bool,
    pub mean_converged: bool,
    pub train_trials: Vec<usize>,
    pub test_trials: Vec<usize>,
    pub label_mismatches: usize,
    pub train_seconds: f64,
    /// Per-window feature extraction plus scoring on the test set.
    pub window_latency: LatencyStats,
}

/// Splits trial ids into train and test sets, stratified by arm so both
/// classes appear on both sides. Deterministic for a given seed.
pub fn split_trials(
    trials: &[(usize, Arm)],
    fraction: f64,
    seed: u64,
) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (BTreeSet::new(), BTreeSet::new());
    for arm in [Arm::Left, Arm::Right] {
        let mut ids: Vec<usize> = trials.iter().filter(|t| t.1 == arm).map(|t| t.0).collect();
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        // Keep at least one trial on each side whenever the class has two.
        let k = (ids.len() as f64 * fraction).round() as usize;
        let k = if ids.len() > 1 {
            k.clamp(1, ids.len() - 1)
        } else {
            ids.len()
        };
        let (tr, te) = ids.split_at(k);
        train.extend(tr);
        test.extend(te);
    }
    (train, test)
}

/// A recording with detected epochs and a fixed trial split.
#[derive(Debug, Clone)]
pub struct Session {
    pub recording: Recording,
    pub config: PipelineConfig,
    pub movements: Vec<Movement>,
    pub epochs: Epochs,
    pub train_trials: BTreeSet<usize>,
    pub test_trials: BTreeSet<usize>,
}

impl Session {
    /// Detects movements, slices epochs and splits trials.
    pub fn new(recording: Recording, config: &PipelineConfig) -> Result<Self, HarnessError> {
        let mut config = config.clone();
        config.source_rate = recording.rate();
        config.validate()?;
        let movements = detect_onsets(&recording, &config.onset);
        let epochs = slice_epochs(
            &recording,
            &movements,
            config.target_rate,
            config.pre_onset_seconds,
        );
        let trials: Vec<(usize, Arm)> = epochs
            .motion()
            .filter_map(|e| Some((e.trial?, e.label.arm()?)))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if trials.len() < 4 {
            return Err(HarnessError::Data(format!(
                "only {} usable trials (need at least 4)",
                trials.len()
            )));
        }
        let (train_trials, test_trials) = split_trials(&trials, config.split, config.seed);
        Ok(Session {
            recording,
            config,
            movements,
            epochs,
            train_trials,
            test_trials,
        })
    }

    /// Same recording and split under another configuration. Epochs are
    /// re-sliced only if onset or clock settings changed.
    pub fn with_config(&self, config: &PipelineConfig) -> Result<Self, HarnessError> {
        let mut config = config.clone();
        config.source_rate = self.recording.rate();
        config.validate()?;
        let mut s = self.clone();
        if config.onset != self.config.onset
            || config.target_rate != self.config.target_rate
            || config.pre_onset_seconds != self.config.pre_onset_seconds
        {
            s.movements = detect_onsets(&self.recording, &config.onset);
            s.epochs = slice_epochs(
                &self.recording,
                &s.movements,
                config.target_rate,
                config.pre_onset_seconds,
            );
        }
        s.config = config;
        Ok(s)
    }

    pub fn preprocessor(&self) -> Result<Preprocessor, HarnessError> {
        Ok(Preprocessor::for_recording(&self.config, &self.recording)?)
    }

    /// The recording through the configured chain.
    pub fn process(&self) -> Result<SignalBlock, HarnessError> {
        Ok(self.preprocessor()?.process(&self.recording)?)
    }

    /// Trains on the training trials and scores the test trials.
    pub fn train(&self) -> Result<(DecoderModel, EvalReport), HarnessError> {
        self.train_on(&self.process()?)
    }

    /// [`Session::train`] on an already processed stream (lets the grid
    /// share preprocessing between cells).
    pub fn train_on(
        &self,
        processed: &SignalBlock,
    ) -> Result<(DecoderModel, EvalReport), HarnessError> {
        let cfg = &self.config;
        let started = Instant::now();
        let set =
            training_set_from_processed(processed, &self.epochs, cfg, Some(&self.train_trials))?;
        let params = cfg.svm.params();
        let machine = svm::train(&set.features, &set.labels, &params)?;
        let machine = svm::calibrate(
            &machine,
            &set.features,
            &set.labels,
            Some(&set.groups),
            &params,
        )?;
        let train_seconds = started.elapsed().as_secs_f64();

        let channels = cfg.selected_channels(self.recording.channel_names());
        let model = DecoderModel {
            preprocessing: Preprocessing {
                config: cfg.clone(),
                channels,
                source_channels: self.recording.channel_names().to_vec(),
                window: cfg.window_samples(),
                train_trials: self.train_trials.iter().copied().collect(),
                test_trials: self.test_trials.iter().copied().collect(),
                label_encoding: LABEL_ENCODING.into(),
            },
            feature_map: set.feature_map,
            svm: machine,
        };

        let w = cfg.window_samples();
        let test = motion_windows(
            &self.epochs,
            processed.start_index(),
            processed.len(),
            w,
            cfg.eval_stride,
            Some(&self.test_trials),
        );
        if test.is_empty() {
            return Err(DatasetError::NoUsableWindows("no test windows".into()).into());
        }
        let mut confusion = Confusion::default();
        let mut latency = Vec::with_capacity(test.len());
        let mut margin = 0.0;
        for lw in &test {
            let t0 = Instant::now();
            let feature = model.feature_map.extract(&crate::pipeline::window_at(
                processed,
                lw.end_index,
                w,
            ))?;
            let f = model.svm.decision_value(&feature)?;
            latency.push(t0.elapsed().as_secs_f64() * 1e6);
            margin += lw.arm.label() * f;
            confusion.add(lw.arm, Arm::from_label(if f >= 0.0 { 1.0 } else { -1.0 }));
        }
        let mean_converged = match &model.feature_map {
            FeatureMap::Tangent(ex) => ex.converged(),
            _ => true,
        };
        let report = EvalReport {
            config: cfg.clone(),
            accuracy: confusion.accuracy(),
            mean_margin: margin / test.len() as f64,
            confusion,
            train_windows: set.labels.len(),
            test_windows: test.len(),
            feature_len: set.features.first().map_or(0, Vec::len),
            support_vectors: model.svm.n_support(),
            smo_converged: model.svm.converged,
            mean_converged,
            train_trials: model.preprocessing.train_trials.clone(),
            test_trials: model.preprocessing.test_trials.clone(),
            label_mismatches: self.epochs.label_mismatches,
            train_seconds,
            window_latency: LatencyStats::from_samples(latency),
        };
        Ok((model, report))
    }
}

/// Trains and evaluates one configuration on a recording.
pub fn run_train(
    recording: Recording,
    config: &PipelineConfig,
) -> Result<(DecoderModel, EvalReport), HarnessError> {
    Session::new(recording, config)?.train()
}

/// Window lengths (s) of the paper-style grid.
pub const GRID_WINDOWS: [f64; 7] = [0.03, 0.06, 0.12, 0.25, 0.5, 1.0, 2.0];

/// Frequency bands (Hz) of the paper-style grid.
pub const GRID_BANDS: [(f64, f64); 9] = [
    (0.0, 5.0),
    (0.0, 10.0),
    (5.0, 15.0),
    (10.0, 20.0),
    (15.0, 25.0),
    (20.0, 30.0),
    (25.0, 35.0),
    (30.0, 40.0),
    (35.0, 45.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub window_seconds: f64,
    pub band: FilterSpec,
    /// Test accuracy in percent, absent when the cell failed.
    pub accuracy: Option<f64>,
    /// Mean signed test margin, absent when the cell failed.
    pub mean_margin: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub config: PipelineConfig,
    pub windows: Vec<f64>,
    pub bands: Vec<FilterSpec>,
    /// Row-major: window outer, band inner.
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn cell(&self, window: usize, band: usize) -> &GridCell {
        &self.cells[window * self.bands.len() + band]
    }

    /// The successful cell with the highest accuracy. Ties go to the larger
    /// mean margin, then to the earlier cell.
    pub fn best(&self) -> Option<&GridCell> {
        let key = |c: &GridCell| {
            (
                c.accuracy.unwrap_or(f64::NEG_INFINITY),
                c.mean_margin.unwrap_or(f64::NEG_INFINITY),
            )
        };
        self.cells.iter().filter(|c| c.accuracy.is_some()).fold(
            None,
            |best: Option<&GridCell>, c| match best {
                Some(b) if key(b) >= key(c) => Some(b),
                _ => Some(c),
            },
        )
    }

    /// Windows as rows, bands as columns, accuracies in percent; failed
    /// cells read `failed`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("window_s");
        for b in &self.bands {
            let _ = write!(s, ",{}-{}", b.low_hz, b.high_hz);
        }
        s.push('\n');
        for (i, w) in self.windows.iter().enumerate() {
            let _ = write!(s, "{w}");
            for j in 0..self.bands.len() {
                match self.cell(i, j).accuracy {
                    Some(a) => {
                        let _ = write!(s, ",{a:.2}");
                    }
                    None => s.push_str(",failed"),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Trains and scores every (window, band) cell on the session's split.
/// Preprocessing is shared across windows of one band; a failing cell is
/// recorded, not fatal.
pub fn run_grid(
    session: &Session,
    windows: &[f64],
    bands: &[FilterSpec],
) -> Result<GridReport, HarnessError> {
    if windows.is_empty() || bands.is_empty() {
        return Err(ConfigError("grid needs at least one window and one band".into()).into());
    }
    let mut cells = vec![None; windows.len() * bands.len()];
    for (j, band) in bands.iter().enumerate() {
        let band_cfg = PipelineConfig {
            band: *band,
            ..session.config.clone()
        };
        let processed = session.with_config(&band_cfg).and_then(|s| s.process());
        for (i, &w) in windows.iter().enumerate() {
            let outcome = processed.as_ref().map_err(|e| e.to_string()).and_then(|p| {
                let cfg = PipelineConfig {
                    window_seconds: w,
                    ..band_cfg.clone()
                };
                session
                    .with_config(&cfg)
                    .and_then(|s| s.train_on(p))
                    .map_err(|e| e.to_string())
            });
            log::info!(
                "grid cell {w} s × {band}: {:?}",
                outcome.as_ref().map(|(_, r)| r.accuracy)
            );
            cells[i * bands.len() + j] = Some(GridCell {
                window_seconds: w,
                band: *band,
                accuracy: outcome.as_ref().ok().map(|(_, r)| r.accuracy),
                mean_margin: outcome.as_ref().ok().map(|(_, r)| r.mean_margin),
                error: outcome.err(),
            });
        }
    }
    Ok(GridReport {
        config: session.config.clone(),
        windows: windows.to_vec(),
        bands: bands.to_vec(),
        cells: cells
            .into_iter()
            .map(|c| c.expect("every cell visited"))
            .collect(),
    })
}

/// The paper's 7 × 9 layout with the base config's filter order and mode.
pub fn paper_grid(session: &Session) -> Result<GridReport, HarnessError> {
    let bands: Vec<FilterSpec> = GRID_BANDS
        .iter()
        .map(|&(lo, hi)| FilterSpec {
            low_hz: lo,
            high_hz: hi,
            ..session.config.band
        })
        .collect();
    run_grid(session, &GRID_WINDOWS, &bands)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub channels: Vec<String>,
    pub report: EvalReport,
}

/// Retrains on each named channel group.
pub fn run_ablation(
    session: &Session,
    groups: &[(String, Vec<String>)],
) -> Result<Vec<AblationRow>, HarnessError> {
    groups
        .iter()
        .map(|(name, chans)| {
            session.recording.channel_indices(chans)?;
            let cfg = PipelineConfig {
                channels: ChannelSelection::Names(chans.clone()),
                ..session.config.clone()
            };
            let (_, report) = session.with_config(&cfg)?.train()?;
            log::info!("ablation {name}: {:.2}%", report.accuracy);
            Ok(AblationRow {
                group: name.clone(),
                channels: chans.clone(),
                report,
            })
        })
        .collect()
}

/// The four electrode groups of the synthetic montage.
pub fn lobe_groups() -> Vec<(String, Vec<String>)> {
    crate::dataset::synth::LOBES
        .iter()
        .map(|(name, chans)| {
            (
                name.to_string(),
                chans.iter().map(|c| c.to_string()).collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub feature: FeatureKind,
    pub derivative: bool,
    pub accuracy: f64,
    pub feature_len: usize,
}

/// Raw / covariance / tangent features, each with and without differencing.
pub fn run_feature_comparison(session: &Session) -> Result<Vec<VariantRow>, HarnessError> {
    let mut rows = Vec::new();
    for feature in [
        FeatureKind::Raw,
        FeatureKind::Covariance,
        FeatureKind::Tangent,
    ] {
        for derivative in [false, true] {
            let cfg = PipelineConfig {
                feature,
                derivative,
                ..session.config.clone()
            };
            let (_, report) = session.with_config(&cfg)?.train()?;
            log::info!(
                "features {feature:?} derivative={derivative}: {:.2}%",
                report.accuracy
            );
            rows.push(VariantRow {
                feature,
                derivative,
                accuracy: report.accuracy,
                feature_len: report.feature_len,
            });
        }
    }
    Ok(rows)
}

/// Which trials a replay scores.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TrialFilter {
    /// The model's held-out trials.
    #[default]
    Test,
    All,
    Only(BTreeSet<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOptions {
    pub delta: Option<f64>,
    pub q: Option<usize>,
    pub trials: TrialFilter,
    pub gate: CommandGate,
    /// Simulate the robot and keep its telemetry.
    pub robot: Option<TargetMap>,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            delta: None,
            q: None,
            trials: TrialFilter::Test,
            gate: CommandGate::Armed,
            robot: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialCommand {
    pub trial: usize,
    pub truth: Arm,
    /// First command issued between this trial's cue and the next one.
    pub command: Option<Arm>,
    /// All commands issued in that span.
    pub commands: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub window_accuracy: f64,
    pub window_confusion: Confusion,
    pub command_confusion: Confusion,
    pub trials: Vec<TrialCommand>,
    pub missed_trials: usize,
    pub latency: LatencyStats,
    #[serde(skip)]
    pub events: Vec<Event>,
    #[serde(skip)]
    pub decision_values: Vec<(i64, f64)>,
    #[serde(skip)]
    pub telemetry: Vec<Telemetry>,
}

fn scored_trials(model: &DecoderModel, epochs: &Epochs, filter: &TrialFilter) -> BTreeSet<usize> {
    match filter {
        TrialFilter::Test => model.preprocessing.test_trials.iter().copied().collect(),
        TrialFilter::All => epochs.trials().into_iter().collect(),
        TrialFilter::Only(set) => set.clone(),
    }
}

/// The recording's rows at the model's rate and channels, as the online
/// decoder receives them.
pub fn stream_rows(
    model: &DecoderModel,
    recording: &Recording,
) -> Result<SignalBlock, HarnessError> {
    let names = &model.preprocessing.channels;
    let idx = recording.channel_indices(names)?;
    Ok(resample(
        &recording.eeg().select_channels(&idx)?,
        model.rate(),
    )?)
}

/// Runs the online decoder over a recording sample by sample, as fast as
/// possible, timing every `push_sample`.
///
/// Windows are scored against the motion epochs of the selected trials with
/// the model's evaluation stride, exactly as in training; commands are
/// attributed to the trial whose cue precedes them.
pub fn replay(
    model: Arc<DecoderModel>,
    recording: &Recording,
    options: &ReplayOptions,
) -> Result<ReplayReport, HarnessError> {
    let cfg = model.preprocessing.config.clone();
    let movements = detect_onsets(recording, &cfg.onset);
    let epochs = slice_epochs(
        recording,
        &movements,
        cfg.target_rate,
        cfg.pre_onset_seconds,
    );
    let trials = scored_trials(&model, &epochs, &options.trials);

    let rows = stream_rows(&model, recording)?;
    let rate = model.rate();
    let w = model.window();
    let first = i64::from(cfg.derivative);
    let processed_len = rows.len().saturating_sub(first as usize);
    let kept: BTreeSet<i64> = motion_windows(
        &epochs,
        first,
        processed_len,
        w,
        cfg.eval_stride,
        Some(&trials),
    )
    .into_iter()
    .map(|lw| lw.end_index)
    .collect();

    let stream = model
        .preprocessor_with((0..model.n_channels()).collect())?
        .stream()?;
    let delta = options.delta.unwrap_or(cfg.delta);
    let q = options.q.unwrap_or(cfg.q);
    let mut state = PredictorState::new(model.clone(), stream, delta, q)?.with_gate(options.gate);
    let mut robot = options.robot.map(|map| (RobotState::at_home(&map), map));

    let cue_index: Vec<i64> = recording
        .cues()
        .iter()
        .map(|c| (c.time * rate).round() as i64)
        .collect();
    let mut next_cue = 0;
    let mut trial_cmds: Vec<Vec<Arm>> = vec![Vec::new(); recording.cues().len()];
    let mut current_trial: Option<usize> = None;

    let mut window_confusion = Confusion::default();
    let mut latencies = Vec::with_capacity(rows.len());
    let mut events = Vec::new();
    let mut decisions = Vec::new();
    let mut telemetry = Vec::new();
    for (i, row) in rows.rows().enumerate() {
        let i = i as i64;
        while next_cue < cue_index.len() && cue_index[next_cue] <= i {
            state.arm();
            current_trial = Some(next_cue);
            next_cue += 1;
        }
        let t0 = Instant::now();
        let out = state.push_sample(row)?;
        latencies.push(t0.elapsed().as_secs_f64() * 1e6);
        if let Some(p) = out {
            if kept.contains(&p.stream_index) {
                if let Some(arm) = epochs.at(p.stream_index).and_then(|e| e.label.arm()) {
                    window_confusion.add(
                        arm,
                        Arm::from_label(if p.decision_value >= 0.0 { 1.0 } else { -1.0 }),
                    );
                }
            }
            if let (Some(cmd), Some(t)) = (p.command, current_trial) {
                trial_cmds[t].push(cmd);
            }
            if let (Some(cmd), Some((r, map))) = (p.command, robot.as_mut()) {
                r.set_target(cmd, map);
            }
            decisions.push((p.stream_index, p.decision_value));
            events.push(Event::from(&p));
        }
        if let Some((r, _)) = robot.as_mut() {
            r.step();
            telemetry.push(r.telemetry());
        }
    }

    let mut command_confusion = Confusion::default();
    let mut trial_rows = Vec::new();
    let mut missed = 0;
    for &t in &trials {
        let Some(cue) = recording.cues().get(t) else {
            continue;
        };
        let cmds = &trial_cmds[t];
        match cmds.first() {
            Some(&c) => command_confusion.add(cue.label, c),
            None => missed += 1,
        }
        trial_rows.push(TrialCommand {
            trial: t,
            truth: cue.label,
            command: cmds.first().copied(),
            commands: cmds.len(),
        });
    }

    Ok(ReplayReport {
        window_accuracy: window_confusion.accuracy(),
        window_confusion,
        command_confusion,
        trials: trial_rows,
        missed_trials: missed,
        latency: LatencyStats::from_samples(latencies),
        events,
        decision_values: decisions,
        telemetry,
    })
}

/// Onset-aligned mean correct-class probability over the selected trials,
/// spanning `[−window, +window]` seconds.
pub fn onset_curve(
    model: Arc<DecoderModel>,
    recording: &Recording,
    trials: &TrialFilter,
    window_seconds: f64,
) -> Result<Vec<CurvePoint>, HarnessError> {
    let cfg = model.preprocessing.config.clone();
    let movements = detect_onsets(recording, &cfg.onset);
    let epochs = slice_epochs(
        recording,
        &movements,
        cfg.target_rate,
        cfg.pre_onset_seconds,
    );
    let selected = scored_trials(&model, &epochs, trials);
    let onsets: Vec<(i64, Arm)> = epochs
        .motion()
        .filter(|e| e.trial.is_some_and(|t| selected.contains(&t)))
        .filter_map(|e| Some((e.onset_index?, e.label.arm()?)))
        .collect();
    if onsets.is_empty() {
        return Err(HarnessError::Data("no motion onsets found".into()));
    }
    let mut state = PredictorState::from_model(model.clone())?;
    let rows = stream_rows(&model, recording)?;
    let mut preds = Vec::new();
    for row in rows.rows() {
        if let Some(p) = state.push_sample(row)? {
            preds.push((p.stream_index, p.score));
        }
    }
    Ok(aggregate_onset_aligned(
        &preds,
        &onsets,
        model.rate(),
        window_seconds,
    ))
}

/// `t,mean_prob,n` CSV.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("t,mean_prob,n\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{}", p.t, p.mean, p.n);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_accounting() {
        let mut c = Confusion::default();
        c.add(Arm::Left, Arm::Left);
        c.add(Arm::Left, Arm::Right);
        c.add(Arm::Right, Arm::Right);
        c.add(Arm::Right, Arm::Right);
        assert_eq!(c.total(), 4);
        assert_eq!(c.accuracy(), 75.0);
        assert_eq!(Confusion::default().accuracy(), 0.0);
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded() {
        let trials: Vec<(usize, Arm)> = (0..60)
            .map(|i| (i, if i % 3 == 0 { Arm::Left } else { Arm::Right }))
            .collect();
        let (train, test) = split_trials(&trials, 0.5, 9);
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 60);
        assert_eq!(train.iter().filter(|t| *t % 3 == 0).count(), 10);
        assert_eq!(split_trials(&trials, 0.5, 9), (train.clone(), test.clone()));
        assert_ne!(split_trials(&trials, 0.5, 10).0, train);
    }

    #[test]
    fn latency_percentiles() {
        let s = LatencyStats::from_samples((1..=100).map(f64::from).collect());
        assert_eq!(s.count, 100);
        assert_eq!(s.p99_us, 99.0);
        assert_eq!(s.max_us, 100.0);
        assert_eq!(s.mean_us, 50.5);
    }

    #[test]
    fn grid_layout_is_seven_by_nine() {
        assert_eq!(GRID_WINDOWS.len() * GRID_BANDS.len(), 63);
    }
}
