//! Recordings, motion onsets, epochs and the labeled window sets built from
//! them.
//!
//! A [`Recording`] holds raw EEG at its source rate, arm tracking for both
//! arms and the cue list. Motion intervals come from the tracked speed, not
//! from the cues: the cue only supplies the label, and an interval whose
//! moving arm disagrees with its cue is discarded.

mod container;
pub mod synth;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{DspError, SignalBlock};
use crate::features::FeatureError;
use crate::pipeline::{FeatureMap, PipelineConfig, Preprocessor};
use crate::svm::{LEFT, RIGHT};

pub use container::{
    load_recording, read_recording, save_recording, write_recording, FORMAT_VERSION,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("{section} section truncated: expected {expected} bytes, found {found}")]
    Truncated {
        section: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{names} channel names for {channels} EEG channels")]
    ChannelCount { names: usize, channels: usize },

    #[error("{what} timestamps not strictly increasing at entry {index}")]
    NonMonotonic { what: &'static str, index: usize },

    #[error("unknown channel {0:?}")]
    UnknownChannel(String),

    #[error("no usable windows: {0}")]
    NoUsableWindows(String),

    #[error(transparent)]
    Dsp(#[from] DspError),

    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Which arm moved, or which arm a cue asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Left,
    Right,
}

impl Arm {
    /// Classifier label: right = +1, left = −1.
    pub fn label(self) -> f64 {
        match self {
            Arm::Left => LEFT,
            Arm::Right => RIGHT,
        }
    }

    pub fn from_label(label: f64) -> Arm {
        if label > 0.0 {
            Arm::Right
        } else {
            Arm::Left
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Left => "left",
            Arm::Right => "right",
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    /// Seconds from the start of the recording.
    pub time: f64,
    pub label: Arm,
}

/// One tracking sample: both arms' translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MocapFrame {
    pub time: f64,
    pub left: [f64; 3],
    pub right: [f64; 3],
}

impl MocapFrame {
    pub fn arm(&self, arm: Arm) -> [f64; 3] {
        match arm {
            Arm::Left => self.left,
            Arm::Right => self.right,
        }
    }
}

/// A session: EEG at the source rate, tracking, cues and channel names.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    eeg: SignalBlock,
    channel_names: Vec<String>,
    mocap: Vec<MocapFrame>,
    cues: Vec<Cue>,
    generator: Option<serde_json::Value>,
}

impl Recording {
    /// Validates channel names against the EEG width and checks that tracking
    /// and cue timestamps strictly increase.
    pub fn new(
        eeg: SignalBlock,
        channel_names: Vec<String>,
        mocap: Vec<MocapFrame>,
        cues: Vec<Cue>,
    ) -> Result<Self, DatasetError> {
        if channel_names.len() != eeg.n_channels() {
            return Err(DatasetError::ChannelCount {
                names: channel_names.len(),
                channels: eeg.n_channels(),
            });
        }
        if let Some(i) = (1..mocap.len()).find(|&i| !(mocap[i].time > mocap[i - 1].time)) {
            return Err(DatasetError::NonMonotonic {
                what: "mocap",
                index: i,
            });
        }
        if let Some(i) = (1..cues.len()).find(|&i| !(cues[i].time > cues[i - 1].time)) {
            return Err(DatasetError::NonMonotonic {
                what: "cue",
                index: i,
            });
        }
        Ok(Recording {
            eeg,
            channel_names,
            mocap,
            cues,
            generator: None,
        })
    }

    /// Attaches the parameters that produced a synthetic recording.
    pub fn with_generator(mut self, params: serde_json::Value) -> Self {
        self.generator = Some(params);
        self
    }

    pub fn eeg(&self) -> &SignalBlock {
        &self.eeg
    }

    pub fn rate(&self) -> f64 {
        self.eeg.rate()
    }

    pub fn duration(&self) -> f64 {
        self.eeg.len() as f64 / self.eeg.rate()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn mocap(&self) -> &[MocapFrame] {
        &self.mocap
    }

    pub fn cues(&self) -> &[Cue] {
        &self.cues
    }

    pub fn generator(&self) -> Option<&serde_json::Value> {
        self.generator.as_ref()
    }

    /// Indices of `names` in the montage, in the order given.
    pub fn channel_indices<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<usize>, DatasetError> {
        names
            .iter()
            .map(|name| {
                let name = name.as_ref();
                self.channel_names
                    .iter()
                    .position(|c| c.eq_ignore_ascii_case(name))
                    .ok_or_else(|| DatasetError::UnknownChannel(name.to_string()))
            })
            .collect()
    }

    /// Arm positions linearly interpolated onto a clock of `rate` Hz starting
    /// at the first tracking timestamp. Returns the clock origin and one
    /// `[left, right]` pair per tick.
    pub fn mocap_on_clock(&self, rate: f64) -> (f64, Vec<[[f64; 3]; 2]>) {
        let Some(first) = self.mocap.first() else {
            return (0.0, Vec::new());
        };
        let last = self.mocap[self.mocap.len() - 1].time;
        let ticks = ((last - first.time) * rate).floor() as usize + 1;
        let mut out = Vec::with_capacity(ticks);
        let mut seg = 0;
        for k in 0..ticks {
            let t = first.time + k as f64 / rate;
            while seg + 2 < self.mocap.len() && self.mocap[seg + 1].time < t {
                seg += 1;
            }
            let (a, b) = (
                &self.mocap[seg],
                &self.mocap[(seg + 1).min(self.mocap.len() - 1)],
            );
            let u = if b.time > a.time {
                ((t - a.time) / (b.time - a.time)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let lerp = |p: [f64; 3], q: [f64; 3]| [0, 1, 2].map(|i| p[i] + u * (q[i] - p[i]));
            out.push([lerp(a.left, b.left), lerp(a.right, b.right)]);
        }
        (first.time, out)
    }
}

/// Motion detection parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnsetConfig {
    /// Speed (m/s) separating motion from rest.
    pub speed_threshold: f64,
    /// How long (s) the speed must stay on one side of the threshold.
    pub hold_seconds: f64,
    /// Width (s) of the centered moving average applied to the speed.
    pub smoothing_seconds: f64,
    /// Clock (Hz) the tracking is interpolated onto.
    pub clock_rate: f64,
}

impl Default for OnsetConfig {
    fn default() -> Self {
        OnsetConfig {
            speed_threshold: 0.05,
            hold_seconds: 0.1,
            smoothing_seconds: 0.1,
            clock_rate: 160.0,
        }
    }
}

/// One detected movement of one arm, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub arm: Arm,
    pub onset: f64,
    pub offset: f64,
}

/// Speed-threshold motion detection on both arms.
///
/// Speed is the finite-difference magnitude on the interpolated clock,
/// smoothed by a centered moving average. A movement starts at the first
/// tick of a run of `hold` ticks above threshold and ends at the first tick
/// of a run of `hold` ticks at or below it. Results are sorted by onset.
pub fn detect_onsets(recording: &Recording, config: &OnsetConfig) -> Vec<Movement> {
    let rate = config.clock_rate;
    let (t0, positions) = recording.mocap_on_clock(rate);
    if positions.len() < 2 {
        return Vec::new();
    }
    let hold = ((config.hold_seconds * rate).round() as usize).max(1);
    let half = ((config.smoothing_seconds * rate).round() as usize) / 2;
    let mut movements = Vec::new();
    for (which, arm) in [Arm::Left, Arm::Right].into_iter().enumerate() {
        let mut speed = vec![0.0; positions.len()];
        for k in 1..positions.len() {
            let (p, q) = (positions[k - 1][which], positions[k][which]);
            let d2: f64 = (0..3).map(|i| (q[i] - p[i]).powi(2)).sum();
            speed[k] = d2.sqrt() * rate;
        }
        speed[0] = speed[1];
        let smoothed = centered_average(&speed, half);

        let tick_time = |k: usize| t0 + k as f64 / rate;
        let mut moving = false;
        let mut run = 0;
        let mut onset = 0.0;
        for (k, &s) in smoothed.iter().enumerate() {
            let crossing = if moving {
                s <= config.speed_threshold
            } else {
                s > config.speed_threshold
            };
            run = if crossing { run + 1 } else { 0 };
            if run == hold {
                let edge = tick_time(k + 1 - hold);
                if moving {
                    movements.push(Movement {
                        arm,
                        onset,
                        offset: edge,
                    });
                } else {
                    onset = edge;
                }
                moving = !moving;
                run = 0;
            }
        }
        if moving {
            movements.push(Movement {
                arm,
                onset,
                offset: tick_time(smoothed.len()),
            });
        }
    }
    movements.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    movements
}

/// Moving average over `[k - half, k + half]`, truncated at the edges.
fn centered_average(x: &[f64], half: usize) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix[prefix.len() - 1] + v);
    }
    (0..x.len())
        .map(|k| {
            let lo = k.saturating_sub(half);
            let hi = (k + half + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpochLabel {
    Left,
    Right,
    Rest,
}

impl EpochLabel {
    pub fn arm(self) -> Option<Arm> {
        match self {
            EpochLabel::Left => Some(Arm::Left),
            EpochLabel::Right => Some(Arm::Right),
            EpochLabel::Rest => None,
        }
    }
}

impl From<Arm> for EpochLabel {
    fn from(arm: Arm) -> Self {
        match arm {
            Arm::Left => EpochLabel::Left,
            Arm::Right => EpochLabel::Right,
        }
    }
}

/// A labeled sample range `[start, end)` on the pipeline clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub label: EpochLabel,
    pub start: i64,
    pub end: i64,
    /// Onset sample of a motion epoch.
    pub onset_index: Option<i64>,
    /// Index of the cue a motion epoch was matched to; trials are the unit
    /// of train/test splitting.
    pub trial: Option<usize>,
}

impl Epoch {
    pub fn len(&self) -> usize {
        (self.end - self.start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, index: i64) -> bool {
        self.start <= index && index < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Epochs {
    /// Disjoint and sorted by start.
    pub epochs: Vec<Epoch>,
    /// Movements dropped because the moving arm contradicted the nearest cue.
    pub label_mismatches: usize,
}

impl Epochs {
    pub fn motion(&self) -> impl Iterator<Item = &Epoch> {
        self.epochs.iter().filter(|e| e.label != EpochLabel::Rest)
    }

    /// The epoch containing `index`, if any.
    pub fn at(&self, index: i64) -> Option<&Epoch> {
        let k = self.epochs.partition_point(|e| e.end <= index);
        self.epochs.get(k).filter(|e| e.contains(index))
    }

    /// Trial ids of all motion epochs, ascending and deduplicated.
    pub fn trials(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.motion().filter_map(|e| e.trial).collect();
        set.into_iter().collect()
    }
}

/// Cuts the timeline into motion epochs `[onset − pre, offset)` and the rest
/// epochs between them, on a clock of `rate` Hz.
///
/// Each movement takes its label from the nearest cue; when that cue names
/// the other arm the movement is dropped and counted. A motion epoch never
/// reaches back before the end of the previous one.
pub fn slice_epochs(
    recording: &Recording,
    movements: &[Movement],
    rate: f64,
    pre_onset_seconds: f64,
) -> Epochs {
    let mut out = Epochs::default();
    let mut prev_end = 0i64;
    let cues = recording.cues();
    for m in movements {
        let Some((trial, cue)) = cues.iter().enumerate().min_by(|a, b| {
            (a.1.time - m.onset)
                .abs()
                .total_cmp(&(b.1.time - m.onset).abs())
        }) else {
            log::warn!("movement at {:.3} s has no cue; skipped", m.onset);
            continue;
        };
        if cue.label != m.arm {
            log::warn!(
                "cue {trial} asks for {} but the {} arm moved at {:.3} s; epoch dropped",
                cue.label,
                m.arm,
                m.onset
            );
            out.label_mismatches += 1;
            continue;
        }
        let start = (((m.onset - pre_onset_seconds) * rate).round() as i64).max(prev_end);
        let end = (m.offset * rate).round() as i64;
        if end <= start {
            continue;
        }
        if start > prev_end {
            out.epochs.push(Epoch {
                label: EpochLabel::Rest,
                start: prev_end,
                end: start,
                onset_index: None,
                trial: None,
            });
        }
        out.epochs.push(Epoch {
            label: m.arm.into(),
            start,
            end,
            onset_index: Some((m.onset * rate).round() as i64),
            trial: Some(trial),
        });
        prev_end = end;
    }
    out
}

/// A window chosen for training or evaluation, identified by its last sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledWindow {
    pub end_index: i64,
    pub arm: Arm,
    pub trial: usize,
}

/// Motion windows of length `w` over a processed stream that starts at
/// `first_index` and has `len` samples.
///
/// A window belongs to the epoch holding its END sample. Inside an epoch,
/// windows are taken every `stride` samples counting from the epoch start;
/// windows lacking `w` samples of history are skipped. `trials` restricts
/// the selection to the given trial ids.
pub fn motion_windows(
    epochs: &Epochs,
    first_index: i64,
    len: usize,
    w: usize,
    stride: usize,
    trials: Option<&BTreeSet<usize>>,
) -> Vec<LabeledWindow> {
    let stride = stride.max(1) as i64;
    let earliest = first_index + w as i64 - 1;
    let last = first_index + len as i64 - 1;
    let mut out = Vec::new();
    for e in epochs.motion() {
        let (Some(arm), Some(trial)) = (e.label.arm(), e.trial) else {
            continue;
        };
        if trials.is_some_and(|t| !t.contains(&trial)) {
            continue;
        }
        let mut end = e.start;
        if end < earliest {
            end += (earliest - end + stride - 1) / stride * stride;
        }
        while end < e.end && end <= last {
            out.push(LabeledWindow {
                end_index: end,
                arm,
                trial,
            });
            end += stride;
        }
    }
    out
}

/// Features and labels ready for the classifier.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub feature_map: FeatureMap,
    pub features: Vec<Vec<f64>>,
    /// `±1` per feature.
    pub labels: Vec<f64>,
    /// Trial id per feature.
    pub groups: Vec<usize>,
    pub end_indices: Vec<i64>,
}

/// Runs the configured preprocessing over the recording, keeps the motion
/// windows of the given trials (all trials when `None`), fits the reference
/// mean on exactly those windows and extracts their features.
pub fn build_training_set(
    recording: &Recording,
    epochs: &Epochs,
    config: &PipelineConfig,
    trials: Option<&BTreeSet<usize>>,
) -> Result<TrainingSet, DatasetError> {
    let pre = Preprocessor::for_recording(config, recording)?;
    let processed = pre.process(recording)?;
    training_set_from_processed(&processed, epochs, config, trials)
}

/// [`build_training_set`] on an already preprocessed stream.
pub fn training_set_from_processed(
    processed: &SignalBlock,
    epochs: &Epochs,
    config: &PipelineConfig,
    trials: Option<&BTreeSet<usize>>,
) -> Result<TrainingSet, DatasetError> {
    let w = config.window_samples();
    let windows = motion_windows(
        epochs,
        processed.start_index(),
        processed.len(),
        w,
        config.train_stride,
        trials,
    );
    if windows.is_empty() {
        return Err(DatasetError::NoUsableWindows(format!(
            "no {w}-sample window ends inside a left/right motion epoch"
        )));
    }
    let ends: Vec<i64> = windows.iter().map(|lw| lw.end_index).collect();
    let (feature_map, features) =
        FeatureMap::fit_extract(config.feature, config.covariance, processed, &ends, w)?;
    Ok(TrainingSet {
        feature_map,
        features,
        labels: windows.iter().map(|lw| lw.arm.label()).collect(),
        groups: windows.iter().map(|lw| lw.trial).collect(),
        end_indices: ends,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still_frames(seconds: f64) -> Vec<MocapFrame> {
        (0..(seconds * 100.0) as usize)
            .map(|k| MocapFrame {
                time: k as f64 / 100.0,
                left: [0.0; 3],
                right: [0.5, 0.0, 0.0],
            })
            .collect()
    }

    fn recording_with(mocap: Vec<MocapFrame>, cues: Vec<Cue>) -> Recording {
        let eeg = SignalBlock::new(vec![0.0; 2 * 100], 2, 160.0, 0).unwrap();
        Recording::new(eeg, vec!["C3".into(), "C4".into()], mocap, cues).unwrap()
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let eeg = SignalBlock::new(vec![0.0; 4], 2, 160.0, 0).unwrap();
        assert!(matches!(
            Recording::new(eeg.clone(), vec!["C3".into()], vec![], vec![]),
            Err(DatasetError::ChannelCount { .. })
        ));
        let mut frames = still_frames(0.1);
        frames[3].time = frames[2].time;
        assert!(matches!(
            Recording::new(eeg, vec!["C3".into(), "C4".into()], frames, vec![]),
            Err(DatasetError::NonMonotonic {
                what: "mocap",
                index: 3
            })
        ));
    }

    #[test]
    fn stationary_tracking_has_no_movements() {
        let rec = recording_with(still_frames(10.0), vec![]);
        assert!(detect_onsets(&rec, &OnsetConfig::default()).is_empty());
    }

    #[test]
    fn epoch_arithmetic() {
        let rec = recording_with(
            still_frames(1.0),
            vec![Cue {
                time: 4.8,
                label: Arm::Left,
            }],
        );
        let m = [Movement {
            arm: Arm::Left,
            onset: 5.0,
            offset: 7.0,
        }];
        let e = slice_epochs(&rec, &m, 160.0, 1.0);
        assert_eq!(e.epochs.len(), 2);
        assert_eq!(
            (e.epochs[0].label, e.epochs[0].start, e.epochs[0].end),
            (EpochLabel::Rest, 0, 640)
        );
        assert_eq!((e.epochs[1].start, e.epochs[1].end), (640, 1120));
        assert_eq!(e.epochs[1].onset_index, Some(800));
        assert_eq!(e.epochs[1].trial, Some(0));
    }

    #[test]
    fn mismatched_arm_is_dropped_and_counted() {
        let rec = recording_with(
            still_frames(1.0),
            vec![Cue {
                time: 4.8,
                label: Arm::Left,
            }],
        );
        let m = [Movement {
            arm: Arm::Right,
            onset: 5.0,
            offset: 7.0,
        }];
        let e = slice_epochs(&rec, &m, 160.0, 1.0);
        assert!(e.epochs.is_empty());
        assert_eq!(e.label_mismatches, 1);
    }

    #[test]
    fn back_to_back_trials_never_overlap() {
        let cues = vec![
            Cue {
                time: 1.0,
                label: Arm::Left,
            },
            Cue {
                time: 2.0,
                label: Arm::Right,
            },
        ];
        let rec = recording_with(still_frames(1.0), cues);
        let m = [
            Movement {
                arm: Arm::Left,
                onset: 1.2,
                offset: 2.1,
            },
            Movement {
                arm: Arm::Right,
                onset: 2.2,
                offset: 3.0,
            },
        ];
        let e = slice_epochs(&rec, &m, 160.0, 1.0);
        for pair in e.epochs.windows(2) {
            assert!(pair[0].end <= pair[1].start);
        }
        assert!(e.epochs.iter().all(|x| x.start < x.end));
        assert_eq!(e.motion().count(), 2);
    }

    #[test]
    fn window_selection_by_end_sample() {
        let epochs = Epochs {
            epochs: vec![
                Epoch {
                    label: EpochLabel::Rest,
                    start: 0,
                    end: 10,
                    onset_index: None,
                    trial: None,
                },
                Epoch {
                    label: EpochLabel::Left,
                    start: 10,
                    end: 20,
                    onset_index: Some(15),
                    trial: Some(0),
                },
            ],
            label_mismatches: 0,
        };
        let all = motion_windows(&epochs, 1, 100, 4, 1, None);
        assert_eq!(all.len(), 10);
        assert_eq!(all[0].end_index, 10);
        // History shortfall: the first window needs samples 1..=12.
        let long = motion_windows(&epochs, 1, 100, 12, 1, None);
        assert_eq!(long.first().unwrap().end_index, 12);
        assert_eq!(long.len(), 8);
        let strided = motion_windows(&epochs, 1, 100, 12, 3, None);
        assert_eq!(
            strided.iter().map(|w| w.end_index).collect::<Vec<_>>(),
            vec![13, 16, 19]
        );
        let none = motion_windows(&epochs, 1, 100, 4, 1, Some(&BTreeSet::from([7])));
        assert!(none.is_empty());
        assert_eq!(epochs.at(15).unwrap().label, EpochLabel::Left);
        assert!(epochs.at(20).is_none());
    }

    #[test]
    fn centered_average_edges() {
        assert_eq!(
            centered_average(&[1.0, 2.0, 3.0, 4.0], 1),
            vec![1.5, 2.0, 3.0, 3.5]
        );
    }
}
