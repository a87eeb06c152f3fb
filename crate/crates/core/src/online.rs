//! Sample-by-sample decoding: ring buffer, scoring, thresholding and the
//! majority-vote queue, plus the framed stream protocol and onset-aligned
//! aggregation.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Arm;
use crate::dsp::DspError;
use crate::features::{FeatureError, MultichannelWindow};
use crate::model::{DecoderModel, ModelError};
use crate::pipeline::StreamPreprocessor;
use crate::svm::{ClassScore, SvmError};

#[derive(Debug, Error)]
pub enum OnlineError {
    #[error("delta {0} must lie in (0.5, 1]")]
    BadDelta(f64),

    #[error("queue length must be positive")]
    EmptyQueue,

    #[error(transparent)]
    Dsp(#[from] DspError),

    #[error(transparent)]
    Feature(#[from] FeatureError),

    #[error(transparent)]
    Svm(#[from] SvmError),

    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Outcome of thresholding one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Thresholded {
    Left,
    Right,
    Abstain,
}

impl Thresholded {
    pub fn arm(self) -> Option<Arm> {
        match self {
            Thresholded::Left => Some(Arm::Left),
            Thresholded::Right => Some(Arm::Right),
            Thresholded::Abstain => None,
        }
    }
}

impl From<Arm> for Thresholded {
    fn from(arm: Arm) -> Self {
        match arm {
            Arm::Left => Thresholded::Left,
            Arm::Right => Thresholded::Right,
        }
    }
}

/// The class whose probability reaches `delta`; abstains when neither does
/// (or, for `delta <= 0.5`, when both do).
pub fn threshold_score(score: ClassScore, delta: f64) -> Thresholded {
    match (score.p_left >= delta, score.p_right >= delta) {
        (true, false) => Thresholded::Left,
        (false, true) => Thresholded::Right,
        _ => Thresholded::Abstain,
    }
}

/// The last `q` thresholded predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteQueue {
    capacity: usize,
    keep_abstentions: bool,
    items: VecDeque<Thresholded>,
}

impl VoteQueue {
    /// With `keep_abstentions == false` abstentions are never stored, so the
    /// queue holds the last `q` confident predictions.
    pub fn new(capacity: usize, keep_abstentions: bool) -> Self {
        VoteQueue {
            capacity,
            keep_abstentions,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: Thresholded) {
        if t == Thresholded::Abstain && !self.keep_abstentions {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &Thresholded> {
        self.items.iter()
    }

    /// Majority class of a full queue; `None` when underfull or tied.
    pub fn vote(&self) -> Option<Arm> {
        if self.items.len() < self.capacity {
            return None;
        }
        let left = self
            .items
            .iter()
            .filter(|t| **t == Thresholded::Left)
            .count();
        let right = self
            .items
            .iter()
            .filter(|t| **t == Thresholded::Right)
            .count();
        match left.cmp(&right) {
            std::cmp::Ordering::Greater => Some(Arm::Left),
            std::cmp::Ordering::Less => Some(Arm::Right),
            std::cmp::Ordering::Equal => None,
        }
    }
}

/// When a vote becomes a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandGate {
    /// Whenever the vote changes to a class different from the last command.
    #[default]
    Edge,
    /// Once per [`PredictorState::arm`] call: the first decisive vote after
    /// arming is emitted, then the gate closes.
    Armed,
}

/// One scored window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPrediction {
    /// Stream index of the window's last sample.
    pub stream_index: i64,
    pub decision_value: f64,
    pub score: ClassScore,
    pub thresholded: Thresholded,
    /// A command issued at this sample, if any.
    pub command: Option<Arm>,
}

/// Line of the decoder's event stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub index: i64,
    pub p_left: f64,
    pub p_right: f64,
    pub thresholded: Thresholded,
    pub command: Option<Arm>,
}

impl From<&ScoredPrediction> for Event {
    fn from(p: &ScoredPrediction) -> Self {
        Event {
            index: p.stream_index,
            p_left: p.score.p_left,
            p_right: p.score.p_right,
            thresholded: p.thresholded,
            command: p.command,
        }
    }
}

/// Online decoder for one stream.
///
/// Rows arrive at the pipeline rate holding the model's channels. The ring
/// keeps every processed row twice (`slot` and `slot + W`) so the latest
/// `W` rows are always one contiguous slice, in time order, and feature
/// arithmetic matches the batch path exactly.
pub struct PredictorState {
    model: Arc<DecoderModel>,
    stream: StreamPreprocessor,
    ring: Vec<f64>,
    w: usize,
    n: usize,
    /// Processed rows seen so far.
    filled: usize,
    next_index: i64,
    delta: f64,
    queue: VoteQueue,
    gate: CommandGate,
    armed: bool,
    last_command: Option<Arm>,
    feature: Vec<f64>,
}

impl PredictorState {
    /// `stream` must come from the model's preprocessing (see
    /// [`DecoderModel::preprocessor_with`]).
    pub fn new(
        model: Arc<DecoderModel>,
        stream: StreamPreprocessor,
        delta: f64,
        q: usize,
    ) -> Result<Self, OnlineError> {
        if !(delta > 0.5 && delta <= 1.0) {
            return Err(OnlineError::BadDelta(delta));
        }
        if q == 0 {
            return Err(OnlineError::EmptyQueue);
        }
        let (w, n) = (model.window(), model.n_channels());
        if stream.n_channels() != n {
            return Err(DspError::ChannelMismatch {
                expected: n,
                found: stream.n_channels(),
            }
            .into());
        }
        let keep = model.preprocessing.config.queue_abstentions;
        Ok(PredictorState {
            model,
            stream,
            ring: vec![0.0; 2 * w * n],
            w,
            n,
            filled: 0,
            next_index: 0,
            delta,
            queue: VoteQueue::new(q, keep),
            gate: CommandGate::Edge,
            armed: false,
            last_command: None,
            feature: Vec::new(),
        })
    }

    /// Decoder reading rows that hold exactly the model's channels, with the
    /// model's stored δ and q.
    pub fn from_model(model: Arc<DecoderModel>) -> Result<Self, OnlineError> {
        let stream = model
            .preprocessor_with((0..model.n_channels()).collect())?
            .stream()?;
        let (delta, q) = (
            model.preprocessing.config.delta,
            model.preprocessing.config.q,
        );
        Self::new(model, stream, delta, q)
    }

    pub fn with_gate(mut self, gate: CommandGate) -> Self {
        self.gate = gate;
        self
    }

    /// Index assigned to the next pushed row (default 0).
    pub fn with_start_index(mut self, index: i64) -> Self {
        self.next_index = index;
        self
    }

    pub fn model(&self) -> &DecoderModel {
        &self.model
    }

    pub fn queue(&self) -> &VoteQueue {
        &self.queue
    }

    /// Feature of the most recent prediction.
    pub fn last_feature(&self) -> &[f64] {
        &self.feature
    }

    /// Clears the vote queue and opens an [`CommandGate::Armed`] gate, e.g.
    /// when a new trial's cue appears.
    pub fn arm(&mut self) {
        self.queue.clear();
        self.armed = true;
    }

    /// Ingests one row; returns a prediction once `W` processed rows exist.
    pub fn push_sample(&mut self, row: &[f64]) -> Result<Option<ScoredPrediction>, OnlineError> {
        let index = self.next_index;
        self.next_index += 1;
        let Some(processed) = self.stream.push(row)? else {
            return Ok(None);
        };
        let (w, n) = (self.w, self.n);
        let slot = self.filled % w;
        self.ring[slot * n..(slot + 1) * n].copy_from_slice(processed);
        self.ring[(slot + w) * n..(slot + w + 1) * n].copy_from_slice(processed);
        self.filled += 1;
        if self.filled < w {
            return Ok(None);
        }
        let oldest = (slot + 1) % w;
        let window = MultichannelWindow::borrowed(
            &self.ring[oldest * n..(oldest + w) * n],
            n,
            index,
            self.model.rate(),
        );
        self.feature = self.model.feature_map.extract(&window)?;
        let (decision_value, score) = self.model.score(&self.feature)?;
        let thresholded = threshold_score(score, self.delta);
        self.queue.push(thresholded);
        let command = self.gate_command();
        Ok(Some(ScoredPrediction {
            stream_index: index,
            decision_value,
            score,
            thresholded,
            command,
        }))
    }

    fn gate_command(&mut self) -> Option<Arm> {
        let vote = self.queue.vote()?;
        let fire = match self.gate {
            CommandGate::Edge => self.last_command != Some(vote),
            CommandGate::Armed => std::mem::take(&mut self.armed),
        };
        if fire {
            self.last_command = Some(vote);
            Some(vote)
        } else {
            None
        }
    }
}

/// One point of an onset-aligned curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Seconds relative to onset.
    pub t: f64,
    /// Mean probability of the trial's true class.
    pub mean: f64,
    /// Trials contributing to this point.
    pub n: usize,
}

/// Mean correct-class probability around each onset.
///
/// `predictions` are `(stream index, score)` pairs on a clock of `rate` Hz;
/// `onsets` are `(onset index, true arm)`. The time axis runs over
/// `[−window, +window]` seconds in steps of one sample; points no trial
/// covers are omitted.
pub fn aggregate_onset_aligned(
    predictions: &[(i64, ClassScore)],
    onsets: &[(i64, Arm)],
    rate: f64,
    window_seconds: f64,
) -> Vec<CurvePoint> {
    let mut sorted: Vec<(i64, ClassScore)> = predictions.to_vec();
    sorted.sort_by_key(|p| p.0);
    let lookup = |index: i64| {
        sorted
            .binary_search_by_key(&index, |p| p.0)
            .ok()
            .map(|k| sorted[k].1)
    };
    let span = (window_seconds * rate).round() as i64;
    (-span..=span)
        .filter_map(|k| {
            let (sum, n) = onsets
                .iter()
                .filter_map(|&(onset, arm)| lookup(onset + k).map(|s| s.prob_of(arm.label())))
                .fold((0.0, 0usize), |(s, n), p| (s + p, n + 1));
            (n > 0).then(|| CurvePoint {
                t: k as f64 / rate,
                mean: sum / n as f64,
                n,
            })
        })
        .collect()
}

/// Framed sample stream: `"EEGF"`, u16 version, u16 channel count, then
/// frames of u32 sample index followed by `n` f32 values, little-endian.
pub mod wire {
    use super::*;

    pub const MAGIC: [u8; 4] = *b"EEGF";
    pub const VERSION: u16 = 1;

    #[derive(Debug, Error)]
    pub enum WireError {
        #[error("i/o error: {0}")]
        Io(#[from] std::io::Error),

        #[error("bad stream magic {0:?}")]
        BadMagic([u8; 4]),

        #[error("unsupported stream version {0}")]
        Version(u16),

        #[error("stream declares zero channels")]
        NoChannels,

        #[error("stream ended inside a frame ({got} of {want} bytes)")]
        PartialFrame { got: usize, want: usize },

        #[error("stream ended inside the header")]
        PartialHeader,
    }

    pub fn write_header<W: Write>(out: &mut W, n_channels: u16) -> std::io::Result<()> {
        out.write_all(&MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&n_channels.to_le_bytes())
    }

    pub fn write_frame<W: Write>(out: &mut W, index: u32, row: &[f64]) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(4 + 4 * row.len());
        buf.extend_from_slice(&index.to_le_bytes());
        for v in row {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.write_all(&buf)
    }

    /// Reads frames from a byte stream after validating its header.
    pub struct FrameReader<R> {
        input: R,
        n: usize,
        buf: Vec<u8>,
    }

    impl<R: Read> FrameReader<R> {
        pub fn new(mut input: R) -> Result<Self, WireError> {
            let mut head = [0u8; 8];
            read_full(&mut input, &mut head).and_then(|got| {
                if got < head.len() {
                    Err(WireError::PartialHeader)
                } else {
                    Ok(())
                }
            })?;
            let magic = [head[0], head[1], head[2], head[3]];
            if magic != MAGIC {
                return Err(WireError::BadMagic(magic));
            }
            let version = u16::from_le_bytes([head[4], head[5]]);
            if version != VERSION {
                return Err(WireError::Version(version));
            }
            let n = u16::from_le_bytes([head[6], head[7]]) as usize;
            if n == 0 {
                return Err(WireError::NoChannels);
            }
            Ok(FrameReader {
                input,
                n,
                buf: vec![0; 4 + 4 * n],
            })
        }

        pub fn n_channels(&self) -> usize {
            self.n
        }

        /// Next frame; `None` on a clean end of stream.
        pub fn next_frame(&mut self) -> Result<Option<(u32, Vec<f64>)>, WireError> {
            let got = read_full(&mut self.input, &mut self.buf)?;
            if got == 0 {
                return Ok(None);
            }
            if got < self.buf.len() {
                return Err(WireError::PartialFrame {
                    got,
                    want: self.buf.len(),
                });
            }
            let index = u32::from_le_bytes([self.buf[0], self.buf[1], self.buf[2], self.buf[3]]);
            let row = self.buf[4..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Ok(Some((index, row)))
        }
    }

    /// Fills `buf` unless the stream ends; returns the bytes read.
    fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<usize, WireError> {
        let mut got = 0;
        while got < buf.len() {
            match input.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(k) => got += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(got)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(p_left: f64) -> ClassScore {
        ClassScore {
            p_left,
            p_right: 1.0 - p_left,
        }
    }

    fn queue(q: usize, items: &[Thresholded]) -> VoteQueue {
        let mut v = VoteQueue::new(q, false);
        for t in items {
            v.push(*t);
        }
        v
    }

    use Thresholded::{Abstain, Left as L, Right as R};

    #[test]
    fn thresholding() {
        assert_eq!(threshold_score(s(0.9), 0.65), L);
        assert_eq!(threshold_score(s(0.6), 0.65), Abstain);
        assert_eq!(threshold_score(s(0.5), 0.5 + 1e-12), Abstain);
        assert_eq!(threshold_score(s(0.2), 0.65), R);
        assert_eq!(threshold_score(s(0.35), 0.65), R);
    }

    #[test]
    fn voting() {
        assert_eq!(queue(5, &[L, L, R, L, R]).vote(), Some(Arm::Left));
        assert_eq!(queue(4, &[L, L, R, R]).vote(), None);
        assert_eq!(queue(5, &[L, L, L]).vote(), None);
        // Oldest entries fall out.
        assert_eq!(queue(3, &[L, L, L, R, R]).vote(), Some(Arm::Right));
    }

    #[test]
    fn abstentions_stay_out_unless_requested() {
        let q = queue(3, &[L, Abstain, Abstain, L]);
        assert_eq!(q.len(), 2);
        assert!(q.iter().all(|t| *t != Abstain));
        let mut keep = VoteQueue::new(3, true);
        for t in [L, Abstain, Abstain] {
            keep.push(t);
        }
        assert_eq!(keep.len(), 3);
        assert_eq!(keep.vote(), Some(Arm::Left));
    }

    #[test]
    fn curve_of_one_trial_is_its_trace() {
        let preds: Vec<(i64, ClassScore)> = (0..20).map(|i| (i, s(i as f64 / 20.0))).collect();
        let curve = aggregate_onset_aligned(&preds, &[(10, Arm::Left)], 10.0, 0.5);
        assert_eq!(curve.len(), 11);
        for p in &curve {
            let idx = 10 + (p.t * 10.0).round() as i64;
            assert_eq!(p.mean, idx as f64 / 20.0);
            assert_eq!(p.n, 1);
        }
    }

    #[test]
    fn flat_scores_give_flat_curve() {
        let preds: Vec<(i64, ClassScore)> = (0..100).map(|i| (i, s(0.5))).collect();
        let curve =
            aggregate_onset_aligned(&preds, &[(30, Arm::Left), (60, Arm::Right)], 10.0, 2.0);
        assert!(curve.iter().all(|p| p.mean == 0.5));
        assert_eq!(curve.iter().map(|p| p.n).max(), Some(2));
    }

    #[test]
    fn wire_round_trip_and_errors() {
        let mut bytes = Vec::new();
        wire::write_header(&mut bytes, 2).unwrap();
        wire::write_frame(&mut bytes, 7, &[1.5, -2.25]).unwrap();
        wire::write_frame(&mut bytes, 8, &[0.0, 3.0]).unwrap();
        let mut r = wire::FrameReader::new(&bytes[..]).unwrap();
        assert_eq!(r.n_channels(), 2);
        assert_eq!(r.next_frame().unwrap(), Some((7, vec![1.5, -2.25])));
        assert_eq!(r.next_frame().unwrap(), Some((8, vec![0.0, 3.0])));
        assert!(r.next_frame().unwrap().is_none());

        let mut r = wire::FrameReader::new(&bytes[..bytes.len() - 2]).unwrap();
        r.next_frame().unwrap();
        assert!(matches!(
            r.next_frame(),
            Err(wire::WireError::PartialFrame { .. })
        ));
        assert!(matches!(
            wire::FrameReader::new(&b"EEGX\x01\x00\x02\x00"[..]),
            Err(wire::WireError::BadMagic(_))
        ));
        assert!(matches!(
            wire::FrameReader::new(&b"EEGF\x01"[..]),
            Err(wire::WireError::PartialHeader)
        ));
        assert!(matches!(
            wire::FrameReader::new(&b"EEGF\x01\x00\x00\x00"[..]),
            Err(wire::WireError::NoChannels)
        ));
    }
}
