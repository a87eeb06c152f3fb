//! Shared preprocessing and feature configuration for training and decoding.
//!
//! The same [`Preprocessor`] drives the offline batch path and the online
//! per-sample path; for causal filtering the two produce bit-identical rows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, OnsetConfig, Recording};
use crate::dsp::{
    design_bandpass, differentiate, filter_block, resample, Bandpass, DspError, FilterMode,
    FilterSpec, FilterState, SignalBlock,
};
use crate::features::{
    configured_covariance, fit_reference, CovarianceConfig, FeatureError, FeatureExtractor,
    MultichannelWindow,
};
use crate::spd::{tangent_vectorize, SpdMatrix, SymmetricMatrix, Weighting};
use crate::svm::SvmParams;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

/// Where differencing sits relative to the band-pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessingOrder {
    #[default]
    FilterThenDifferentiate,
    DifferentiateThenFilter,
}

/// What the classifier sees for each window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Tangent-space projection of the covariance at the training mean.
    #[default]
    Tangent,
    /// Upper triangle of the covariance itself.
    Covariance,
    /// The window's samples, flattened row-major.
    Raw,
}

/// `"all"` or an explicit list of electrode names.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelSelection {
    #[default]
    #[serde(with = "all_literal")]
    All,
    Names(Vec<String>),
}

mod all_literal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("all")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s.eq_ignore_ascii_case("all") {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!(
                "expected \"all\" or a list of channel names, got {s:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c: f64,
    pub gamma: f64,
    pub tol: f64,
    /// Kernel cache budget in MiB.
    pub cache_mb: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        let p = SvmParams::default();
        SvmConfig {
            c: p.c,
            gamma: p.gamma,
            tol: p.tol,
            cache_mb: p.cache_bytes >> 20,
        }
    }
}

impl SvmConfig {
    pub fn params(&self) -> SvmParams {
        SvmParams {
            c: self.c,
            gamma: self.gamma,
            tol: self.tol,
            cache_bytes: self.cache_mb << 20,
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Rate of the raw EEG; replaced by the recording's rate when resolved.
    pub source_rate: f64,
    pub target_rate: f64,
    pub window_seconds: f64,
    pub band: FilterSpec,
    pub order: ProcessingOrder,
    /// First-difference the signal.
    pub derivative: bool,
    pub feature: FeatureKind,
    pub covariance: CovarianceConfig,
    pub svm: SvmConfig,
    /// Score threshold for a confident prediction.
    pub delta: f64,
    /// Vote queue capacity.
    pub q: usize,
    /// Keep abstentions in the vote queue (they never win a vote but take
    /// up slots).
    pub queue_abstentions: bool,
    pub channels: ChannelSelection,
    /// Fraction of trials used for training.
    pub split: f64,
    pub seed: u64,
    /// Training windows are taken every `train_stride` samples.
    pub train_stride: usize,
    /// Evaluation windows are taken every `eval_stride` samples.
    pub eval_stride: usize,
    /// Motion epochs start this long before the detected onset (s).
    pub pre_onset_seconds: f64,
    pub onset: OnsetConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            source_rate: 250.0,
            target_rate: 160.0,
            window_seconds: 2.0,
            band: FilterSpec::band(5.0, 15.0),
            order: ProcessingOrder::default(),
            derivative: true,
            feature: FeatureKind::default(),
            covariance: CovarianceConfig::default(),
            svm: SvmConfig::default(),
            delta: 0.65,
            q: 160,
            queue_abstentions: false,
            channels: ChannelSelection::All,
            split: 0.5,
            seed: 0,
            train_stride: 8,
            eval_stride: 1,
            pre_onset_seconds: 1.0,
            onset: OnsetConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Window length in samples at the pipeline rate.
    pub fn window_samples(&self) -> usize {
        (self.window_seconds * self.target_rate).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError(msg));
        if !(self.target_rate > 0.0) || !(self.source_rate > 0.0) {
            return fail(format!(
                "rates must be positive ({} -> {})",
                self.source_rate, self.target_rate
            ));
        }
        if self.window_samples() < 2 {
            return fail(format!(
                "window of {} s at {} Hz is {} samples; need at least 2",
                self.window_seconds,
                self.target_rate,
                self.window_samples()
            ));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return fail(format!("split {} must lie in (0, 1)", self.split));
        }
        if !(self.delta > 0.5 && self.delta <= 1.0) {
            return fail(format!("delta {} must lie in (0.5, 1]", self.delta));
        }
        if self.q == 0 {
            return fail("q must be positive".into());
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return fail("window strides must be positive".into());
        }
        if !(self.pre_onset_seconds >= 0.0) {
            return fail(format!(
                "pre_onset_seconds {} must be non-negative",
                self.pre_onset_seconds
            ));
        }
        if self.band.high_hz >= self.target_rate / 2.0 {
            return fail(format!(
                "band {} reaches the {} Hz Nyquist limit",
                self.band,
                self.target_rate / 2.0
            ));
        }
        if !(self.svm.c > 0.0 && self.svm.gamma > 0.0 && self.svm.tol > 0.0) {
            return fail("svm c, gamma and tol must be positive".into());
        }
        Ok(())
    }

    /// Channel names selected from `montage`, in montage order for `All`.
    pub fn selected_channels(&self, montage: &[String]) -> Vec<String> {
        match &self.channels {
            ChannelSelection::All => montage.to_vec(),
            ChannelSelection::Names(names) => names.clone(),
        }
    }
}

/// The signal chain up to windowing: channel selection, resampling,
/// band-pass and differencing.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    target_rate: f64,
    channels: Vec<usize>,
    filter: Bandpass,
    order: ProcessingOrder,
    derivative: bool,
}

impl Preprocessor {
    pub fn new(
        target_rate: f64,
        channels: Vec<usize>,
        band: &FilterSpec,
        order: ProcessingOrder,
        derivative: bool,
    ) -> Result<Self, DspError> {
        Ok(Preprocessor {
            target_rate,
            channels,
            filter: design_bandpass(band, target_rate)?,
            order,
            derivative,
        })
    }

    /// Resolves the configured channel selection against the recording.
    pub fn for_recording(
        config: &PipelineConfig,
        recording: &Recording,
    ) -> Result<Self, DatasetError> {
        let names = config.selected_channels(recording.channel_names());
        let channels = recording.channel_indices(&names)?;
        Ok(Preprocessor::new(
            config.target_rate,
            channels,
            &config.band,
            config.order,
            config.derivative,
        )?)
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn filter(&self) -> &Bandpass {
        &self.filter
    }

    /// The whole recording through the chain. The output is at the pipeline
    /// rate and starts at sample 1 when differencing drops the first row.
    pub fn process(&self, recording: &Recording) -> Result<SignalBlock, DspError> {
        let selected = recording.eeg().select_channels(&self.channels)?;
        let resampled = resample(&selected, self.target_rate)?;
        self.process_resampled(&resampled)
    }

    /// The chain after resampling, on a block already at the pipeline rate
    /// holding the selected channels.
    pub fn process_resampled(&self, block: &SignalBlock) -> Result<SignalBlock, DspError> {
        let mut state = FilterState::new(&self.filter, block.n_channels());
        match (self.order, self.derivative) {
            (_, false) => filter_block(&self.filter, &mut state, block),
            (ProcessingOrder::FilterThenDifferentiate, true) => {
                differentiate(&filter_block(&self.filter, &mut state, block)?, None)
            }
            (ProcessingOrder::DifferentiateThenFilter, true) => {
                filter_block(&self.filter, &mut state, &differentiate(block, None)?)
            }
        }
    }

    /// Per-sample form of [`Preprocessor::process_resampled`]. Needs a
    /// causal filter.
    pub fn stream(&self) -> Result<StreamPreprocessor, DspError> {
        if self.filter.spec().mode != FilterMode::Causal {
            return Err(DspError::InvalidFilter(
                "streaming needs a causal filter".into(),
            ));
        }
        Ok(StreamPreprocessor {
            state: FilterState::new(&self.filter, self.channels.len()),
            filter: self.filter.clone(),
            order: self.order,
            derivative: self.derivative,
            prev: None,
            scratch: vec![0.0; self.channels.len()],
        })
    }
}

/// Streaming state of the chain: filter delay lines and the previous row.
#[derive(Debug, Clone)]
pub struct StreamPreprocessor {
    filter: Bandpass,
    state: FilterState,
    order: ProcessingOrder,
    derivative: bool,
    prev: Option<Vec<f64>>,
    scratch: Vec<f64>,
}

impl StreamPreprocessor {
    pub fn n_channels(&self) -> usize {
        self.scratch.len()
    }

    /// Processes one row. Returns `None` for the row consumed to start the
    /// first difference, otherwise the processed row.
    pub fn push(&mut self, row: &[f64]) -> Result<Option<&[f64]>, DspError> {
        let n = self.scratch.len();
        if row.len() != n {
            return Err(DspError::ChannelMismatch {
                expected: n,
                found: row.len(),
            });
        }
        if !self.derivative {
            self.scratch.copy_from_slice(row);
            self.filter
                .process_row(&mut self.state, &mut self.scratch)?;
            return Ok(Some(&self.scratch));
        }
        match self.order {
            ProcessingOrder::FilterThenDifferentiate => {
                let mut filtered = row.to_vec();
                self.filter.process_row(&mut self.state, &mut filtered)?;
                let Some(prev) = self.prev.replace(filtered) else {
                    return Ok(None);
                };
                let cur = self.prev.as_ref().expect("just stored");
                for ((o, x), p) in self.scratch.iter_mut().zip(cur).zip(&prev) {
                    *o = x - p;
                }
            }
            ProcessingOrder::DifferentiateThenFilter => {
                let Some(prev) = self.prev.replace(row.to_vec()) else {
                    return Ok(None);
                };
                for ((o, x), p) in self.scratch.iter_mut().zip(row).zip(&prev) {
                    *o = x - p;
                }
                self.filter
                    .process_row(&mut self.state, &mut self.scratch)?;
            }
        }
        Ok(Some(&self.scratch))
    }
}

/// The window → feature-vector map, fitted on training windows.
#[derive(Debug, Clone)]
pub enum FeatureMap {
    Tangent(FeatureExtractor),
    Covariance(CovarianceConfig),
    Raw,
}

/// The `w` rows of `block` ending at stream index `end`.
pub fn window_at(block: &SignalBlock, end: i64, w: usize) -> MultichannelWindow<'_> {
    let n = block.n_channels();
    let last = (end - block.start_index()) as usize;
    let first = last + 1 - w;
    MultichannelWindow::borrowed(
        &block.samples()[first * n..(last + 1) * n],
        n,
        end,
        block.rate(),
    )
}

impl FeatureMap {
    pub fn kind(&self) -> FeatureKind {
        match self {
            FeatureMap::Tangent(_) => FeatureKind::Tangent,
            FeatureMap::Covariance(_) => FeatureKind::Covariance,
            FeatureMap::Raw => FeatureKind::Raw,
        }
    }

    /// Fits the map on the windows ending at `ends` and returns their
    /// features. Only the tangent map has anything to fit: the Fréchet mean
    /// of exactly these windows' covariances.
    pub fn fit_extract(
        kind: FeatureKind,
        covariance: CovarianceConfig,
        block: &SignalBlock,
        ends: &[i64],
        w: usize,
    ) -> Result<(FeatureMap, Vec<Vec<f64>>), FeatureError> {
        match kind {
            FeatureKind::Tangent => {
                let covs = ends
                    .iter()
                    .map(|&e| configured_covariance(&window_at(block, e, w), &covariance))
                    .collect::<Result<Vec<SpdMatrix>, _>>()?;
                let extractor = fit_reference(&covs, covariance)?;
                let features = covs
                    .iter()
                    .map(|c| extractor.project(c).map(|f| f.into_values()))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((FeatureMap::Tangent(extractor), features))
            }
            other => {
                let map = if other == FeatureKind::Raw {
                    FeatureMap::Raw
                } else {
                    FeatureMap::Covariance(covariance)
                };
                let features = map.extract_many(block, ends, w)?;
                Ok((map, features))
            }
        }
    }

    pub fn extract(&self, window: &MultichannelWindow<'_>) -> Result<Vec<f64>, FeatureError> {
        match self {
            FeatureMap::Tangent(ex) => Ok(ex.extract(window)?.into_values()),
            FeatureMap::Covariance(cfg) => {
                let c = configured_covariance(window, cfg)?;
                let sym = SymmetricMatrix::new(c.into_matrix())?;
                Ok(tangent_vectorize(&sym, Weighting::Plain).into_values())
            }
            FeatureMap::Raw => Ok(window.samples().to_vec()),
        }
    }

    pub fn extract_many(
        &self,
        block: &SignalBlock,
        ends: &[i64],
        w: usize,
    ) -> Result<Vec<Vec<f64>>, FeatureError> {
        ends.iter()
            .map(|&e| self.extract(&window_at(block, e, w)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, n: usize) -> SignalBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        SignalBlock::new(
            (0..len * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            n,
            160.0,
            0,
        )
        .unwrap()
    }

    #[test]
    fn config_round_trips_through_toml_shapes() {
        let cfg = PipelineConfig {
            channels: ChannelSelection::Names(vec!["C3".into()]),
            ..Default::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
        let all: PipelineConfig = serde_json::from_str(r#"{"channels":"all"}"#).unwrap();
        assert_eq!(all.channels, ChannelSelection::All);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"channels":"some"}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"bogus":1}"#).is_err());
    }

    #[test]
    fn validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        assert_eq!(
            PipelineConfig {
                window_seconds: 0.03,
                ..Default::default()
            }
            .window_samples(),
            5
        );
        for bad in [
            PipelineConfig {
                window_seconds: 0.005,
                ..Default::default()
            },
            PipelineConfig {
                split: 1.0,
                ..Default::default()
            },
            PipelineConfig {
                delta: 0.5,
                ..Default::default()
            },
            PipelineConfig {
                q: 0,
                ..Default::default()
            },
            PipelineConfig {
                band: FilterSpec::band(70.0, 80.0),
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn streaming_chain_matches_batch_in_both_orders() {
        let x = noise(300, 3);
        for order in [
            ProcessingOrder::FilterThenDifferentiate,
            ProcessingOrder::DifferentiateThenFilter,
        ] {
            for derivative in [true, false] {
                let pre = Preprocessor::new(
                    160.0,
                    vec![0, 1, 2],
                    &FilterSpec::band(5.0, 15.0),
                    order,
                    derivative,
                )
                .unwrap();
                let batch = pre.process_resampled(&x).unwrap();
                let mut stream = pre.stream().unwrap();
                let mut rows = Vec::new();
                for r in x.rows() {
                    if let Some(out) = stream.push(r).unwrap() {
                        rows.extend_from_slice(out);
                    }
                }
                assert_eq!(rows, batch.samples(), "{order:?} {derivative}");
                assert_eq!(batch.start_index(), i64::from(derivative));
            }
        }
    }

    #[test]
    fn zero_phase_cannot_stream() {
        let mut band = FilterSpec::band(5.0, 15.0);
        band.mode = FilterMode::ZeroPhase;
        let pre =
            Preprocessor::new(160.0, vec![0], &band, ProcessingOrder::default(), true).unwrap();
        assert!(pre.stream().is_err());
    }

    #[test]
    fn feature_lengths_per_kind() {
        let x = noise(100, 5);
        let ends = [40, 60, 99];
        for (kind, len) in [
            (FeatureKind::Tangent, 15),
            (FeatureKind::Covariance, 15),
            (FeatureKind::Raw, 50),
        ] {
            let (map, feats) =
                FeatureMap::fit_extract(kind, CovarianceConfig::default(), &x, &ends, 10).unwrap();
            assert_eq!(map.kind(), kind);
            assert!(feats.iter().all(|f| f.len() == len));
            assert_eq!(map.extract(&window_at(&x, 60, 10)).unwrap(), feats[1]);
        }
    }
}
