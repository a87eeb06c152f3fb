//! The decoder model file.
//!
//! ```text
//! "RIEM"  u16 version                         little-endian throughout
//! repeated sections: [u8; 4] tag, u32 byte length, payload
//!   PREP  UTF-8 JSON: resolved pipeline config, channel lists, window
//!         length, trial split, label encoding
//!   MEAN  u32 n, then n² f64 row-major (tangent features only)
//!   SVMS  u32 count, u32 dim, count·dim f64 support vectors,
//!         count f64 dual coefficients (α·y), f64 bias, f64 gamma, f64 C,
//!         u8 calibrated, f64 platt_a, f64 platt_b, u8 converged,
//!         u64 iterations
//! ```
//!
//! Unknown sections are skipped, so later versions can add sections without
//! breaking older readers.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::DspError;
use crate::features::{FeatureError, FeatureExtractor};
use crate::pipeline::{FeatureKind, FeatureMap, PipelineConfig, Preprocessor};
use crate::spd::{SpdError, SpdMatrix};
use crate::svm::{ClassScore, Platt, SvmError, SvmModel};

pub const MAGIC: [u8; 4] = *b"RIEM";
pub const MODEL_VERSION: u16 = 1;
/// Stored in every model; decoders refuse anything else.
pub const LABEL_ENCODING: &str = "right=+1,left=-1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a model file (magic {0:?})")]
    BadMagic([u8; 4]),

    #[error("unsupported model version {0}")]
    Version(u16),

    #[error("missing {0} section")]
    MissingSection(&'static str),

    #[error("{0} section truncated or malformed")]
    Malformed(String),

    #[error("preprocessing section: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Spd(#[from] SpdError),

    #[error(transparent)]
    Feature(#[from] FeatureError),

    #[error(transparent)]
    Dsp(#[from] DspError),

    #[error(transparent)]
    Svm(#[from] SvmError),
}

/// Frozen preprocessing: everything needed to turn raw rows into features
/// exactly as during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub config: PipelineConfig,
    /// Electrodes the model reads, in feature order.
    pub channels: Vec<String>,
    /// Montage of the training recording.
    pub source_channels: Vec<String>,
    /// Window length in samples.
    pub window: usize,
    pub train_trials: Vec<usize>,
    pub test_trials: Vec<usize>,
    pub label_encoding: String,
}

/// A trained decoder: preprocessing, feature map and calibrated SVM.
#[derive(Debug, Clone)]
pub struct DecoderModel {
    pub preprocessing: Preprocessing,
    pub feature_map: FeatureMap,
    pub svm: SvmModel,
}

impl DecoderModel {
    pub fn n_channels(&self) -> usize {
        self.preprocessing.channels.len()
    }

    pub fn window(&self) -> usize {
        self.preprocessing.window
    }

    pub fn rate(&self) -> f64 {
        self.preprocessing.config.target_rate
    }

    /// Preprocessor reading the model's channels from rows laid out like
    /// `montage`.
    pub fn preprocessor_for(&self, montage: &[String]) -> Result<Preprocessor, ModelError> {
        let idx = self
            .preprocessing
            .channels
            .iter()
            .map(|c| {
                montage
                    .iter()
                    .position(|m| m.eq_ignore_ascii_case(c))
                    .ok_or_else(|| {
                        ModelError::Malformed(format!("channel {c} absent from the input montage"))
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.preprocessor_with(idx)
    }

    /// Preprocessor reading the model's channels from rows at positions `channels`.
    pub fn preprocessor_with(&self, channels: Vec<usize>) -> Result<Preprocessor, ModelError> {
        let cfg = &self.preprocessing.config;
        Ok(Preprocessor::new(
            cfg.target_rate,
            channels,
            &cfg.band,
            cfg.order,
            cfg.derivative,
        )?)
    }

    /// Decision value and calibrated score of one feature vector.
    pub fn score(&self, feature: &[f64]) -> Result<(f64, ClassScore), SvmError> {
        let f = self.svm.decision_value(feature)?;
        let platt = self.svm.platt.ok_or(SvmError::Uncalibrated)?;
        Ok((f, ClassScore::from_p_right(platt.p_right(f))))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), ModelError> {
        out.write_all(&MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        write_section(&mut out, b"PREP", &serde_json::to_vec(&self.preprocessing)?)?;
        if let FeatureMap::Tangent(ex) = &self.feature_map {
            let mean = ex.reference_mean();
            let mut buf = Vec::new();
            buf.extend_from_slice(&(mean.dim() as u32).to_le_bytes());
            put_f64s(&mut buf, &mean.to_row_major());
            write_section(&mut out, b"MEAN", &buf)?;
        }
        let svm = &self.svm;
        let dim = svm.feature_len().unwrap_or(0);
        let mut buf = Vec::new();
        buf.extend_from_slice(&(svm.n_support() as u32).to_le_bytes());
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
        for sv in &svm.support_vectors {
            put_f64s(&mut buf, sv);
        }
        put_f64s(&mut buf, &svm.dual_coeffs);
        put_f64s(&mut buf, &[svm.bias, svm.gamma, svm.c]);
        let platt = svm.platt.unwrap_or(Platt { a: 0.0, b: 0.0 });
        buf.push(u8::from(svm.platt.is_some()));
        put_f64s(&mut buf, &[platt.a, platt.b]);
        buf.push(u8::from(svm.converged));
        buf.extend_from_slice(&(svm.iterations as u64).to_le_bytes());
        write_section(&mut out, b"SVMS", &buf)?;
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, ModelError> {
        let mut head = [0u8; 6];
        input
            .read_exact(&mut head)
            .map_err(|_| ModelError::Malformed("file header".into()))?;
        let magic = [head[0], head[1], head[2], head[3]];
        if magic != MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != MODEL_VERSION {
            return Err(ModelError::Version(version));
        }
        let (mut prep, mut mean, mut svms) = (None, None, None);
        loop {
            let mut tag = [0u8; 8];
            match input.read(&mut tag[..1])? {
                0 => break,
                _ => input
                    .read_exact(&mut tag[1..])
                    .map_err(|_| ModelError::Malformed("section header".into()))?,
            }
            let len = u32::from_le_bytes([tag[4], tag[5], tag[6], tag[7]]) as usize;
            let mut payload = Vec::new();
            (&mut input).take(len as u64).read_to_end(&mut payload)?;
            let name = String::from_utf8_lossy(&tag[..4]).into_owned();
            if payload.len() != len {
                return Err(ModelError::Malformed(name));
            }
            match &tag[..4] {
                b"PREP" => prep = Some(payload),
                b"MEAN" => mean = Some(payload),
                b"SVMS" => svms = Some(payload),
                _ => log::warn!("skipping unknown model section {name:?}"),
            }
        }
        let preprocessing: Preprocessing =
            serde_json::from_slice(&prep.ok_or(ModelError::MissingSection("PREP"))?)?;
        if preprocessing.label_encoding != LABEL_ENCODING {
            return Err(ModelError::Malformed(format!(
                "label encoding {:?}",
                preprocessing.label_encoding
            )));
        }
        let cfg = &preprocessing.config;
        let feature_map = match cfg.feature {
            FeatureKind::Tangent => {
                let bytes = mean.ok_or(ModelError::MissingSection("MEAN"))?;
                let mut r = Cursor::new(&bytes, "MEAN");
                let n = r.u32()? as usize;
                let entries = r.f64s(n * n)?;
                r.finish()?;
                let mean = SpdMatrix::from_row_slice(n, &entries)?;
                FeatureMap::Tangent(FeatureExtractor::from_reference(mean, cfg.covariance)?)
            }
            FeatureKind::Covariance => FeatureMap::Covariance(cfg.covariance),
            FeatureKind::Raw => FeatureMap::Raw,
        };
        let bytes = svms.ok_or(ModelError::MissingSection("SVMS"))?;
        let mut r = Cursor::new(&bytes, "SVMS");
        let count = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let support_vectors = (0..count)
            .map(|_| r.f64s(dim))
            .collect::<Result<Vec<_>, _>>()?;
        let dual_coeffs = r.f64s(count)?;
        let [bias, gamma, c] = r.f64s(3)?.try_into().expect("three values");
        let calibrated = r.u8()? != 0;
        let [a, b] = r.f64s(2)?.try_into().expect("two values");
        let converged = r.u8()? != 0;
        let iterations = r.u64()? as usize;
        r.finish()?;
        let svm = SvmModel {
            support_vectors,
            dual_coeffs,
            bias,
            gamma,
            c,
            platt: calibrated.then_some(Platt { a, b }),
            converged,
            iterations,
        };
        Ok(DecoderModel {
            preprocessing,
            feature_map,
            svm,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::read_from(std::io::BufReader::new(File::open(path)?))
    }

    /// Lossless text rendering: every `f64` is printed in shortest
    /// round-trip form, so two dumps differ exactly when the models do.
    pub fn dump(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, "format RIEM v{MODEL_VERSION}");
        let _ = writeln!(
            s,
            "preprocessing {}",
            serde_json::to_string(&self.preprocessing).unwrap_or_default()
        );
        if let FeatureMap::Tangent(ex) = &self.feature_map {
            let m = ex.reference_mean();
            let _ = writeln!(s, "mean {}", m.dim());
            for row in m.to_row_major().chunks(m.dim()) {
                let _ = writeln!(s, "  {}", join(row));
            }
        }
        let svm = &self.svm;
        let _ = writeln!(
            s,
            "svm support={} dim={}",
            svm.n_support(),
            svm.feature_len().unwrap_or(0)
        );
        let _ = writeln!(s, "bias {:?}", svm.bias);
        let _ = writeln!(s, "gamma {:?}", svm.gamma);
        let _ = writeln!(s, "c {:?}", svm.c);
        match svm.platt {
            Some(p) => {
                let _ = writeln!(s, "platt {:?} {:?}", p.a, p.b);
            }
            None => {
                let _ = writeln!(s, "platt none");
            }
        }
        let _ = writeln!(
            s,
            "converged {} iterations {}",
            svm.converged, svm.iterations
        );
        for (i, (sv, coef)) in svm.support_vectors.iter().zip(&svm.dual_coeffs).enumerate() {
            let _ = writeln!(s, "sv {i} {coef:?} | {}", join(sv));
        }
        s
    }
}

fn write_section<W: Write>(out: &mut W, tag: &[u8; 4], payload: &[u8]) -> Result<(), ModelError> {
    let len = u32::try_from(payload.len())
        .map_err(|_| ModelError::Malformed("section larger than 4 GiB".into()))?;
    out.write_all(tag)?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(payload)?;
    Ok(())
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], section: &'static str) -> Self {
        Cursor {
            bytes,
            pos: 0,
            section,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Malformed(self.section.into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| ModelError::Malformed(self.section.into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<(), ModelError> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(ModelError::Malformed(format!(
                "{} has trailing bytes",
                self.section
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::CovarianceConfig;
    use crate::spd::SpdMatrix;

    fn tiny_model() -> DecoderModel {
        let mean = SpdMatrix::from_row_slice(2, &[2.0, 0.5, 0.5, 1.0 / 3.0]).unwrap();
        let cfg = PipelineConfig::default();
        DecoderModel {
            preprocessing: Preprocessing {
                config: cfg.clone(),
                channels: vec!["C3".into(), "C4".into()],
                source_channels: vec!["C3".into(), "Cz".into(), "C4".into()],
                window: cfg.window_samples(),
                train_trials: vec![0, 2],
                test_trials: vec![1],
                label_encoding: LABEL_ENCODING.into(),
            },
            feature_map: FeatureMap::Tangent(
                FeatureExtractor::from_reference(mean, CovarianceConfig::default()).unwrap(),
            ),
            svm: SvmModel {
                support_vectors: vec![vec![0.1, -0.2, 1.0 / 7.0], vec![3.0, 0.0, -1e-300]],
                dual_coeffs: vec![0.1, -0.1],
                bias: -0.012345678901234567,
                gamma: 0.5,
                c: 0.1,
                platt: Some(Platt { a: -1.7, b: 0.03 }),
                converged: true,
                iterations: 42,
            },
        }
    }

    fn bytes(m: &DecoderModel) -> Vec<u8> {
        let mut b = Vec::new();
        m.write_to(&mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_lossless() {
        let m = tiny_model();
        let b = bytes(&m);
        assert_eq!(&b[..4], b"RIEM");
        let back = DecoderModel::read_from(&b[..]).unwrap();
        assert_eq!(back.preprocessing, m.preprocessing);
        assert_eq!(back.svm, m.svm);
        assert_eq!(back.dump(), m.dump());
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn rejects_corruption() {
        let b = bytes(&tiny_model());
        assert!(matches!(
            DecoderModel::read_from(&b"RIEX\x01\x00"[..]),
            Err(ModelError::BadMagic(_))
        ));
        assert!(matches!(
            DecoderModel::read_from(&b"RIEM\x09\x00"[..]),
            Err(ModelError::Version(9))
        ));
        assert!(matches!(
            DecoderModel::read_from(&b[..b.len() - 3]),
            Err(ModelError::Malformed(_))
        ));
        assert!(matches!(
            DecoderModel::read_from(&b"RIEM\x01\x00"[..]),
            Err(ModelError::MissingSection("PREP"))
        ));
    }

    #[test]
    fn unknown_sections_are_skipped() {
        let m = tiny_model();
        let mut b = bytes(&m);
        b.extend_from_slice(b"XTRA\x02\x00\x00\x00hi");
        assert_eq!(DecoderModel::read_from(&b[..]).unwrap().svm, m.svm);
    }

    #[test]
    fn dump_prints_exact_values() {
        let d = tiny_model().dump();
        assert!(d.contains("bias -0.012345678901234567"));
        assert!(d.contains("-1e-300"));
        assert!(d.contains("0.14285714285714285"));
    }
}
