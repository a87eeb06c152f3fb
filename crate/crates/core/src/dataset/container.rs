//! On-disk recording container.
//!
//! ```text
//! {"format":"motorintent-recording","version":1,...}\n   JSON header, one line
//! EEG      n_samples × n_channels f32 LE, row-major
//! mocap    n_frames × 7 f32 LE: time, left xyz, right xyz
//! ```
//!
//! Samples are stored as `f32`; a recording whose values are already
//! `f32`-representable (as generated ones are) round-trips bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cue, DatasetError, MocapFrame, Recording};
use crate::dsp::SignalBlock;

pub const FORMAT_VERSION: u16 = 1;
const FORMAT_NAME: &str = "motorintent-recording";
const MAX_HEADER: u64 = 64 << 20;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u16,
    eeg_rate: f64,
    n_channels: usize,
    n_samples: usize,
    n_mocap_frames: usize,
    channel_names: Vec<String>,
    cues: Vec<Cue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<serde_json::Value>,
}

pub fn write_recording<W: Write>(recording: &Recording, mut out: W) -> Result<(), DatasetError> {
    let header = Header {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        eeg_rate: recording.rate(),
        n_channels: recording.eeg.n_channels(),
        n_samples: recording.eeg.len(),
        n_mocap_frames: recording.mocap.len(),
        channel_names: recording.channel_names.clone(),
        cues: recording.cues.clone(),
        generator: recording.generator.clone(),
    };
    let line = serde_json::to_string(&header).map_err(|e| DatasetError::Header(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(recording.eeg.samples().len() * 4);
    for v in recording.eeg.samples() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    buf.clear();
    for f in &recording.mocap {
        for v in std::iter::once(f.time).chain(f.left).chain(f.right) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn save_recording(recording: &Recording, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_recording(recording, BufWriter::new(File::create(path)?))
}

fn read_section<R: Read>(
    input: &mut R,
    section: &'static str,
    len: usize,
) -> Result<Vec<f64>, DatasetError> {
    let mut bytes = Vec::with_capacity(len * 4);
    input.take((len * 4) as u64).read_to_end(&mut bytes)?;
    if bytes.len() != len * 4 {
        return Err(DatasetError::Truncated {
            section,
            expected: len * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn read_recording<R: Read>(input: R) -> Result<Recording, DatasetError> {
    let mut input = BufReader::new(input);
    let mut line = Vec::new();
    std::io::BufRead::read_until(&mut (&mut input).take(MAX_HEADER), b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(DatasetError::Truncated {
            section: "header",
            expected: line.len() + 1,
            found: line.len(),
        });
    }
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| DatasetError::Header(e.to_string()))?;
    if header.format != FORMAT_NAME {
        return Err(DatasetError::Header(format!(
            "format {:?} is not {FORMAT_NAME:?}",
            header.format
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(DatasetError::Header(format!(
            "unsupported version {}",
            header.version
        )));
    }
    if header.channel_names.len() != header.n_channels {
        return Err(DatasetError::ChannelCount {
            names: header.channel_names.len(),
            channels: header.n_channels,
        });
    }
    let eeg = read_section(&mut input, "eeg", header.n_samples * header.n_channels)?;
    let raw = read_section(&mut input, "mocap", header.n_mocap_frames * 7)?;
    let mocap = raw
        .chunks_exact(7)
        .map(|c| MocapFrame {
            time: c[0],
            left: [c[1], c[2], c[3]],
            right: [c[4], c[5], c[6]],
        })
        .collect();
    let block = SignalBlock::new(eeg, header.n_channels, header.eeg_rate, 0)
        .map_err(|e| DatasetError::Header(e.to_string()))?;
    let rec = Recording::new(block, header.channel_names, mocap, header.cues)?;
    Ok(match header.generator {
        Some(g) => rec.with_generator(g),
        None => rec,
    })
}

/// Reads a recording container from disk.
pub fn load_recording(path: impl AsRef<Path>) -> Result<Recording, DatasetError> {
    read_recording(File::open(path)?)
}
