//! Synthetic two-class sessions with a known answer.
//!
//! Background EEG is spatially mixed 1/f noise. While an arm moves, one
//! band-limited source (8–12 Hz by default) is added along a class-specific
//! spatial pattern inside one five-electrode group: the hemisphere
//! contralateral to the moving arm. The discriminative signal is therefore a
//! change of covariance confined to a band and a channel group, switched on
//! exactly while the tracked arm speed exceeds the onset threshold.
//!
//! Arm paths are closed loops traversed with a minimum-jerk time law, so the
//! speed is zero only at the ends of a movement.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Arm, Cue, DatasetError, MocapFrame, Recording};
use crate::dsp::{design_bandpass, filter_block, FilterSpec, FilterState, SignalBlock};

/// Thirty-electrode 10-20 montage.
pub const MONTAGE: [&str; 30] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FT7", "FC3", "FCz", "FC4", "FT8", "T7", "C3",
    "Cz", "C4", "T8", "TP7", "CP3", "CPz", "CP4", "TP8", "P7", "P3", "Pz", "P4", "P8", "O1", "Oz",
    "O2",
];

/// Five-electrode groups used for channel-subset ablation. Each lists the
/// midline electrode, then left-inner, right-inner, left-outer, right-outer.
pub const LOBES: [(&str, [&str; 5]); 4] = [
    ("frontal", ["FCz", "FC3", "FC4", "FT7", "FT8"]),
    ("central", ["Cz", "C3", "C4", "T7", "T8"]),
    ("parietal", ["CPz", "CP3", "CP4", "TP7", "TP8"]),
    ("occipital", ["Pz", "P3", "P4", "P7", "P8"]),
];

/// Electrodes of a named group.
pub fn lobe(name: &str) -> Option<[&'static str; 5]> {
    LOBES
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, c)| *c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub trials: usize,
    pub seed: u64,
    pub eeg_rate: f64,
    pub mocap_rate: f64,
    /// Rest before each cue (s).
    pub rest_seconds: f64,
    /// Time from the cue to the next trial's rest period (s).
    pub action_seconds: f64,
    /// Mean delay from cue to movement start (s).
    pub reaction_seconds: f64,
    /// Uniform jitter half-width on the reaction time (s).
    pub reaction_jitter_seconds: f64,
    pub motion_seconds: f64,
    /// Length of the closed hand path (m).
    pub path_length_m: f64,
    pub signal_low_hz: f64,
    pub signal_high_hz: f64,
    /// Source amplitude relative to the per-channel noise standard deviation.
    pub signal_amplitude: f64,
    /// Group from [`LOBES`] carrying the class signal.
    pub signal_group: String,
    /// Strength of random cross-channel mixing of the noise.
    pub noise_mixing: f64,
    /// Noise standard deviation per channel (µV).
    pub noise_uv: f64,
    /// Speed (m/s) whose crossing marks the movement onset; match the onset
    /// detector's threshold so the signal timing refers to the detected onset.
    pub gate_speed: f64,
    /// The class signal switches on this long before the onset (motor
    /// preparation) and off at the movement offset. Zero starts it exactly
    /// at onset.
    pub lead_seconds: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            trials: 60,
            seed: 0,
            eeg_rate: 250.0,
            mocap_rate: 100.0,
            rest_seconds: 3.0,
            action_seconds: 2.0,
            reaction_seconds: 0.25,
            reaction_jitter_seconds: 0.05,
            motion_seconds: 1.5,
            path_length_m: 0.6,
            signal_low_hz: 8.0,
            signal_high_hz: 12.0,
            signal_amplitude: 1.0,
            signal_group: "parietal".into(),
            noise_mixing: 0.3,
            noise_uv: 4.0,
            gate_speed: 0.05,
            lead_seconds: 1.5,
        }
    }
}

/// Minimum-jerk phase `s(τ) = 10τ³ − 15τ⁴ + 6τ⁵` and its derivative.
fn min_jerk(tau: f64) -> (f64, f64) {
    let t = tau.clamp(0.0, 1.0);
    let s = t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
    let ds = 30.0 * t * t * (1.0 - t) * (1.0 - t);
    (s, ds)
}

/// Pink noise by Kellet's seven-pole filter on white Gaussian input.
struct Pink([f64; 7]);

impl Pink {
    fn next(&mut self, white: f64) -> f64 {
        let b = &mut self.0;
        b[0] = 0.99886 * b[0] + white * 0.0555179;
        b[1] = 0.99332 * b[1] + white * 0.0750759;
        b[2] = 0.96900 * b[2] + white * 0.1538520;
        b[3] = 0.86650 * b[3] + white * 0.3104856;
        b[4] = 0.55000 * b[4] + white * 0.5329522;
        b[5] = -0.7616 * b[5] - white * 0.0168980;
        let out = b[0] + b[1] + b[2] + b[3] + b[4] + b[5] + b[6] + white * 0.5362;
        b[6] = white * 0.115926;
        out
    }
}

fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in x {
        *v = (*v - mean) / sd;
    }
}

struct Trial {
    cue: f64,
    start: f64,
    arm: Arm,
}

/// Generates a session of `config.trials` balanced, shuffled trials.
pub fn generate(config: &SynthConfig) -> Result<Recording, DatasetError> {
    let group = lobe(&config.signal_group)
        .ok_or_else(|| DatasetError::UnknownChannel(config.signal_group.clone()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut arms: Vec<Arm> = (0..config.trials)
        .map(|k| if k % 2 == 0 { Arm::Left } else { Arm::Right })
        .collect();
    arms.shuffle(&mut rng);
    let period = config.rest_seconds + config.action_seconds;
    let trials: Vec<Trial> = arms
        .iter()
        .enumerate()
        .map(|(k, &arm)| {
            let cue = k as f64 * period + config.rest_seconds;
            let jitter = config.reaction_jitter_seconds * rng.random_range(-1.0..=1.0);
            Trial {
                cue,
                start: cue + config.reaction_seconds + jitter,
                arm,
            }
        })
        .collect();
    let duration = config.trials as f64 * period + config.rest_seconds;

    // Class-signal intervals, anchored on the analytic threshold crossings.
    let (on, off) = min_jerk_crossings(
        config.path_length_m,
        config.motion_seconds,
        config.gate_speed,
    )
    .ok_or_else(|| DatasetError::Header("movement never exceeds the gate speed".into()))?;
    let active: Vec<(f64, f64, Arm)> = trials
        .iter()
        .map(|tr| (tr.start + on - config.lead_seconds, tr.start + off, tr.arm))
        .collect();

    let n = MONTAGE.len();
    let len = (duration * config.eeg_rate).round() as usize;

    // Spatially mixed pink noise, unit variance per channel before mixing.
    let mut sources = vec![vec![0.0; len]; n];
    for src in &mut sources {
        let mut pink = Pink([0.0; 7]);
        for v in src.iter_mut() {
            *v = pink.next(rng.sample(StandardNormal));
        }
        standardize(src);
    }
    let mixing: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let g: f64 = rng.sample(StandardNormal);
                    f64::from(u8::from(i == j)) + config.noise_mixing * g / (n as f64).sqrt()
                })
                .collect()
        })
        .collect();

    // One band-limited source, gated by arm speed.
    let band = design_bandpass(
        &FilterSpec::band(config.signal_low_hz, config.signal_high_hz),
        config.eeg_rate,
    )?;
    let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let white = SignalBlock::new(white, 1, config.eeg_rate, 0)?;
    let mut carrier = filter_block(&band, &mut FilterState::new(&band, 1), &white)?.into_samples();
    standardize(&mut carrier);

    let idx = |name: &str| {
        MONTAGE
            .iter()
            .position(|c| *c == name)
            .expect("montage electrode")
    };
    let left_hemi = [idx(group[1]), idx(group[3])];
    let right_hemi = [idx(group[2]), idx(group[4])];
    let weight = std::f64::consts::FRAC_1_SQRT_2 * config.signal_amplitude;

    let mut eeg = vec![0.0; len * n];
    for t in 0..len {
        let row = &mut eeg[t * n..(t + 1) * n];
        for (i, out) in row.iter_mut().enumerate() {
            *out = mixing[i].iter().zip(&sources).map(|(m, s)| m * s[t]).sum();
        }
        let time = t as f64 / config.eeg_rate;
        for &(_, _, arm) in active.iter().filter(|(a, b, _)| time >= *a && time < *b) {
            // Contralateral hemisphere.
            let chans = if arm == Arm::Left {
                right_hemi
            } else {
                left_hemi
            };
            for c in chans {
                row[c] += weight * carrier[t];
            }
        }
        for v in row.iter_mut() {
            *v = (*v * config.noise_uv) as f32 as f64;
        }
    }

    let home = |arm: Arm| {
        if arm == Arm::Left {
            [-0.3, 0.4, 0.0]
        } else {
            [0.3, 0.4, 0.0]
        }
    };
    let radius = config.path_length_m / (2.0 * PI);
    let position = |arm: Arm, t: f64| -> [f64; 3] {
        let mut p = home(arm);
        if let Some(tr) = trials
            .iter()
            .find(|tr| tr.arm == arm && t >= tr.start && t <= tr.start + config.motion_seconds)
        {
            let (s, _) = min_jerk((t - tr.start) / config.motion_seconds);
            let phase = 2.0 * PI * s;
            let side = if arm == Arm::Left { -1.0 } else { 1.0 };
            p[0] += side * radius * (1.0 - phase.cos());
            p[2] += radius * phase.sin();
        }
        p.map(|v| v as f32 as f64)
    };
    let frames = (duration * config.mocap_rate).round() as usize;
    let mocap = (0..frames)
        .map(|k| {
            let t = k as f64 / config.mocap_rate;
            MocapFrame {
                time: t as f32 as f64,
                left: position(Arm::Left, t),
                right: position(Arm::Right, t),
            }
        })
        .collect();

    let cues = trials
        .iter()
        .map(|tr| Cue {
            time: tr.cue,
            label: tr.arm,
        })
        .collect();
    let block = SignalBlock::new(eeg, n, config.eeg_rate, 0)?;
    let names = MONTAGE.iter().map(|s| s.to_string()).collect();
    let params = serde_json::to_value(config).map_err(|e| DatasetError::Header(e.to_string()))?;
    Ok(Recording::new(block, names, mocap, cues)?.with_generator(params))
}

/// Analytic times (s after movement start) at which a minimum-jerk movement
/// of `length` m over `duration` s crosses `threshold` m/s going up and down.
pub fn min_jerk_crossings(length: f64, duration: f64, threshold: f64) -> Option<(f64, f64)> {
    let peak = length / duration * min_jerk(0.5).1;
    if peak <= threshold {
        return None;
    }
    let (mut lo, mut hi) = (0.0, 0.5);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if length / duration * min_jerk(mid).1 > threshold {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    Some((tau * duration, (1.0 - tau) * duration))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{detect_onsets, slice_epochs, OnsetConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            trials: 6,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn montage_and_groups_are_consistent() {
        assert_eq!(MONTAGE.len(), 30);
        for (_, chans) in LOBES {
            for c in chans {
                assert!(MONTAGE.contains(&c), "{c}");
            }
        }
        let mut all: Vec<&str> = LOBES.iter().flat_map(|(_, c)| c.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn generator_is_deterministic_and_f32_exact() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert!(a.eeg().samples().iter().all(|&v| v == v as f32 as f64));
        assert_eq!(a.channel_names().len(), 30);
        assert_eq!(a.cues().len(), 6);
        assert_eq!(a.cues().iter().filter(|c| c.label == Arm::Left).count(), 3);
    }

    #[test]
    fn every_trial_is_detected_once_with_its_arm() {
        let rec = generate(&small()).unwrap();
        let moves = detect_onsets(&rec, &OnsetConfig::default());
        assert_eq!(moves.len(), 6);
        for (m, cue) in moves.iter().zip(rec.cues()) {
            assert_eq!(m.arm, cue.label);
            assert!(m.onset > cue.time && m.onset < cue.time + 0.6);
        }
        let epochs = slice_epochs(&rec, &moves, 160.0, 1.0);
        assert_eq!(epochs.label_mismatches, 0);
        assert_eq!(epochs.trials(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn crossings_are_symmetric() {
        let (on, off) = min_jerk_crossings(0.4, 1.0, 0.05).unwrap();
        assert!((on + off - 1.0).abs() < 1e-12);
        assert!(min_jerk_crossings(0.01, 1.0, 0.05).is_none());
    }
}
