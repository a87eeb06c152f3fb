//! Signal conditioning: rational resampling, Butterworth band-pass filtering,
//! first differences and sliding windows.
//!
//! Samples are stored row-major (`T × n`, one row per time step) so that a
//! window of consecutive rows is a contiguous slice.

use std::f64::consts::PI;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::MultichannelWindow;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DspError {
    #[error("invalid signal block: {0}")]
    InvalidBlock(String),

    #[error("channel count mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("invalid filter spec: {0}")]
    InvalidFilter(String),

    #[error("band edge {high_hz} Hz is not below Nyquist ({nyquist} Hz)")]
    AboveNyquist { high_hz: f64, nyquist: f64 },

    #[error(
        "rate ratio {to_rate}/{from_rate} is not a rational p/q with p, q <= {MAX_RATIO_TERM}"
    )]
    IrrationalRatio { from_rate: f64, to_rate: f64 },
}

/// Largest numerator/denominator accepted by [`resample`].
pub const MAX_RATIO_TERM: u64 = 1000;

/// A run of multichannel samples at a fixed rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalBlock {
    samples: Vec<f64>,
    n_channels: usize,
    rate: f64,
    start_index: i64,
}

impl SignalBlock {
    /// `samples` is row-major with `n_channels` values per row. Empty blocks
    /// are allowed as intermediate results (e.g. differencing one sample).
    pub fn new(
        samples: Vec<f64>,
        n_channels: usize,
        rate: f64,
        start_index: i64,
    ) -> Result<Self, DspError> {
        if n_channels == 0 {
            return Err(DspError::InvalidBlock("zero channels".into()));
        }
        if !samples.len().is_multiple_of(n_channels) {
            return Err(DspError::InvalidBlock(format!(
                "{} values do not divide into {} channels",
                samples.len(),
                n_channels
            )));
        }
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(DspError::InvalidBlock(format!(
                "rate {rate} must be positive"
            )));
        }
        Ok(SignalBlock {
            samples,
            n_channels,
            rate,
            start_index,
        })
    }

    /// Builds from a list of rows.
    pub fn from_rows(rows: &[Vec<f64>], rate: f64, start_index: i64) -> Result<Self, DspError> {
        let n = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(DspError::ChannelMismatch {
                expected: n,
                found: bad.len(),
            });
        }
        Self::new(rows.concat(), n, rate, start_index)
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.n_channels
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Stream index of the first row.
    pub fn start_index(&self) -> i64 {
        self.start_index
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.samples[t * self.n_channels..(t + 1) * self.n_channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.samples.chunks_exact(self.n_channels)
    }

    /// One channel as a contiguous vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.rows().map(|r| r[c]).collect()
    }

    /// Keeps only the given channels, in the given order.
    pub fn select_channels(&self, indices: &[usize]) -> Result<SignalBlock, DspError> {
        if let Some(&bad) = indices.iter().find(|&&c| c >= self.n_channels) {
            return Err(DspError::InvalidBlock(format!(
                "channel {bad} out of range"
            )));
        }
        let mut samples = Vec::with_capacity(self.len() * indices.len());
        for row in self.rows() {
            samples.extend(indices.iter().map(|&c| row[c]));
        }
        SignalBlock::new(samples, indices.len(), self.rate, self.start_index)
    }

    /// Rows `[from, to)` as a new block with the matching start index.
    pub fn slice(&self, from: usize, to: usize) -> SignalBlock {
        SignalBlock {
            samples: self.samples[from * self.n_channels..to * self.n_channels].to_vec(),
            n_channels: self.n_channels,
            rate: self.rate,
            start_index: self.start_index + from as i64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Recursive filtering that can continue across blocks.
    #[default]
    Causal,
    /// Forward-backward filtering over a whole block; offline only.
    ZeroPhase,
}

/// Band edges and order of a Butterworth filter. `low_hz == 0` designs a
/// low-pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    #[serde(default)]
    pub mode: FilterMode,
}

impl FilterSpec {
    pub fn band(low_hz: f64, high_hz: f64) -> Self {
        FilterSpec {
            low_hz,
            high_hz,
            order: 4,
            mode: FilterMode::Causal,
        }
    }

    pub fn contains(&self, hz: f64) -> bool {
        self.low_hz <= hz && hz <= self.high_hz
    }

    fn validate(&self, rate: f64) -> Result<(), DspError> {
        if !(self.low_hz >= 0.0) || !(self.high_hz > self.low_hz) {
            return Err(DspError::InvalidFilter(format!(
                "need 0 <= low ({}) < high ({})",
                self.low_hz, self.high_hz
            )));
        }
        if self.order == 0 || !self.order.is_multiple_of(2) {
            return Err(DspError::InvalidFilter(format!(
                "order {} must be even and positive",
                self.order
            )));
        }
        let nyquist = rate / 2.0;
        if self.high_hz >= nyquist {
            return Err(DspError::AboveNyquist {
                high_hz: self.high_hz,
                nyquist,
            });
        }
        Ok(())
    }
}

impl std::fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{} Hz", self.low_hz, self.high_hz)
    }
}

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex<f64>) -> Complex<f64> {
        let z2 = z_inv * z_inv;
        let num = z_inv * self.b[1] + z2 * self.b[2] + self.b[0];
        let den = z_inv * self.a[0] + z2 * self.a[1] + 1.0;
        num / den
    }
}

/// A Butterworth filter as a cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandpass {
    spec: FilterSpec,
    rate: f64,
    sections: Vec<Biquad>,
}

/// Designs a Butterworth band-pass (or low-pass when `low_hz == 0`) by the
/// bilinear transform with prewarped edges.
///
/// `order` is the order of the digital filter: a band-pass of order 4 comes
/// from a second-order prototype, a low-pass of order 4 from a fourth-order
/// one. Gain is unity at DC (low-pass) or at the geometric band center.
pub fn design_bandpass(spec: &FilterSpec, rate: f64) -> Result<Bandpass, DspError> {
    spec.validate(rate)?;
    let fs2 = 2.0 * rate;
    let prewarp = |hz: f64| fs2 * (PI * hz / rate).tan();

    let lowpass = spec.low_hz == 0.0;
    let proto_order = if lowpass { spec.order } else { spec.order / 2 };
    let proto: Vec<Complex<f64>> = (0..proto_order)
        .map(|k| {
            let theta = PI * (2 * k + proto_order + 1) as f64 / (2 * proto_order) as f64;
            Complex::new(theta.cos(), theta.sin())
        })
        .collect();

    let analog: Vec<Complex<f64>> = if lowpass {
        let wc = prewarp(spec.high_hz);
        proto.iter().map(|p| p * wc).collect()
    } else {
        let w1 = prewarp(spec.low_hz);
        let w2 = prewarp(spec.high_hz);
        let w0_sq = w1 * w2;
        let bw = w2 - w1;
        proto
            .iter()
            .flat_map(|p| {
                let half = p * (bw / 2.0);
                let disc = (half * half - w0_sq).sqrt();
                [half + disc, half - disc]
            })
            .collect()
    };

    let digital: Vec<Complex<f64>> = analog.iter().map(|s| (s + fs2) / (-s + fs2)).collect();
    let numerator = if lowpass {
        [1.0, 2.0, 1.0]
    } else {
        [1.0, 0.0, -1.0]
    };
    let mut sections: Vec<Biquad> = pair_poles(&digital)
        .into_iter()
        .map(|(p1, p2)| Biquad {
            b: numerator,
            a: [-(p1 + p2).re, (p1 * p2).re],
        })
        .collect();

    let reference = if lowpass {
        0.0
    } else {
        2.0 * (prewarp(spec.low_hz) * prewarp(spec.high_hz))
            .sqrt()
            .atan2(fs2)
    };
    let z_inv = Complex::from_polar(1.0, -reference);
    let gain: f64 = sections
        .iter()
        .map(|s| s.response(z_inv))
        .product::<Complex<f64>>()
        .norm();
    let per_section = gain.powf(-1.0 / sections.len() as f64);
    for s in &mut sections {
        for b in &mut s.b {
            *b *= per_section;
        }
    }
    Ok(Bandpass {
        spec: *spec,
        rate,
        sections,
    })
}

/// Groups poles into conjugate pairs; leftover real poles are paired together.
fn pair_poles(poles: &[Complex<f64>]) -> Vec<(Complex<f64>, Complex<f64>)> {
    const IMAG_TOL: f64 = 1e-12;
    let mut pairs = Vec::new();
    let mut real = Vec::new();
    for p in poles {
        if p.im > IMAG_TOL {
            pairs.push((*p, p.conj()));
        } else if p.im.abs() <= IMAG_TOL {
            real.push(Complex::new(p.re, 0.0));
        }
    }
    real.sort_by(|a, b| a.re.total_cmp(&b.re));
    for chunk in real.chunks(2) {
        match chunk {
            [a, b] => pairs.push((*a, *b)),
            [a] => pairs.push((*a, Complex::new(0.0, 0.0))),
            _ => unreachable!(),
        }
    }
    pairs
}

impl Bandpass {
    pub fn spec(&self) -> &FilterSpec {
        &self.spec
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    /// Magnitude response at `hz`.
    pub fn gain_at(&self, hz: f64) -> f64 {
        let z_inv = Complex::from_polar(1.0, -2.0 * PI * hz / self.rate);
        self.sections
            .iter()
            .map(|s| s.response(z_inv))
            .product::<Complex<f64>>()
            .norm()
    }

    /// Filters one sample of one channel through the cascade.
    #[inline]
    fn step(&self, state: &mut [[f64; 2]], x: f64) -> f64 {
        let mut v = x;
        for (s, st) in self.sections.iter().zip(state.iter_mut()) {
            let y = s.b[0] * v + st[0];
            st[0] = s.b[1] * v - s.a[0] * y + st[1];
            st[1] = s.b[2] * v - s.a[1] * y;
            v = y;
        }
        v
    }

    /// Filters one multichannel row in place, continuing from `state`.
    pub fn process_row(&self, state: &mut FilterState, row: &mut [f64]) -> Result<(), DspError> {
        state.check(self, row.len())?;
        let k = self.sections.len();
        for (c, x) in row.iter_mut().enumerate() {
            *x = self.step(&mut state.delays[c * k..(c + 1) * k], *x);
        }
        Ok(())
    }

    fn filter_channel_zero_phase(&self, x: &[f64]) -> Vec<f64> {
        let k = self.sections.len();
        let pad = (3 * (2 * k + 1)).min(x.len().saturating_sub(1));
        // Odd reflection at both ends limits start-up transients.
        let mut ext = Vec::with_capacity(x.len() + 2 * pad);
        let (first, last) = (x[0], x[x.len() - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * last - x[x.len() - 1 - i]));

        let mut state = vec![[0.0; 2]; k];
        for v in ext.iter_mut() {
            *v = self.step(&mut state, *v);
        }
        let mut state = vec![[0.0; 2]; k];
        for v in ext.iter_mut().rev() {
            *v = self.step(&mut state, *v);
        }
        ext[pad..pad + x.len()].to_vec()
    }
}

/// Per-channel delay lines of a [`Bandpass`] cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    n_channels: usize,
    n_sections: usize,
    delays: Vec<[f64; 2]>,
}

impl FilterState {
    /// Zeroed state for a stream with `n_channels` channels.
    pub fn new(filter: &Bandpass, n_channels: usize) -> Self {
        let n_sections = filter.sections.len();
        FilterState {
            n_channels,
            n_sections,
            delays: vec![[0.0; 2]; n_channels * n_sections],
        }
    }

    pub fn reset(&mut self) {
        self.delays.fill([0.0; 2]);
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    fn check(&self, filter: &Bandpass, n: usize) -> Result<(), DspError> {
        if n != self.n_channels {
            return Err(DspError::ChannelMismatch {
                expected: self.n_channels,
                found: n,
            });
        }
        if filter.sections.len() != self.n_sections {
            return Err(DspError::InvalidFilter(
                "state does not match filter sections".into(),
            ));
        }
        Ok(())
    }
}

/// Filters a block. Causal mode continues from `state` and leaves it ready
/// for the next block; zero-phase mode filters forward and backward over the
/// whole block and does not touch `state`.
pub fn filter_block(
    filter: &Bandpass,
    state: &mut FilterState,
    block: &SignalBlock,
) -> Result<SignalBlock, DspError> {
    let n = block.n_channels();
    state.check(filter, n)?;
    let mut out = block.clone();
    match filter.spec.mode {
        FilterMode::Causal => {
            for row in out.samples.chunks_exact_mut(n) {
                filter.process_row(state, row)?;
            }
        }
        FilterMode::ZeroPhase => {
            if block.is_empty() {
                return Ok(out);
            }
            for c in 0..n {
                let y = filter.filter_channel_zero_phase(&block.channel(c));
                for (t, v) in y.into_iter().enumerate() {
                    out.samples[t * n + c] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel first difference `x[t] - x[t-1]`.
///
/// With `prev` the first output row is `x[0] - prev`; without it the first
/// row has no predecessor and is dropped, so the output starts one index later.
pub fn differentiate(block: &SignalBlock, prev: Option<&[f64]>) -> Result<SignalBlock, DspError> {
    let n = block.n_channels();
    if let Some(p) = prev {
        if p.len() != n {
            return Err(DspError::ChannelMismatch {
                expected: n,
                found: p.len(),
            });
        }
    }
    let t = block.len();
    let mut samples = Vec::with_capacity(t * n);
    let start = match prev {
        Some(p) if t > 0 => {
            samples.extend(block.row(0).iter().zip(p).map(|(x, y)| x - y));
            block.start_index
        }
        _ => block.start_index + 1,
    };
    for i in 1..t {
        let (cur, last) = (block.row(i), block.row(i - 1));
        samples.extend(cur.iter().zip(last).map(|(x, y)| x - y));
    }
    SignalBlock::new(samples, n, block.rate, start)
}

/// Overlapping `w`-row windows advancing by `step` rows, each tagged with the
/// stream index of its last row. Yields nothing when the block is shorter
/// than `w`.
pub fn sliding_windows(
    block: &SignalBlock,
    w: usize,
    step: usize,
) -> Result<impl Iterator<Item = MultichannelWindow<'_>> + '_, DspError> {
    if w < 2 {
        return Err(DspError::InvalidBlock(format!(
            "window length {w} must be at least 2"
        )));
    }
    if step == 0 {
        return Err(DspError::InvalidBlock(
            "window step must be positive".into(),
        ));
    }
    let n = block.n_channels();
    let count = (block.len() + 1).saturating_sub(w).div_ceil(step);
    Ok((0..count).map(move |k| {
        let first = k * step;
        MultichannelWindow::borrowed(
            &block.samples[first * n..(first + w) * n],
            n,
            block.start_index + (first + w - 1) as i64,
            block.rate,
        )
    }))
}

/// Best rational approximation `target/source = p/q` with `p, q <= 1000`.
pub fn rational_ratio(source: f64, target: f64) -> Result<(u64, u64), DspError> {
    let ratio = target / source;
    for q in 1..=MAX_RATIO_TERM {
        let p = (ratio * q as f64).round();
        if p >= 1.0 && p <= MAX_RATIO_TERM as f64 && (p / q as f64 - ratio).abs() <= 1e-9 * ratio {
            let p = p as u64;
            let g = gcd(p, q);
            return Ok((p / g, q / g));
        }
    }
    Err(DspError::IrrationalRatio {
        from_rate: source,
        to_rate: target,
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser-windowed sinc anti-alias filter for an upsample-by-`p`,
/// downsample-by-`q` resampler, split into `p` polyphase branches each summing
/// to one (exact DC gain).
fn polyphase_filter(p: usize, q: usize) -> Vec<Vec<f64>> {
    const BETA: f64 = 8.6;
    let m = p.max(q);
    let len = 8 * m + 1;
    let center = (len - 1) as f64 / 2.0;
    let cutoff = 0.5 / m as f64;
    let i0_beta = bessel_i0(BETA);
    let taps: Vec<f64> = (0..len)
        .map(|k| {
            let t = k as f64 - center;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let r = t / center;
            sinc * bessel_i0(BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta
        })
        .collect();
    let mut branches: Vec<Vec<f64>> = (0..p)
        .map(|phase| taps.iter().skip(phase).step_by(p).copied().collect())
        .collect();
    for b in &mut branches {
        let s: f64 = b.iter().sum();
        for v in b.iter_mut() {
            *v /= s;
        }
    }
    branches
}

/// Polyphase rational resampling to `target_rate`.
///
/// The output has `ceil(T·p/q)` rows and is aligned with the input (the
/// linear-phase filter delay is compensated). Edge samples are held constant
/// beyond the block boundaries, so a constant input stays constant.
pub fn resample(block: &SignalBlock, target_rate: f64) -> Result<SignalBlock, DspError> {
    if !(target_rate > 0.0) {
        return Err(DspError::InvalidBlock(format!(
            "target rate {target_rate} must be positive"
        )));
    }
    if target_rate == block.rate {
        return Ok(block.clone());
    }
    let (p, q) = rational_ratio(block.rate, target_rate)?;
    let (p, q) = (p as usize, q as usize);
    let branches = polyphase_filter(p, q);
    let len = 8 * p.max(q) + 1;
    let delay = (len - 1) / 2;

    let n = block.n_channels();
    let t_in = block.len() as i64;
    let t_out = (block.len() * p).div_ceil(q);
    let mut out = vec![0.0; t_out * n];
    if t_in == 0 {
        return SignalBlock::new(out, n, target_rate, 0);
    }
    for m in 0..t_out {
        // Upsampled-domain index of the filter center for this output sample.
        let j = m * q + delay;
        let phase = j % p;
        let base = (j / p) as i64;
        let row = &mut out[m * n..(m + 1) * n];
        for (k, &h) in branches[phase].iter().enumerate() {
            let idx = (base - k as i64).clamp(0, t_in - 1) as usize;
            let src = block.row(idx);
            for (o, &x) in row.iter_mut().zip(src) {
                *o += h * x;
            }
        }
    }
    let start = block.start_index * p as i64 / q as i64;
    SignalBlock::new(out, n, target_rate, start)
}
