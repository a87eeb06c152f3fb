//! Tangent-space covariance features.
//!
//! A window is reduced to its regularized sample covariance, which is then
//! projected onto the tangent space at the training-set Fréchet mean and
//! flattened. With 30 channels this gives a 465-dimensional feature.

use std::borrow::Cow;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spd::{
    frechet_mean, tangent_vectorize, SpdError, SpdMatrix, TangentChart, TangentFeature, Weighting,
    DEFAULT_MEAN_MAX_ITER, DEFAULT_MEAN_TOL,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("window has {found} channels, extractor expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("window of {0} samples is too short for a covariance")]
    WindowTooShort(usize),

    #[error("no covariances to fit a reference mean")]
    NoCovariances,

    #[error(transparent)]
    Spd(#[from] SpdError),
}

/// `W × n` block of consecutive preprocessed samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelWindow<'a> {
    samples: Cow<'a, [f64]>,
    n_channels: usize,
    end_index: i64,
    rate: f64,
}

impl<'a> MultichannelWindow<'a> {
    pub fn borrowed(samples: &'a [f64], n_channels: usize, end_index: i64, rate: f64) -> Self {
        debug_assert_eq!(samples.len() % n_channels, 0);
        MultichannelWindow {
            samples: Cow::Borrowed(samples),
            n_channels,
            end_index,
            rate,
        }
    }

    pub fn owned(samples: Vec<f64>, n_channels: usize, end_index: i64, rate: f64) -> Self {
        debug_assert_eq!(samples.len() % n_channels, 0);
        MultichannelWindow {
            samples: Cow::Owned(samples),
            n_channels,
            end_index,
            rate,
        }
    }

    /// Row-major samples.
    pub fn samples(&self) -> &[f64] {
        &self.samples
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

    /// Stream index of the newest sample.
    pub fn end_index(&self) -> i64 {
        self.end_index
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

/// Normalization of the scatter matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// `W - 1`, the unbiased sample covariance.
    #[default]
    WindowMinusOne,
    /// `n - 1` with `n` the channel count.
    ChannelsMinusOne,
}

/// Diagonal ridge added to every covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum EpsilonPolicy {
    /// `ε = value · trace(C) / n`.
    Relative(f64),
    /// Fixed `ε`.
    Absolute(f64),
}

impl Default for EpsilonPolicy {
    fn default() -> Self {
        EpsilonPolicy::Relative(1e-6)
    }
}

/// How windows become covariances and covariances become vectors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CovarianceConfig {
    #[serde(default)]
    pub epsilon: EpsilonPolicy,
    #[serde(default)]
    pub denominator: Denominator,
    #[serde(default)]
    pub weighting: Weighting,
}

/// Mean-centered scatter `X̃ᵀX̃ / denom`, symmetric by construction.
fn centered_scatter(window: &MultichannelWindow<'_>, denom: f64) -> DMatrix<f64> {
    let n = window.n_channels;
    let w = window.len();
    let mut mean = vec![0.0; n];
    for row in window.samples.chunks_exact(n) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= w as f64;
    }
    // Upper triangle accumulated in a flat buffer, then mirrored.
    let mut acc = vec![0.0; n * n];
    let mut centered = vec![0.0; n];
    for row in window.samples.chunks_exact(n) {
        for ((c, x), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = x - m;
        }
        for i in 0..n {
            let ci = centered[i];
            let dst = &mut acc[i * n + i..(i + 1) * n];
            for (d, cj) in dst.iter_mut().zip(&centered[i..]) {
                *d += ci * cj;
            }
        }
    }
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = acc[i * n + j] / denom;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Regularized sample covariance `X̃ᵀX̃ / (W - 1) + ε·I` of a mean-centered
/// window. With `epsilon > 0` the result is SPD whatever the window rank;
/// with `epsilon == 0` it is SPD only for full-rank windows.
pub fn sample_covariance(window: &MultichannelWindow<'_>, epsilon: f64) -> SpdMatrix {
    let mut c = centered_scatter(window, (window.len() as f64 - 1.0).max(1.0));
    for i in 0..window.n_channels {
        c[(i, i)] += epsilon;
    }
    SpdMatrix::from_trusted(c)
}

/// Covariance under a [`CovarianceConfig`] (denominator and ridge policy).
pub fn configured_covariance(
    window: &MultichannelWindow<'_>,
    config: &CovarianceConfig,
) -> Result<SpdMatrix, FeatureError> {
    if window.len() < 2 {
        return Err(FeatureError::WindowTooShort(window.len()));
    }
    let n = window.n_channels;
    let denom = match config.denominator {
        Denominator::WindowMinusOne => window.len() as f64 - 1.0,
        Denominator::ChannelsMinusOne => (n as f64 - 1.0).max(1.0),
    };
    let mut c = centered_scatter(window, denom);
    let eps = match config.epsilon {
        EpsilonPolicy::Absolute(e) => e,
        EpsilonPolicy::Relative(r) => {
            let mean_var = c.trace() / n as f64;
            // A flat window has zero trace; fall back to the bare ratio.
            if mean_var > 0.0 {
                r * mean_var
            } else {
                r
            }
        }
    };
    for i in 0..n {
        c[(i, i)] += eps;
    }
    Ok(SpdMatrix::from_trusted(c))
}

/// Reference point for tangent projection, frozen after fitting.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    chart: TangentChart,
    config: CovarianceConfig,
    converged: bool,
}

/// Fits the reference mean to training covariances.
///
/// A mean that hit the iteration cap is still returned; check
/// [`FeatureExtractor::converged`].
pub fn fit_reference(
    covariances: &[SpdMatrix],
    config: CovarianceConfig,
) -> Result<FeatureExtractor, FeatureError> {
    if covariances.is_empty() {
        return Err(FeatureError::NoCovariances);
    }
    let mean = frechet_mean(covariances, DEFAULT_MEAN_TOL, DEFAULT_MEAN_MAX_ITER)?;
    if !mean.converged {
        log::warn!(
            "reference mean did not converge after {} iterations (update norm {:e})",
            mean.iterations,
            mean.update_norm
        );
    }
    Ok(FeatureExtractor {
        chart: TangentChart::at(&mean.mean)?,
        config,
        converged: mean.converged,
    })
}

impl FeatureExtractor {
    /// Rebuilds an extractor around a known reference mean (e.g. from a model file).
    pub fn from_reference(
        reference: SpdMatrix,
        config: CovarianceConfig,
    ) -> Result<Self, FeatureError> {
        Ok(FeatureExtractor {
            chart: TangentChart::at(&reference)?,
            config,
            converged: true,
        })
    }

    pub fn reference_mean(&self) -> &SpdMatrix {
        self.chart.base()
    }

    pub fn config(&self) -> &CovarianceConfig {
        &self.config
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn n_channels(&self) -> usize {
        self.chart.dim()
    }

    pub fn feature_len(&self) -> usize {
        crate::spd::triangle_len(self.n_channels())
    }

    pub fn covariance(&self, window: &MultichannelWindow<'_>) -> Result<SpdMatrix, FeatureError> {
        if window.n_channels() != self.n_channels() {
            return Err(FeatureError::ChannelMismatch {
                expected: self.n_channels(),
                found: window.n_channels(),
            });
        }
        configured_covariance(window, &self.config)
    }

    /// Projects an already computed covariance.
    pub fn project(&self, covariance: &SpdMatrix) -> Result<TangentFeature, FeatureError> {
        let s = self.chart.log(covariance)?;
        Ok(tangent_vectorize(&s, self.config.weighting))
    }

    /// `vec(Log_μ(Cov(window)))`.
    pub fn extract(&self, window: &MultichannelWindow<'_>) -> Result<TangentFeature, FeatureError> {
        self.project(&self.covariance(window)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spd::log_map;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_window(rng: &mut ChaCha8Rng, w: usize, n: usize) -> MultichannelWindow<'static> {
        let s = (0..w * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        MultichannelWindow::owned(s, n, w as i64 - 1, 160.0)
    }

    fn naive_covariance(x: &[f64], w: usize, n: usize) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mi: f64 = (0..w).map(|t| x[t * n + i]).sum::<f64>() / w as f64;
                let mj: f64 = (0..w).map(|t| x[t * n + j]).sum::<f64>() / w as f64;
                let mut s = 0.0;
                for t in 0..w {
                    s += (x[t * n + i] - mi) * (x[t * n + j] - mj);
                }
                c[(i, j)] = s / (w as f64 - 1.0);
            }
        }
        c
    }

    #[test]
    fn constant_window_gives_ridge() {
        let w = MultichannelWindow::owned(vec![3.0; 40], 4, 9, 160.0);
        let c = sample_covariance(&w, 1e-6);
        assert_eq!(c.matrix(), &(DMatrix::identity(4, 4) * 1e-6));
    }

    #[test]
    fn correlated_channels_are_rescued_by_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = Vec::new();
        for _ in 0..50 {
            let v: f64 = rng.random_range(-1.0..1.0);
            s.extend([v, 2.0 * v]);
        }
        let w = MultichannelWindow::owned(s, 2, 49, 160.0);
        let singular = sample_covariance(&w, 0.0).eigenvalues().unwrap();
        assert!(singular[0].abs() < 1e-12 * singular[1]);
        let ridge = sample_covariance(&w, 1e-6).eigenvalues().unwrap();
        assert!((ridge[0] - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn covariance_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_window(&mut rng, 320, 30);
        let c = sample_covariance(&w, 0.0);
        let oracle = naive_covariance(w.samples(), 320, 30);
        assert!((c.matrix() - oracle).amax() < 1e-10);
    }

    #[test]
    fn covariance_scales_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_window(&mut rng, 64, 5);
        let scaled =
            MultichannelWindow::owned(w.samples().iter().map(|v| 2.5 * v).collect(), 5, 63, 160.0);
        let a = sample_covariance(&w, 0.0);
        let b = sample_covariance(&scaled, 0.0);
        assert!((b.matrix() - a.matrix() * 6.25).amax() < 1e-10);
    }

    #[test]
    fn offsets_do_not_change_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_window(&mut rng, 100, 4);
        let shifted: Vec<f64> = w
            .samples()
            .chunks(4)
            .flat_map(|r| [r[0] + 10.0, r[1], r[2] - 3.0, r[3]])
            .collect();
        let ex =
            FeatureExtractor::from_reference(SpdMatrix::identity(4), CovarianceConfig::default())
                .unwrap();
        let a = ex.extract(&w).unwrap();
        let b = ex
            .extract(&MultichannelWindow::owned(shifted, 4, 99, 160.0))
            .unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_identical_covariances() {
        let c = SpdMatrix::from_row_slice(2, &[2.0, 0.5, 0.5, 1.0]).unwrap();
        let ex = fit_reference(&[c.clone(), c.clone()], CovarianceConfig::default()).unwrap();
        assert!((ex.reference_mean().matrix() - c.matrix()).amax() < 1e-12);
        assert!(ex.converged());
    }

    #[test]
    fn fit_commuting_covariances() {
        let a = SpdMatrix::from_diagonal(&[1.0, 9.0]).unwrap();
        let b = SpdMatrix::from_diagonal(&[4.0, 1.0]).unwrap();
        let ex = fit_reference(&[a, b], CovarianceConfig::default()).unwrap();
        let m = ex.reference_mean().matrix();
        assert!((m[(0, 0)] - 2.0).abs() < 1e-10);
        assert!((m[(1, 1)] - 3.0).abs() < 1e-10);
        assert!(m[(0, 1)].abs() < 1e-10);
    }

    #[test]
    fn fit_rejects_empty() {
        assert_eq!(
            fit_reference(&[], CovarianceConfig::default()).unwrap_err(),
            FeatureError::NoCovariances
        );
    }

    #[test]
    fn extract_is_composition_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let windows: Vec<_> = (0..6).map(|_| random_window(&mut rng, 80, 6)).collect();
        let config = CovarianceConfig {
            epsilon: EpsilonPolicy::Absolute(1e-6),
            ..Default::default()
        };
        let covs: Vec<_> = windows.iter().map(|w| sample_covariance(w, 1e-6)).collect();
        let ex = fit_reference(&covs, config).unwrap();
        let w = &windows[2];
        let manual = tangent_vectorize(
            &log_map(ex.reference_mean(), &sample_covariance(w, 1e-6)).unwrap(),
            Weighting::Plain,
        );
        let feat = ex.extract(w).unwrap();
        assert_eq!(feat.len(), 21);
        for (a, b) in feat.values().iter().zip(manual.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(ex.extract(w).unwrap(), feat);
    }

    #[test]
    fn window_at_reference_gives_zero_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_window(&mut rng, 200, 30);
        let config = CovarianceConfig {
            epsilon: EpsilonPolicy::Absolute(1e-6),
            ..Default::default()
        };
        let ex =
            FeatureExtractor::from_reference(configured_covariance(&w, &config).unwrap(), config)
                .unwrap();
        let f = ex.extract(&w).unwrap();
        assert_eq!(f.len(), 465);
        assert!(f.values().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn extract_checks_channels() {
        let ex =
            FeatureExtractor::from_reference(SpdMatrix::identity(3), CovarianceConfig::default())
                .unwrap();
        let w = MultichannelWindow::owned(vec![0.0; 20], 4, 4, 160.0);
        assert_eq!(
            ex.extract(&w).unwrap_err(),
            FeatureError::ChannelMismatch {
                expected: 3,
                found: 4
            }
        );
    }

    #[test]
    fn channels_denominator_rescales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_window(&mut rng, 50, 5);
        let a = configured_covariance(
            &w,
            &CovarianceConfig {
                epsilon: EpsilonPolicy::Absolute(0.0),
                ..Default::default()
            },
        )
        .unwrap();
        let b = configured_covariance(
            &w,
            &CovarianceConfig {
                epsilon: EpsilonPolicy::Absolute(0.0),
                denominator: Denominator::ChannelsMinusOne,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((b.matrix() * 4.0 / 49.0 - a.matrix()).amax() < 1e-12);
    }
}
