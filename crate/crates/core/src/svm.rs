//! Soft-margin RBF support vector machine.
//!
//! Training solves the dual
//!
//! ```text
//! min_α  ½ αᵀQα − eᵀα   s.t.  yᵀα = 0,  0 ≤ α_i ≤ C,   Q_ij = y_i y_j K(x_i, x_j)
//! ```
//!
//! by sequential minimal optimization with second-order working-set
//! selection. Kernel rows are cached with least-recently-used eviction under
//! a byte budget; when the whole Gram matrix fits, every row stays resident.
//!
//! Labels are `+1` for right and `-1` for left. Probabilities come from a
//! Platt sigmoid fitted on out-of-fold decision values.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Label value of the "right" class.
pub const RIGHT: f64 = 1.0;
/// Label value of the "left" class.
pub const LEFT: f64 = -1.0;

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SvmError {
    #[error("need at least two examples, got {0}")]
    TooFewExamples(usize),

    #[error("training labels contain a single class")]
    SingleClass,

    #[error("label {0} is not -1 or +1")]
    BadLabel(f64),

    #[error("{features} feature vectors but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },

    #[error("feature length {found} does not match {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid hyperparameter: {0}")]
    InvalidParam(String),

    #[error("model has no probability calibration")]
    Uncalibrated,
}

/// Two-class probability scores; `p_left + p_right == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub p_left: f64,
    pub p_right: f64,
}

impl ClassScore {
    pub fn from_p_right(p_right: f64) -> Self {
        let p_right = p_right.clamp(0.0, 1.0);
        ClassScore {
            p_left: 1.0 - p_right,
            p_right,
        }
    }

    /// Probability of the class encoded by `label` (`±1`).
    pub fn prob_of(&self, label: f64) -> f64 {
        if label > 0.0 {
            self.p_right
        } else {
            self.p_left
        }
    }
}

/// Sigmoid `P(right | f) = 1 / (1 + exp(a·f + b))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

impl Platt {
    /// Starting point and fallback when fitting is impossible.
    pub const FALLBACK: Platt = Platt { a: -1.0, b: 0.0 };

    pub fn p_right(&self, f: f64) -> f64 {
        let z = self.a * f + self.b;
        // Split on sign so neither branch overflows.
        if z >= 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: f64,
    /// Stopping tolerance on the maximal KKT violation.
    pub tol: f64,
    /// Byte budget of the kernel row cache.
    pub cache_bytes: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 0.1,
            gamma: 0.5,
            tol: 1e-3,
            cache_bytes: 512 << 20,
        }
    }
}

impl SvmParams {
    fn validate(&self) -> Result<(), SvmError> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(SvmError::InvalidParam(format!(
                "C = {} must be positive",
                self.c
            )));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(SvmError::InvalidParam(format!(
                "gamma = {} must be positive",
                self.gamma
            )));
        }
        if !(self.tol > 0.0) {
            return Err(SvmError::InvalidParam(format!(
                "tol = {} must be positive",
                self.tol
            )));
        }
        Ok(())
    }
}

/// A trained kernel machine.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    /// `α_i · y_i` per support vector.
    pub dual_coeffs: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    pub platt: Option<Platt>,
    /// Whether SMO reached `tol` before the iteration cap.
    pub converged: bool,
    pub iterations: usize,
}

/// `exp(-γ‖a − b‖²)`.
pub fn rbf_kernel(a: &[f64], b: &[f64], gamma: f64) -> Result<f64, SvmError> {
    if a.len() != b.len() {
        return Err(SvmError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(rbf_unchecked(a, b, gamma))
}

#[inline]
fn rbf_unchecked(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// LRU cache of kernel rows.
struct KernelCache<'a> {
    data: Vec<&'a [f64]>,
    gamma: f64,
    rows: Vec<Option<Arc<[f64]>>>,
    last_used: Vec<u64>,
    resident: usize,
    capacity: usize,
    clock: u64,
}

impl<'a> KernelCache<'a> {
    fn new(data: Vec<&'a [f64]>, gamma: f64, cache_bytes: usize) -> Self {
        let n = data.len();
        let capacity = (cache_bytes / (8 * n.max(1))).clamp(2, n.max(2));
        KernelCache {
            data,
            gamma,
            rows: vec![None; n],
            last_used: vec![0; n],
            resident: 0,
            capacity,
            clock: 0,
        }
    }

    fn row(&mut self, i: usize) -> Arc<[f64]> {
        self.clock += 1;
        self.last_used[i] = self.clock;
        if let Some(r) = &self.rows[i] {
            return Arc::clone(r);
        }
        if self.resident >= self.capacity {
            let victim = (0..self.rows.len())
                .filter(|&k| k != i && self.rows[k].is_some())
                .min_by_key(|&k| self.last_used[k])
                .expect("cache is full so something is resident");
            self.rows[victim] = None;
            self.resident -= 1;
        }
        let xi = self.data[i];
        let row: Arc<[f64]> = self
            .data
            .iter()
            .map(|xj| rbf_unchecked(xi, xj, self.gamma))
            .collect();
        self.rows[i] = Some(Arc::clone(&row));
        self.resident += 1;
        row
    }
}

fn check_inputs<F: AsRef<[f64]>>(features: &[F], labels: &[f64]) -> Result<usize, SvmError> {
    if features.len() != labels.len() {
        return Err(SvmError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.len() < 2 {
        return Err(SvmError::TooFewExamples(features.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != LEFT && y != RIGHT) {
        return Err(SvmError::BadLabel(bad));
    }
    if !(labels.contains(&LEFT) && labels.contains(&RIGHT)) {
        return Err(SvmError::SingleClass);
    }
    let dim = features[0].as_ref().len();
    if let Some(f) = features.iter().find(|f| f.as_ref().len() != dim) {
        return Err(SvmError::DimensionMismatch {
            expected: dim,
            found: f.as_ref().len(),
        });
    }
    Ok(dim)
}

/// Trains on `features` with labels in `{-1, +1}`.
///
/// Runs at most `100·N` SMO steps. A run that hits the cap returns its last
/// iterate with `converged == false`.
pub fn train<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[f64],
    params: &SvmParams,
) -> Result<SvmModel, SvmError> {
    train_with_duals(features, labels, params).map(|(model, _)| model)
}

/// Like [`train`], also returning every multiplier `α_i` (zeros included) in
/// input order.
pub fn train_with_duals<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[f64],
    params: &SvmParams,
) -> Result<(SvmModel, Vec<f64>), SvmError> {
    params.validate()?;
    check_inputs(features, labels)?;
    let n = features.len();
    let c = params.c;
    let y = labels;
    let mut cache = KernelCache::new(
        features.iter().map(AsRef::as_ref).collect(),
        params.gamma,
        params.cache_bytes,
    );

    let mut alpha = vec![0.0; n];
    // Gradient of the minimized objective: G = Qα − e.
    let mut grad = vec![-1.0; n];
    let max_iter = 100 * n;
    let mut iterations = 0;
    let mut converged = false;

    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    while iterations < max_iter {
        // First index: maximal violator.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if in_up(alpha[t], y[t]) {
                let v = -y[t] * grad[t];
                if v > gmax {
                    gmax = v;
                    i_sel = Some(t);
                }
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        let q_i = i_sel.map(|i| cache.row(i));
        for t in 0..n {
            if !in_low(alpha[t], y[t]) {
                continue;
            }
            let v = y[t] * grad[t];
            if v > gmax2 {
                gmax2 = v;
            }
            if let Some(ki) = &q_i {
                let b = gmax + v;
                if b > 0.0 {
                    // K_ii = K_tt = 1 for the RBF kernel.
                    let a = (2.0 - 2.0 * ki[t]).max(TAU);
                    let obj = -(b * b) / a;
                    if obj <= best {
                        best = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        if gmax + gmax2 < params.tol {
            converged = true;
            break;
        }
        let (Some(i), Some(j)) = (i_sel, j_sel) else {
            converged = true;
            break;
        };
        iterations += 1;

        let ki = q_i.expect("i selected");
        let kj = cache.row(j);
        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        let quad = (2.0 - 2.0 * ki[j]).max(TAU);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }

        let (dai, daj) = (alpha[i] - old_ai, alpha[j] - old_aj);
        for t in 0..n {
            // Q_ti = y_t y_i K_ti
            grad[t] += y[t] * (y[i] * ki[t] * dai + y[j] * kj[t] * daj);
        }
    }
    if !converged {
        log::warn!(
            "SMO stopped at the iteration cap ({max_iter}) before reaching tol {}",
            params.tol
        );
    }

    let bias = -compute_rho(&alpha, &grad, y, c);
    let mut support_vectors = Vec::new();
    let mut dual_coeffs = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            support_vectors.push(features[t].as_ref().to_vec());
            dual_coeffs.push(alpha[t] * y[t]);
        }
    }
    let model = SvmModel {
        support_vectors,
        dual_coeffs,
        bias,
        gamma: params.gamma,
        c,
        platt: None,
        converged,
        iterations,
    };
    Ok((model, alpha))
}

/// Offset `ρ` of the decision function `f = Σ α_i y_i K − ρ`: the mean of
/// `y_i G_i` over free vectors, or the midpoint of the feasible interval
/// when every vector sits at a bound.
fn compute_rho(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut sum_free = 0.0;
    let mut n_free = 0usize;
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    }
}

impl SvmModel {
    pub fn n_support(&self) -> usize {
        self.support_vectors.len()
    }

    pub fn feature_len(&self) -> Option<usize> {
        self.support_vectors.first().map(Vec::len)
    }

    /// `f(s) = Σ α_i y_i K(s, s_i) + b`.
    pub fn decision_value(&self, s: &[f64]) -> Result<f64, SvmError> {
        if let Some(d) = self.feature_len() {
            if d != s.len() {
                return Err(SvmError::DimensionMismatch {
                    expected: d,
                    found: s.len(),
                });
            }
        }
        let mut f = self.bias;
        for (sv, coef) in self.support_vectors.iter().zip(&self.dual_coeffs) {
            f += coef * rbf_unchecked(s, sv, self.gamma);
        }
        Ok(f)
    }

    /// `+1` (right) when `f >= 0`, else `-1` (left).
    pub fn predict_label(&self, s: &[f64]) -> Result<f64, SvmError> {
        Ok(if self.decision_value(s)? >= 0.0 {
            RIGHT
        } else {
            LEFT
        })
    }

    pub fn predict_proba(&self, s: &[f64]) -> Result<ClassScore, SvmError> {
        let platt = self.platt.ok_or(SvmError::Uncalibrated)?;
        Ok(ClassScore::from_p_right(
            platt.p_right(self.decision_value(s)?),
        ))
    }

    /// Dual objective `Σα − ½ ΣΣ α_i α_j y_i y_j K_ij`, evaluated on the
    /// support vectors.
    pub fn dual_objective(&self) -> f64 {
        let sum_alpha: f64 = self.dual_coeffs.iter().map(|c| c.abs()).sum();
        let mut quad = 0.0;
        for (a, ca) in self.support_vectors.iter().zip(&self.dual_coeffs) {
            for (b, cb) in self.support_vectors.iter().zip(&self.dual_coeffs) {
                quad += ca * cb * rbf_unchecked(a, b, self.gamma);
            }
        }
        sum_alpha - 0.5 * quad
    }
}

/// Platt calibration on 3-fold out-of-fold decision values.
///
/// `groups` ties correlated examples (e.g. overlapping windows of one trial)
/// to the same fold; without it folds are contiguous index blocks.
pub fn calibrate<F: AsRef<[f64]>>(
    model: &SvmModel,
    features: &[F],
    labels: &[f64],
    groups: Option<&[usize]>,
    params: &SvmParams,
) -> Result<SvmModel, SvmError> {
    check_inputs(features, labels)?;
    let n = features.len();
    let folds = fold_assignment(n, groups, 3);
    let mut decisions = vec![0.0; n];
    for fold in 0..3 {
        let (train_idx, held): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| folds[i] != fold);
        if held.is_empty() {
            continue;
        }
        let xs: Vec<&[f64]> = train_idx.iter().map(|&i| features[i].as_ref()).collect();
        let ys: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
        let sub = match train(&xs, &ys, params) {
            Ok(m) => m,
            Err(SvmError::SingleClass | SvmError::TooFewExamples(_)) => {
                log::warn!(
                    "calibration fold {fold} lacks a class; using in-sample decision values"
                );
                model.clone()
            }
            Err(e) => return Err(e),
        };
        for &i in &held {
            decisions[i] = sub.decision_value(features[i].as_ref())?;
        }
    }
    let mut calibrated = model.clone();
    calibrated.platt = Some(fit_platt(&decisions, labels));
    Ok(calibrated)
}

fn fold_assignment(n: usize, groups: Option<&[usize]>, k: usize) -> Vec<usize> {
    match groups {
        Some(g) => {
            let mut distinct: Vec<usize> = g.to_vec();
            distinct.sort_unstable();
            distinct.dedup();
            g.iter()
                .map(|id| distinct.binary_search(id).expect("present") % k)
                .collect()
        }
        None => (0..n).map(|i| i * k / n).collect(),
    }
}

/// Negative log-likelihood of the sigmoid against regularized targets.
fn platt_nll(platt: Platt, decisions: &[f64], targets: &[f64]) -> f64 {
    decisions
        .iter()
        .zip(targets)
        .map(|(&f, &t)| {
            let z = platt.a * f + platt.b;
            if z >= 0.0 {
                t * z + (-z).exp().ln_1p()
            } else {
                (t - 1.0) * z + z.exp().ln_1p()
            }
        })
        .sum()
}

/// Bernoulli log-likelihood of `labels` under `platt` (natural log).
pub fn platt_log_likelihood(platt: Platt, decisions: &[f64], labels: &[f64]) -> f64 {
    decisions
        .iter()
        .zip(labels)
        .map(|(&f, &y)| {
            let p = platt.p_right(f).clamp(1e-300, 1.0 - 1e-16);
            if y > 0.0 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

/// Fits `(a, b)` by Newton's method with backtracking on the regularized
/// targets `(N₊+1)/(N₊+2)` and `1/(N₋+2)`.
pub fn fit_platt(decisions: &[f64], labels: &[f64]) -> Platt {
    const MAX_ITER: usize = 100;
    const MIN_STEP: f64 = 1e-10;
    const SIGMA: f64 = 1e-12;
    const EPS: f64 = 1e-5;

    let n_pos = labels.iter().filter(|&&y| y > 0.0).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let spread = decisions.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - decisions.iter().copied().fold(f64::INFINITY, f64::min);
    if n_pos == 0.0 || n_neg == 0.0 || !spread.is_finite() || spread == 0.0 {
        log::warn!("degenerate calibration set; falling back to a = -1, b = 0");
        return Platt::FALLBACK;
    }
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let targets: Vec<f64> = labels
        .iter()
        .map(|&y| if y > 0.0 { hi } else { lo })
        .collect();

    let mut p = Platt {
        a: 0.0,
        b: ((n_neg + 1.0) / (n_pos + 1.0)).ln(),
    };
    let mut fval = platt_nll(p, decisions, &targets);
    for _ in 0..MAX_ITER {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
        for (&f, &t) in decisions.iter().zip(&targets) {
            let z = p.a * f + p.b;
            let (pp, qq) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = pp * qq;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = t - pp;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < EPS && g2.abs() < EPS {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        let mut moved = false;
        while step >= MIN_STEP {
            let cand = Platt {
                a: p.a + step * da,
                b: p.b + step * db,
            };
            let newf = platt_nll(cand, decisions, &targets);
            if newf < fval + 1e-4 * step * gd {
                p = cand;
                fval = newf;
                moved = true;
                break;
            }
            step /= 2.0;
        }
        if !moved {
            log::warn!("Platt line search stalled");
            break;
        }
    }
    if !(p.a.is_finite() && p.b.is_finite()) {
        log::warn!("non-finite Platt parameters; falling back to a = -1, b = 0");
        return Platt::FALLBACK;
    }
    // The fit maximizes a concave likelihood; never end worse than the fallback.
    if platt_log_likelihood(p, decisions, labels)
        < platt_log_likelihood(Platt::FALLBACK, decisions, labels)
    {
        return Platt::FALLBACK;
    }
    p
}
