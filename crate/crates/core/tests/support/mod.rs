//! Oracles and generators shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Random SPD matrix `V · diag(λ) · Vᵀ` with eigenvalues spread
/// log-uniformly so that the condition number is at most `max_cond`.
pub fn random_spd<R: Rng>(rng: &mut R, n: usize, max_cond: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let q = g.qr().q();
    let scale: f64 = rng.random_range(0.1..10.0);
    let eig: Vec<f64> = (0..n)
        .map(|_| scale * max_cond.powf(rng.random_range(0.0..1.0)))
        .collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(eig));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

pub fn random_invertible<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    loop {
        let g = DMatrix::from_fn(
            n,
            n,
            |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.5..0.5),
        );
        if g.clone().svd(false, false).singular_values.min() > 0.1 {
            return g;
        }
    }
}

/// Exhaustive solution of the SVM dual by active-set enumeration.
///
/// Every multiplier is assigned to `{0, free, C}`; for each assignment the
/// equality-constrained problem on the free set is solved through its KKT
/// system, infeasible candidates are discarded and the best objective wins.
/// Returns the maximized dual objective `Σα − ½ αᵀQα`.
pub fn dual_qp_oracle(xs: &[Vec<f64>], ys: &[f64], c: f64, gamma: f64) -> f64 {
    let n = xs.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let d2: f64 = xs[i]
            .iter()
            .zip(&xs[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (-gamma * d2).exp()
    });
    let q = DMatrix::from_fn(n, n, |i, j| ys[i] * ys[j] * k[(i, j)]);
    let objective =
        |alpha: &DVector<f64>| alpha.sum() - 0.5 * (alpha.transpose() * &q * alpha)[(0, 0)];

    let mut best = f64::NEG_INFINITY;
    let total = 3usize.pow(n as u32);
    let mut state = vec![0u8; n];
    for code in 0..total {
        let mut rem = code;
        for s in state.iter_mut() {
            *s = (rem % 3) as u8;
            rem /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 1).collect();
        let mut alpha = DVector::from_fn(n, |i, _| if state[i] == 2 { c } else { 0.0 });
        let fixed_sum: f64 = (0..n).filter(|&i| state[i] == 2).map(|i| ys[i] * c).sum();
        if free.is_empty() {
            if fixed_sum.abs() > 1e-12 {
                continue;
            }
        } else {
            let m = free.len();
            let mut kkt = DMatrix::zeros(m + 1, m + 1);
            let mut rhs = DVector::zeros(m + 1);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    kkt[(a, b)] = q[(i, j)];
                }
                kkt[(a, m)] = ys[i];
                kkt[(m, a)] = ys[i];
                let bound: f64 = (0..n)
                    .filter(|&j| state[j] == 2)
                    .map(|j| q[(i, j)] * c)
                    .sum();
                rhs[a] = 1.0 - bound;
            }
            rhs[m] = -fixed_sum;
            let Some(sol) = kkt.lu().solve(&rhs) else {
                continue;
            };
            if free
                .iter()
                .enumerate()
                .any(|(a, _)| !(sol[a] > -1e-12 && sol[a] < c + 1e-12))
            {
                continue;
            }
            for (a, &i) in free.iter().enumerate() {
                alpha[i] = sol[a].clamp(0.0, c);
            }
        }
        best = best.max(objective(&alpha));
    }
    best
}

/// Minimum-jerk position profile `D(10τ³ − 15τ⁴ + 6τ⁵)`, `τ = t / T`.
pub fn min_jerk_speed(distance: f64, duration: f64, t: f64) -> f64 {
    let tau = (t / duration).clamp(0.0, 1.0);
    distance / duration * 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau)
}

/// `V · diag(f(λ)) · Vᵀ` via nalgebra's own symmetric eigensolver.
pub fn spectral_fn(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}
