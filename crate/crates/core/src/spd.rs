//! Affine-invariant geometry of symmetric positive-definite matrices.
//!
//! Covariance matrices of multichannel windows live on the SPD manifold. This
//! module provides the Riemannian logarithm and exponential maps, the iterative
//! Fréchet (Karcher) mean and the upper-triangle vectorization that turns a
//! tangent vector into a flat feature.
//!
//! ```text
//! Log_P(Q) = P^½ · log(P^-½ Q P^-½) · P^½
//! Exp_P(S) = P^½ · exp(P^-½ S P^-½) · P^½
//! ```
//!
//! All matrix functions are computed through a symmetric eigendecomposition.
//! Eigenvalues below `1e-12 · λ_max` are raised to that floor before taking
//! logarithms or inverse square roots, which keeps short-window covariances
//! usable.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

/// Relative eigenvalue floor applied before `log` and `x^-½`.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Default Frobenius-norm tolerance of the mean update.
pub const DEFAULT_MEAN_TOL: f64 = 1e-8;

/// Default iteration cap of the mean update.
pub const DEFAULT_MEAN_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpdError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("symmetric eigendecomposition failed (non-finite entries?)")]
    Eigendecomposition,

    #[error("empty input")]
    Empty,

    #[error("tangent vector of length {len} is not a triangular number")]
    BadVectorLength { len: usize },
}

/// A symmetric positive-definite matrix.
///
/// Inputs are symmetrized on construction, so slightly asymmetric covariance
/// accumulations are accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

/// A symmetric matrix, typically a point in the tangent space of an SPD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

/// Flattened upper triangle of a tangent-space matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentFeature {
    values: Vec<f64>,
    base_dim: usize,
}

/// Off-diagonal weighting used when flattening a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Plain upper triangle, every entry taken as is.
    #[default]
    Plain,
    /// Off-diagonal entries multiplied by √2, so the Euclidean norm of the
    /// vector equals the Frobenius norm of the matrix.
    Isometric,
}

fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

fn check_square(m: &DMatrix<f64>) -> Result<(), SpdError> {
    if m.nrows() != m.ncols() {
        return Err(SpdError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.nrows() == 0 {
        return Err(SpdError::Empty);
    }
    Ok(())
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, SpdError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SpdError::Eigendecomposition);
    }
    SymmetricEigen::try_new(m, f64::EPSILON, 0).ok_or(SpdError::Eigendecomposition)
}

/// `V · diag(f(λ)) · Vᵀ` for a symmetric input.
fn spectral_map(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let fk = f(lambda);
        scaled.column_mut(k).scale_mut(fk);
    }
    symmetrize(&scaled * v.transpose())
}

/// Eigenvalue floor for a positive spectrum; fails when the spectrum is
/// clearly indefinite.
fn floor_for(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> Result<f64, SpdError> {
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || !max.is_finite() {
        return Err(SpdError::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    // Roundoff can push a tiny eigenvalue slightly negative; anything
    // substantially below zero means the caller passed a non-SPD matrix.
    if min < -1e-8 * max {
        return Err(SpdError::NotPositiveDefinite {
            min_eigenvalue: min,
        });
    }
    Ok(EIGEN_FLOOR * max)
}

impl SpdMatrix {
    /// Symmetrizes `m` and checks that it is positive definite.
    pub fn new(m: DMatrix<f64>) -> Result<Self, SpdError> {
        check_square(&m)?;
        let m = symmetrize(m);
        let eig = eigen(m.clone())?;
        let min = eig.eigenvalues.min();
        if !(min > 0.0) {
            return Err(SpdError::NotPositiveDefinite {
                min_eigenvalue: min,
            });
        }
        Ok(SpdMatrix(m))
    }

    /// Wraps a matrix known to be SPD by construction (e.g. a ridge-regularized
    /// covariance). Only symmetrizes.
    pub(crate) fn from_trusted(m: DMatrix<f64>) -> Self {
        debug_assert_eq!(m.nrows(), m.ncols());
        SpdMatrix(symmetrize(m))
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix(DMatrix::identity(n, n))
    }

    /// Diagonal matrix; every entry must be positive.
    pub fn from_diagonal(diag: &[f64]) -> Result<Self, SpdError> {
        if diag.is_empty() {
            return Err(SpdError::Empty);
        }
        if let Some(&bad) = diag.iter().find(|&&d| !(d > 0.0)) {
            return Err(SpdError::NotPositiveDefinite {
                min_eigenvalue: bad,
            });
        }
        Ok(SpdMatrix(DMatrix::from_diagonal(
            &nalgebra::DVector::from_column_slice(diag),
        )))
    }

    /// Builds from row-major entries.
    pub fn from_row_slice(n: usize, entries: &[f64]) -> Result<Self, SpdError> {
        if entries.len() != n * n {
            return Err(SpdError::DimensionMismatch {
                expected: n * n,
                found: entries.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(n, n, entries))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>, SpdError> {
        let eig = eigen(self.0.clone())?;
        let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        Ok(v)
    }
}

impl SymmetricMatrix {
    /// Symmetrizes `m`.
    pub fn new(m: DMatrix<f64>) -> Result<Self, SpdError> {
        check_square(&m)?;
        Ok(SymmetricMatrix(symmetrize(m)))
    }

    pub fn zeros(n: usize) -> Self {
        SymmetricMatrix(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymmetricMatrix(DMatrix::from_diagonal(
            &nalgebra::DVector::from_column_slice(diag),
        ))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }
}

impl TangentFeature {
    /// Wraps a raw feature vector. `values.len()` must be `n(n+1)/2` for
    /// some `n`.
    pub fn from_values(values: Vec<f64>) -> Result<Self, SpdError> {
        let base_dim =
            triangular_root(values.len()).ok_or(SpdError::BadVectorLength { len: values.len() })?;
        Ok(TangentFeature { values, base_dim })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Length of the flattened upper triangle of an `n×n` matrix.
pub const fn triangle_len(n: usize) -> usize {
    n * (n + 1) / 2
}

fn triangular_root(len: usize) -> Option<usize> {
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (n > 0 && triangle_len(n) == len).then_some(n)
}

/// Precomputed `P^½` and `P^-½` for repeated maps at one base point.
#[derive(Debug, Clone)]
pub struct TangentChart {
    base: SpdMatrix,
    sqrt: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
}

impl TangentChart {
    pub fn at(base: &SpdMatrix) -> Result<Self, SpdError> {
        let eig = eigen(base.0.clone())?;
        let floor = floor_for(&eig)?;
        let sqrt = spectral_map(&eig, |l| l.max(floor).sqrt());
        let inv_sqrt = spectral_map(&eig, |l| 1.0 / l.max(floor).sqrt());
        Ok(TangentChart {
            base: base.clone(),
            sqrt,
            inv_sqrt,
        })
    }

    pub fn base(&self) -> &SpdMatrix {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Riemannian logarithm at the chart's base point.
    pub fn log(&self, point: &SpdMatrix) -> Result<SymmetricMatrix, SpdError> {
        let log = self.whitened_log(point)?;
        Ok(SymmetricMatrix(symmetrize(&self.sqrt * log * &self.sqrt)))
    }

    /// `log(B^-½ P B^-½)`, the logarithm before mapping back by `B^½`.
    fn whitened_log(&self, point: &SpdMatrix) -> Result<DMatrix<f64>, SpdError> {
        self.check_dim(point.dim())?;
        let whitened = symmetrize(&self.inv_sqrt * &point.0 * &self.inv_sqrt);
        let eig = eigen(whitened)?;
        let floor = floor_for(&eig)?;
        Ok(spectral_map(&eig, |l| l.max(floor).ln()))
    }

    /// Riemannian exponential at the chart's base point.
    pub fn exp(&self, tangent: &SymmetricMatrix) -> Result<SpdMatrix, SpdError> {
        self.check_dim(tangent.dim())?;
        let whitened = symmetrize(&self.inv_sqrt * &tangent.0 * &self.inv_sqrt);
        let eig = eigen(whitened)?;
        let exp = spectral_map(&eig, f64::exp);
        Ok(SpdMatrix(symmetrize(&self.sqrt * exp * &self.sqrt)))
    }

    fn check_dim(&self, found: usize) -> Result<(), SpdError> {
        if found != self.dim() {
            return Err(SpdError::DimensionMismatch {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }
}

/// Projects `point` onto the tangent space at `base`.
pub fn log_map(base: &SpdMatrix, point: &SpdMatrix) -> Result<SymmetricMatrix, SpdError> {
    if base.dim() != point.dim() {
        return Err(SpdError::DimensionMismatch {
            expected: base.dim(),
            found: point.dim(),
        });
    }
    TangentChart::at(base)?.log(point)
}

/// Maps a tangent vector at `base` back onto the manifold.
pub fn exp_map(base: &SpdMatrix, tangent: &SymmetricMatrix) -> Result<SpdMatrix, SpdError> {
    if base.dim() != tangent.dim() {
        return Err(SpdError::DimensionMismatch {
            expected: base.dim(),
            found: tangent.dim(),
        });
    }
    TangentChart::at(base)?.exp(tangent)
}

/// Result of the iterative mean.
#[derive(Debug, Clone)]
pub struct FrechetMean {
    pub mean: SpdMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// Frobenius norm of the last mean tangent update.
    pub update_norm: f64,
}

/// Fréchet (Karcher) mean under the affine-invariant metric.
///
/// Starts from the arithmetic mean and repeats `u = mean_i Log_μ(x_i)`,
/// `μ ← Exp_μ(u)` until `‖u‖_F < tol` or `max_iter` updates have run. A run
/// that hits the cap still returns its last iterate with `converged == false`.
pub fn frechet_mean(
    points: &[SpdMatrix],
    tol: f64,
    max_iter: usize,
) -> Result<FrechetMean, SpdError> {
    let first = points.first().ok_or(SpdError::Empty)?;
    let n = first.dim();
    if let Some(p) = points.iter().find(|p| p.dim() != n) {
        return Err(SpdError::DimensionMismatch {
            expected: n,
            found: p.dim(),
        });
    }

    let mut sum = DMatrix::zeros(n, n);
    for p in points {
        sum += &p.0;
    }
    let mut mu = SpdMatrix(regularize(symmetrize(sum / points.len() as f64))?);

    let mut update_norm = f64::INFINITY;
    for iteration in 0..=max_iter {
        // Average in whitened coordinates; only the mean is mapped back.
        let chart = TangentChart::at(&mu)?;
        let mut white = DMatrix::zeros(n, n);
        for p in points {
            white += chart.whitened_log(p)?;
        }
        white /= points.len() as f64;
        update_norm = symmetrize(&chart.sqrt * &white * &chart.sqrt).norm();
        if update_norm < tol {
            return Ok(FrechetMean {
                mean: mu,
                iterations: iteration,
                converged: true,
                update_norm,
            });
        }
        if iteration == max_iter {
            break;
        }
        let exp = spectral_map(&eigen(symmetrize(white))?, f64::exp);
        mu = SpdMatrix(symmetrize(&chart.sqrt * exp * &chart.sqrt));
    }
    Ok(FrechetMean {
        mean: mu,
        iterations: max_iter,
        converged: false,
        update_norm,
    })
}

/// Lifts eigenvalues under the relative floor. Leaves well-conditioned input
/// untouched (bitwise).
fn regularize(m: DMatrix<f64>) -> Result<DMatrix<f64>, SpdError> {
    let eig = eigen(m.clone())?;
    let floor = floor_for(&eig)?;
    if eig.eigenvalues.min() >= floor {
        return Ok(m);
    }
    Ok(spectral_map(&eig, |l| l.max(floor)))
}

/// Row-major upper triangle (diagonal included) of `tangent`.
///
/// Element order is `(0,0), (0,1), …, (0,n-1), (1,1), (1,2), …, (n-1,n-1)`.
pub fn tangent_vectorize(tangent: &SymmetricMatrix, weighting: Weighting) -> TangentFeature {
    let n = tangent.dim();
    let off = match weighting {
        Weighting::Plain => 1.0,
        Weighting::Isometric => std::f64::consts::SQRT_2,
    };
    let mut values = Vec::with_capacity(triangle_len(n));
    for i in 0..n {
        values.push(tangent.0[(i, i)]);
        for j in (i + 1)..n {
            values.push(off * tangent.0[(i, j)]);
        }
    }
    TangentFeature {
        values,
        base_dim: n,
    }
}

/// Inverse of [`tangent_vectorize`].
pub fn tangent_unvectorize(feature: &TangentFeature, weighting: Weighting) -> SymmetricMatrix {
    let n = feature.base_dim;
    let off = match weighting {
        Weighting::Plain => 1.0,
        Weighting::Isometric => std::f64::consts::SQRT_2,
    };
    let mut m = DMatrix::zeros(n, n);
    let mut it = feature.values.iter();
    for i in 0..n {
        m[(i, i)] = *it.next().expect("length checked on construction");
        for j in (i + 1)..n {
            let v = *it.next().expect("length checked on construction") / off;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    SymmetricMatrix(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn log_of_base_is_zero() {
        let p = SpdMatrix::from_row_slice(2, &[2.0, 0.3, 0.3, 1.0]).unwrap();
        let s = log_map(&p, &p).unwrap();
        assert!(s.matrix().amax() < 1e-10);
    }

    #[test]
    fn log_at_identity_is_matrix_log() {
        let i = SpdMatrix::identity(2);
        let q = SpdMatrix::from_diagonal(&[E, E * E]).unwrap();
        let s = log_map(&i, &q).unwrap();
        assert!(close(
            s.matrix(),
            &DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0]),
            1e-12
        ));
    }

    #[test]
    fn log_commuting_diagonals_matches_scalar_formula() {
        // For commuting diagonals each entry is p * ln(q / p).
        let p = SpdMatrix::from_diagonal(&[4.0, 1.0]).unwrap();
        let q = SpdMatrix::from_diagonal(&[1.0, 1.0]).unwrap();
        let s = log_map(&p, &q).unwrap();
        let expected = DMatrix::from_diagonal(&nalgebra::dvector![4.0 * 0.25f64.ln(), 0.0]);
        assert!(close(s.matrix(), &expected, 1e-12));
    }

    #[test]
    fn exp_of_zero_is_base() {
        let p = SpdMatrix::from_row_slice(2, &[2.0, 0.3, 0.3, 1.0]).unwrap();
        let q = exp_map(&p, &SymmetricMatrix::zeros(2)).unwrap();
        assert!(close(q.matrix(), p.matrix(), 1e-12));
    }

    #[test]
    fn exp_at_identity_is_matrix_exp() {
        let q = exp_map(
            &SpdMatrix::identity(2),
            &SymmetricMatrix::from_diagonal(&[1.0, 2.0]),
        )
        .unwrap();
        assert!(close(
            q.matrix(),
            &DMatrix::from_diagonal(&nalgebra::dvector![E, E * E]),
            1e-12
        ));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = SpdMatrix::identity(2);
        let b = SpdMatrix::identity(3);
        assert_eq!(
            log_map(&a, &b),
            Err(SpdError::DimensionMismatch {
                expected: 2,
                found: 3
            })
        );
        assert!(matches!(
            exp_map(&a, &SymmetricMatrix::zeros(3)),
            Err(SpdError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            SpdMatrix::new(m),
            Err(SpdError::NotPositiveDefinite { .. })
        ));
        assert!(SpdMatrix::from_diagonal(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn construction_symmetrizes() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.3, 1.0]);
        let s = SpdMatrix::new(m).unwrap();
        assert_eq!(s.matrix()[(0, 1)], 0.4);
        assert_eq!(s.matrix()[(1, 0)], 0.4);
    }

    #[test]
    fn mean_of_identical_points() {
        let a =
            SpdMatrix::from_row_slice(3, &[3.0, 0.2, 0.1, 0.2, 2.0, -0.3, 0.1, -0.3, 1.5]).unwrap();
        let m = frechet_mean(
            &[a.clone(), a.clone(), a.clone()],
            DEFAULT_MEAN_TOL,
            DEFAULT_MEAN_MAX_ITER,
        )
        .unwrap();
        assert!(m.converged);
        assert!(close(m.mean.matrix(), a.matrix(), 1e-12));
    }

    #[test]
    fn mean_of_single_point_is_exact() {
        let a = SpdMatrix::from_row_slice(2, &[3.0, 0.7, 0.7, 1.1]).unwrap();
        let m = frechet_mean(
            std::slice::from_ref(&a),
            DEFAULT_MEAN_TOL,
            DEFAULT_MEAN_MAX_ITER,
        )
        .unwrap();
        assert_eq!(m.iterations, 0);
        assert_eq!(m.mean, a);
    }

    #[test]
    fn mean_of_commuting_scalars_is_geometric() {
        let a = SpdMatrix::from_diagonal(&[1.0, 1.0]).unwrap();
        let b = SpdMatrix::from_diagonal(&[4.0, 4.0]).unwrap();
        let m = frechet_mean(&[a, b], DEFAULT_MEAN_TOL, DEFAULT_MEAN_MAX_ITER).unwrap();
        assert!(m.converged);
        assert!(close(
            m.mean.matrix(),
            &(DMatrix::identity(2, 2) * 2.0),
            1e-10
        ));
    }

    #[test]
    fn mean_reports_non_convergence() {
        let a = SpdMatrix::from_diagonal(&[1.0, 100.0]).unwrap();
        let b = SpdMatrix::from_diagonal(&[100.0, 1.0]).unwrap();
        let m = frechet_mean(&[a, b], 1e-30, 1).unwrap();
        assert!(!m.converged);
        assert_eq!(m.iterations, 1);
    }

    #[test]
    fn mean_of_empty_is_error() {
        assert_eq!(frechet_mean(&[], 1e-8, 10).unwrap_err(), SpdError::Empty);
    }

    #[test]
    fn vectorize_diag3() {
        let s = SymmetricMatrix::from_diagonal(&[1.0, 2.0, 3.0]);
        let v = tangent_vectorize(&s, Weighting::Plain);
        assert_eq!(v.values(), &[1.0, 0.0, 0.0, 2.0, 0.0, 3.0]);
        assert_eq!(v.base_dim(), 3);
    }

    #[test]
    fn vectorize_lengths() {
        assert_eq!(
            tangent_vectorize(&SymmetricMatrix::zeros(30), Weighting::Plain).len(),
            465
        );
        let z = tangent_vectorize(&SymmetricMatrix::zeros(7), Weighting::Plain);
        assert_eq!(z.len(), 28);
        assert!(z.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isometric_weighting_preserves_frobenius_norm() {
        let m = SymmetricMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 2.0, -1.0, 2.0, 0.5, 3.0, -1.0, 3.0, -2.0],
        ))
        .unwrap();
        let v = tangent_vectorize(&m, Weighting::Isometric);
        let norm = v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - m.frobenius_norm()).abs() < 1e-12);
        assert_eq!(
            tangent_unvectorize(&v, Weighting::Isometric).matrix(),
            m.matrix()
        );
    }

    #[test]
    fn feature_from_values_checks_length() {
        assert!(TangentFeature::from_values(vec![0.0; 465]).is_ok());
        assert_eq!(
            TangentFeature::from_values(vec![0.0; 5]).unwrap_err(),
            SpdError::BadVectorLength { len: 5 }
        );
    }
}
