//! Symmetric eigendecomposition and the spectral functionals built on it.
//!
//! Eigenvalues are always ordered from largest to smallest. Functionals that
//! evaluate a resolvent at a point `rho` require `rho` to sit strictly above
//! every retained eigenvalue, with a relative margin of `1e-10`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative asymmetry tolerated by [`eig_sym`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// How far the mean eigenvalue may drift from 1 for a spectrum to count as trace-normalized.
pub const TRACE_NORMALIZATION_TOLERANCE: f64 = 1e-8;

/// Components smaller than this are treated as zero when fixing eigenvector signs.
pub const SIGN_PIVOT_TOLERANCE: f64 = 1e-12;

/// Distance below which an evaluation point counts as sitting on a pole.
pub fn pole_margin(point: f64) -> f64 {
    1e-10 * point.abs().max(1.0)
}

/// Eigenvalues of a symmetric matrix, sorted in descending order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
    trace_normalized: bool,
}

impl Spectrum {
    /// Builds a spectrum from unsorted values.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionTooSmall(0));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("spectrum contains non-finite values".into()));
        }
        values.sort_by(|a, b| b.total_cmp(a));
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Ok(Self {
            trace_normalized: (mean - 1.0).abs() <= TRACE_NORMALIZATION_TOLERANCE,
            eigenvalues: values,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_trace_normalized(&self) -> bool {
        self.trace_normalized
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    pub fn mean(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.dim() as f64
    }

    /// The spectrum with the `skip` largest eigenvalues removed.
    pub fn tail(&self, skip: usize) -> Result<Spectrum> {
        if skip >= self.dim() {
            return Err(Error::SpikeCountTooLarge { k: skip, m: self.dim() });
        }
        Spectrum::new(self.eigenvalues[skip..].to_vec())
    }

    /// True when no eigenvalue is below `-tol * max(1, largest)`.
    pub fn is_nonnegative(&self, tol: f64) -> bool {
        let floor = -tol * self.max().abs().max(1.0);
        self.eigenvalues.iter().all(|&v| v >= floor)
    }
}

/// Rule used to fix the sign of each eigenvector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SignConvention {
    /// Component `i` of eigenvector `i` is positive.
    Diagonal,
    /// Component `j` of every eigenvector is positive.
    Coordinate(usize),
    /// Signs are left as the solver returned them.
    Unchanged,
}

impl Default for SignConvention {
    fn default() -> Self {
        SignConvention::Diagonal
    }
}

impl SignConvention {
    /// Flips columns of `vectors` in place according to the convention.
    ///
    /// When the pivot component is numerically zero the largest-magnitude
    /// component is made positive instead.
    pub fn apply(&self, vectors: &mut DMatrix<f64>) {
        for col in 0..vectors.ncols() {
            let pivot = match *self {
                SignConvention::Unchanged => return,
                SignConvention::Diagonal => col,
                SignConvention::Coordinate(j) => j,
            };
            let mut column = vectors.column_mut(col);
            let reference = if pivot < column.len() && column[pivot].abs() > SIGN_PIVOT_TOLERANCE {
                column[pivot]
            } else {
                column.iter().copied().fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best })
            };
            if reference < 0.0 {
                column.neg_mut();
            }
        }
    }
}

/// Eigenvalues and matching orthonormal eigenvectors (column `i` pairs with eigenvalue `i`).
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub spectrum: Spectrum,
    pub vectors: DMatrix<f64>,
    pub sign_convention: SignConvention,
}

impl EigenSystem {
    pub fn dim(&self) -> usize {
        self.spectrum.dim()
    }

    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }
}

fn check_symmetric(matrix: &DMatrix<f64>) -> Result<()> {
    if !matrix.is_square() {
        return Err(Error::DimensionMismatch { expected: matrix.nrows(), found: matrix.ncols() });
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("matrix contains non-finite entries".into()));
    }
    let scale = matrix.amax();
    let n = matrix.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((matrix[(i, j)] - matrix[(j, i)]).abs());
        }
    }
    let relative = if scale > 0.0 { worst / scale } else { 0.0 };
    if relative > SYMMETRY_TOLERANCE {
        return Err(Error::NonSymmetric(relative));
    }
    Ok(())
}

fn symmetrized(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    (matrix + matrix.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix with the default sign convention.
pub fn eig_sym(matrix: &DMatrix<f64>) -> Result<EigenSystem> {
    eig_sym_with(matrix, SignConvention::default())
}

/// Eigendecomposition of a symmetric matrix with an explicit sign convention.
pub fn eig_sym_with(matrix: &DMatrix<f64>, convention: SignConvention) -> Result<EigenSystem> {
    check_symmetric(matrix)?;
    let n = matrix.nrows();
    let decomposition = SymmetricEigen::try_new(symmetrized(matrix), f64::EPSILON, 1000 * n.max(1))
        .ok_or(Error::ConvergenceFailure)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| decomposition.eigenvalues[b].total_cmp(&decomposition.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| decomposition.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &decomposition.eigenvectors.column(src));
    }
    convention.apply(&mut vectors);
    Ok(EigenSystem { spectrum: Spectrum::new(values)?, vectors, sign_convention: convention })
}

/// Eigenvalues only, which skips accumulating the eigenvectors.
pub fn eigenvalues_sym(matrix: &DMatrix<f64>) -> Result<Spectrum> {
    check_symmetric(matrix)?;
    Spectrum::new(symmetrized(matrix).symmetric_eigenvalues().iter().copied().collect())
}

fn check_above(point: f64, max: f64) -> Result<()> {
    if point <= max + pole_margin(point) {
        return Err(Error::PoleViolation { point, max });
    }
    Ok(())
}

/// Average of `λ^s1 / (rho − λ)^s2` over the eigenvalues left after skipping the top `skip`.
pub fn m_functional(spec: &Spectrum, rho: f64, s1: i32, s2: i32, skip: usize) -> Result<f64> {
    let retained = &spec.eigenvalues()[skip.min(spec.dim())..];
    if retained.is_empty() {
        return Err(Error::SpikeCountTooLarge { k: skip, m: spec.dim() });
    }
    if s2 > 0 {
        check_above(rho, retained[0])?;
    }
    let total: f64 = retained.iter().map(|&l| l.powi(s1) / (rho - l).powi(s2)).sum();
    Ok(total / retained.len() as f64)
}

/// `(1/m) Σ λ/(z − λ)` over the eigenvalues after the top `skip`; `m` is the full dimension.
pub fn t_transform(spec: &Spectrum, z: f64, skip: usize) -> Result<f64> {
    let retained = &spec.eigenvalues()[skip.min(spec.dim())..];
    if retained.is_empty() {
        return Err(Error::SpikeCountTooLarge { k: skip, m: spec.dim() });
    }
    check_above(z, retained[0])?;
    let total: f64 = retained.iter().map(|&l| l / (z - l)).sum();
    Ok(total / spec.dim() as f64)
}

/// Nonzero-rank eigenvalues of `Σ weights[i] · v_i v_iᵀ` from a `k × k` reduction.
pub fn gram_spectrum(weights: &[f64], vectors: &[DVector<f64>]) -> Result<Spectrum> {
    let k = weights.len();
    if vectors.len() != k {
        return Err(Error::DimensionMismatch { expected: k, found: vectors.len() });
    }
    if k == 0 {
        return Err(Error::DimensionTooSmall(0));
    }
    let m = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != m) {
        return Err(Error::DimensionMismatch { expected: m, found: bad.len() });
    }
    if k > m {
        return Err(Error::DimensionMismatch { expected: m, found: k });
    }
    if weights.iter().any(|&w| w == 0.0 || !w.is_finite()) {
        return Err(Error::InvalidParam("gram weights must be finite and nonzero".into()));
    }
    let gram = DMatrix::from_fn(k, k, |i, j| vectors[i].dot(&vectors[j]));
    let all_positive = weights.iter().all(|&w| w > 0.0);
    let all_negative = weights.iter().all(|&w| w < 0.0);
    let reduced = if all_positive || all_negative {
        let sign = if all_positive { 1.0 } else { -1.0 };
        let roots: Vec<f64> = weights.iter().map(|w| w.abs().sqrt()).collect();
        DMatrix::from_fn(k, k, |i, j| sign * roots[i] * roots[j] * gram[(i, j)])
    } else {
        let gram_eigen = SymmetricEigen::new(gram);
        let factor = DMatrix::from_fn(k, k, |i, j| {
            gram_eigen.eigenvalues[i].max(0.0).sqrt() * gram_eigen.eigenvectors[(j, i)]
        });
        let weighted = DMatrix::from_fn(k, k, |i, j| factor[(i, j)] * weights[j]);
        &weighted * factor.transpose()
    };
    eigenvalues_sym(&symmetrized(&reduced))
}

/// Residual of the rank-one secular equation `Σ λ_i a_i/(λ̂ − λ_i) − 1/(θ − 1)`.
///
/// `angles[i]` is the squared projection of the spike direction on the i-th
/// noise eigenvector. The residual vanishes at eigenvalues of the perturbed matrix.
pub fn secular_residual(noise: &Spectrum, angles: &[f64], theta: f64, lambda_hat: f64) -> Result<f64> {
    if angles.len() != noise.dim() {
        return Err(Error::DimensionMismatch { expected: noise.dim(), found: angles.len() });
    }
    if theta == 1.0 {
        return Err(Error::InvalidParam("spike strength must differ from 1".into()));
    }
    let mut total = 0.0;
    for (&lambda, &angle) in noise.eigenvalues().iter().zip(angles) {
        if (lambda_hat - lambda).abs() <= pole_margin(lambda_hat) {
            return Err(Error::PoleViolation { point: lambda_hat, max: lambda });
        }
        total += lambda * angle / (lambda_hat - lambda);
    }
    Ok(total - 1.0 / (theta - 1.0))
}

/// Largest root of [`secular_residual`] for `theta > 1`, found by bisection.
pub fn secular_root(noise: &Spectrum, angles: &[f64], theta: f64) -> Result<f64> {
    if angles.len() != noise.dim() {
        return Err(Error::DimensionMismatch { expected: noise.dim(), found: angles.len() });
    }
    if theta <= 1.0 {
        return Err(Error::InvalidParam("secular root above the spectrum needs theta > 1".into()));
    }
    let weights: Vec<f64> = noise.eigenvalues().iter().zip(angles).map(|(l, a)| l * a).collect();
    let lower = noise
        .eigenvalues()
        .iter()
        .zip(&weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if !lower.is_finite() {
        return Err(Error::InvalidParam("spike direction has no weight on a positive eigenvalue".into()));
    }
    let mass: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    let residual = |x: f64| -> f64 {
        noise.eigenvalues().iter().zip(&weights).map(|(&l, &w)| w / (x - l)).sum::<f64>() - 1.0 / (theta - 1.0)
    };
    let (mut lo, mut hi) = (lower, lower + (theta - 1.0) * mass + 1.0);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
