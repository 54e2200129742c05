//! Two-sample statistics comparing the spike structure of two populations.
//!
//! T1 compares bias-corrected spike strengths, T2 adds the squared overlap
//! between spike eigenvectors, T3 looks at the extreme residual spikes of one
//! filtered covariance whitened by the other, and T4/T5 are the classical
//! log-determinant and trace of `Σ̂_X^{-1/2} Σ̂_Y Σ̂_X^{-1/2}`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, SymmetricEigen};
use serde::Serialize;

use crate::calibration::{EmpiricalCalibration, ResidualCalibration};
use crate::datagen::DataMatrix;
use crate::error::{Error, Result};
use crate::estimators::{angle_estimate, unbiased_derivative, unbiased_from_bulk, CovarianceEigen, PopulationFit, RANK_TOLERANCE};
use crate::spectral::{eigenvalues_sym, gram_spectrum, m_functional, SignConvention, Spectrum};
use crate::stats::{chi_square_sf, normal_cdf, normal_quantile, normal_sf};

/// Condition number above which the T2 covariance is declared singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Levels always reported in [`TestReport::reject_at`].
pub const STANDARD_LEVELS: [f64; 3] = [0.01, 0.05, 0.10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Method {
    T1,
    T2,
    T3,
    T4,
    T5,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::T1, Method::T2, Method::T3, Method::T4, Method::T5];

    /// Whether the reference distribution must be simulated.
    pub fn needs_calibration(self) -> bool {
        matches!(self, Method::T3 | Method::T4 | Method::T5)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Method::T1 => "T1",
            Method::T2 => "T2",
            Method::T3 => "T3",
            Method::T4 => "T4",
            Method::T5 => "T5",
        };
        f.write_str(name)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T1" => Ok(Method::T1),
            "T2" => Ok(Method::T2),
            "T3" => Ok(Method::T3),
            "T4" => Ok(Method::T4),
            "T5" => Ok(Method::T5),
            other => Err(Error::Parse(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reference {
    ChiSquare { df: usize },
    BonferroniNormal { spikes: usize, lambda_plus: f64, sigma_plus: f64, lambda_minus: f64, sigma_minus: f64 },
    Empirical { reps: usize, lower: f64, upper: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Statistic {
    Scalar(f64),
    ResidualPair { plus: f64, minus: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelDecision {
    pub level: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub name: String,
    pub value: f64,
}

/// Outcome of one test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub method: Method,
    pub statistic: Statistic,
    pub reference: Reference,
    pub p_value: Option<f64>,
    pub reject_at: Vec<LevelDecision>,
    pub diagnostics: Vec<Diagnostic>,
    pub warnings: Vec<String>,
}

impl TestReport {
    fn new(method: Method, statistic: Statistic, reference: Reference, p_value: f64, level: f64) -> Self {
        let p_value = p_value.clamp(0.0, 1.0);
        let mut levels = STANDARD_LEVELS.to_vec();
        if !levels.iter().any(|l| (l - level).abs() < 1e-15) {
            levels.push(level);
            levels.sort_by(f64::total_cmp);
        }
        let reject_at = levels.into_iter().map(|level| LevelDecision { level, reject: p_value <= level }).collect();
        Self { method, statistic, reference, p_value: Some(p_value), reject_at, diagnostics: Vec::new(), warnings: Vec::new() }
    }

    /// Decision at `level`, derived from the p-value.
    pub fn rejects(&self, level: f64) -> bool {
        self.p_value.is_some_and(|p| p <= level)
    }

    fn note(&mut self, name: impl Into<String>, value: f64) {
        self.diagnostics.push(Diagnostic { name: name.into(), value });
    }

    pub fn diagnostic(&self, name: &str) -> Option<f64> {
        self.diagnostics.iter().find(|d| d.name == name).map(|d| d.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TestOptions {
    /// Run even when two spikes of a population coincide.
    pub force: bool,
    pub level: f64,
}

impl Default for TestOptions {
    fn default() -> Self {
        Self { force: false, level: 0.05 }
    }
}

fn check_pair(fit_x: &PopulationFit, fit_y: &PopulationFit, options: &TestOptions) -> Result<()> {
    if fit_x.m != fit_y.m {
        return Err(Error::DimensionMismatch { expected: fit_x.m, found: fit_y.m });
    }
    if fit_x.k != fit_y.k {
        return Err(Error::MismatchedK { x: fit_x.k, y: fit_y.k });
    }
    if !options.force {
        if let Some((first, second)) = fit_x.equal_spikes().or_else(|| fit_y.equal_spikes()) {
            return Err(Error::EqualSpikes { first, second });
        }
    }
    Ok(())
}

fn separation_warnings(fit_x: &PopulationFit, fit_y: &PopulationFit) -> Vec<String> {
    let tag = |label: &str, fit: &PopulationFit| {
        fit.warnings.iter().map(|w| format!("{label}: {w}")).collect::<Vec<_>>()
    };
    let mut out = tag("X", fit_x);
    out.extend(tag("Y", fit_y));
    out
}

fn population_variance(bulk: &Spectrum, rho: f64) -> Result<f64> {
    let m11 = m_functional(bulk, rho, 1, 1, 0)?;
    let m22 = m_functional(bulk, rho, 2, 2, 0)?;
    Ok(2.0 * (m22 - m11 * m11) / m11.powi(4))
}

/// Asymptotic variance of the difference of bias-corrected spike strengths.
pub fn sigma_theta_sq(bulk_x: &Spectrum, bulk_y: &Spectrum, rho_x: f64, rho_y: f64) -> Result<f64> {
    Ok(population_variance(bulk_x, rho_x)? + population_variance(bulk_y, rho_y)?)
}

/// `m Σ diff_i² / var_i`; a zero difference contributes zero whatever its variance.
pub fn t1_statistic(m: usize, terms: &[(f64, f64)]) -> Result<f64> {
    terms.iter().try_fold(0.0, |total, &(diff, variance)| {
        if diff == 0.0 {
            Ok(total)
        } else if variance > 0.0 {
            Ok(total + m as f64 * diff * diff / variance)
        } else {
            Err(Error::SingularCovariance(f64::INFINITY))
        }
    })
}

/// T1 with default options.
pub fn t1(fit_x: &PopulationFit, fit_y: &PopulationFit) -> Result<TestReport> {
    t1_with(fit_x, fit_y, &TestOptions::default())
}

pub fn t1_with(fit_x: &PopulationFit, fit_y: &PopulationFit, options: &TestOptions) -> Result<TestReport> {
    check_pair(fit_x, fit_y, options)?;
    let mut terms = Vec::with_capacity(fit_x.k);
    for i in 0..fit_x.k {
        let diff = fit_x.theta_unbiased(i)? - fit_y.theta_unbiased(i)?;
        let variance = sigma_theta_sq(&fit_x.bulk, &fit_y.bulk, fit_x.spikes[i].theta_hat, fit_y.spikes[i].theta_hat)?;
        terms.push((diff, variance));
    }
    let statistic = t1_statistic(fit_x.m, &terms)?;
    let p = chi_square_sf(statistic, fit_x.k as f64);
    let mut report =
        TestReport::new(Method::T1, Statistic::Scalar(statistic), Reference::ChiSquare { df: fit_x.k }, p, options.level);
    for (i, &(diff, variance)) in terms.iter().enumerate() {
        report.note(format!("spike{}.theta_diff", i + 1), diff);
        report.note(format!("spike{}.sigma_sq", i + 1), variance);
        report.note(format!("spike{}.contribution", i + 1), t1_statistic(fit_x.m, &[(diff, variance)])?);
    }
    report.warnings = separation_warnings(fit_x, fit_y);
    Ok(report)
}

/// Limiting covariance of `(θ̂_X, θ̂_Y, double angle)` for one spike.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointCovariance3 {
    pub s11: f64,
    pub s13: f64,
    pub s22: f64,
    pub s23: f64,
    pub s33: f64,
    /// `(θ̂_X, θ̂̂_X, θ̂_Y, θ̂̂_Y)`.
    pub evaluated_at: (f64, f64, f64, f64),
}

struct BulkMoments {
    m11: f64,
    m12: f64,
    m13: f64,
    m14: f64,
    m24: f64,
}

impl BulkMoments {
    fn at(bulk: &Spectrum, rho: f64) -> Result<Self> {
        Ok(Self {
            m11: m_functional(bulk, rho, 1, 1, 0)?,
            m12: m_functional(bulk, rho, 1, 2, 0)?,
            m13: m_functional(bulk, rho, 1, 3, 0)?,
            m14: m_functional(bulk, rho, 1, 4, 0)?,
            m24: m_functional(bulk, rho, 2, 4, 0)?,
        })
    }
}

impl JointCovariance3 {
    /// Evaluates the closed-form entries with `rho` the raw eigenvalues and `t` the corrected strengths.
    pub fn evaluate(bulk_x: &Spectrum, bulk_y: &Spectrum, rx: f64, tx: f64, ry: f64, ty: f64) -> Result<Self> {
        let x = BulkMoments::at(bulk_x, rx)?;
        let y = BulkMoments::at(bulk_y, ry)?;
        let (sx, sy) = ((tx - 1.0).powi(2), (ty - 1.0).powi(2));

        let s11 = -2.0 * (x.m11 + x.m11 * x.m11 - x.m12 * rx) / x.m11.powi(4);
        let s22 = -2.0 * (y.m11 + y.m11 * y.m11 - y.m12 * ry) / y.m11.powi(4);

        let s13 = 2.0
            * (x.m11 * (1.0 + x.m11) * x.m12
                + x.m11 * (x.m12 * x.m12 - 2.0 * (1.0 + x.m11) * x.m13) * rx
                + x.m12 * x.m13 * rx * rx)
            * tx
            * ty
            / (x.m11.powi(2) * x.m12.powi(3) * y.m12 * rx * rx * ry * sx * sy);
        let s23 = 2.0
            * (y.m11 * (1.0 + y.m11) * y.m12
                + y.m11 * (y.m12 * y.m12 - 2.0 * (1.0 + y.m11) * y.m13) * ry
                + y.m12 * y.m13 * ry * ry)
            * tx
            * ty
            / (x.m12 * y.m11.powi(2) * y.m12.powi(3) * rx * ry * ry * sx * sy);

        let txy = tx * ty;
        let x_side = 2.0 * x.m12.powi(5) * y.m12.powi(4) * rx.powi(3) * ry * ry * sx * (y.m12 * ry * sy - ty)
            - (1.0 + 2.0 * x.m11) * x.m12.powi(3) * y.m12.powi(4) * rx * ry * ry * txy
            + 4.0 * x.m11 * (1.0 + x.m11) * x.m12 * x.m13 * y.m12.powi(4) * rx * ry * ry * txy
            - 4.0 * x.m11 * (1.0 + x.m11) * x.m13 * x.m13 * y.m12.powi(4) * rx * rx * ry * ry * txy
            + x.m12 * x.m12
                * y.m12.powi(4)
                * (-x.m11 * (1.0 + x.m11) + (1.0 + 4.0 * x.m11) * x.m13 * rx * rx + x.m14 * rx.powi(3))
                * ry
                * ry
                * txy;
        let y_side = x.m12.powi(4)
            * rx
            * rx
            * tx
            * (2.0 * y.m12.powi(5) * ry.powi(3) * sy
                + (1.0 + 2.0 * y.m11) * y.m12.powi(3) * ry * ty
                - 4.0 * y.m11 * (1.0 + y.m11) * y.m12 * y.m13 * ry * ty
                + 4.0 * y.m11 * (1.0 + y.m11) * y.m13 * y.m13 * ry * ry * ty
                + y.m12 * y.m12 * (y.m11 * (1.0 + y.m11) - (2.0 * y.m13 + 4.0 * y.m11 * y.m13 + y.m24) * ry * ry) * ty);
        let s33 = 2.0 * txy * (x_side - y_side)
            / (x.m12.powi(6) * y.m12.powi(6) * rx.powi(4) * ry.powi(4) * sx * sx * sy * sy);

        let entries = [s11, s13, s22, s23, s33];
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::DivisionByZero("joint covariance entry is not finite"));
        }
        Ok(Self { s11, s13, s22, s23, s33, evaluated_at: (rx, tx, ry, ty) })
    }

    pub fn s12(&self) -> f64 {
        0.0
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.s11, 0.0, self.s13, 0.0, self.s22, self.s23, self.s13, self.s23, self.s33)
    }

    /// Whether the symmetric completion is positive semidefinite within `tol` (relative to its largest entry).
    pub fn is_psd(&self, tol: f64) -> bool {
        let matrix = self.matrix();
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        SymmetricEigen::new(matrix).eigenvalues.iter().all(|&v| v >= -tol * scale)
    }
}

/// Joint covariance for spike `s`, evaluated at the fitted plug-ins.
pub fn joint_covariance(fit_x: &PopulationFit, fit_y: &PopulationFit, s: usize) -> Result<JointCovariance3> {
    JointCovariance3::evaluate(
        &fit_x.bulk,
        &fit_y.bulk,
        fit_x.spike(s)?.theta_hat,
        fit_x.theta_unbiased(s)?,
        fit_y.spike(s)?.theta_hat,
        fit_y.theta_unbiased(s)?,
    )
}

/// The map `(θ̂_X, θ̂_Y, angle) ↦ (θ̂̂_X − θ̂̂_Y, angle − α̂)`.
pub fn g_map(bulk_x: &Spectrum, bulk_y: &Spectrum, rho_x: f64, rho_y: f64, angle: f64) -> Result<[f64; 2]> {
    let tx = unbiased_from_bulk(bulk_x, rho_x)?;
    let ty = unbiased_from_bulk(bulk_y, rho_y)?;
    let alpha = angle_estimate(tx, rho_x, bulk_x)? * angle_estimate(ty, rho_y, bulk_y)?;
    Ok([tx - ty, angle - alpha])
}

/// Logarithmic derivative of the single-population angle estimate with respect to its raw eigenvalue.
fn angle_log_derivative(bulk: &Spectrum, rho: f64) -> Result<f64> {
    let t = unbiased_from_bulk(bulk, rho)?;
    let dt = unbiased_derivative(bulk, rho)?;
    let m12 = m_functional(bulk, rho, 1, 2, 0)?;
    let m13 = m_functional(bulk, rho, 1, 3, 0)?;
    let h_log = -(t + 1.0) / (t * (t - 1.0));
    let q = rho * m12;
    let dq = m12 - 2.0 * rho * m13;
    Ok(h_log * dt - dq / q)
}

/// Analytic Jacobian of [`g_map`]; it does not depend on the angle argument.
pub fn g_jacobian(bulk_x: &Spectrum, bulk_y: &Spectrum, rho_x: f64, rho_y: f64) -> Result<Matrix2x3<f64>> {
    let tx = unbiased_from_bulk(bulk_x, rho_x)?;
    let ty = unbiased_from_bulk(bulk_y, rho_y)?;
    let alpha = angle_estimate(tx, rho_x, bulk_x)? * angle_estimate(ty, rho_y, bulk_y)?;
    let dtx = unbiased_derivative(bulk_x, rho_x)?;
    let dty = unbiased_derivative(bulk_y, rho_y)?;
    let dax = alpha * angle_log_derivative(bulk_x, rho_x)?;
    let day = alpha * angle_log_derivative(bulk_y, rho_y)?;
    Ok(Matrix2x3::new(dtx, -dty, 0.0, -dax, -day, 1.0))
}

/// Squared overlap of spike `i` of X with the whole spike subspace of Y.
fn double_angle(fit_x: &PopulationFit, fit_y: &PopulationFit, i: usize) -> f64 {
    fit_y.spikes.iter().map(|sy| fit_x.spikes[i].vector.dot(&sy.vector).powi(2)).sum()
}

/// Squared overlap of spike `s` of Y with the whole spike subspace of X.
fn residual_overlap(fit_x: &PopulationFit, fit_y: &PopulationFit, s: usize) -> f64 {
    fit_x.spikes.iter().map(|sx| sx.vector.dot(&fit_y.spikes[s].vector).powi(2)).sum()
}

/// `m dᵀ A⁻¹ d` for a 2×2 covariance, with the singularity rule used by T2.
fn quadratic_form(m: usize, d: [f64; 2], cov: &Matrix2<f64>) -> Result<f64> {
    if d == [0.0, 0.0] {
        return Ok(0.0);
    }
    let eigen = SymmetricEigen::new(*cov);
    let (lo, hi) = (eigen.eigenvalues.min(), eigen.eigenvalues.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(Error::SingularCovariance(condition));
    }
    let dv = nalgebra::Vector2::new(d[0], d[1]);
    let inverse = eigen.eigenvectors * Matrix2::from_diagonal(&eigen.eigenvalues.map(|v| 1.0 / v)) * eigen.eigenvectors.transpose();
    Ok(m as f64 * dv.dot(&(inverse * dv)))
}

pub fn t2(fit_x: &PopulationFit, fit_y: &PopulationFit) -> Result<TestReport> {
    t2_with(fit_x, fit_y, &TestOptions::default())
}

pub fn t2_with(fit_x: &PopulationFit, fit_y: &PopulationFit, options: &TestOptions) -> Result<TestReport> {
    check_pair(fit_x, fit_y, options)?;
    let (bx, by) = (&fit_x.bulk, &fit_y.bulk);
    let mut total = 0.0;
    let mut notes = Vec::new();
    let mut warnings = separation_warnings(fit_x, fit_y);
    for i in 0..fit_x.k {
        let (rx, ry) = (fit_x.spikes[i].theta_hat, fit_y.spikes[i].theta_hat);
        let angle = double_angle(fit_x, fit_y, i);
        let d = g_map(bx, by, rx, ry, angle)?;
        let joint = joint_covariance(fit_x, fit_y, i)?;
        if !joint.is_psd(1e-8) {
            warnings.push(format!("spike {}: joint covariance is not positive semidefinite", i + 1));
        }
        let jac = g_jacobian(bx, by, rx, ry)?;
        let cov = jac * joint.matrix() * jac.transpose();
        let contribution = quadratic_form(fit_x.m, d, &cov)?;
        total += contribution;
        let tag = |name: &str| format!("spike{}.{name}", i + 1);
        notes.extend([
            (tag("theta_diff"), d[0]),
            (tag("double_angle"), angle),
            (tag("alpha_sq"), angle - d[1]),
            (tag("var_theta"), cov[(0, 0)]),
            (tag("var_angle"), cov[(1, 1)]),
            (tag("cov_theta_angle"), cov[(0, 1)]),
            (tag("contribution"), contribution),
        ]);
    }
    let df = 2 * fit_x.k;
    let p = chi_square_sf(total, df as f64);
    let mut report = TestReport::new(Method::T2, Statistic::Scalar(total), Reference::ChiSquare { df }, p, options.level);
    for (name, value) in notes {
        report.note(name, value);
    }
    report.warnings = warnings;
    Ok(report)
}

/// Extreme residual spikes for one spike pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualSpikes {
    pub plus: f64,
    pub minus: f64,
    /// Squared overlap of the Y spike with the X spike subspace.
    pub overlap: f64,
    /// The radicand was negative and clamped to zero.
    pub clamped: bool,
}

/// Closed form of the two nontrivial eigenvalues of the whitened rank-two update.
pub fn t3_closed_form(tx: f64, ty: f64, overlap: f64) -> ResidualSpikes {
    let raw = -4.0 * ty * tx + (1.0 + ty * tx - (tx - 1.0) * (ty - 1.0) * overlap).powi(2);
    let clamped = raw < 0.0;
    let root = raw.max(0.0).sqrt();
    let base = ty + overlap - ty * overlap;
    let lift = 1.0 + (ty - 1.0) * overlap;
    ResidualSpikes {
        plus: 0.5 * (base + (lift + root) / tx),
        minus: 0.5 * (base + (lift - root) / tx),
        overlap,
        clamped,
    }
}

/// Residual spikes of pair `s` from the closed form.
pub fn t3_residual_spikes(fit_x: &PopulationFit, fit_y: &PopulationFit, s: usize) -> Result<ResidualSpikes> {
    if fit_x.m != fit_y.m {
        return Err(Error::DimensionMismatch { expected: fit_x.m, found: fit_y.m });
    }
    fit_y.spike(s)?;
    Ok(t3_closed_form(fit_x.theta_unbiased(s)?, fit_y.theta_unbiased(s)?, residual_overlap(fit_x, fit_y, s)))
}

fn extreme_shifted(weights: &[f64], vectors: &[DVector<f64>], dim: usize) -> Result<(f64, f64)> {
    let (w, v): (Vec<f64>, Vec<DVector<f64>>) =
        weights.iter().zip(vectors).filter(|(w, _)| **w != 0.0).map(|(w, v)| (*w, v.clone())).unzip();
    let mut values: Vec<f64> =
        if w.is_empty() { Vec::new() } else { gram_spectrum(&w, &v)?.eigenvalues().iter().map(|g| 1.0 + g).collect() };
    if values.len() < dim {
        values.push(1.0);
    }
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((hi, lo))
}

/// Residual spikes of pair `s` from an eigen-solve of the rank-two reduction the closed form describes.
///
/// The Y spike is replaced by the unit vector with the same overlap placed on the
/// X spike `s`, which for a single spike is the Y spike itself up to sign.
pub fn t3_residual_spikes_direct(fit_x: &PopulationFit, fit_y: &PopulationFit, s: usize) -> Result<(f64, f64)> {
    let (tx, ty) = (fit_x.theta_unbiased(s)?, fit_y.theta_unbiased(s)?);
    let u = &fit_x.spike(s)?.vector;
    let y = &fit_y.spike(s)?.vector;
    let overlap = residual_overlap(fit_x, fit_y, s);
    let mut w = y.clone();
    for sx in &fit_x.spikes {
        w.axpy(-sx.vector.dot(y), &sx.vector, 1.0);
    }
    w.axpy(overlap.sqrt(), u, 1.0);
    let v = &w + u * ((1.0 / tx.sqrt() - 1.0) * u.dot(&w));
    let norm_sq = v.norm_squared();
    extreme_shifted(&[1.0 / tx - 1.0, (ty - 1.0) * norm_sq], &[u.clone(), v / norm_sq.sqrt()], 2)
}

/// Extreme eigenvalues of `Σ̂̂_X^{-1/2}(I + (θ̂̂_Y − 1) û_Y û_Yᵀ)Σ̂̂_X^{-1/2}` with all `k` X spikes filtered.
pub fn t3_residual_spikes_full(fit_x: &PopulationFit, fit_y: &PopulationFit, s: usize) -> Result<(f64, f64)> {
    let ty = fit_y.theta_unbiased(s)?;
    let y = &fit_y.spike(s)?.vector;
    let mut v = y.clone();
    let mut weights = Vec::with_capacity(fit_x.k + 1);
    let mut vectors = Vec::with_capacity(fit_x.k + 1);
    for (i, sx) in fit_x.spikes.iter().enumerate() {
        let t = fit_x.theta_unbiased(i)?;
        v.axpy((1.0 / t.sqrt() - 1.0) * sx.vector.dot(y), &sx.vector, 1.0);
        weights.push(1.0 / t - 1.0);
        vectors.push(sx.vector.clone());
    }
    let norm_sq = v.norm_squared();
    weights.push((ty - 1.0) * norm_sq);
    vectors.push(v / norm_sq.sqrt());
    extreme_shifted(&weights, &vectors, fit_x.m)
}

pub fn t3_test(
    fit_x: &PopulationFit,
    fit_y: &PopulationFit,
    calibration: Option<&ResidualCalibration>,
    options: &TestOptions,
) -> Result<TestReport> {
    let calibration = calibration.ok_or_else(|| Error::MissingCalibration(Method::T3.to_string()))?;
    check_pair(fit_x, fit_y, options)?;
    let k = fit_x.k;
    let root_m = (fit_x.m as f64).sqrt();
    let mut max_plus = f64::NEG_INFINITY;
    let mut min_minus = f64::INFINITY;
    let mut smallest_tail: f64 = 1.0;
    let mut notes = Vec::new();
    let mut warnings = separation_warnings(fit_x, fit_y);
    for s in 0..k {
        let spikes = t3_residual_spikes(fit_x, fit_y, s)?;
        if spikes.clamped {
            warnings.push(format!("spike {}: negative radicand clamped to zero", s + 1));
        }
        let z_plus = root_m * (spikes.plus - calibration.lambda_plus) / calibration.sigma_plus;
        let z_minus = root_m * (spikes.minus - calibration.lambda_minus) / calibration.sigma_minus;
        max_plus = max_plus.max(z_plus);
        min_minus = min_minus.min(z_minus);
        smallest_tail = smallest_tail.min(normal_sf(z_plus)).min(normal_cdf(z_minus));
        let tag = |name: &str| format!("spike{}.{name}", s + 1);
        notes.extend([
            (tag("residual_plus"), spikes.plus),
            (tag("residual_minus"), spikes.minus),
            (tag("overlap"), spikes.overlap),
            (tag("z_plus"), z_plus),
            (tag("z_minus"), z_minus),
        ]);
    }
    let p = (2.0 * k as f64 * smallest_tail).min(1.0);
    let reference = Reference::BonferroniNormal {
        spikes: k,
        lambda_plus: calibration.lambda_plus,
        sigma_plus: calibration.sigma_plus,
        lambda_minus: calibration.lambda_minus,
        sigma_minus: calibration.sigma_minus,
    };
    let mut report =
        TestReport::new(Method::T3, Statistic::ResidualPair { plus: max_plus, minus: min_minus }, reference, p, options.level);
    let bound = 1.0 - options.level / (2.0 * k as f64);
    report.note("critical_upper", normal_quantile(bound));
    report.note("critical_lower", normal_quantile(1.0 - bound));
    for (name, value) in notes {
        report.note(name, value);
    }
    report.warnings = warnings;
    Ok(report)
}

/// Nonzero eigenvalues of `Σ̂_X^{-1/2} Σ̂_Y Σ̂_X^{-1/2}` on the range of `Σ̂_X`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhitenedSpectrum {
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    pub rank_x: usize,
}

impl WhitenedSpectrum {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Sum of the logarithms of the nonzero eigenvalues.
    pub fn log_det(&self) -> f64 {
        self.eigenvalues.iter().map(|v| v.ln()).sum()
    }
}

fn range_basis(eigen_x: &CovarianceEigen) -> (DMatrix<f64>, Vec<f64>) {
    let values = eigen_x.spectrum.eigenvalues();
    let top = values[0].max(0.0);
    let rank = values.iter().take(eigen_x.stored()).take_while(|&&v| v > RANK_TOLERANCE * top && v > 0.0).count();
    let scales: Vec<f64> = values[..rank].iter().map(|v| 1.0 / v.sqrt()).collect();
    (eigen_x.vectors.columns(0, rank).into_owned(), scales)
}

fn finish_whitening(mut b: DMatrix<f64>, scales: &[f64]) -> Result<WhitenedSpectrum> {
    let rank_x = scales.len();
    for j in 0..rank_x {
        for i in 0..rank_x {
            b[(i, j)] *= scales[i] * scales[j];
        }
    }
    let trace = b.trace();
    let spectrum = eigenvalues_sym(&b)?;
    let top = spectrum.max().max(0.0);
    let eigenvalues = spectrum.eigenvalues().iter().copied().filter(|&v| v > RANK_TOLERANCE * top && v > 0.0).collect();
    Ok(WhitenedSpectrum { eigenvalues, trace, rank_x })
}

/// Whitened spectrum from two covariance matrices.
pub fn whitened_spectrum(cov_x: &DMatrix<f64>, cov_y: &DMatrix<f64>) -> Result<WhitenedSpectrum> {
    if cov_x.shape() != cov_y.shape() {
        return Err(Error::DimensionMismatch { expected: cov_x.nrows(), found: cov_y.nrows() });
    }
    let eigen_x = CovarianceEigen::from_covariance(cov_x, SignConvention::Unchanged)?;
    let (basis, scales) = range_basis(&eigen_x);
    if scales.is_empty() {
        return Ok(WhitenedSpectrum { eigenvalues: Vec::new(), trace: 0.0, rank_x: 0 });
    }
    let b = basis.transpose() * cov_y * &basis;
    finish_whitening((&b + b.transpose()) * 0.5, &scales)
}

/// Whitened spectrum using a precomputed decomposition of `Σ̂_X` and the raw Y observations.
pub fn whitened_spectrum_from_data(eigen_x: &CovarianceEigen, data_y: &DataMatrix) -> Result<WhitenedSpectrum> {
    if eigen_x.dim() != data_y.m() {
        return Err(Error::DimensionMismatch { expected: eigen_x.dim(), found: data_y.m() });
    }
    let (basis, scales) = range_basis(eigen_x);
    if scales.is_empty() {
        return Ok(WhitenedSpectrum { eigenvalues: Vec::new(), trace: 0.0, rank_x: 0 });
    }
    let projected = basis.tr_mul(&data_y.values);
    let raw = &projected * projected.transpose();
    finish_whitening((&raw + raw.transpose()) * (0.5 / data_y.n() as f64), &scales)
}

/// `log |Σ̂_X^{-1/2} Σ̂_Y Σ̂_X^{-1/2}|` over nonzero eigenvalues.
pub fn t4_logdet(cov_x: &DMatrix<f64>, cov_y: &DMatrix<f64>) -> Result<f64> {
    Ok(whitened_spectrum(cov_x, cov_y)?.log_det())
}

/// `trace(Σ̂_X^{-1/2} Σ̂_Y Σ̂_X^{-1/2})` with the generalized inverse on the range of `Σ̂_X`.
pub fn t5_trace(cov_x: &DMatrix<f64>, cov_y: &DMatrix<f64>) -> Result<f64> {
    Ok(whitened_spectrum(cov_x, cov_y)?.trace)
}

/// T4 or T5 referred to a simulated null sample with a two-sided empirical p-value.
pub fn baseline_test(
    method: Method,
    whitened: &WhitenedSpectrum,
    calibration: Option<&EmpiricalCalibration>,
    level: f64,
) -> Result<TestReport> {
    let value = match method {
        Method::T4 => whitened.log_det(),
        Method::T5 => whitened.trace,
        other => return Err(Error::InvalidParam(format!("{other} is not a baseline statistic"))),
    };
    let calibration = calibration.ok_or_else(|| Error::MissingCalibration(method.to_string()))?;
    let p = calibration.two_sided_p_value(value);
    let reference = Reference::Empirical {
        reps: calibration.len(),
        lower: calibration.quantile(level / 2.0),
        upper: calibration.quantile(1.0 - level / 2.0),
    };
    let mut report = TestReport::new(method, Statistic::Scalar(value), reference, p, level);
    report.note("rank_x", whitened.rank_x as f64);
    report.note("rank", whitened.rank() as f64);
    Ok(report)
}
