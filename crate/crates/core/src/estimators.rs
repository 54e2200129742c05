//! Spike estimation for a single population.
//!
//! A [`PopulationFit`] splits the sample spectrum into the `k` largest
//! eigenvalues, treated as spikes, and the remaining bulk. Each spike
//! carries its raw eigenvalue, the bias-corrected strength obtained by
//! inverting the bulk resolvent, and its eigenvector.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::datagen::{sample_covariance, DataMatrix, PerturbationSpec, EQUAL_SPIKE_TOLERANCE};
use crate::error::{Error, Result};
use crate::spectral::{eig_sym_with, m_functional, SignConvention, Spectrum};

/// Default threshold on the gap ratio above which a spike counts as separated.
pub const DEFAULT_GAP_THRESHOLD: f64 = 0.5;

/// Relative eigenvalue floor used to decide the numerical rank of a covariance.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Eigenvalues of a sample covariance with its leading eigenvectors.
///
/// When the data have fewer observations than variables the decomposition
/// goes through the `n × n` Gram matrix, so only the `n` eigenvectors with
/// nonzero eigenvalue are stored; the spectrum is padded with zeros.
#[derive(Debug, Clone)]
pub struct CovarianceEigen {
    pub spectrum: Spectrum,
    pub vectors: DMatrix<f64>,
    pub n: Option<usize>,
}

impl CovarianceEigen {
    pub fn from_covariance(cov: &DMatrix<f64>, convention: SignConvention) -> Result<Self> {
        let sys = eig_sym_with(cov, convention)?;
        Ok(Self { spectrum: sys.spectrum, vectors: sys.vectors, n: None })
    }

    pub fn from_data(data: &DataMatrix, convention: SignConvention) -> Result<Self> {
        let (m, n) = (data.m(), data.n());
        if n >= m {
            let mut out = Self::from_covariance(&sample_covariance(data), convention)?;
            out.n = Some(n);
            return Ok(out);
        }
        let raw = data.values.tr_mul(&data.values);
        let gram = (&raw + raw.transpose()) * (0.5 / n as f64);
        let dual = eig_sym_with(&gram, SignConvention::Unchanged)?;
        let top = dual.spectrum.max().max(0.0);
        let rank = dual.spectrum.eigenvalues().iter().take_while(|&&v| v > RANK_TOLERANCE * top && v > 0.0).count();
        let mut vectors = DMatrix::zeros(m, rank);
        for i in 0..rank {
            let mut column = &data.values * dual.vectors.column(i);
            column.normalize_mut();
            vectors.set_column(i, &column);
        }
        convention.apply(&mut vectors);
        let mut values = dual.spectrum.eigenvalues().to_vec();
        values.resize(m, 0.0);
        Ok(Self { spectrum: Spectrum::new(values)?, vectors, n: Some(n) })
    }

    pub fn dim(&self) -> usize {
        self.spectrum.dim()
    }

    /// Number of stored eigenvectors.
    pub fn stored(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Estimates attached to one spike of one population.
#[derive(Debug, Clone, Serialize)]
pub struct SpikeEstimate {
    /// Zero-based position among the spikes (0 is the largest).
    pub index: usize,
    /// Raw sample eigenvalue.
    pub theta_hat: f64,
    /// Bias-corrected strength, absent when the bulk resolvent cannot be inverted.
    pub theta_unbiased: Option<f64>,
    #[serde(skip)]
    pub vector: DVector<f64>,
    /// Squared projection on the reference spike subspace, when one is known.
    pub alpha_sq: Option<f64>,
}

/// Separation of a spike from the bulk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detectability {
    pub separated: bool,
    pub gap_ratio: f64,
}

/// Non-fatal findings recorded while fitting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum FitWarning {
    EqualSpikes { first: usize, second: usize },
    NotSeparated { index: usize, gap_ratio: f64 },
    NotDetectable { index: usize },
}

impl std::fmt::Display for FitWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitWarning::EqualSpikes { first, second } => {
                write!(f, "spikes {} and {} have equal eigenvalues", first + 1, second + 1)
            }
            FitWarning::NotSeparated { index, gap_ratio } => {
                write!(f, "spike {} lies inside the bulk (gap ratio {gap_ratio:.3})", index + 1)
            }
            FitWarning::NotDetectable { index } => write!(f, "spike {} cannot be bias corrected", index + 1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub gap_threshold: f64,
    pub sign_convention: SignConvention,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { gap_threshold: DEFAULT_GAP_THRESHOLD, sign_convention: SignConvention::default() }
    }
}

/// Spike structure of one population.
#[derive(Debug, Clone)]
pub struct PopulationFit {
    pub k: usize,
    pub m: usize,
    pub n: Option<usize>,
    pub spectrum: Spectrum,
    pub bulk: Spectrum,
    pub spikes: Vec<SpikeEstimate>,
    pub detectability: Vec<Detectability>,
    pub warnings: Vec<FitWarning>,
}

/// Fits `k` spikes to a covariance matrix with default options.
pub fn fit_population(cov: &DMatrix<f64>, k: usize) -> Result<PopulationFit> {
    PopulationFit::from_covariance(cov, k, &FitOptions::default())
}

impl PopulationFit {
    pub fn from_covariance(cov: &DMatrix<f64>, k: usize, options: &FitOptions) -> Result<Self> {
        check_spike_count(k, cov.nrows())?;
        Self::from_eigen(&CovarianceEigen::from_covariance(cov, options.sign_convention)?, k, options)
    }

    pub fn from_data(data: &DataMatrix, k: usize, options: &FitOptions) -> Result<Self> {
        check_spike_count(k, data.m())?;
        Self::from_eigen(&CovarianceEigen::from_data(data, options.sign_convention)?, k, options)
    }

    pub fn from_eigen(eigen: &CovarianceEigen, k: usize, options: &FitOptions) -> Result<Self> {
        let m = eigen.dim();
        check_spike_count(k, m)?;
        if !eigen.spectrum.is_nonnegative(RANK_TOLERANCE) {
            return Err(Error::InvalidParam("covariance is not positive semidefinite".into()));
        }
        let bulk = eigen.spectrum.tail(k)?;
        let mut warnings = Vec::new();
        let mut spikes = Vec::with_capacity(k);
        let mut separation = Vec::with_capacity(k);
        for index in 0..k {
            let theta_hat = eigen.spectrum.eigenvalues()[index];
            let theta_unbiased = unbiased_from_bulk(&bulk, theta_hat).ok();
            if theta_unbiased.is_none() {
                warnings.push(FitWarning::NotDetectable { index });
            }
            let vector = if index < eigen.stored() {
                eigen.vectors.column(index).into_owned()
            } else {
                return Err(Error::NonDetectable(index));
            };
            spikes.push(SpikeEstimate { index, theta_hat, theta_unbiased, vector, alpha_sq: None });
            let diagnostic = detectability(&eigen.spectrum, k, index, options.gap_threshold)?;
            if !diagnostic.separated {
                warnings.push(FitWarning::NotSeparated { index, gap_ratio: diagnostic.gap_ratio });
            }
            separation.push(diagnostic);
        }
        for i in 0..k {
            for j in (i + 1)..k {
                let (a, b) = (spikes[i].theta_hat, spikes[j].theta_hat);
                if (a - b).abs() < EQUAL_SPIKE_TOLERANCE * a.abs() {
                    warnings.push(FitWarning::EqualSpikes { first: i, second: j });
                }
            }
        }
        Ok(Self { k, m, n: eigen.n, spectrum: eigen.spectrum.clone(), bulk, spikes, detectability: separation, warnings })
    }

    /// Fills in `alpha_sq` as the squared projection of each spike vector on the reference directions.
    pub fn with_reference(mut self, reference: &PerturbationSpec) -> Result<Self> {
        if reference.dim() != self.m {
            return Err(Error::DimensionMismatch { expected: self.m, found: reference.dim() });
        }
        for spike in &mut self.spikes {
            let total = reference.spikes().iter().map(|r| r.direction.dot(&spike.vector).powi(2)).sum();
            spike.alpha_sq = Some(total);
        }
        Ok(self)
    }

    /// The first equal-spike pair found while fitting, if any.
    pub fn equal_spikes(&self) -> Option<(usize, usize)> {
        self.warnings.iter().find_map(|w| match *w {
            FitWarning::EqualSpikes { first, second } => Some((first, second)),
            _ => None,
        })
    }

    /// Bias-corrected strength of spike `s`, failing when it is not available.
    pub fn theta_unbiased(&self, s: usize) -> Result<f64> {
        self.spike(s)?.theta_unbiased.ok_or(Error::NonDetectable(s))
    }

    pub fn spike(&self, s: usize) -> Result<&SpikeEstimate> {
        self.spikes.get(s).ok_or_else(|| Error::InvalidParam(format!("spike index {s} out of range (k={})", self.k)))
    }
}

fn check_spike_count(k: usize, m: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParam("spike count must be at least 1".into()));
    }
    if k >= m {
        return Err(Error::SpikeCountTooLarge { k, m });
    }
    Ok(())
}

/// `1 + 1/M₁,₁(θ̂)` over the given bulk. A non-positive resolvent reports spike 0.
pub fn unbiased_from_bulk(bulk: &Spectrum, theta_hat: f64) -> Result<f64> {
    let resolvent = m_functional(bulk, theta_hat, 1, 1, 0)?;
    if resolvent <= 0.0 {
        return Err(Error::NonDetectable(0));
    }
    Ok(1.0 + 1.0 / resolvent)
}

/// Derivative of [`unbiased_from_bulk`] with respect to the raw eigenvalue: `M₁,₂/M₁,₁²`.
pub fn unbiased_derivative(bulk: &Spectrum, theta_hat: f64) -> Result<f64> {
    let m11 = m_functional(bulk, theta_hat, 1, 1, 0)?;
    let m12 = m_functional(bulk, theta_hat, 1, 2, 0)?;
    Ok(m12 / (m11 * m11))
}

/// Bias-corrected strength of spike `s` of a fit.
pub fn unbiased_theta(fit: &PopulationFit, s: usize) -> Result<f64> {
    let spike = fit.spike(s)?;
    unbiased_from_bulk(&fit.bulk, spike.theta_hat).map_err(|e| match e {
        Error::NonDetectable(_) => Error::NonDetectable(s),
        other => other,
    })
}

/// Gap-ratio diagnostic `(λ_s − λ_{k+1}) / (λ_{k+1} − λ_m)` computed on a full spectrum.
pub fn detectability(spectrum: &Spectrum, k: usize, s: usize, threshold: f64) -> Result<Detectability> {
    let m = spectrum.dim();
    if m < 2 {
        return Err(Error::DimensionTooSmall(m));
    }
    if k >= m {
        return Err(Error::SpikeCountTooLarge { k, m });
    }
    if s >= k {
        return Err(Error::InvalidParam(format!("spike index {s} out of range (k={k})")));
    }
    let values = spectrum.eigenvalues();
    let edge = values[k];
    let spread = edge - values[m - 1];
    let lift = values[s] - edge;
    let gap_ratio = if spread > 0.0 {
        lift / spread
    } else if lift > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(Detectability { separated: gap_ratio > threshold, gap_ratio })
}

/// Detectability of spike `s` in a fit, using the default gap threshold.
pub fn check_detectable(fit: &PopulationFit, s: usize) -> Result<Detectability> {
    detectability(&fit.spectrum, fit.k, s, DEFAULT_GAP_THRESHOLD)
}

/// Estimated squared angle between a sample spike vector and its population direction.
pub fn angle_estimate(theta_unbiased: f64, theta_hat: f64, bulk: &Spectrum) -> Result<f64> {
    let shift = theta_unbiased - 1.0;
    if shift.abs() <= 1e-12 * theta_unbiased.abs().max(1.0) {
        return Err(Error::DivisionByZero("bias-corrected spike equals 1"));
    }
    let m12 = m_functional(bulk, theta_hat, 1, 2, 0)?;
    Ok(theta_unbiased / (shift * shift * theta_hat * m12))
}

/// Expected double angle between matching spike vectors of two populations.
pub fn alpha_sq_theoretical(
    theta_unbiased_x: f64,
    theta_unbiased_y: f64,
    theta_hat_x: f64,
    theta_hat_y: f64,
    bulk_x: &Spectrum,
    bulk_y: &Spectrum,
) -> Result<f64> {
    Ok(angle_estimate(theta_unbiased_x, theta_hat_x, bulk_x)? * angle_estimate(theta_unbiased_y, theta_hat_y, bulk_y)?)
}

/// `I + Σ (θ̂̂_i − 1) û_i û_iᵀ` stored in rank-k form.
#[derive(Debug, Clone)]
pub struct FilteredCovariance {
    dim: usize,
    spikes: Vec<(f64, DVector<f64>)>,
}

impl FilteredCovariance {
    pub fn identity(dim: usize) -> Self {
        Self { dim, spikes: Vec::new() }
    }

    /// Builds the update from `(strength, unit vector)` pairs with orthonormal vectors.
    pub fn new(dim: usize, spikes: Vec<(f64, DVector<f64>)>) -> Result<Self> {
        let mut worst = 0.0_f64;
        for (i, (theta, u)) in spikes.iter().enumerate() {
            if u.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: u.len() });
            }
            if !(theta.is_finite() && *theta > 0.0) {
                return Err(Error::InvalidParam(format!("filtered strength {theta} must be positive")));
            }
            for (j, (_, v)) in spikes.iter().enumerate().skip(i) {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((u.dot(v) - target).abs());
            }
        }
        if worst > 1e-8 {
            return Err(Error::NotOrthonormal(worst));
        }
        Ok(Self { dim, spikes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spikes(&self) -> &[(f64, DVector<f64>)] {
        &self.spikes
    }

    /// Applies the matrix raised to `power`.
    pub fn apply_power(&self, v: &DVector<f64>, power: f64) -> DVector<f64> {
        let mut out = v.clone();
        for (theta, u) in &self.spikes {
            out.axpy((theta.powf(power) - 1.0) * u.dot(v), u, 1.0);
        }
        out
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_power(v, 1.0)
    }

    pub fn apply_inv_sqrt(&self, v: &DVector<f64>) -> DVector<f64> {
        self.apply_power(v, -0.5)
    }

    pub fn log_det(&self) -> f64 {
        self.spikes.iter().map(|(theta, _)| theta.ln()).sum()
    }

    pub fn to_dense_power(&self, power: f64) -> DMatrix<f64> {
        let mut out = DMatrix::identity(self.dim, self.dim);
        for (theta, u) in &self.spikes {
            out += u * u.transpose() * (theta.powf(power) - 1.0);
        }
        out
    }
}

/// The filtered covariance of a fit; every spike must have a bias-corrected strength.
pub fn filtered_covariance(fit: &PopulationFit) -> Result<FilteredCovariance> {
    let spikes = fit
        .spikes
        .iter()
        .map(|s| Ok((s.theta_unbiased.ok_or(Error::NonDetectable(s.index))?, s.vector.clone())))
        .collect::<Result<Vec<_>>>()?;
    FilteredCovariance::new(fit.m, spikes)
}
