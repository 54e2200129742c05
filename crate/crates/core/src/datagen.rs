//! Synthetic spiked data: AR(1)-dependent Gaussian observations, spike
//! perturbations and sample covariances. Rows are variables, columns are
//! observations.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Tolerance on `|⟨u_i,u_j⟩ − δ_ij|` for spike directions.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-10;

/// Relative tolerance under which two spike strengths count as equal.
pub const EQUAL_SPIKE_TOLERANCE: f64 = 1e-6;

/// One rank-one component of a perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct Spike {
    pub theta: f64,
    pub direction: DVector<f64>,
}

impl Spike {
    pub fn new(theta: f64, direction: DVector<f64>) -> Self {
        Self { theta, direction }
    }

    /// A spike along the standard basis vector `index` (zero based).
    pub fn canonical(dim: usize, theta: f64, index: usize) -> Self {
        Self { theta, direction: basis_vector(dim, index) }
    }
}

pub fn basis_vector(dim: usize, index: usize) -> DVector<f64> {
    DVector::from_fn(dim, |i, _| if i == index { 1.0 } else { 0.0 })
}

/// The multiplicative spike model `P = I + Σ (θ_i − 1) u_i u_iᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    dim: usize,
    spikes: Vec<Spike>,
    canonical: bool,
}

impl PerturbationSpec {
    /// Validates the spikes and orders them by decreasing strength.
    pub fn new(dim: usize, mut spikes: Vec<Spike>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionTooSmall(0));
        }
        for spike in &spikes {
            if !(spike.theta.is_finite() && spike.theta > 0.0) {
                return Err(Error::InvalidParam(format!("spike strength {} must be positive", spike.theta)));
            }
            if spike.direction.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: spike.direction.len() });
            }
        }
        let mut worst = 0.0_f64;
        for (i, a) in spikes.iter().enumerate() {
            for (j, b) in spikes.iter().enumerate().skip(i) {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((a.direction.dot(&b.direction) - target).abs());
            }
        }
        if worst > ORTHONORMAL_TOLERANCE {
            return Err(Error::NotOrthonormal(worst));
        }
        spikes.sort_by(|a, b| b.theta.total_cmp(&a.theta));
        let canonical = spikes.iter().all(|s| {
            s.direction.iter().filter(|v| **v != 0.0).count() == 1 && s.direction.iter().any(|v| *v == 1.0)
        });
        Ok(Self { dim, spikes, canonical })
    }

    /// Spikes along standard basis vectors, given as `(theta, zero-based index)`.
    pub fn canonical(dim: usize, spikes: &[(f64, usize)]) -> Result<Self> {
        if let Some(&(_, index)) = spikes.iter().find(|(_, i)| *i >= dim) {
            return Err(Error::DimensionMismatch { expected: dim, found: index + 1 });
        }
        Self::new(dim, spikes.iter().map(|&(theta, index)| Spike::canonical(dim, theta, index)).collect())
    }

    pub fn identity(dim: usize) -> Self {
        Self { dim, spikes: Vec::new(), canonical: true }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.spikes.len()
    }

    pub fn spikes(&self) -> &[Spike] {
        &self.spikes
    }

    pub fn is_canonical(&self) -> bool {
        self.canonical
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.spikes.iter().map(|s| s.theta).collect()
    }

    /// Index pairs whose strengths coincide within the equal-spike tolerance.
    pub fn equal_spikes(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for i in 0..self.spikes.len() {
            for j in (i + 1)..self.spikes.len() {
                let (a, b) = (self.spikes[i].theta, self.spikes[j].theta);
                if (a - b).abs() < EQUAL_SPIKE_TOLERANCE * a {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }

    /// Dense `P^{power}`, built from the eigen-structure of the update.
    pub fn dense_power(&self, power: f64) -> DMatrix<f64> {
        let mut out = DMatrix::identity(self.dim, self.dim);
        for spike in &self.spikes {
            out += &spike.direction * spike.direction.transpose() * (spike.theta.powf(power) - 1.0);
        }
        out
    }
}

/// How a data matrix was produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationMeta {
    pub rho: Option<f64>,
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
    pub perturbed: bool,
}

/// Observations stored with variables in rows and observations in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    pub values: DMatrix<f64>,
    pub meta: GenerationMeta,
}

impl DataMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::DimensionTooSmall(values.nrows().min(values.ncols())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("data contains non-finite entries".into()));
        }
        Ok(Self { values, meta: GenerationMeta::default() })
    }

    /// Number of variables.
    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.values.ncols()
    }
}

fn check_ar1_params(m: usize, n: usize, rho: f64, sigma: f64) -> Result<()> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidParam(format!("dimensions must be positive (m={m}, n={n})")));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidParam(format!("rho={rho} must lie in [0,1)")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidParam(format!("sigma={sigma} must be positive")));
    }
    Ok(())
}

/// AR(1) Gaussian columns drawn from a caller-supplied generator.
pub fn gen_ar1_gaussian_from<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    rho: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<DataMatrix> {
    check_ar1_params(m, n, rho, sigma)?;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut values = DMatrix::<f64>::zeros(m, n);
    for j in 0..n {
        for i in 0..m {
            let eps: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
            values[(i, j)] = if j == 0 { eps } else { rho * values[(i, j - 1)] + innovation * eps };
        }
    }
    Ok(DataMatrix { values, meta: GenerationMeta { rho: Some(rho), sigma: Some(sigma), seed: None, perturbed: false } })
}

/// `m × n` matrix whose columns follow `X_{i+1} = ρ X_i + √(1−ρ²) ε`, with `ε ~ N(0, σ² I)`.
pub fn gen_ar1_gaussian(m: usize, n: usize, rho: f64, sigma: f64, seed: u64) -> Result<DataMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = gen_ar1_gaussian_from(m, n, rho, sigma, &mut rng)?;
    data.meta.seed = Some(seed);
    Ok(data)
}

/// Left-multiplies the data by `P^{1/2}` using the rank-k form of the square root.
pub fn apply_perturbation(data: &DataMatrix, p: &PerturbationSpec) -> Result<DataMatrix> {
    if p.dim() != data.m() {
        return Err(Error::DimensionMismatch { expected: data.m(), found: p.dim() });
    }
    let mut values = data.values.clone();
    for spike in p.spikes() {
        let scale = spike.theta.sqrt() - 1.0;
        if scale == 0.0 {
            continue;
        }
        let loadings = data.values.tr_mul(&spike.direction);
        values.ger(scale, &spike.direction, &loadings, 1.0);
    }
    Ok(DataMatrix { values, meta: GenerationMeta { perturbed: true, ..data.meta.clone() } })
}

/// `X Xᵀ / n`, symmetrized to machine precision.
pub fn sample_covariance(data: &DataMatrix) -> DMatrix<f64> {
    let n = data.n() as f64;
    let raw = &data.values * data.values.transpose();
    (&raw + raw.transpose()) * (0.5 / n)
}
