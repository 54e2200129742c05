//! Numerical checks of how spike estimates behave when more spikes are added.
//!
//! Each check simulates Wishart-type noise `W` (normalised to trace `m`),
//! perturbs it canonically with one, two or `k` spikes and compares the
//! resulting eigenstructure. Order-size claims are turned into log-log
//! regression slopes over the grid of dimensions and strengths; distributional
//! claims into Kolmogorov–Smirnov distances; algebraic identities are checked
//! on every replication.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::datagen::{apply_perturbation, gen_ar1_gaussian_from, DataMatrix, PerturbationSpec};
use crate::error::{Error, Result};
use crate::estimators::{CovarianceEigen, FitOptions, PopulationFit};
use crate::rng::{stream_id, stream_rng, DOMAIN_LAB};
use crate::spectral::SignConvention;
use crate::stats::{ks_distance_normal, mean, median, std_dev};

/// Tolerance for identities that hold exactly in exact arithmetic.
pub const EXACT_TOLERANCE: f64 = 1e-8;
/// Tolerance for the basis-completion identity.
pub const BASIS_TOLERANCE: f64 = 1e-12;
/// Allowed deviation of a regression slope from its predicted value.
pub const SLOPE_TOLERANCE: f64 = 0.3;
/// Largest accepted Kolmogorov–Smirnov distance.
pub const KS_THRESHOLD: f64 = 0.1;

const PANEL_STREAM: u64 = 1;
const DISTRIBUTION_STREAM: u64 = 2;
const BASIS_STREAM: u64 = 3;
const QUALITY_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoremId {
    Eigenvalue,
    Angle,
    DotProduct,
    InvariantDot,
    Component,
    DoubleAngle,
    DoubleDot,
    LemmaW,
}

impl TheoremId {
    pub const ALL: [TheoremId; 8] = [
        TheoremId::Eigenvalue,
        TheoremId::Angle,
        TheoremId::DotProduct,
        TheoremId::InvariantDot,
        TheoremId::Component,
        TheoremId::DoubleAngle,
        TheoremId::DoubleDot,
        TheoremId::LemmaW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TheoremId::Eigenvalue => "eigenvalue",
            TheoremId::Angle => "angle",
            TheoremId::DotProduct => "dot-product",
            TheoremId::InvariantDot => "invariant-dot",
            TheoremId::Component => "component",
            TheoremId::DoubleAngle => "double-angle",
            TheoremId::DoubleDot => "double-dot",
            TheoremId::LemmaW => "lemma-w",
        }
    }

    pub fn predicted_rate(self) -> &'static str {
        match self {
            TheoremId::Eigenvalue => "theta_s/m",
            TheoremId::Angle => "1/(theta_s m)",
            TheoremId::DotProduct => "N(0, V/(theta_1 theta_2 m))",
            TheoremId::InvariantDot => "1/(sqrt(theta_s theta_r) m)",
            TheoremId::Component => "N(0,1) components; tail mass RV(1/theta_1, 1/(theta_1^2 m))",
            TheoremId::DoubleAngle => "1/(theta_s m)",
            TheoremId::DoubleDot => "1/(theta_1 m) + 1/(theta_1^2 sqrt(m))",
            TheoremId::LemmaW => "1/(sqrt(theta) m) + 1/(theta^1.5 sqrt(m)); 1/m",
        }
    }

    fn uses_panel(self) -> bool {
        !matches!(self, TheoremId::DotProduct)
    }

    fn uses_distribution(self) -> bool {
        matches!(self, TheoremId::DotProduct | TheoremId::Component)
    }
}

impl fmt::Display for TheoremId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TheoremId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TheoremId::ALL
            .into_iter()
            .find(|id| id.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown check {s:?}")))
    }
}

/// Which checks to run.
#[derive(Debug, Clone, PartialEq)]
pub enum LabSelection {
    All,
    Only(TheoremId),
}

impl LabSelection {
    pub fn ids(&self) -> Vec<TheoremId> {
        match self {
            LabSelection::All => TheoremId::ALL.to_vec(),
            LabSelection::Only(id) => vec![*id],
        }
    }
}

impl FromStr for LabSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            Ok(LabSelection::All)
        } else {
            s.parse().map(LabSelection::Only)
        }
    }
}

/// Simulation grid shared by all checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabGrid {
    /// Dimensions of the scaling grid.
    pub ms: Vec<usize>,
    /// Base strengths; spike `s` has strength `theta · proportions[s]`.
    pub thetas: Vec<f64>,
    pub proportions: Vec<f64>,
    /// Ratio `m/n` of dimension to sample size.
    pub aspect: f64,
    pub reps: usize,
    /// Extra terms tried in the double-angle robustness check.
    pub eps: Vec<usize>,
    pub distribution_m: usize,
    pub distribution_thetas: (f64, f64),
    pub distribution_reps: usize,
    pub seed: u64,
}

impl Default for LabGrid {
    fn default() -> Self {
        Self {
            ms: vec![100, 200, 400],
            thetas: vec![50.0, 100.0],
            proportions: vec![1.0, 0.6, 0.3],
            aspect: 2.0,
            reps: 200,
            eps: vec![1, 2],
            distribution_m: 500,
            distribution_thetas: (100.0, 50.0),
            distribution_reps: 500,
            seed: 1,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::InvalidConfig(format!("invalid {key} entry {v:?}"))))
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::InvalidConfig(format!("invalid {key} value {value:?}")))
}

impl LabGrid {
    pub fn k(&self) -> usize {
        self.proportions.len()
    }

    pub fn spike_thetas(&self, theta: f64) -> Vec<f64> {
        self.proportions.iter().map(|p| p * theta).collect()
    }

    pub fn sample_size(&self, m: usize) -> usize {
        ((m as f64 / self.aspect).round() as usize).max(1)
    }

    fn max_eps(&self) -> usize {
        self.eps.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 {
            return Err(Error::InvalidConfig("at least one spike proportion is required".into()));
        }
        for i in 0..k {
            for j in (i + 1)..k {
                if (self.proportions[i] - self.proportions[j]).abs() <= 1e-12 * self.proportions[i].abs() {
                    return Err(Error::EqualSpikes { first: i, second: j });
                }
            }
        }
        if self.proportions.iter().any(|p| !(*p > 0.0)) || self.thetas.iter().any(|t| !(*t > 1.0)) {
            return Err(Error::InvalidConfig("spike strengths must exceed 1".into()));
        }
        if self.thetas.iter().flat_map(|&t| self.spike_thetas(t)).any(|t| t <= 1.0) {
            return Err(Error::InvalidConfig("every spike strength must exceed 1".into()));
        }
        if self.ms.is_empty() || self.thetas.is_empty() {
            return Err(Error::InvalidConfig("grid needs at least one m and one theta".into()));
        }
        let needed = k + self.max_eps() + 1;
        for &m in self.ms.iter().chain(std::iter::once(&self.distribution_m)) {
            if m <= needed || self.sample_size(m) < needed {
                return Err(Error::DimensionTooSmall(m));
            }
        }
        if !(self.aspect > 0.0) || self.reps < 2 || self.distribution_reps < 2 {
            return Err(Error::InvalidConfig("aspect must be positive and reps at least 2".into()));
        }
        let (a, b) = self.distribution_thetas;
        if !(a > 1.0 && b > 1.0) || (a - b).abs() <= 1e-12 * a {
            return Err(Error::InvalidConfig("distribution strengths must be distinct and exceed 1".into()));
        }
        Ok(())
    }

    /// Parses `key = value` lines; unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = LabGrid::default();
        for (number, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", number + 1)))?;
            let key = key.trim();
            match key {
                "m" => grid.ms = parse_list(key, value)?,
                "theta" => grid.thetas = parse_list(key, value)?,
                "proportions" => grid.proportions = parse_list(key, value)?,
                "aspect" => grid.aspect = parse_one(key, value)?,
                "reps" => grid.reps = parse_one(key, value)?,
                "eps" => grid.eps = parse_list(key, value)?,
                "distribution_m" => grid.distribution_m = parse_one(key, value)?,
                "distribution_theta" => {
                    let pair: Vec<f64> = parse_list(key, value)?;
                    if pair.len() != 2 {
                        return Err(Error::InvalidConfig("distribution_theta takes two values".into()));
                    }
                    grid.distribution_thetas = (pair[0], pair[1]);
                }
                "distribution_reps" => grid.distribution_reps = parse_one(key, value)?,
                "seed" => grid.seed = parse_one(key, value)?,
                other => return Err(Error::InvalidConfig(format!("unknown grid key {other}"))),
            }
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[String]| v.join(",");
        let strings = |v: &[f64]| join(&v.iter().map(ToString::to_string).collect::<Vec<_>>());
        format!(
            "m = {}\ntheta = {}\nproportions = {}\naspect = {}\nreps = {}\neps = {}\ndistribution_m = {}\ndistribution_theta = {},{}\ndistribution_reps = {}\nseed = {}\n",
            join(&self.ms.iter().map(ToString::to_string).collect::<Vec<_>>()),
            strings(&self.thetas),
            strings(&self.proportions),
            self.aspect,
            self.reps,
            join(&self.eps.iter().map(ToString::to_string).collect::<Vec<_>>()),
            self.distribution_m,
            self.distribution_thetas.0,
            self.distribution_thetas.1,
            self.distribution_reps,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub m: usize,
    pub thetas: Vec<f64>,
    pub reps: usize,
}

/// Per-grid-cell summary used by a decision rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub quantity: String,
    pub m: usize,
    pub theta: f64,
    pub spike: usize,
    pub regressor: f64,
    pub value: f64,
}

/// One decision rule with its observed value and accepted range.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub name: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Informational criteria are reported but do not decide `pass`.
    pub gating: bool,
    pub pass: bool,
}

impl Criterion {
    fn within(name: impl Into<String>, value: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let pass = value.is_finite() && lower.is_none_or(|l| value >= l) && upper.is_none_or(|u| value <= u);
        Self { name: name.into(), value, lower, upper, gating: true, pass }
    }

    fn informational(mut self) -> Self {
        self.gating = false;
        self
    }
}

/// Values recorded for one replication of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRecord {
    pub m: usize,
    pub theta: f64,
    pub rep: usize,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvarianceCheckResult {
    pub theorem_id: TheoremId,
    pub grid: Vec<GridPoint>,
    pub predicted_rate: String,
    pub observed: Vec<Observation>,
    pub criteria: Vec<Criterion>,
    /// Replications on which an exact identity failed.
    pub exact_identity_failures: usize,
    pub pass: bool,
    pub detail: Vec<ReplicationRecord>,
}

impl InvarianceCheckResult {
    fn new(
        theorem_id: TheoremId,
        grid: Vec<GridPoint>,
        observed: Vec<Observation>,
        criteria: Vec<Criterion>,
        exact_identity_failures: usize,
        detail: Vec<ReplicationRecord>,
    ) -> Self {
        let pass = exact_identity_failures == 0 && criteria.iter().filter(|c| c.gating).all(|c| c.pass);
        Self {
            theorem_id,
            grid,
            predicted_rate: theorem_id.predicted_rate().to_string(),
            observed,
            criteria,
            exact_identity_failures,
            pass,
            detail,
        }
    }

    pub fn criterion(&self, name: &str) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.name == name)
    }
}

/// Completes `k` orthonormal vectors to an orthonormal basis of `R^m`.
///
/// The first `k` columns are the inputs verbatim; the rest come from a QR
/// factorisation against Gaussian vectors drawn from `seed`.
pub fn basis_completion(vectors: &[DVector<f64>], dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    let k = vectors.len();
    if k > dim {
        return Err(Error::SpikeCountTooLarge { k, m: dim });
    }
    let mut worst: f64 = 0.0;
    for (i, a) in vectors.iter().enumerate() {
        if a.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: a.len() });
        }
        for (j, b) in vectors.iter().enumerate().skip(i) {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((a.dot(b) - target).abs());
        }
    }
    if worst > 1e-10 {
        return Err(Error::NotOrthonormal(worst));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    for (j, v) in vectors.iter().enumerate() {
        start.set_column(j, v);
    }
    let mut basis = start.qr().q();
    for (j, v) in vectors.iter().enumerate() {
        basis.set_column(j, v);
    }
    Ok(basis)
}

fn max_orthonormality_error(basis: &DMatrix<f64>) -> f64 {
    let gram = basis.tr_mul(basis);
    (gram - DMatrix::identity(basis.ncols(), basis.ncols())).amax()
}

/// Gaussian noise scaled so that `W = XXᵀ/n` has trace `m`.
fn noise(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut x = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let trace = x.norm_squared() / n as f64;
    x *= (m as f64 / trace).sqrt();
    x
}

/// Eigenstructure of `P^{1/2} W P^{1/2}` for a canonical perturbation given as `(coordinate, θ)` pairs.
fn perturbed(noise: &DMatrix<f64>, spikes: &[(usize, f64)]) -> Result<CovarianceEigen> {
    let mut data = noise.clone();
    for &(coordinate, theta) in spikes {
        data.row_mut(coordinate).scale_mut(theta.sqrt());
    }
    CovarianceEigen::from_data(&DataMatrix::new(data)?, SignConvention::Unchanged)
}

fn oriented(eigen: &CovarianceEigen, column: usize, coordinate: usize) -> DVector<f64> {
    let mut v = eigen.vectors.column(column).into_owned();
    if v[coordinate] < 0.0 {
        v.neg_mut();
    }
    v
}

fn tail_dot(a: &DVector<f64>, b: &DVector<f64>, from: usize) -> f64 {
    a.rows(from, a.len() - from).dot(&b.rows(from, b.len() - from))
}

fn theta_key(theta: f64) -> u64 {
    theta.to_bits()
}

struct PanelDraw {
    eigenvalue_diff: Vec<f64>,
    angle_diff: Vec<f64>,
    single_angle: Vec<f64>,
    invariant_dot_diff: Option<f64>,
    double_angle: Vec<f64>,
    double_angle_diff: Vec<f64>,
    eps_change: Vec<Vec<f64>>,
    tail_mass: f64,
    double_dot: Option<DoubleDotDraw>,
    lemma: LemmaDraw,
    m2: f64,
}

struct DoubleDotDraw {
    tail_residual: f64,
    diagonal_residual: f64,
    identity_error: f64,
}

struct LemmaDraw {
    component_residual: f64,
    route_w2_residual: f64,
    route_w_residual: f64,
    cross_residual: f64,
    identity_error: f64,
}

struct PanelCell {
    m: usize,
    theta: f64,
    draws: Vec<PanelDraw>,
}

fn panel_draw(grid: &LabGrid, m: usize, theta: f64, rep: usize) -> Result<PanelDraw> {
    let k = grid.k();
    let n = grid.sample_size(m);
    let thetas = grid.spike_thetas(theta);
    let key = [DOMAIN_LAB, PANEL_STREAM, theta_key(theta), m as u64, rep as u64];
    let mut rng_x = stream_rng(grid.seed, &[key.as_slice(), &[0]].concat());
    let mut rng_y = stream_rng(grid.seed, &[key.as_slice(), &[1]].concat());
    let x = noise(m, n, &mut rng_x);
    let y = noise(m, n, &mut rng_y);
    let all: Vec<(usize, f64)> = thetas.iter().copied().enumerate().collect();
    let full_x = perturbed(&x, &all)?;
    let full_y = perturbed(&y, &all)?;
    let singles_x = (0..k).map(|s| perturbed(&x, &[(s, thetas[s])])).collect::<Result<Vec<_>>>()?;
    let singles_y = (0..k).map(|s| perturbed(&y, &[(s, thetas[s])])).collect::<Result<Vec<_>>>()?;

    let ux: Vec<DVector<f64>> = (0..k).map(|s| oriented(&full_x, s, s)).collect();
    let uy_all: Vec<DVector<f64>> =
        (0..(k + grid.max_eps()).min(full_y.stored())).map(|s| oriented(&full_y, s, s.min(m - 1))).collect();
    let uy = &uy_all[..k];

    let mut eigenvalue_diff = Vec::with_capacity(k);
    let mut angle_diff = Vec::with_capacity(k);
    let mut single_angle = Vec::with_capacity(k);
    let mut double_angle = Vec::with_capacity(k);
    let mut double_angle_diff = Vec::with_capacity(k);
    let mut eps_change = vec![Vec::with_capacity(k); grid.eps.len()];
    for s in 0..k {
        let single = &singles_x[s];
        eigenvalue_diff.push((full_x.spectrum.eigenvalues()[s] - single.spectrum.eigenvalues()[0]).abs());
        let general: f64 = (0..k).map(|i| ux[s][i].powi(2)).sum();
        let lone = single.vectors[(s, 0)].powi(2);
        angle_diff.push((general - lone).abs());
        single_angle.push(lone);

        let lone_double = single.vectors.column(0).dot(&singles_y[s].vectors.column(0)).powi(2);
        let overlaps: Vec<f64> = uy_all.iter().map(|v| ux[s].dot(v).powi(2)).collect();
        let within: f64 = overlaps[..k].iter().sum();
        double_angle.push(within);
        double_angle_diff.push((lone_double - within).abs());
        for (slot, &e) in grid.eps.iter().enumerate() {
            let extended: f64 = overlaps[..(k + e).min(overlaps.len())].iter().sum();
            eps_change[slot].push((extended - within).abs());
        }
    }

    let invariant_dot_diff = if k >= 2 {
        let pair = perturbed(&x, &[(0, thetas[0]), (1, thetas[1])])?;
        let lhs = tail_dot(&ux[0], &ux[1], k);
        let rhs = tail_dot(&oriented(&pair, 0, 0), &oriented(&pair, 1, 1), 2);
        Some((lhs - rhs).abs())
    } else {
        None
    };

    let tail_mass = ux[0].rows(k, m - k).norm_squared();

    let double_dot = if k >= 2 {
        let seed = stream_id(&[DOMAIN_LAB, BASIS_STREAM, theta_key(theta), m as u64, rep as u64]);
        let basis = basis_completion(&ux, m, seed)?;
        let tilde: Vec<DVector<f64>> = uy.iter().map(|v| basis.tr_mul(v)).collect();
        let mut identity_error = max_orthonormality_error(&basis);
        for s in 0..k {
            let lhs: f64 = (0..k).map(|i| tilde[s][i].powi(2)).sum();
            let rhs: f64 = ux.iter().map(|u| u.dot(&uy[s]).powi(2)).sum();
            identity_error = identity_error.max((lhs - rhs).abs());
        }
        let (j, t) = (0, 1);
        let alpha = |q: usize| (0..k).map(|i| ux[q][i].powi(2)).sum::<f64>();
        let lhs = tail_dot(&tilde[j], &tilde[t], k);
        let rhs = tail_dot(&uy[j], &uy[t], k) + tail_dot(&ux[j], &ux[t], k)
            - tail_dot(&ux[j], &uy[t], k)
            - tail_dot(&uy[j], &ux[t], k)
            - (ux[t][j] + uy[j][t]) * (alpha(j) - alpha(t));
        Some(DoubleDotDraw {
            tail_residual: (lhs - rhs).abs(),
            diagonal_residual: (tilde[0][0] - ux[0][0] * uy[0][0]).abs(),
            identity_error,
        })
    } else {
        None
    };

    let lemma = lemma_draw(&x, &singles_x[0], thetas[0]);
    let gram = x.tr_mul(&x) / n as f64;
    let m2 = gram.norm_squared() / m as f64;

    Ok(PanelDraw {
        eigenvalue_diff,
        angle_diff,
        single_angle,
        invariant_dot_diff,
        double_angle,
        double_angle_diff,
        eps_change,
        tail_mass,
        double_dot,
        lemma,
        m2,
    })
}

fn lemma_draw(x: &DMatrix<f64>, single: &CovarianceEigen, theta: f64) -> LemmaDraw {
    let (m, n) = x.shape();
    let r0 = x * x.row(0).transpose() / n as f64;
    let r1 = x * x.row(1).transpose() / n as f64;
    let (w01, w11) = (r0[1], r1[1]);
    let w2_11 = r1.norm_squared();
    let w2_01 = r0.dot(&r1);
    let gram = x.tr_mul(x) / n as f64;
    let m2 = gram.norm_squared() / m as f64;

    let values = single.spectrum.eigenvalues();
    let mut vectors = single.vectors.clone();
    if vectors[(0, 0)] < 0.0 {
        vectors.column_mut(0).neg_mut();
    }
    let sqrt_theta = theta.sqrt();
    let component = vectors[(1, 0)];
    let mut weighted_sq = 0.0;
    let mut cross = 0.0;
    for i in 1..vectors.ncols() {
        weighted_sq += values[i].powi(2) * vectors[(1, i)].powi(2);
        cross += values[i] * vectors[(0, i)] * vectors[(1, i)];
    }
    let route = w2_11 + (theta - 1.0) * w01 * w01 - values[0].powi(2) * component.powi(2);
    LemmaDraw {
        component_residual: (component - w01 / sqrt_theta).abs(),
        route_w2_residual: (route - w2_11).abs(),
        route_w_residual: (route - w11).abs(),
        cross_residual: (cross - (w01 * m2 - w2_01) / sqrt_theta).abs(),
        identity_error: (weighted_sq - route).abs() / w2_11.abs().max(1.0),
    }
}

fn run_panel(grid: &LabGrid) -> Result<Vec<PanelCell>> {
    let mut cells = Vec::new();
    for &theta in &grid.thetas {
        for &m in &grid.ms {
            let draws = (0..grid.reps)
                .into_par_iter()
                .map(|rep| panel_draw(grid, m, theta, rep))
                .collect::<Result<Vec<_>>>()?;
            cells.push(PanelCell { m, theta, draws });
        }
    }
    Ok(cells)
}

struct DistributionDraw {
    component_off: f64,
    component_bulk: f64,
    dot_scaled: f64,
    dot_raw: f64,
    dot_wishart_variance: f64,
}

fn distribution_draw(grid: &LabGrid, rep: usize) -> Result<DistributionDraw> {
    let m = grid.distribution_m;
    let n = grid.sample_size(m);
    let (t1, t2) = grid.distribution_thetas;
    let mut rng = stream_rng(grid.seed, &[DOMAIN_LAB, DISTRIBUTION_STREAM, rep as u64]);
    let x = noise(m, n, &mut rng);
    let gram = x.tr_mul(&x) / n as f64;
    let bulk = crate::spectral::eigenvalues_sym(&((&gram + gram.transpose()) * 0.5))?;
    let moment = |p: i32| bulk.eigenvalues().iter().map(|l| l.powi(p)).sum::<f64>() / m as f64;
    let (m2, m3, m4) = (moment(2), moment(3), moment(4));

    let eigen = perturbed(&x, &[(0, t1), (1, t2)])?;
    let (hi, lo) = if t1 > t2 { (0, 1) } else { (1, 0) };
    let u1 = oriented(&eigen, 0, hi);
    let u2 = oriented(&eigen, 1, lo);
    let (th, tl) = (t1.max(t2), t1.min(t2));
    let mf = m as f64;
    let component_off = u1[lo] * mf.sqrt() * (th - tl).abs() / (th * tl * (m2 - 1.0)).sqrt();
    let alpha1 = u1[0].powi(2) + u1[1].powi(2);
    let alpha2 = u2[0].powi(2) + u2[1].powi(2);
    let component_bulk = u1[2] * (mf / (1.0 - alpha1)).sqrt();
    let variance = (1.0 + m2).powi(2) * (m2 - 1.0) + (m4 - m2 * m2) - 2.0 * (1.0 + m2) * (m3 - m2);
    let dot_raw = tail_dot(&u1, &u2, 2);
    Ok(DistributionDraw {
        component_off,
        component_bulk,
        dot_scaled: dot_raw * (t1 * t2 * mf / variance).sqrt(),
        dot_raw,
        dot_wishart_variance: (1.0 - alpha1) * (1.0 - alpha2) / mf,
    })
}

fn run_distribution(grid: &LabGrid) -> Result<Vec<DistributionDraw>> {
    (0..grid.distribution_reps).into_par_iter().map(|rep| distribution_draw(grid, rep)).collect()
}

/// Log-log slope with a separate intercept per group.
fn grouped_slope(points: &[(usize, f64, f64)]) -> f64 {
    let mut groups: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for &(g, x, y) in points {
        groups.entry(g).or_default().push((x.ln(), y.ln()));
    }
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for pts in groups.values() {
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        for (x, y) in pts {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx).powi(2);
        }
    }
    sxy / sxx
}

/// Slope criterion; a quantity that vanishes identically on every cell passes outright.
fn slope_criterion(name: &str, points: &[(usize, f64, f64)], lower: Option<f64>, upper: Option<f64>) -> Criterion {
    if points.iter().all(|p| p.2 == 0.0) {
        return Criterion { name: format!("{name}_identically_zero"), value: 0.0, lower: None, upper: None, gating: true, pass: true };
    }
    let usable: Vec<(usize, f64, f64)> = points.iter().copied().filter(|p| p.2 > 0.0).collect();
    Criterion::within(name, grouped_slope(&usable), lower, upper)
}

fn around(target: f64) -> (Option<f64>, Option<f64>) {
    (Some(target - SLOPE_TOLERANCE), Some(target + SLOPE_TOLERANCE))
}

fn grid_points(grid: &LabGrid, cells: &[PanelCell]) -> Vec<GridPoint> {
    cells.iter().map(|c| GridPoint { m: c.m, thetas: grid.spike_thetas(c.theta), reps: c.draws.len() }).collect()
}

fn record(cell: &PanelCell, rep: usize, values: Vec<(String, f64)>) -> ReplicationRecord {
    ReplicationRecord { m: cell.m, theta: cell.theta, rep, values: values.into_iter().collect() }
}

/// Median-of-replications observations for a per-spike quantity.
fn spike_observations(
    quantity: &str,
    grid: &LabGrid,
    cells: &[PanelCell],
    pick: impl Fn(&PanelDraw, usize) -> f64,
    regressor: impl Fn(usize, f64) -> f64,
) -> Vec<Observation> {
    let mut out = Vec::new();
    for cell in cells {
        let thetas = grid.spike_thetas(cell.theta);
        for (s, &theta_s) in thetas.iter().enumerate() {
            let values: Vec<f64> = cell.draws.iter().map(|d| pick(d, s)).collect();
            out.push(Observation {
                quantity: quantity.to_string(),
                m: cell.m,
                theta: cell.theta,
                spike: s,
                regressor: regressor(cell.m, theta_s),
                value: median(&values),
            });
        }
    }
    out
}

fn points(observations: &[Observation], quantity: &str) -> Vec<(usize, f64, f64)> {
    observations.iter().filter(|o| o.quantity == quantity).map(|o| (o.spike, o.regressor, o.value)).collect()
}

fn eigenvalue_result(grid: &LabGrid, cells: &[PanelCell]) -> InvarianceCheckResult {
    let observed =
        spike_observations("median_abs_eigenvalue_diff", grid, cells, |d, s| d.eigenvalue_diff[s], |m, t| m as f64 / t);
    let (lo, hi) = around(-1.0);
    let criteria = vec![slope_criterion("slope_vs_m_over_theta", &points(&observed, "median_abs_eigenvalue_diff"), lo, hi)];
    let detail = cells
        .iter()
        .flat_map(|c| {
            c.draws.iter().enumerate().map(move |(rep, d)| {
                record(c, rep, d.eigenvalue_diff.iter().enumerate().map(|(s, v)| (format!("abs_diff_{}", s + 1), *v)).collect())
            })
        })
        .collect();
    InvarianceCheckResult::new(TheoremId::Eigenvalue, grid_points(grid, cells), observed, criteria, 0, detail)
}

fn angle_result(grid: &LabGrid, cells: &[PanelCell]) -> InvarianceCheckResult {
    let mut observed =
        spike_observations("median_abs_angle_diff", grid, cells, |d, s| d.angle_diff[s], |m, t| m as f64 * t);
    let (lo, hi) = around(-1.0);
    let mut criteria = vec![slope_criterion("slope_vs_theta_m", &points(&observed, "median_abs_angle_diff"), lo, hi)];

    let mut worst_scaled: f64 = 0.0;
    let mut bound: f64 = f64::INFINITY;
    for cell in cells {
        let m2 = mean(&cell.draws.iter().map(|d| d.m2).collect::<Vec<_>>());
        bound = bound.min(2.0 * (m2 * m2 + 1.0));
        for (s, &theta_s) in grid.spike_thetas(cell.theta).iter().enumerate() {
            let mean_angle = mean(&cell.draws.iter().map(|d| d.single_angle[s]).collect::<Vec<_>>());
            let approximation = 1.0 + (1.0 - m2) / theta_s;
            let scaled = theta_s * theta_s * (mean_angle - approximation).abs();
            worst_scaled = worst_scaled.max(scaled);
            observed.push(Observation {
                quantity: "large_theta_scaled_error".into(),
                m: cell.m,
                theta: cell.theta,
                spike: s,
                regressor: theta_s,
                value: scaled,
            });
        }
    }
    criteria.push(Criterion::within("large_theta_scaled_error", worst_scaled, None, Some(bound)));
    let detail = cells
        .iter()
        .flat_map(|c| {
            c.draws.iter().enumerate().map(move |(rep, d)| {
                let mut values: Vec<(String, f64)> =
                    d.angle_diff.iter().enumerate().map(|(s, v)| (format!("abs_diff_{}", s + 1), *v)).collect();
                values.extend(d.single_angle.iter().enumerate().map(|(s, v)| (format!("single_angle_sq_{}", s + 1), *v)));
                values.push(("m2".into(), d.m2));
                record(c, rep, values)
            })
        })
        .collect();
    InvarianceCheckResult::new(TheoremId::Angle, grid_points(grid, cells), observed, criteria, 0, detail)
}

fn invariant_dot_result(grid: &LabGrid, cells: &[PanelCell]) -> Result<InvarianceCheckResult> {
    if grid.k() < 2 {
        return Err(Error::InvalidParam("the invariant dot product needs at least two spikes".into()));
    }
    let thetas_of = |theta: f64| grid.spike_thetas(theta);
    let observed: Vec<Observation> = cells
        .iter()
        .map(|c| {
            let t = thetas_of(c.theta);
            let values: Vec<f64> = c.draws.iter().filter_map(|d| d.invariant_dot_diff).collect();
            Observation {
                quantity: "median_abs_dot_diff".into(),
                m: c.m,
                theta: c.theta,
                spike: 0,
                regressor: (t[0] * t[1]).sqrt() * c.m as f64,
                value: median(&values),
            }
        })
        .collect();
    let (lo, hi) = around(-1.0);
    let criteria = vec![slope_criterion("slope_vs_sqrt_theta_product_m", &points(&observed, "median_abs_dot_diff"), lo, hi)];
    let detail = cells
        .iter()
        .flat_map(|c| {
            c.draws.iter().enumerate().map(move |(rep, d)| {
                record(c, rep, vec![("abs_diff".into(), d.invariant_dot_diff.unwrap_or(f64::NAN))])
            })
        })
        .collect();
    Ok(InvarianceCheckResult::new(TheoremId::InvariantDot, grid_points(grid, cells), observed, criteria, 0, detail))
}

fn double_angle_result(grid: &LabGrid, cells: &[PanelCell]) -> InvarianceCheckResult {
    let mut observed =
        spike_observations("median_abs_double_angle_diff", grid, cells, |d, s| d.double_angle_diff[s], |m, t| m as f64 * t);
    let (lo, hi) = around(-1.0);
    let mut criteria =
        vec![slope_criterion("slope_vs_theta_m", &points(&observed, "median_abs_double_angle_diff"), lo, hi)];
    let mut worst_ratio: f64 = 0.0;
    for cell in cells {
        for s in 0..grid.k() {
            let spread = std_dev(&cell.draws.iter().map(|d| d.double_angle[s]).collect::<Vec<_>>());
            for (slot, &e) in grid.eps.iter().enumerate() {
                let change = median(&cell.draws.iter().map(|d| d.eps_change[slot][s]).collect::<Vec<_>>());
                let ratio = change / spread;
                worst_ratio = worst_ratio.max(ratio);
                observed.push(Observation {
                    quantity: format!("eps{e}_change_over_sd"),
                    m: cell.m,
                    theta: cell.theta,
                    spike: s,
                    regressor: e as f64,
                    value: ratio,
                });
            }
        }
    }
    if !grid.eps.is_empty() {
        criteria.push(Criterion::within("max_eps_change_over_sd", worst_ratio, None, Some(1.0)));
    }
    let detail = cells
        .iter()
        .flat_map(|c| {
            c.draws.iter().enumerate().map(move |(rep, d)| {
                let mut values = Vec::new();
                for s in 0..d.double_angle.len() {
                    values.push((format!("double_angle_{}", s + 1), d.double_angle[s]));
                    values.push((format!("abs_diff_{}", s + 1), d.double_angle_diff[s]));
                    for (slot, e) in grid.eps.iter().enumerate() {
                        values.push((format!("eps{e}_change_{}", s + 1), d.eps_change[slot][s]));
                    }
                }
                record(c, rep, values)
            })
        })
        .collect();
    InvarianceCheckResult::new(TheoremId::DoubleAngle, grid_points(grid, cells), observed, criteria, 0, detail)
}

fn distribution_grid(grid: &LabGrid) -> Vec<GridPoint> {
    vec![GridPoint {
        m: grid.distribution_m,
        thetas: vec![grid.distribution_thetas.0, grid.distribution_thetas.1],
        reps: grid.distribution_reps,
    }]
}

fn distribution_detail(grid: &LabGrid, draws: &[DistributionDraw]) -> Vec<ReplicationRecord> {
    draws
        .iter()
        .enumerate()
        .map(|(rep, d)| ReplicationRecord {
            m: grid.distribution_m,
            theta: grid.distribution_thetas.0,
            rep,
            values: [
                ("component_off_spike".to_string(), d.component_off),
                ("component_bulk".to_string(), d.component_bulk),
                ("dot_scaled".to_string(), d.dot_scaled),
                ("dot_raw".to_string(), d.dot_raw),
                ("dot_wishart_variance".to_string(), d.dot_wishart_variance),
            ]
            .into_iter()
            .collect(),
        })
        .collect()
}

fn dot_product_result(grid: &LabGrid, draws: &[DistributionDraw]) -> InvarianceCheckResult {
    let scaled: Vec<f64> = draws.iter().map(|d| d.dot_scaled).collect();
    let raw: Vec<f64> = draws.iter().map(|d| d.dot_raw).collect();
    let reps = scaled.len() as f64;
    let sd = std_dev(&scaled);
    let centre = mean(&scaled);
    let wishart_ratio = std_dev(&raw).powi(2) / mean(&draws.iter().map(|d| d.dot_wishart_variance).collect::<Vec<_>>());
    let criteria = vec![
        Criterion::within("ks_distance", ks_distance_normal(&scaled), None, Some(KS_THRESHOLD)),
        Criterion::within("abs_mean_over_3se", centre.abs() / (3.0 * sd / reps.sqrt()), None, Some(1.0)),
        Criterion::within("variance_ratio", sd * sd, Some(0.8), Some(1.25)),
        Criterion::within("wishart_variance_ratio", wishart_ratio, Some(0.8), Some(1.25)),
    ];
    let observed = vec![Observation {
        quantity: "ks_distance".into(),
        m: grid.distribution_m,
        theta: grid.distribution_thetas.0,
        spike: 0,
        regressor: reps,
        value: criteria[0].value,
    }];
    InvarianceCheckResult::new(TheoremId::DotProduct, distribution_grid(grid), observed, criteria, 0, distribution_detail(grid, draws))
}

fn component_result(grid: &LabGrid, cells: &[PanelCell], draws: &[DistributionDraw]) -> InvarianceCheckResult {
    let off: Vec<f64> = draws.iter().map(|d| d.component_off).collect();
    let bulk: Vec<f64> = draws.iter().map(|d| d.component_bulk).collect();
    let mut criteria = vec![
        Criterion::within("ks_distance_spike_component", ks_distance_normal(&off), None, Some(KS_THRESHOLD)),
        Criterion::within("ks_distance_bulk_component", ks_distance_normal(&bulk), None, Some(KS_THRESHOLD)),
    ];
    let mut observed = Vec::new();
    let mut mean_points = Vec::new();
    let mut variance_points = Vec::new();
    for (index, cell) in cells.iter().enumerate() {
        let theta1 = grid.spike_thetas(cell.theta)[0];
        let mass: Vec<f64> = cell.draws.iter().map(|d| d.tail_mass).collect();
        let (mu, var) = (mean(&mass), std_dev(&mass).powi(2));
        let group = grid.ms.iter().position(|&m| m == cell.m).unwrap_or(index);
        mean_points.push((group, theta1, mu));
        variance_points.push((0, theta1 * theta1 * cell.m as f64, var));
        observed.push(Observation { quantity: "tail_mass_mean".into(), m: cell.m, theta: cell.theta, spike: 0, regressor: theta1, value: mu });
        observed.push(Observation {
            quantity: "tail_mass_variance".into(),
            m: cell.m,
            theta: cell.theta,
            spike: 0,
            regressor: theta1 * theta1 * cell.m as f64,
            value: var,
        });
    }
    let (lo, hi) = around(-1.0);
    if grid.thetas.len() > 1 {
        criteria.push(slope_criterion("tail_mean_slope_vs_theta", &mean_points, lo, hi));
    }
    criteria.push(slope_criterion("tail_variance_slope_vs_theta_sq_m", &variance_points, lo, hi));
    for (quantity, values) in [("ks_spike_component", &off), ("ks_bulk_component", &bulk)] {
        observed.push(Observation {
            quantity: quantity.into(),
            m: grid.distribution_m,
            theta: grid.distribution_thetas.0,
            spike: 0,
            regressor: values.len() as f64,
            value: ks_distance_normal(values),
        });
    }
    let mut detail = distribution_detail(grid, draws);
    detail.extend(cells.iter().flat_map(|c| {
        c.draws.iter().enumerate().map(move |(rep, d)| record(c, rep, vec![("tail_mass".into(), d.tail_mass)]))
    }));
    let mut points_grid = grid_points(grid, cells);
    points_grid.extend(distribution_grid(grid));
    InvarianceCheckResult::new(TheoremId::Component, points_grid, observed, criteria, 0, detail)
}

fn double_dot_result(grid: &LabGrid, cells: &[PanelCell]) -> Result<InvarianceCheckResult> {
    if grid.k() < 2 {
        return Err(Error::InvalidParam("the double dot product needs at least two spikes".into()));
    }
    let mut observed = Vec::new();
    let mut failures = 0;
    for (g, cell) in cells.iter().enumerate() {
        let pick = |f: fn(&DoubleDotDraw) -> f64| cell.draws.iter().filter_map(|d| d.double_dot.as_ref().map(f)).collect::<Vec<_>>();
        failures += pick(|d| d.identity_error).iter().filter(|&&e| !(e <= BASIS_TOLERANCE)).count();
        let group = grid.thetas.iter().position(|&t| t == cell.theta).unwrap_or(g);
        for (quantity, values) in [("median_tail_residual", pick(|d| d.tail_residual)), ("median_diagonal_residual", pick(|d| d.diagonal_residual))] {
            observed.push(Observation { quantity: quantity.into(), m: cell.m, theta: cell.theta, spike: group, regressor: cell.m as f64, value: median(&values) });
        }
    }
    let criteria = vec![
        slope_criterion("tail_residual_slope_vs_m", &points(&observed, "median_tail_residual"), None, Some(-0.5 + SLOPE_TOLERANCE)),
        slope_criterion("diagonal_residual_slope_vs_m", &points(&observed, "median_diagonal_residual"), None, Some(-0.5 + SLOPE_TOLERANCE)),
    ];
    let detail = cells
        .iter()
        .flat_map(|c| {
            c.draws.iter().enumerate().filter_map(move |(rep, d)| {
                d.double_dot.as_ref().map(|dd| {
                    record(
                        c,
                        rep,
                        vec![
                            ("tail_residual".into(), dd.tail_residual),
                            ("diagonal_residual".into(), dd.diagonal_residual),
                            ("identity_error".into(), dd.identity_error),
                        ],
                    )
                })
            })
        })
        .collect();
    Ok(InvarianceCheckResult::new(TheoremId::DoubleDot, grid_points(grid, cells), observed, criteria, failures, detail))
}

fn lemma_result(grid: &LabGrid, cells: &[PanelCell]) -> InvarianceCheckResult {
    let mut observed = Vec::new();
    let mut failures = 0;
    for (g, cell) in cells.iter().enumerate() {
        failures += cell.draws.iter().filter(|d| !(d.lemma.identity_error <= EXACT_TOLERANCE)).count();
        let group = grid.thetas.iter().position(|&t| t == cell.theta).unwrap_or(g);
        let columns: [(&str, fn(&LemmaDraw) -> f64); 4] = [
            ("median_component_residual", |l| l.component_residual),
            ("median_w2_route_residual", |l| l.route_w2_residual),
            ("median_w_route_residual", |l| l.route_w_residual),
            ("median_cross_residual", |l| l.cross_residual),
        ];
        for (quantity, f) in columns {
            let values: Vec<f64> = cell.draws.iter().map(|d| f(&d.lemma)).collect();
            observed.push(Observation { quantity: quantity.into(), m: cell.m, theta: cell.theta, spike: group, regressor: cell.m as f64, value: median(&values) });
        }
    }
    let leading_half = Some(-0.5 + SLOPE_TOLERANCE);
    let criteria = vec![
        slope_criterion("component_residual_slope_vs_m", &points(&observed, "median_component_residual"), None, leading_half),
        slope_criterion("w2_route_residual_slope_vs_m", &points(&observed, "median_w2_route_residual"), None, Some(-1.0 + SLOPE_TOLERANCE)),
        slope_criterion("w_route_residual_slope_vs_m", &points(&observed, "median_w_route_residual"), None, Some(-1.0 + SLOPE_TOLERANCE))
            .informational(),
        slope_criterion("cross_residual_slope_vs_m", &points(&observed, "median_cross_residual"), None, leading_half),
    ];
    let detail = cells
        .iter()
        .flat_map(|c| {
            c.draws.iter().enumerate().map(move |(rep, d)| {
                let l = &d.lemma;
                record(
                    c,
                    rep,
                    vec![
                        ("component_residual".into(), l.component_residual),
                        ("w2_route_residual".into(), l.route_w2_residual),
                        ("w_route_residual".into(), l.route_w_residual),
                        ("cross_residual".into(), l.cross_residual),
                        ("identity_error".into(), l.identity_error),
                    ],
                )
            })
        })
        .collect();
    InvarianceCheckResult::new(TheoremId::LemmaW, grid_points(grid, cells), observed, criteria, failures, detail)
}

/// Runs the selected checks, sharing simulations between them.
pub fn run_lab(selection: &LabSelection, grid: &LabGrid) -> Result<Vec<InvarianceCheckResult>> {
    grid.validate()?;
    let ids = selection.ids();
    let cells = if ids.iter().any(|id| id.uses_panel()) { run_panel(grid)? } else { Vec::new() };
    let draws = if ids.iter().any(|id| id.uses_distribution()) { run_distribution(grid)? } else { Vec::new() };
    let mut results = Vec::with_capacity(ids.len());
    for id in ids {
        let result = match id {
            TheoremId::Eigenvalue => eigenvalue_result(grid, &cells),
            TheoremId::Angle => angle_result(grid, &cells),
            TheoremId::DotProduct => dot_product_result(grid, &draws),
            TheoremId::InvariantDot => invariant_dot_result(grid, &cells)?,
            TheoremId::Component => component_result(grid, &cells, &draws),
            TheoremId::DoubleAngle => double_angle_result(grid, &cells),
            TheoremId::DoubleDot => double_dot_result(grid, &cells)?,
            TheoremId::LemmaW => lemma_result(grid, &cells),
        };
        results.push(result);
    }
    Ok(results)
}

fn run_one(id: TheoremId, grid: &LabGrid) -> Result<InvarianceCheckResult> {
    Ok(run_lab(&LabSelection::Only(id), grid)?.remove(0))
}

pub fn check_eigenvalue_invariance(grid: &LabGrid) -> Result<InvarianceCheckResult> {
    run_one(TheoremId::Eigenvalue, grid)
}

pub fn check_angle_invariance(grid: &LabGrid) -> Result<InvarianceCheckResult> {
    run_one(TheoremId::Angle, grid)
}

pub fn check_dot_product_distribution(grid: &LabGrid) -> Result<InvarianceCheckResult> {
    run_one(TheoremId::DotProduct, grid)
}

pub fn check_invariant_dot_product(grid: &LabGrid) -> Result<InvarianceCheckResult> {
    run_one(TheoremId::InvariantDot, grid)
}

pub fn check_component_distribution(grid: &LabGrid) -> Result<InvarianceCheckResult> {
    run_one(TheoremId::Component, grid)
}

pub fn check_double_angle_invariance(grid: &LabGrid) -> Result<InvarianceCheckResult> {
    run_one(TheoremId::DoubleAngle, grid)
}

pub fn check_double_dot(grid: &LabGrid) -> Result<InvarianceCheckResult> {
    run_one(TheoremId::DoubleDot, grid)
}

pub fn check_lemma_stat_w(grid: &LabGrid) -> Result<InvarianceCheckResult> {
    run_one(TheoremId::LemmaW, grid)
}

/// Observations of several checks as CSV, one row per grid summary.
pub fn write_observations_csv<W: std::io::Write>(writer: W, results: &[InvarianceCheckResult]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    out.write_record(["theorem_id", "quantity", "m", "theta", "spike", "regressor", "value"])?;
    for result in results {
        for o in &result.observed {
            out.write_record([
                result.theorem_id.to_string(),
                o.quantity.clone(),
                o.m.to_string(),
                o.theta.to_string(),
                (o.spike + 1).to_string(),
                o.regressor.to_string(),
                o.value.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryEntry<'a> {
    theorem_id: TheoremId,
    pass: bool,
    exact_identity_failures: usize,
    predicted_rate: &'a str,
    criteria: &'a [Criterion],
}

/// JSON summary without per-replication detail.
pub fn summary_json(results: &[InvarianceCheckResult]) -> String {
    let entries: Vec<SummaryEntry> = results
        .iter()
        .map(|r| SummaryEntry {
            theorem_id: r.theorem_id,
            pass: r.pass,
            exact_identity_failures: r.exact_identity_failures,
            predicted_rate: &r.predicted_rate,
            criteria: &r.criteria,
        })
        .collect();
    serde_json::to_string_pretty(&entries).expect("summaries serialize")
}

/// Writes `summary.json`, `observations.csv` and one detail file per check into `dir`.
pub fn write_lab_outputs(dir: impl AsRef<Path>, results: &[InvarianceCheckResult]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.json"), summary_json(results))?;
    write_observations_csv(std::fs::File::create(dir.join("observations.csv"))?, results)?;
    for result in results {
        let text = serde_json::to_string_pretty(result).expect("results serialize");
        std::fs::write(dir.join(format!("{}.json", result.theorem_id)), text)?;
    }
    Ok(())
}

/// Monte Carlo summary of the raw and bias-corrected estimates for one spike.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorQuality {
    pub m: usize,
    pub n: usize,
    pub theta: f64,
    pub reps: usize,
    pub mean_theta_hat: f64,
    pub mean_theta_unbiased: f64,
    pub mean_angle_sq: f64,
    pub predicted_angle_sq: f64,
    pub failures: usize,
}

/// Simulates white Wishart data with one spike on `e1` and averages the estimates.
pub fn estimator_quality(m: usize, aspect: f64, theta: f64, reps: usize, seed: u64) -> Result<EstimatorQuality> {
    let n = ((m as f64 / aspect).round() as usize).max(1);
    let spec = PerturbationSpec::canonical(m, &[(theta, 0)])?;
    let draws: Vec<Result<(f64, Option<f64>, f64)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(seed, &[DOMAIN_LAB, QUALITY_STREAM, rep as u64]);
            let data = apply_perturbation(&gen_ar1_gaussian_from(m, n, 0.0, 1.0, &mut rng)?, &spec)?;
            let fit = PopulationFit::from_data(&data, 1, &FitOptions::default())?;
            let spike = &fit.spikes[0];
            Ok((spike.theta_hat, spike.theta_unbiased, spike.vector[0].powi(2)))
        })
        .collect();
    let mut raw = Vec::with_capacity(reps);
    let mut corrected = Vec::with_capacity(reps);
    let mut angles = Vec::with_capacity(reps);
    let mut failures = 0;
    for draw in draws {
        let (hat, unbiased, angle) = draw?;
        raw.push(hat);
        angles.push(angle);
        match unbiased {
            Some(v) => corrected.push(v),
            None => failures += 1,
        }
    }
    let c = m as f64 / n as f64;
    Ok(EstimatorQuality {
        m,
        n,
        theta,
        reps,
        mean_theta_hat: mean(&raw),
        mean_theta_unbiased: mean(&corrected),
        mean_angle_sq: mean(&angles),
        predicted_angle_sq: (1.0 - c / (theta - 1.0).powi(2)) / (1.0 + c / (theta - 1.0)),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabGrid {
        LabGrid {
            ms: vec![40, 80],
            thetas: vec![30.0, 60.0],
            proportions: vec![1.0, 0.5],
            reps: 6,
            eps: vec![1],
            distribution_m: 40,
            distribution_reps: 20,
            ..LabGrid::default()
        }
    }

    #[test]
    fn ids_round_trip() {
        for id in TheoremId::ALL {
            assert_eq!(id.name().parse::<TheoremId>().unwrap(), id);
        }
        assert!("3.2".parse::<TheoremId>().is_err());
        assert_eq!("all".parse::<LabSelection>().unwrap(), LabSelection::All);
        assert!("bogus".parse::<LabSelection>().is_err());
    }

    #[test]
    fn grid_parse_and_validation() {
        let grid = LabGrid::parse("m = 60, 120\ntheta = 40\nreps = 5\nseed = 9\n").unwrap();
        assert_eq!(grid.ms, vec![60, 120]);
        assert_eq!(grid.seed, 9);
        assert_eq!(LabGrid::parse(&grid.to_text()).unwrap(), grid);
        assert!(matches!(
            LabGrid::parse("proportions = 1, 1"),
            Err(Error::EqualSpikes { first: 0, second: 1 })
        ));
        assert!(LabGrid::parse("m = 3").is_err());
        assert!(LabGrid::parse("wat = 1").is_err());
    }

    #[test]
    fn basis_completion_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = DMatrix::from_fn(12, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = raw.qr().q();
        let inputs: Vec<DVector<f64>> = (0..3).map(|j| q.column(j).into_owned()).collect();
        let basis = basis_completion(&inputs, 12, 5).unwrap();
        assert!(max_orthonormality_error(&basis) < 1e-10);
        for (j, v) in inputs.iter().enumerate() {
            assert_eq!(&basis.column(j).into_owned(), v);
        }
        assert_eq!(basis, basis_completion(&inputs, 12, 5).unwrap());
        let full: Vec<DVector<f64>> = (0..4).map(|j| crate::datagen::basis_vector(4, j)).collect();
        assert_eq!(basis_completion(&full, 4, 1).unwrap(), DMatrix::identity(4, 4));
        let skewed = vec![DVector::from_vec(vec![1.0, 0.1, 0.0])];
        assert!(matches!(basis_completion(&skewed, 3, 1), Err(Error::NotOrthonormal(_))));
    }

    #[test]
    fn single_spike_eigenvalue_difference_vanishes() {
        let grid = LabGrid { proportions: vec![1.0], ..tiny() };
        let result = check_eigenvalue_invariance(&grid).unwrap();
        assert!(result.observed.iter().all(|o| o.value == 0.0));
        assert!(result.pass);
        let angle = check_angle_invariance(&grid).unwrap();
        assert!(angle.observed.iter().filter(|o| o.quantity == "median_abs_angle_diff").all(|o| o.value == 0.0));
    }

    #[test]
    fn identical_samples_give_unit_double_dot() {
        let grid = tiny();
        let mut rng = stream_rng(1, &[0]);
        let x = noise(40, 20, &mut rng);
        let eigen = perturbed(&x, &[(0, 30.0), (1, 15.0)]).unwrap();
        let ux: Vec<DVector<f64>> = (0..2).map(|s| oriented(&eigen, s, s)).collect();
        let basis = basis_completion(&ux, 40, grid.seed).unwrap();
        for (s, u) in ux.iter().enumerate() {
            let tilde = basis.tr_mul(u);
            for i in 0..40 {
                let expected = if i == s { 1.0 } else { 0.0 };
                assert!((tilde[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_data_has_no_off_spike_components() {
        let x = DMatrix::identity(6, 6) * 6f64.sqrt();
        let eigen = perturbed(&x, &[(0, 9.0), (1, 4.0)]).unwrap();
        let u = oriented(&eigen, 0, 0);
        assert!((u[0] - 1.0).abs() < 1e-12);
        assert!(u.rows(1, 5).amax() < 1e-12);
    }

    #[test]
    fn flipping_convention_flips_dot_sign() {
        let mut rng = stream_rng(2, &[0]);
        let x = noise(30, 15, &mut rng);
        let eigen = perturbed(&x, &[(0, 40.0), (1, 20.0)]).unwrap();
        let a = tail_dot(&oriented(&eigen, 0, 0), &oriented(&eigen, 1, 1), 2);
        let mut flipped = oriented(&eigen, 1, 1);
        flipped.neg_mut();
        let b = tail_dot(&oriented(&eigen, 0, 0), &flipped, 2);
        assert_eq!(a, -b);
    }

    #[test]
    fn lemma_identity_holds_exactly() {
        let mut rng = stream_rng(4, &[0]);
        let x = noise(50, 25, &mut rng);
        let single = perturbed(&x, &[(0, 80.0)]).unwrap();
        assert!(lemma_draw(&x, &single, 80.0).identity_error < 1e-10);
    }

    #[test]
    fn small_lab_run_is_deterministic() {
        let grid = tiny();
        let first = run_lab(&LabSelection::All, &grid).unwrap();
        let second = run_lab(&LabSelection::All, &grid).unwrap();
        assert_eq!(first.len(), TheoremId::ALL.len());
        assert_eq!(summary_json(&first), summary_json(&second));
        assert!(first.iter().all(|r| r.exact_identity_failures == 0));
        let dir = tempfile::tempdir().unwrap();
        write_lab_outputs(dir.path(), &first).unwrap();
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("lemma-w.json").exists());
        let csv = std::fs::read_to_string(dir.path().join("observations.csv")).unwrap();
        assert!(csv.starts_with("theorem_id,quantity,m,theta,spike,regressor,value\n"));
    }
}
