//! Monte Carlo power studies over configured scenarios.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::calibration::{calibrate_null_many, NullCalibration};
use crate::config::{McConfig, StudyConfig};
use crate::datagen::{apply_perturbation, gen_ar1_gaussian_from, DataMatrix, PerturbationSpec};
use crate::error::{Error, Result};
use crate::estimators::{CovarianceEigen, FitOptions, PopulationFit};
use crate::rng::{stream_rng, DOMAIN_SCENARIO};
use crate::twosample::{
    baseline_test, t1_with, t2_with, t3_test, whitened_spectrum_from_data, Method, TestOptions, TestReport,
    WhitenedSpectrum,
};

/// Draws independent X/Y datasets for one model.
#[derive(Debug, Clone)]
pub struct PairSimulator {
    config: McConfig,
    perturbation_x: PerturbationSpec,
    perturbation_y: PerturbationSpec,
}

impl PairSimulator {
    pub fn new(config: &McConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            perturbation_x: config.perturbation_x()?,
            perturbation_y: config.perturbation_y()?,
        })
    }

    /// Replication `rep` of the stream family `(domain, key)`.
    pub fn draw(&self, domain: u64, key: u64, rep: u64) -> Result<(DataMatrix, DataMatrix)> {
        let c = &self.config;
        let mut rng_x = stream_rng(c.seed, &[domain, key, rep, 0]);
        let mut rng_y = stream_rng(c.seed, &[domain, key, rep, 1]);
        let x = gen_ar1_gaussian_from(c.m, c.n_x, c.rho, c.sigma, &mut rng_x)?;
        let y = gen_ar1_gaussian_from(c.m, c.n_y, c.rho, c.sigma, &mut rng_y)?;
        Ok((apply_perturbation(&x, &self.perturbation_x)?, apply_perturbation(&y, &self.perturbation_y)?))
    }
}

/// One-off convenience wrapper around [`PairSimulator`].
pub fn simulate_pair(config: &McConfig, domain: u64, key: u64, rep: u64) -> Result<(DataMatrix, DataMatrix)> {
    PairSimulator::new(config)?.draw(domain, key, rep)
}

/// Fits and whitened spectrum computed from one shared decomposition of `Σ̂_X`.
#[derive(Debug, Clone)]
pub struct PairAnalysis {
    pub fits: Option<(PopulationFit, PopulationFit)>,
    pub whitened: Option<WhitenedSpectrum>,
}

pub fn analyse_pair(x: &DataMatrix, y: &DataMatrix, k: usize, fits: bool, whitening: bool) -> Result<PairAnalysis> {
    analyse_pair_with(x, y, k, fits, whitening, &FitOptions::default())
}

pub fn analyse_pair_with(
    x: &DataMatrix,
    y: &DataMatrix,
    k: usize,
    fits: bool,
    whitening: bool,
    options: &FitOptions,
) -> Result<PairAnalysis> {
    let eigen_x = CovarianceEigen::from_data(x, options.sign_convention)?;
    let fits = if fits {
        let fit_x = PopulationFit::from_eigen(&eigen_x, k, options)?;
        let fit_y = PopulationFit::from_data(y, k, options)?;
        Some((fit_x, fit_y))
    } else {
        None
    };
    let whitened = if whitening { Some(whitened_spectrum_from_data(&eigen_x, y)?) } else { None };
    Ok(PairAnalysis { fits, whitened })
}

/// Calibrations keyed by the model hash of their null template.
#[derive(Debug, Default)]
pub struct CalibrationCache {
    entries: HashMap<String, BTreeMap<Method, NullCalibration>>,
}

impl CalibrationCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an externally produced calibration.
    pub fn insert(&mut self, calibration: NullCalibration) {
        self.entries.entry(calibration.config_hash.clone()).or_default().insert(calibration.method, calibration);
    }

    /// Calibrations for every resampled method of `config`, simulating the missing ones.
    pub fn ensure(&mut self, config: &McConfig) -> Result<BTreeMap<Method, NullCalibration>> {
        let template = config.null_template();
        let hash = template.model_hash();
        let known = self.entries.entry(hash).or_default();
        let missing: Vec<Method> =
            config.methods.iter().copied().filter(|m| m.needs_calibration() && !known.contains_key(m)).collect();
        if !missing.is_empty() {
            for calibration in calibrate_null_many(&missing, &template, config.calibration_reps())? {
                known.insert(calibration.method, calibration);
            }
        }
        Ok(known.clone())
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs one test on an analysed pair.
pub fn evaluate_method(
    method: Method,
    analysis: &PairAnalysis,
    calibrations: &BTreeMap<Method, NullCalibration>,
    options: &TestOptions,
) -> Result<TestReport> {
    let fits = || analysis.fits.as_ref().ok_or_else(|| Error::InvalidParam("population fits were not computed".into()));
    match method {
        Method::T1 => {
            let (x, y) = fits()?;
            t1_with(x, y, options)
        }
        Method::T2 => {
            let (x, y) = fits()?;
            t2_with(x, y, options)
        }
        Method::T3 => {
            let (x, y) = fits()?;
            t3_test(x, y, calibrations.get(&method).and_then(NullCalibration::residual), options)
        }
        Method::T4 | Method::T5 => {
            let whitened = analysis
                .whitened
                .as_ref()
                .ok_or_else(|| Error::InvalidParam("whitened spectrum was not computed".into()))?;
            baseline_test(method, whitened, calibrations.get(&method).and_then(NullCalibration::empirical), options.level)
        }
    }
}

/// Rejection record of one method across replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodOutcome {
    pub method: Method,
    /// P-value per replication; `None` when the test failed on that replication.
    pub p_values: Vec<Option<f64>>,
    pub level: f64,
}

impl MethodOutcome {
    pub fn reps(&self) -> usize {
        self.p_values.len()
    }

    pub fn rejections(&self) -> usize {
        self.p_values.iter().filter(|p| p.is_some_and(|p| p <= self.level)).count()
    }

    pub fn errors(&self) -> usize {
        self.p_values.iter().filter(|p| p.is_none()).count()
    }

    /// Rejection frequency; failed replications count as acceptances.
    pub fn power(&self) -> f64 {
        self.rejections() as f64 / self.reps() as f64
    }

    pub fn mc_stderr(&self) -> f64 {
        let p = self.power();
        (p * (1.0 - p) / self.reps() as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub id: String,
    pub config: McConfig,
    pub outcomes: Vec<MethodOutcome>,
}

impl ScenarioOutcome {
    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

/// Simulates `config.reps` replications and applies every configured method.
pub fn run_scenario(id: &str, config: &McConfig, cache: &mut CalibrationCache) -> Result<ScenarioOutcome> {
    config.validate()?;
    let calibrations = cache.ensure(config)?;
    let simulator = PairSimulator::new(config)?;
    let methods = config.methods.clone();
    let needs_fits = methods.iter().any(|m| matches!(m, Method::T1 | Method::T2 | Method::T3));
    let needs_whitening = methods.iter().any(|m| matches!(m, Method::T4 | Method::T5));
    let options = TestOptions { force: false, level: config.level };
    let key = config.model_key();

    let per_rep: Vec<Vec<Option<f64>>> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let analysis = simulator
                .draw(DOMAIN_SCENARIO, key, rep as u64)
                .and_then(|(x, y)| analyse_pair(&x, &y, config.k, needs_fits, needs_whitening));
            let analysis = match analysis {
                Ok(analysis) => analysis,
                Err(err) => {
                    log::warn!("scenario {id}, replication {rep}: {err}");
                    return vec![None; methods.len()];
                }
            };
            methods
                .iter()
                .map(|&method| match evaluate_method(method, &analysis, &calibrations, &options) {
                    Ok(report) => report.p_value,
                    Err(err) => {
                        log::warn!("scenario {id}, replication {rep}, {method}: {err}");
                        None
                    }
                })
                .collect()
        })
        .collect();

    let outcomes = methods
        .iter()
        .enumerate()
        .map(|(j, &method)| MethodOutcome {
            method,
            p_values: per_rep.iter().map(|row| row[j]).collect(),
            level: config.level,
        })
        .collect();
    Ok(ScenarioOutcome { id: id.to_string(), config: config.clone(), outcomes })
}

/// Runs every scenario of a study, reusing calibrations across scenarios with the same null model.
pub fn run_study(study: &StudyConfig, cache: &mut CalibrationCache) -> Result<Vec<ScenarioOutcome>> {
    study.expanded().iter().map(|(id, config)| run_scenario(id, config, cache)).collect()
}

/// One line of the power CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerRow {
    pub scenario_id: String,
    pub method: Method,
    pub m: usize,
    #[serde(rename = "n_X")]
    pub n_x: usize,
    #[serde(rename = "n_Y")]
    pub n_y: usize,
    #[serde(rename = "theta_X")]
    pub theta_x: String,
    #[serde(rename = "u_X")]
    pub u_x: String,
    #[serde(rename = "theta_Y")]
    pub theta_y: String,
    #[serde(rename = "u_Y")]
    pub u_y: String,
    pub reps: usize,
    pub power: f64,
    pub mc_stderr: f64,
}

pub fn power_rows(outcomes: &[ScenarioOutcome]) -> Vec<PowerRow> {
    let theta = |s: &Option<crate::config::SpikeSpec>| s.as_ref().map_or_else(String::new, |s| s.theta.to_string());
    let direction = |s: &Option<crate::config::SpikeSpec>| s.as_ref().map_or_else(String::new, |s| s.direction.to_string());
    outcomes
        .iter()
        .flat_map(|scenario| {
            let c = &scenario.config;
            scenario.outcomes.iter().map(move |o| PowerRow {
                scenario_id: scenario.id.clone(),
                method: o.method,
                m: c.m,
                n_x: c.n_x,
                n_y: c.n_y,
                theta_x: theta(&c.spike_x),
                u_x: direction(&c.spike_x),
                theta_y: theta(&c.spike_y),
                u_y: direction(&c.spike_y),
                reps: o.reps(),
                power: o.power(),
                mc_stderr: o.mc_stderr(),
            })
        })
        .collect()
}

pub fn write_power_csv<W: Write>(writer: W, rows: &[PowerRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}
