//! Simulated null references for T3, T4 and T5 and their on-disk format.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::McConfig;
use crate::error::{Error, Result};
use crate::io::format_full;
use crate::power::{analyse_pair, simulate_pair};
use crate::rng::DOMAIN_CALIBRATION;
use crate::stats::{mean, std_dev};
use crate::twosample::{t3_residual_spikes, Method};

/// Smallest number of null replications accepted.
pub const MIN_CALIBRATION_REPS: usize = 100;

const HEADER: &str = "spiketest-calibration v1";
const REPORTED_QUANTILES: [f64; 7] = [0.005, 0.025, 0.05, 0.5, 0.95, 0.975, 0.995];

/// Null centre and `√m`-scaled spread of the extreme residual spikes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualCalibration {
    pub lambda_plus: f64,
    pub sigma_plus: f64,
    pub lambda_minus: f64,
    pub sigma_minus: f64,
}

impl ResidualCalibration {
    /// Fits the centres and spreads from pooled null residual spikes of dimension `m`.
    pub fn from_samples(m: usize, plus: &[f64], minus: &[f64]) -> Result<Self> {
        if plus.len() < 2 || minus.len() < 2 {
            return Err(Error::InsufficientReps { reps: plus.len().min(minus.len()), min: 2 });
        }
        let root_m = (m as f64).sqrt();
        let out = Self {
            lambda_plus: mean(plus),
            sigma_plus: std_dev(plus) * root_m,
            lambda_minus: mean(minus),
            sigma_minus: std_dev(minus) * root_m,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let values = [self.lambda_plus, self.sigma_plus, self.lambda_minus, self.sigma_minus];
        if values.iter().any(|v| !v.is_finite()) || self.sigma_plus <= 0.0 || self.sigma_minus <= 0.0 {
            return Err(Error::InvalidParam(format!("degenerate residual calibration {values:?}")));
        }
        Ok(())
    }
}

/// Sorted null sample of a scalar statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCalibration {
    sample: Vec<f64>,
}

impl EmpiricalCalibration {
    pub fn new(mut sample: Vec<f64>) -> Result<Self> {
        if sample.is_empty() {
            return Err(Error::InsufficientReps { reps: 0, min: 1 });
        }
        if sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("null sample contains non-finite values".into()));
        }
        sample.sort_by(f64::total_cmp);
        Ok(Self { sample })
    }

    pub fn len(&self) -> usize {
        self.sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample.is_empty()
    }

    pub fn sample(&self) -> &[f64] {
        &self.sample
    }

    /// Linearly interpolated quantile.
    pub fn quantile(&self, p: f64) -> f64 {
        let position = p.clamp(0.0, 1.0) * (self.sample.len() - 1) as f64;
        let lower = position.floor() as usize;
        let upper = position.ceil() as usize;
        let weight = position - lower as f64;
        self.sample[lower] * (1.0 - weight) + self.sample[upper] * weight
    }

    /// `min(1, 2 min(lower tail, upper tail))` with `(count + 1)/(N + 1)` tails.
    pub fn two_sided_p_value(&self, value: f64) -> f64 {
        let n = self.sample.len() as f64;
        let below = self.sample.partition_point(|&s| s <= value) as f64;
        let above = (self.sample.len() - self.sample.partition_point(|&s| s < value)) as f64;
        let lower = (below + 1.0) / (n + 1.0);
        let upper = (above + 1.0) / (n + 1.0);
        (2.0 * lower.min(upper)).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationModel {
    Residual(ResidualCalibration),
    Empirical(EmpiricalCalibration),
}

/// A persisted null reference for one statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct NullCalibration {
    pub method: Method,
    pub config_hash: String,
    pub reps: usize,
    pub seed: u64,
    pub m: usize,
    pub k: usize,
    /// Replications that produced no usable value.
    pub failed: usize,
    pub model: CalibrationModel,
}

impl NullCalibration {
    pub fn residual(&self) -> Option<&ResidualCalibration> {
        match &self.model {
            CalibrationModel::Residual(r) => Some(r),
            CalibrationModel::Empirical(_) => None,
        }
    }

    pub fn empirical(&self) -> Option<&EmpiricalCalibration> {
        match &self.model {
            CalibrationModel::Empirical(e) => Some(e),
            CalibrationModel::Residual(_) => None,
        }
    }

    /// Fails unless this calibration was produced for `method` under `config`'s model.
    pub fn check_matches(&self, method: Method, config: &McConfig) -> Result<()> {
        if self.method != method {
            return Err(Error::CalibrationMismatch(format!("file calibrates {}, not {method}", self.method)));
        }
        let expected = config.null_template().model_hash();
        if self.config_hash != expected {
            return Err(Error::CalibrationMismatch(format!("model hash {} differs from {expected}", self.config_hash)));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "method = {}", self.method);
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "reps = {}", self.reps);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "m = {}", self.m);
        let _ = writeln!(out, "k = {}", self.k);
        let _ = writeln!(out, "failed = {}", self.failed);
        match &self.model {
            CalibrationModel::Residual(r) => {
                let _ = writeln!(out, "lambda_plus = {}", format_full(r.lambda_plus));
                let _ = writeln!(out, "sigma_plus = {}", format_full(r.sigma_plus));
                let _ = writeln!(out, "lambda_minus = {}", format_full(r.lambda_minus));
                let _ = writeln!(out, "sigma_minus = {}", format_full(r.sigma_minus));
            }
            CalibrationModel::Empirical(e) => {
                for p in REPORTED_QUANTILES {
                    let _ = writeln!(out, "quantile_{p} = {}", format_full(e.quantile(p)));
                }
                let sample: Vec<String> = e.sample().iter().map(|&v| format_full(v)).collect();
                let _ = writeln!(out, "sample = {}", sample.join(","));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HEADER) {
            return Err(Error::Parse(format!("calibration file must start with {HEADER:?}")));
        }
        let mut fields = std::collections::HashMap::new();
        for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Parse(format!("malformed calibration line {line:?}")))?;
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
        let get = |key: &str| fields.get(key).ok_or_else(|| Error::Parse(format!("calibration file lacks {key}")));
        fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Parse(format!("invalid {key} value {value:?}")))
        }
        let method: Method = get("method")?.parse()?;
        let model = if method == Method::T3 {
            let residual = ResidualCalibration {
                lambda_plus: number("lambda_plus", get("lambda_plus")?)?,
                sigma_plus: number("sigma_plus", get("sigma_plus")?)?,
                lambda_minus: number("lambda_minus", get("lambda_minus")?)?,
                sigma_minus: number("sigma_minus", get("sigma_minus")?)?,
            };
            residual.validate()?;
            CalibrationModel::Residual(residual)
        } else {
            let sample = get("sample")?
                .split(',')
                .map(|v| number::<f64>("sample", v.trim()))
                .collect::<Result<Vec<_>>>()?;
            CalibrationModel::Empirical(EmpiricalCalibration::new(sample)?)
        };
        Ok(Self {
            method,
            config_hash: get("config_hash")?.clone(),
            reps: number("reps", get("reps")?)?,
            seed: number("seed", get("seed")?)?,
            m: number("m", get("m")?)?,
            k: number("k", get("k")?)?,
            failed: fields.get("failed").map_or(Ok(0), |v| number("failed", v))?,
            model,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[derive(Default)]
struct NullDraw {
    plus: Vec<f64>,
    minus: Vec<f64>,
    log_det: Option<f64>,
    trace: Option<f64>,
}

fn null_draw(template: &McConfig, rep: usize, methods: &[Method]) -> Result<NullDraw> {
    let (x, y) = simulate_pair(template, DOMAIN_CALIBRATION, template.model_key(), rep as u64)?;
    let needs_whitening = methods.iter().any(|m| matches!(m, Method::T4 | Method::T5));
    let needs_fits = methods.contains(&Method::T3);
    let analysis = analyse_pair(&x, &y, template.k, needs_fits, needs_whitening)?;
    let mut draw = NullDraw::default();
    if let Some((fit_x, fit_y)) = &analysis.fits {
        for s in 0..template.k {
            let spikes = t3_residual_spikes(fit_x, fit_y, s)?;
            draw.plus.push(spikes.plus);
            draw.minus.push(spikes.minus);
        }
    }
    if let Some(whitened) = &analysis.whitened {
        draw.log_det = Some(whitened.log_det());
        draw.trace = Some(whitened.trace);
    }
    Ok(draw)
}

/// Calibrates several statistics from one shared set of null replications.
pub fn calibrate_null_many(methods: &[Method], template: &McConfig, reps: usize) -> Result<Vec<NullCalibration>> {
    if reps < MIN_CALIBRATION_REPS {
        return Err(Error::InsufficientReps { reps, min: MIN_CALIBRATION_REPS });
    }
    if let Some(method) = methods.iter().find(|m| !m.needs_calibration()) {
        return Err(Error::InvalidParam(format!("{method} uses an asymptotic chi-square reference")));
    }
    template.validate()?;
    if !template.is_null() {
        return Err(Error::InvalidConfig("calibration template must have identical X and Y perturbations".into()));
    }
    let draws: Vec<Result<NullDraw>> = (0..reps).into_par_iter().map(|rep| null_draw(template, rep, methods)).collect();
    let mut failed = 0;
    let mut usable = Vec::with_capacity(reps);
    for (rep, draw) in draws.into_iter().enumerate() {
        match draw {
            Ok(draw) => usable.push(draw),
            Err(err) => {
                failed += 1;
                log::warn!("null replication {rep} failed: {err}");
            }
        }
    }
    if usable.len() < MIN_CALIBRATION_REPS {
        return Err(Error::InsufficientReps { reps: usable.len(), min: MIN_CALIBRATION_REPS });
    }
    let hash = template.model_hash();
    methods
        .iter()
        .map(|&method| {
            let model = match method {
                Method::T3 => {
                    let plus: Vec<f64> = usable.iter().flat_map(|d| d.plus.iter().copied()).collect();
                    let minus: Vec<f64> = usable.iter().flat_map(|d| d.minus.iter().copied()).collect();
                    CalibrationModel::Residual(ResidualCalibration::from_samples(template.m, &plus, &minus)?)
                }
                Method::T4 => CalibrationModel::Empirical(EmpiricalCalibration::new(
                    usable.iter().filter_map(|d| d.log_det).collect(),
                )?),
                _ => CalibrationModel::Empirical(EmpiricalCalibration::new(
                    usable.iter().filter_map(|d| d.trace).collect(),
                )?),
            };
            Ok(NullCalibration {
                method,
                config_hash: hash.clone(),
                reps,
                seed: template.seed,
                m: template.m,
                k: template.k,
                failed,
                model,
            })
        })
        .collect()
}

/// Simulates `reps` null replications of `template` and summarises `method`'s statistic.
pub fn calibrate_null(method: Method, template: &McConfig, reps: usize) -> Result<NullCalibration> {
    Ok(calibrate_null_many(&[method], template, reps)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SpikeSpec;

    fn template() -> McConfig {
        McConfig {
            m: 30,
            n_x: 20,
            n_y: 20,
            shared_spikes: vec![SpikeSpec::canonical(60.0, 3)],
            spike_x: Some(SpikeSpec::canonical(15.0, 1)),
            spike_y: Some(SpikeSpec::canonical(15.0, 1)),
            k: 2,
            seed: 4,
            ..McConfig::default()
        }
    }

    #[test]
    fn empirical_quantiles_and_tails() {
        let cal = EmpiricalCalibration::new((1..=99).rev().map(f64::from).collect()).unwrap();
        assert_eq!(cal.quantile(0.5), 50.0);
        assert_eq!(cal.quantile(0.0), 1.0);
        assert_eq!(cal.quantile(1.0), 99.0);
        assert_eq!(cal.two_sided_p_value(50.0), 1.0);
        assert!((cal.two_sided_p_value(1000.0) - 0.02).abs() < 1e-15);
        assert!((cal.two_sided_p_value(-5.0) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn too_few_reps_rejected() {
        assert!(matches!(calibrate_null(Method::T5, &template(), 10), Err(Error::InsufficientReps { reps: 10, .. })));
        assert!(calibrate_null(Method::T1, &template(), 200).is_err());
        let alternative = McConfig { spike_y: Some(SpikeSpec::canonical(15.0, 2)), ..template() };
        assert!(matches!(calibrate_null(Method::T5, &alternative, 100), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn calibration_is_deterministic_and_round_trips() {
        let first = calibrate_null_many(&[Method::T3, Method::T4, Method::T5], &template(), 100).unwrap();
        let second = calibrate_null_many(&[Method::T3, Method::T4, Method::T5], &template(), 100).unwrap();
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.to_text(), b.to_text());
            assert_eq!(&NullCalibration::from_text(&a.to_text()).unwrap(), a);
        }
        let alone = calibrate_null(Method::T5, &template(), 100).unwrap();
        assert_eq!(alone.to_text(), first[2].to_text());
        let residual = first[0].residual().unwrap();
        assert!(residual.lambda_plus > residual.lambda_minus);
        assert!(first[0].check_matches(Method::T3, &template()).is_ok());
        assert!(first[0].check_matches(Method::T4, &template()).is_err());
    }

    #[test]
    fn corrupted_files_rejected() {
        assert!(NullCalibration::from_text("nonsense").is_err());
        assert!(NullCalibration::from_text(&format!("{HEADER}\nmethod = T5\n")).is_err());
    }
}
