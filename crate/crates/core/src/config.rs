//! Simulation study configuration in flat `key = value` form.
//!
//! Global keys describe the shared model; `scenario.<i>.<field>` groups override
//! the varying spike pair (and optionally the sample sizes) per scenario row.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::datagen::{basis_vector, PerturbationSpec, Spike};
use crate::error::{Error, Result};
use crate::io::read_vector_file;
use crate::twosample::Method;

/// Direction of a configured spike.
#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    /// Canonical basis vector `e<j>`, 1-based.
    Canonical(usize),
    /// Vector stored in a CSV file.
    File(PathBuf),
}

impl Direction {
    fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let text = text.trim();
        if let Some(index) = text.strip_prefix('e').and_then(|rest| rest.parse::<usize>().ok()) {
            if index == 0 {
                return Err(Error::InvalidConfig("canonical directions are 1-based (e1, e2, ...)".into()));
            }
            return Ok(Direction::Canonical(index));
        }
        if text.is_empty() {
            return Err(Error::InvalidConfig("empty spike direction".into()));
        }
        Ok(Direction::File(base_dir.join(text)))
    }

    pub fn vector(&self, dim: usize) -> Result<nalgebra::DVector<f64>> {
        match self {
            Direction::Canonical(index) if *index <= dim => Ok(basis_vector(dim, index - 1)),
            Direction::Canonical(index) => {
                Err(Error::InvalidConfig(format!("direction e{index} exceeds dimension {dim}")))
            }
            Direction::File(path) => {
                let v = read_vector_file(path)?;
                if v.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
                }
                Ok(v)
            }
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Canonical(index) => write!(f, "e{index}"),
            Direction::File(path) => write!(f, "{}", path.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSpec {
    pub theta: f64,
    pub direction: Direction,
}

impl SpikeSpec {
    pub fn canonical(theta: f64, index: usize) -> Self {
        Self { theta, direction: Direction::Canonical(index) }
    }

    fn to_spike(&self, dim: usize) -> Result<Spike> {
        Ok(Spike::new(self.theta, self.direction.vector(dim)?))
    }
}

impl fmt::Display for SpikeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.theta, self.direction)
    }
}

/// Model and harness settings for one two-sample simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub m: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub rho: f64,
    pub sigma: f64,
    pub shared_spikes: Vec<SpikeSpec>,
    pub spike_x: Option<SpikeSpec>,
    pub spike_y: Option<SpikeSpec>,
    pub k: usize,
    pub reps: usize,
    /// Null replications used to calibrate T3, T4 and T5; defaults to `reps`.
    pub calibration_reps: Option<usize>,
    pub level: f64,
    pub seed: u64,
    pub methods: Vec<Method>,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            m: 500,
            n_x: 250,
            n_y: 250,
            rho: 0.0,
            sigma: 1.0,
            shared_spikes: Vec::new(),
            spike_x: None,
            spike_y: None,
            k: 1,
            reps: 200,
            calibration_reps: None,
            level: 0.05,
            seed: 1,
            methods: Method::ALL.to_vec(),
        }
    }
}

fn spike_list(spikes: &[SpikeSpec]) -> String {
    spikes.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn method_list(methods: &[Method]) -> String {
    methods.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.m < 2 {
            return fail(format!("m must be at least 2, got {}", self.m));
        }
        if self.n_x == 0 || self.n_y == 0 {
            return fail("sample sizes must be positive".into());
        }
        if self.n_x < self.n_y {
            return fail(format!("n_x ({}) must be at least n_y ({})", self.n_x, self.n_y));
        }
        if self.reps == 0 {
            return fail("reps must be at least 1".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return fail(format!("level must lie in (0, 1), got {}", self.level));
        }
        if !(self.rho.abs() < 1.0) {
            return fail(format!("rho must satisfy |rho| < 1, got {}", self.rho));
        }
        if !(self.sigma > 0.0) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.k == 0 || self.k >= self.m {
            return fail(format!("k must lie in 1..m, got {}", self.k));
        }
        if self.methods.is_empty() {
            return fail("no methods selected".into());
        }
        let all = self.shared_spikes.iter().chain(&self.spike_x).chain(&self.spike_y);
        for spike in all {
            if !(spike.theta > 0.0 && spike.theta.is_finite()) {
                return fail(format!("spike strength must be positive, got {}", spike.theta));
            }
        }
        Ok(())
    }

    fn perturbation(&self, varying: &Option<SpikeSpec>) -> Result<PerturbationSpec> {
        let spikes = self
            .shared_spikes
            .iter()
            .chain(varying)
            .map(|spec| spec.to_spike(self.m))
            .collect::<Result<Vec<_>>>()?;
        PerturbationSpec::new(self.m, spikes)
    }

    pub fn perturbation_x(&self) -> Result<PerturbationSpec> {
        self.perturbation(&self.spike_x)
    }

    pub fn perturbation_y(&self) -> Result<PerturbationSpec> {
        self.perturbation(&self.spike_y)
    }

    /// Same model with the Y perturbation replaced by the X one.
    pub fn null_template(&self) -> McConfig {
        McConfig { spike_y: self.spike_x.clone(), ..self.clone() }
    }

    pub fn is_null(&self) -> bool {
        self.spike_x == self.spike_y
    }

    pub fn calibration_reps(&self) -> usize {
        self.calibration_reps.unwrap_or(self.reps)
    }

    /// Canonical text of every parameter that affects simulated data.
    pub fn model_text(&self) -> String {
        let optional = |s: &Option<SpikeSpec>| s.as_ref().map_or_else(|| "none".to_string(), ToString::to_string);
        format!(
            "m={}\nn_x={}\nn_y={}\nrho={}\nsigma={}\nshared_spikes={}\nspike_x={}\nspike_y={}\nk={}\n",
            self.m,
            self.n_x,
            self.n_y,
            self.rho,
            self.sigma,
            spike_list(&self.shared_spikes),
            optional(&self.spike_x),
            optional(&self.spike_y),
            self.k
        )
    }

    /// SHA-256 hex digest of [`McConfig::model_text`].
    pub fn model_hash(&self) -> String {
        hex::encode(Sha256::digest(self.model_text().as_bytes()))
    }

    /// Leading 64 bits of the model hash, used to key random streams.
    pub fn model_key(&self) -> u64 {
        let digest = Sha256::digest(self.model_text().as_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    /// Full configuration in the same format [`StudyConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "m = {}\nn_x = {}\nn_y = {}\nrho = {}\nsigma = {}\nshared_spikes = {}\nk = {}\nreps = {}\nlevel = {}\nseed = {}\nmethods = {}\n",
            self.m,
            self.n_x,
            self.n_y,
            self.rho,
            self.sigma,
            spike_list(&self.shared_spikes),
            self.k,
            self.reps,
            self.level,
            self.seed,
            method_list(&self.methods)
        );
        if let Some(reps) = self.calibration_reps {
            out.push_str(&format!("calibration_reps = {reps}\n"));
        }
        if let Some(spike) = &self.spike_x {
            out.push_str(&format!("theta_x = {}\nu_x = {}\n", spike.theta, spike.direction));
        }
        if let Some(spike) = &self.spike_y {
            out.push_str(&format!("theta_y = {}\nu_y = {}\n", spike.theta, spike.direction));
        }
        out
    }
}

/// One row of a power table.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub n_x: Option<usize>,
    pub n_y: Option<usize>,
    pub spike_x: SpikeSpec,
    pub spike_y: SpikeSpec,
}

impl Scenario {
    /// The base configuration specialised to this scenario.
    pub fn apply(&self, base: &McConfig) -> McConfig {
        McConfig {
            n_x: self.n_x.unwrap_or(base.n_x),
            n_y: self.n_y.unwrap_or(base.n_y),
            spike_x: Some(self.spike_x.clone()),
            spike_y: Some(self.spike_y.clone()),
            ..base.clone()
        }
    }
}

/// A base configuration plus its scenario rows.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub base: McConfig,
    pub scenarios: Vec<Scenario>,
}

#[derive(Default)]
struct ScenarioFields {
    id: Option<String>,
    n_x: Option<usize>,
    n_y: Option<usize>,
    theta_x: Option<f64>,
    u_x: Option<Direction>,
    theta_y: Option<f64>,
    u_y: Option<Direction>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidConfig(format!("invalid value {value:?} for {key}")))
}

fn parse_spikes(value: &str, base_dir: &Path) -> Result<Vec<SpikeSpec>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|entry| {
            let (theta, direction) = entry
                .split_once(':')
                .ok_or_else(|| Error::InvalidConfig(format!("spike {entry:?} is not of the form theta:direction")))?;
            Ok(SpikeSpec { theta: parse_value("shared_spikes", theta.trim())?, direction: Direction::parse(direction, base_dir)? })
        })
        .collect()
}

fn pair(theta: Option<f64>, direction: Option<Direction>, label: &str) -> Result<Option<SpikeSpec>> {
    match (theta, direction) {
        (Some(theta), Some(direction)) => Ok(Some(SpikeSpec { theta, direction })),
        (None, None) => Ok(None),
        _ => Err(Error::InvalidConfig(format!("theta_{label} and u_{label} must be given together"))),
    }
}

impl StudyConfig {
    /// Parses configuration text; relative vector paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut base = McConfig::default();
        let mut seen = std::collections::HashSet::new();
        let mut theta_x = None;
        let mut u_x = None;
        let mut theta_y = None;
        let mut u_y = None;
        let mut groups: BTreeMap<usize, ScenarioFields> = BTreeMap::new();

        for (number, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", number + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidConfig(format!("duplicate key {key}")));
            }
            if let Some(rest) = key.strip_prefix("scenario.") {
                let (index, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::InvalidConfig(format!("malformed scenario key {key}")))?;
                let index: usize = parse_value(key, index)?;
                let group = groups.entry(index).or_default();
                match field {
                    "id" => group.id = Some(value.to_string()),
                    "n_x" => group.n_x = Some(parse_value(key, value)?),
                    "n_y" => group.n_y = Some(parse_value(key, value)?),
                    "theta_x" => group.theta_x = Some(parse_value(key, value)?),
                    "u_x" => group.u_x = Some(Direction::parse(value, base_dir)?),
                    "theta_y" => group.theta_y = Some(parse_value(key, value)?),
                    "u_y" => group.u_y = Some(Direction::parse(value, base_dir)?),
                    other => return Err(Error::InvalidConfig(format!("unknown scenario field {other}"))),
                }
                continue;
            }
            match key {
                "m" => base.m = parse_value(key, value)?,
                "n_x" => base.n_x = parse_value(key, value)?,
                "n_y" => base.n_y = parse_value(key, value)?,
                "rho" => base.rho = parse_value(key, value)?,
                "sigma" => base.sigma = parse_value(key, value)?,
                "shared_spikes" => base.shared_spikes = parse_spikes(value, base_dir)?,
                "k" => base.k = parse_value(key, value)?,
                "reps" => base.reps = parse_value(key, value)?,
                "calibration_reps" => base.calibration_reps = Some(parse_value(key, value)?),
                "level" => base.level = parse_value(key, value)?,
                "seed" => base.seed = parse_value(key, value)?,
                "methods" => {
                    base.methods = value
                        .split(',')
                        .map(|m| m.parse::<Method>().map_err(|e| Error::InvalidConfig(e.to_string())))
                        .collect::<Result<Vec<_>>>()?;
                }
                "theta_x" => theta_x = Some(parse_value(key, value)?),
                "u_x" => u_x = Some(Direction::parse(value, base_dir)?),
                "theta_y" => theta_y = Some(parse_value(key, value)?),
                "u_y" => u_y = Some(Direction::parse(value, base_dir)?),
                other => return Err(Error::InvalidConfig(format!("unknown key {other}"))),
            }
        }
        base.spike_x = pair(theta_x, u_x, "x")?;
        base.spike_y = pair(theta_y, u_y, "y")?;
        base.validate()?;

        let mut scenarios = Vec::with_capacity(groups.len());
        for (index, group) in groups {
            let missing = |field: &str| Error::InvalidConfig(format!("scenario.{index}.{field} is missing"));
            let scenario = Scenario {
                id: group.id.unwrap_or_else(|| format!("scenario{index}")),
                n_x: group.n_x,
                n_y: group.n_y,
                spike_x: SpikeSpec {
                    theta: group.theta_x.ok_or_else(|| missing("theta_x"))?,
                    direction: group.u_x.ok_or_else(|| missing("u_x"))?,
                },
                spike_y: SpikeSpec {
                    theta: group.theta_y.ok_or_else(|| missing("theta_y"))?,
                    direction: group.u_y.ok_or_else(|| missing("u_y"))?,
                },
            };
            scenario.apply(&base).validate()?;
            scenarios.push(scenario);
        }
        Ok(Self { base, scenarios })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    /// Scenario configurations, or the base alone when no scenarios are listed.
    pub fn expanded(&self) -> Vec<(String, McConfig)> {
        if self.scenarios.is_empty() {
            return vec![("base".to_string(), self.base.clone())];
        }
        self.scenarios.iter().map(|s| (s.id.clone(), s.apply(&self.base))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# shared model
m = 50
n_x = 40
n_y = 30
rho = 0.2
shared_spikes = 500:e3, 150:e4
k = 3
reps = 10
level = 0.05
seed = 7
methods = T1, t2
scenario.1.id = null
scenario.1.theta_x = 7
scenario.1.u_x = e1
scenario.1.theta_y = 7
scenario.1.u_y = e1
scenario.2.id = rotate
scenario.2.theta_x = 7
scenario.2.u_x = e1
scenario.2.theta_y = 7
scenario.2.u_y = e2
scenario.2.n_x = 60
";

    fn sample() -> StudyConfig {
        StudyConfig::parse(SAMPLE, Path::new(".")).unwrap()
    }

    #[test]
    fn parses_globals_and_scenarios() {
        let study = sample();
        assert_eq!(study.base.m, 50);
        assert_eq!(study.base.shared_spikes, vec![SpikeSpec::canonical(500.0, 3), SpikeSpec::canonical(150.0, 4)]);
        assert_eq!(study.base.methods, vec![Method::T1, Method::T2]);
        assert_eq!(study.scenarios.len(), 2);
        let expanded = study.expanded();
        assert_eq!(expanded[1].0, "rotate");
        assert_eq!(expanded[1].1.n_x, 60);
        assert!(expanded[0].1.is_null());
        let p = expanded[1].1.perturbation_y().unwrap();
        assert_eq!(p.thetas(), vec![500.0, 150.0, 7.0]);
    }

    #[test]
    fn text_round_trip_preserves_model() {
        let config = sample().expanded()[1].1.clone();
        let again = StudyConfig::parse(&config.to_text(), Path::new(".")).unwrap();
        assert_eq!(again.base, config);
        assert_eq!(again.base.model_hash(), config.model_hash());
    }

    #[test]
    fn hash_tracks_model_not_harness() {
        let config = sample().expanded()[0].1.clone();
        let more_reps = McConfig { reps: 99, seed: 3, ..config.clone() };
        assert_eq!(config.model_hash(), more_reps.model_hash());
        let other = McConfig { rho: 0.3, ..config.clone() };
        assert_ne!(config.model_hash(), other.model_hash());
        assert_eq!(config.model_hash().len(), 64);
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            "reps = 0",
            "n_x = 10\nn_y = 20",
            "level = 1.5",
            "bogus = 1",
            "m = 5\nm = 6",
            "theta_x = 5",
            "methods = T9",
            "scenario.1.theta_x = 5",
            "shared_spikes = 5e3",
            "m = abc",
        ] {
            assert!(StudyConfig::parse(bad, Path::new(".")).is_err(), "{bad}");
        }
    }

    #[test]
    fn file_directions_resolve_relative_to_config() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("u.csv"), "0.6\n0.8\n0\n").unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "m = 3\nn_x = 5\nn_y = 5\ntheta_x = 4\nu_x = u.csv\n").unwrap();
        let study = StudyConfig::from_file(&path).unwrap();
        let p = study.base.perturbation_x().unwrap();
        assert!((p.spikes()[0].direction[1] - 0.8).abs() < 1e-15);
    }
}
