use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use spiketest::calibration::{CalibrationModel, NullCalibration, ResidualCalibration};
use spiketest::config::{McConfig, StudyConfig};
use spiketest::datagen::DataMatrix;
use spiketest::estimators::FitOptions;
use spiketest::io::{read_matrix_file, write_matrix_file};
use spiketest::lab::{run_lab, write_lab_outputs, LabGrid, LabSelection};
use spiketest::power::{analyse_pair_with, evaluate_method, power_rows, run_scenario, simulate_pair, write_power_csv, CalibrationCache};
use spiketest::rng::DOMAIN_SCENARIO;
use spiketest::twosample::{Method, TestOptions};

const EXIT_ACCEPT: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_REJECT: u8 = 2;

#[derive(Parser)]
#[command(name = "spiketest", version, about = "Spike-model two-sample covariance tests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one X/Y dataset pair from a configuration.
    Simulate(SimulateArgs),
    /// Run one test on two CSV data matrices (rows are variables).
    Test(TestArgs),
    /// Monte Carlo power table for every scenario of a configuration.
    Power(PowerArgs),
    /// Simulate the null distribution of T3, T4 or T5.
    Calibrate(CalibrateArgs),
    /// Run invariance-lab checks.
    Lab(LabArgs),
}

#[derive(Args)]
struct SimulateArgs {
    config: PathBuf,
    out_dir: PathBuf,
    /// Scenario id to draw from; the base configuration when omitted.
    #[arg(long)]
    scenario: Option<String>,
    /// Replication index; replication r matches replication r of `power`.
    #[arg(long, default_value_t = 0)]
    rep: u64,
    /// Write a header row of observation labels.
    #[arg(long)]
    header: bool,
}

#[derive(Args)]
struct TestArgs {
    method: Method,
    k: usize,
    file_x: PathBuf,
    file_y: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Run even when two fitted spikes coincide.
    #[arg(long)]
    force: bool,
    /// Null calibration file produced by `calibrate` (T3, T4, T5).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Configuration the calibration must match; checked when given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input files start with a header row.
    #[arg(long)]
    header: bool,
    #[arg(long)]
    gap_threshold: Option<f64>,
    #[command(flatten)]
    residual: ResidualOverride,
}

/// Residual-spike reference parameters supplied directly instead of a calibration file.
#[derive(Args)]
struct ResidualOverride {
    #[arg(long, requires_all = ["sigma_plus", "lambda_minus", "sigma_minus"])]
    lambda_plus: Option<f64>,
    #[arg(long)]
    sigma_plus: Option<f64>,
    #[arg(long)]
    lambda_minus: Option<f64>,
    #[arg(long)]
    sigma_minus: Option<f64>,
}

#[derive(Args)]
struct PowerArgs {
    config: PathBuf,
    out_csv: PathBuf,
    /// Restrict the run to these scenario ids.
    #[arg(long = "scenario")]
    scenarios: Vec<String>,
}

#[derive(Args)]
struct CalibrateArgs {
    method: Method,
    config: PathBuf,
    out: PathBuf,
    /// Scenario whose null model is calibrated; the base configuration when omitted.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Args)]
struct LabArgs {
    /// Check id or `all`.
    selection: String,
    grid: PathBuf,
    out_dir: PathBuf,
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("SPIKETEST_THREADS") {
        let threads: usize = value.trim().parse().with_context(|| format!("SPIKETEST_THREADS={value:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

fn select_config(path: &Path, scenario: Option<&str>) -> Result<(String, McConfig)> {
    let study = StudyConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?;
    match scenario {
        None => Ok(("base".to_string(), study.base.clone())),
        Some(id) => study
            .expanded()
            .into_iter()
            .find(|(sid, _)| sid == id)
            .with_context(|| format!("no scenario {id:?} in {}", path.display())),
    }
}

fn simulate(args: &SimulateArgs) -> Result<u8> {
    let (id, config) = select_config(&args.config, args.scenario.as_deref())?;
    let (x, y) = simulate_pair(&config, DOMAIN_SCENARIO, config.model_key(), args.rep)?;
    fs::create_dir_all(&args.out_dir)?;
    write_matrix_file(args.out_dir.join("X.csv"), &x.values, args.header)?;
    write_matrix_file(args.out_dir.join("Y.csv"), &y.values, args.header)?;
    let sidecar = format!(
        "# spiketest simulate provenance\n# scenario = {id}\n# replication = {}\n# model_hash = {}\n# reproduce with: spiketest simulate <this file> <dir> --rep {}\n{}",
        args.rep,
        config.model_hash(),
        args.rep,
        config.to_text()
    );
    fs::write(args.out_dir.join("provenance.cfg"), sidecar)?;
    Ok(EXIT_ACCEPT)
}

fn load_matrix(path: &Path, header: bool) -> Result<DataMatrix> {
    let values = read_matrix_file(path, header).with_context(|| format!("reading {}", path.display()))?;
    Ok(DataMatrix::new(values)?)
}

fn test_calibrations(args: &TestArgs, m: usize) -> Result<BTreeMap<Method, NullCalibration>> {
    let mut out = BTreeMap::new();
    let r = &args.residual;
    if let (Some(lambda_plus), Some(sigma_plus), Some(lambda_minus), Some(sigma_minus)) =
        (r.lambda_plus, r.sigma_plus, r.lambda_minus, r.sigma_minus)
    {
        if args.method != Method::T3 {
            bail!("residual parameters apply only to T3");
        }
        let model = ResidualCalibration { lambda_plus, sigma_plus, lambda_minus, sigma_minus };
        model.validate()?;
        out.insert(
            Method::T3,
            NullCalibration {
                method: Method::T3,
                config_hash: String::new(),
                reps: 0,
                seed: 0,
                m,
                k: args.k,
                failed: 0,
                model: CalibrationModel::Residual(model),
            },
        );
        return Ok(out);
    }
    if let Some(path) = &args.calibration {
        let calibration = NullCalibration::read(path).with_context(|| format!("reading {}", path.display()))?;
        if let Some(config_path) = &args.config {
            let (_, config) = select_config(config_path, None)?;
            calibration.check_matches(args.method, &config)?;
        } else if calibration.method != args.method {
            bail!("calibration file is for {}, not {}", calibration.method, args.method);
        }
        if calibration.m != m || calibration.k != args.k {
            bail!("calibration was produced for m = {}, k = {}", calibration.m, calibration.k);
        }
        out.insert(calibration.method, calibration);
    }
    Ok(out)
}

fn test(args: &TestArgs) -> Result<u8> {
    let x = load_matrix(&args.file_x, args.header)?;
    let y = load_matrix(&args.file_y, args.header)?;
    if x.m() != y.m() {
        bail!("X has {} variables but Y has {}", x.m(), y.m());
    }
    let calibrations = test_calibrations(args, x.m())?;
    let mut fit_options = FitOptions::default();
    if let Some(threshold) = args.gap_threshold {
        fit_options.gap_threshold = threshold;
    }
    let baseline = matches!(args.method, Method::T4 | Method::T5);
    let analysis = analyse_pair_with(&x, &y, args.k, !baseline, baseline, &fit_options)?;
    let options = TestOptions { force: args.force, level: args.level };
    let report = evaluate_method(args.method, &analysis, &calibrations, &options)?;
    println!("{}", report.to_json());
    Ok(if report.rejects(args.level) { EXIT_REJECT } else { EXIT_ACCEPT })
}

fn power(args: &PowerArgs) -> Result<u8> {
    let study = StudyConfig::from_file(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut selected = study.expanded();
    if !args.scenarios.is_empty() {
        for wanted in &args.scenarios {
            if !selected.iter().any(|(id, _)| id == wanted) {
                bail!("no scenario {wanted:?} in {}", args.config.display());
            }
        }
        selected.retain(|(id, _)| args.scenarios.contains(id));
    }
    let mut cache = CalibrationCache::new();
    let mut outcomes = Vec::with_capacity(selected.len());
    for (id, config) in &selected {
        let outcome = run_scenario(id, config, &mut cache)?;
        for method in &outcome.outcomes {
            eprintln!(
                "{id:<24} {:<3} power {:.3} ± {:.3} ({} failed replications)",
                method.method,
                method.power(),
                method.mc_stderr(),
                method.errors()
            );
        }
        outcomes.push(outcome);
    }
    let file = fs::File::create(&args.out_csv).with_context(|| format!("creating {}", args.out_csv.display()))?;
    write_power_csv(std::io::BufWriter::new(file), &power_rows(&outcomes))?;
    Ok(EXIT_ACCEPT)
}

fn calibrate(args: &CalibrateArgs) -> Result<u8> {
    let (_, config) = select_config(&args.config, args.scenario.as_deref())?;
    let template = config.null_template();
    let calibration = spiketest::calibration::calibrate_null(args.method, &template, config.calibration_reps())?;
    calibration.write(&args.out)?;
    Ok(EXIT_ACCEPT)
}

fn lab(args: &LabArgs) -> Result<u8> {
    let selection: LabSelection = args.selection.parse()?;
    let grid = LabGrid::from_file(&args.grid).with_context(|| format!("reading {}", args.grid.display()))?;
    let results = run_lab(&selection, &grid)?;
    write_lab_outputs(&args.out_dir, &results)?;
    let mut identity_failures = 0;
    for result in &results {
        identity_failures += result.exact_identity_failures;
        eprintln!("{:<14} {}", result.theorem_id, if result.pass { "pass" } else { "FAIL" });
    }
    if identity_failures > 0 {
        eprintln!("{identity_failures} replications violated an exact identity");
        return Ok(EXIT_ERROR);
    }
    Ok(EXIT_ACCEPT)
}

fn run(cli: &Cli) -> Result<u8> {
    configure_threads()?;
    match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Test(args) => test(args),
        Command::Power(args) => power(args),
        Command::Calibrate(args) => calibrate(args),
        Command::Lab(args) => lab(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { EXIT_ERROR } else { EXIT_ACCEPT };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
