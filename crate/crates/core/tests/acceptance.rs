//! End-to-end acceptance run: prints one PASS/FAIL line per criterion and
//! exits with a failure status if any criterion fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spiketest::config::{McConfig, StudyConfig};
use spiketest::datagen::{apply_perturbation, gen_ar1_gaussian, PerturbationSpec};
use spiketest::estimators::{filtered_covariance, FitOptions, PopulationFit};
use spiketest::lab::{estimator_quality, run_lab, InvarianceCheckResult, LabGrid, LabSelection, TheoremId};
use spiketest::power::{run_scenario, CalibrationCache, ScenarioOutcome};
use spiketest::spectral::{eig_sym, eigenvalues_sym, gram_spectrum, secular_residual};
use spiketest::stats::ks_distance_uniform;
use spiketest::twosample::{g_jacobian, g_map, t3_residual_spikes, t3_residual_spikes_direct, Method};

const BLOCK1_REPS: usize = 200;
const SPOT_CHECK_TOLERANCE: f64 = 0.08;
const UNIFORMITY_REPS: usize = 500;
const UNIFORMITY_KS: f64 = 0.08;
const EXACT_TOLERANCE: f64 = 1e-8;
const GRADIENT_POINTS: usize = 20;
const GRADIENT_STEP: f64 = 1e-5;
const GRADIENT_RELATIVE_ERROR: f64 = 1e-4;
const QUALITY_THETA: f64 = 50.0;
const QUALITY_M: usize = 500;
const QUALITY_ASPECT: f64 = 2.0;
const QUALITY_REPS: usize = 200;
const QUALITY_BIAS_LIMIT: f64 = 1.0;
const QUALITY_ANGLE_TOLERANCE: f64 = 0.02;
const LAB_SLOPE_TARGET: f64 = -1.0;
const LAB_SLOPE_TOLERANCE: f64 = 0.3;
const LAB_KS: f64 = 0.1;

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn criterion(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(id.to_string());
        }
    }
}

fn detail(pass: bool, text: String) -> bool {
    println!("    {} {text}", if pass { "ok " } else { "BAD" });
    pass
}

fn bound(value: Option<f64>, open: &str) -> String {
    value.map_or_else(|| open.to_string(), |v| format!("{v:.4}"))
}

fn power_study() -> StudyConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/power_study.cfg");
    StudyConfig::from_file(&path).expect("configs/power_study.cfg parses")
}

fn scenario(study: &StudyConfig, id: &str) -> McConfig {
    study
        .expanded()
        .into_iter()
        .find(|(sid, _)| sid == id)
        .unwrap_or_else(|| panic!("scenario {id} missing from power_study.cfg"))
        .1
}

fn power_of(outcome: &ScenarioOutcome, method: Method) -> f64 {
    outcome.outcome(method).expect("method was run").power()
}

/// `(method, lower, upper, reference value)` bounds for one power-study column.
type Column = (&'static str, Vec<(Method, f64, f64, f64)>);

fn block1(report: &mut Report, study: &StudyConfig, cache: &mut CalibrationCache) {
    let columns: Vec<Column> = vec![
        (
            "b1-null",
            vec![
                (Method::T1, 0.01, 0.10, 0.05),
                (Method::T2, 0.01, 0.11, 0.06),
                (Method::T3, 0.0, 0.03, 0.0),
                (Method::T4, 0.01, 0.10, 0.04),
                (Method::T5, 0.005, 0.09, 0.035),
            ],
        ),
        (
            "b1-orientation7",
            vec![(Method::T2, 0.95, 1.0, 1.0), (Method::T3, 0.25, 0.50, 0.37), (Method::T1, 0.0, 0.10, 0.04)],
        ),
        (
            "b1-orientation50",
            vec![
                (Method::T2, 0.95, 1.0, 1.0),
                (Method::T3, 0.95, 1.0, 1.0),
                (Method::T5, 0.95, 1.0, 1.0),
                (Method::T4, 0.0, 0.20, 0.11),
            ],
        ),
        (
            "b1-size7v17",
            vec![
                (Method::T1, 0.95, 1.0, 1.0),
                (Method::T2, 0.95, 1.0, 1.0),
                (Method::T3, 0.75, 0.95, 0.85),
                (Method::T4, 0.0, 0.12, 0.06),
            ],
        ),
        ("b1-size300v600", vec![(Method::T1, 0.82, 0.98, 0.91), (Method::T2, 0.9, 1.0, 0.99), (Method::T3, 0.95, 1.0, 0.995)]),
    ];
    let mut all = true;
    for (id, bounds) in columns {
        let mut config = scenario(study, id);
        config.reps = BLOCK1_REPS;
        let outcome = run_scenario(id, &config, cache).expect("scenario runs");
        for (method, lo, hi, reference) in bounds {
            let power = power_of(&outcome, method);
            all &= detail(
                (lo..=hi).contains(&power),
                format!("{id} {method}: power {power:.3} in [{lo}, {hi}] (reference {reference})"),
            );
        }
    }
    report.criterion("power-block1", all, format!("five columns at m = 500, n = 250, {BLOCK1_REPS} replications"));
}

fn blocks23(report: &mut Report, study: &StudyConfig, cache: &mut CalibrationCache) {
    let cells = [
        ("b2-orientation7", Method::T2, 1.0),
        ("b2-null", Method::T1, 0.06),
        ("b3-size300v600", Method::T1, 1.0),
        ("b3-null", Method::T2, 0.03),
    ];
    let mut all = true;
    for (id, method, reference) in cells {
        let mut config = scenario(study, id);
        config.methods = vec![method];
        config.reps = BLOCK1_REPS;
        let outcome = run_scenario(id, &config, cache).expect("scenario runs");
        let power = power_of(&outcome, method);
        all &= detail(
            (power - reference).abs() <= SPOT_CHECK_TOLERANCE,
            format!("{id} {method}: power {power:.3}, reference {reference} ± {SPOT_CHECK_TOLERANCE}"),
        );
    }
    report.criterion("power-blocks2-3", all, "two spot-check cells per block with n_x = 1000".into());
}

fn null_uniformity(report: &mut Report, study: &StudyConfig, cache: &mut CalibrationCache) {
    let mut config = scenario(study, "b1-null");
    config.methods = vec![Method::T1, Method::T2];
    config.reps = UNIFORMITY_REPS;
    let outcome = run_scenario("uniformity", &config, cache).expect("null scenario runs");
    let mut all = true;
    for method in [Method::T1, Method::T2] {
        let result = outcome.outcome(method).expect("method was run");
        let p: Vec<f64> = result.p_values.iter().flatten().copied().collect();
        let ks = ks_distance_uniform(&p);
        all &= detail(
            ks < UNIFORMITY_KS && p.len() == UNIFORMITY_REPS,
            format!("{method}: KS distance {ks:.4} over {} null p-values (limit {UNIFORMITY_KS})", p.len()),
        );
    }
    report.criterion("null-uniformity", all, format!("T1 and T2 p-values at theta = 7, {UNIFORMITY_REPS} replications"));
}

fn random_unit(m: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize()
}

fn spiked_fit(m: usize, n: usize, spikes: &[(f64, usize)], k: usize, seed: u64) -> PopulationFit {
    let raw = gen_ar1_gaussian(m, n, 0.0, 1.0, seed).expect("noise");
    let data = apply_perturbation(&raw, &PerturbationSpec::canonical(m, spikes).expect("spec")).expect("perturb");
    PopulationFit::from_data(&data, k, &FitOptions::default()).expect("fit")
}

fn exact_identities(report: &mut Report, lab: &[InvarianceCheckResult]) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut t3_error: f64 = 0.0;
    for seed in 0..20 {
        let fx = spiked_fit(150, 75, &[(40.0, 0), (15.0, 1)], 2, 100 + seed);
        let fy = spiked_fit(150, 90, &[(30.0, 0), (12.0, 2)], 2, 200 + seed);
        for s in 0..2 {
            let closed = t3_residual_spikes(&fx, &fy, s).expect("closed form");
            let (plus, minus) = t3_residual_spikes_direct(&fx, &fy, s).expect("direct");
            t3_error = t3_error.max((closed.plus - plus).abs() / plus.abs().max(1.0));
            t3_error = t3_error.max((closed.minus - minus).abs() / minus.abs().max(1.0));
        }
    }
    let t3_ok = detail(t3_error < EXACT_TOLERANCE, format!("T3 closed form vs reduced eigenvalues: max error {t3_error:.2e}"));

    let mut filtered_error: f64 = 0.0;
    for seed in 0..10 {
        let fit = spiked_fit(120, 60, &[(25.0, 3), (9.0, 7), (60.0, 11)], 3, 300 + seed);
        let filtered = filtered_covariance(&fit).expect("filtered covariance");
        for power in [1.0, -0.5] {
            let dense = filtered.to_dense_power(power);
            for _ in 0..5 {
                let v = random_unit(120, &mut rng);
                let err = (filtered.apply_power(&v, power) - &dense * &v).amax();
                filtered_error = filtered_error.max(err);
            }
        }
    }
    let filtered_ok =
        detail(filtered_error < EXACT_TOLERANCE, format!("filtered covariance rank-k apply vs dense: max error {filtered_error:.2e}"));

    let mut secular_error: f64 = 0.0;
    for trial in 0..20 {
        let m = 10 + 2 * trial;
        let x = DMatrix::from_fn(m, 2 * m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = &x * x.transpose() / (2 * m) as f64;
        let u = random_unit(m, &mut rng);
        let theta = 3.0 + trial as f64;
        let root_p = DMatrix::identity(m, m) + &u * u.transpose() * (theta.sqrt() - 1.0);
        let top = eig_sym(&(&root_p * &w * &root_p)).expect("eig").spectrum.eigenvalues()[0];
        let noise = eig_sym(&w).expect("eig");
        let angles: Vec<f64> = (0..m).map(|i| noise.vectors.column(i).dot(&u).powi(2)).collect();
        let residual = secular_residual(&noise.spectrum, &angles, theta, top).expect("residual");
        secular_error = secular_error.max(residual.abs());
    }
    let secular_ok =
        detail(secular_error < EXACT_TOLERANCE, format!("secular residual at eigensolver roots (m <= 48): max {secular_error:.2e}"));

    let mut gram_error: f64 = 0.0;
    for trial in 0..20 {
        let m = 10 + 2 * trial;
        let k = 1 + trial % 5;
        let weights: Vec<f64> =
            (0..k).map(|i| if (i + trial) % 3 == 2 { -rng.gen_range(0.2..3.0) } else { rng.gen_range(0.2..10.0) }).collect();
        let vectors: Vec<DVector<f64>> = (0..k).map(|_| random_unit(m, &mut rng)).collect();
        let mut dense = DMatrix::zeros(m, m);
        for (w, v) in weights.iter().zip(&vectors) {
            dense += v * v.transpose() * *w;
        }
        let mut nonzero: Vec<f64> =
            eigenvalues_sym(&dense).expect("eig").eigenvalues().iter().copied().filter(|v| v.abs() > 1e-9).collect();
        nonzero.sort_by(|a, b| b.total_cmp(a));
        let reduced = gram_spectrum(&weights, &vectors).expect("gram");
        if nonzero.len() != reduced.dim() {
            gram_error = f64::INFINITY;
            continue;
        }
        for (a, b) in nonzero.iter().zip(reduced.eigenvalues()) {
            gram_error = gram_error.max((a - b).abs());
        }
    }
    let gram_ok = detail(gram_error < EXACT_TOLERANCE, format!("gram reduction vs dense eigensolver (m <= 48, k <= 5): max error {gram_error:.2e}"));

    let failures_of = |id: TheoremId| lab.iter().find(|r| r.theorem_id == id).map_or(usize::MAX, |r| r.exact_identity_failures);
    let basis_failures = failures_of(TheoremId::DoubleDot);
    let basis_ok =
        detail(basis_failures == 0, format!("basis identity (1e-12) on every lab replication: {basis_failures} failures"));
    let lemma_failures = failures_of(TheoremId::LemmaW);
    let lemma_ok = detail(lemma_failures == 0, format!("weighted-square identity on every lab replication: {lemma_failures} failures"));

    report.criterion(
        "exact-identities",
        t3_ok && filtered_ok && secular_ok && gram_ok && basis_ok && lemma_ok,
        format!("tolerance {EXACT_TOLERANCE:e}, basis identity 1e-12"),
    );
}

fn gradient(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    for point in 0..GRADIENT_POINTS {
        let fx = spiked_fit(200, 100 + 10 * point, &[(20.0, 0)], 1, 400 + point as u64);
        let fy = spiked_fit(200, 120 + 5 * point, &[(30.0, 0)], 1, 500 + point as u64);
        let (bx, by) = (&fx.bulk, &fy.bulk);
        let rx = bx.max() * rng.gen_range(2.0..40.0);
        let ry = by.max() * rng.gen_range(2.0..40.0);
        let angle = rng.gen_range(0.0..1.0);
        let analytic = g_jacobian(bx, by, rx, ry).expect("jacobian");
        let args = [rx, ry, angle];
        for j in 0..3 {
            let mut up = args;
            let mut down = args;
            up[j] += GRADIENT_STEP;
            down[j] -= GRADIENT_STEP;
            let gu = g_map(bx, by, up[0], up[1], up[2]).expect("g");
            let gd = g_map(bx, by, down[0], down[1], down[2]).expect("g");
            for i in 0..2 {
                let numeric = (gu[i] - gd[i]) / (2.0 * GRADIENT_STEP);
                let exact = analytic[(i, j)];
                let scale = exact.abs().max(1e-8);
                worst = worst.max((numeric - exact).abs() / scale);
            }
        }
    }
    report.criterion(
        "t2-gradient",
        worst < GRADIENT_RELATIVE_ERROR,
        format!("max relative error {worst:.2e} over {GRADIENT_POINTS} points, step {GRADIENT_STEP:e} (limit {GRADIENT_RELATIVE_ERROR:e})"),
    );
}

fn quality(report: &mut Report) {
    let q = estimator_quality(QUALITY_M, QUALITY_ASPECT, QUALITY_THETA, QUALITY_REPS, 11).expect("simulation");
    let raw_bias = (q.mean_theta_hat - QUALITY_THETA).abs();
    let corrected_bias = (q.mean_theta_unbiased - QUALITY_THETA).abs();
    let angle_gap = (q.mean_angle_sq - q.predicted_angle_sq).abs();
    let ok = detail(corrected_bias < raw_bias, format!("corrected bias {corrected_bias:.3} < raw bias {raw_bias:.3}"))
        & detail(corrected_bias < QUALITY_BIAS_LIMIT, format!("corrected bias {corrected_bias:.3} < {QUALITY_BIAS_LIMIT}"))
        & detail(
            angle_gap < QUALITY_ANGLE_TOLERANCE,
            format!("mean squared angle {:.4} vs predicted {:.4} (tolerance {QUALITY_ANGLE_TOLERANCE})", q.mean_angle_sq, q.predicted_angle_sq),
        )
        & detail(q.failures == 0, format!("{} replications without a corrected estimate", q.failures));
    report.criterion("estimator-quality", ok, format!("Wishart c = 2, theta = {QUALITY_THETA}, m = {QUALITY_M}, {QUALITY_REPS} replications"));
}

fn lab_checks(report: &mut Report, results: &[InvarianceCheckResult]) {
    let find = |id: TheoremId| results.iter().find(|r| r.theorem_id == id).expect("check ran");
    let mut all = true;
    let slope_checks = [
        (TheoremId::Eigenvalue, "slope_vs_m_over_theta"),
        (TheoremId::Angle, "slope_vs_theta_m"),
        (TheoremId::InvariantDot, "slope_vs_sqrt_theta_product_m"),
        (TheoremId::DoubleAngle, "slope_vs_theta_m"),
    ];
    for (id, name) in slope_checks {
        let slope = find(id).criterion(name).map_or(f64::NAN, |c| c.value);
        all &= detail(
            (slope - LAB_SLOPE_TARGET).abs() <= LAB_SLOPE_TOLERANCE,
            format!("{id}: slope {slope:.3}, target {LAB_SLOPE_TARGET} ± {LAB_SLOPE_TOLERANCE}"),
        );
    }
    let ks_checks = [
        (TheoremId::DotProduct, "ks_distance"),
        (TheoremId::Component, "ks_distance_spike_component"),
        (TheoremId::Component, "ks_distance_bulk_component"),
    ];
    for (id, name) in ks_checks {
        let ks = find(id).criterion(name).map_or(f64::NAN, |c| c.value);
        all &= detail(ks < LAB_KS, format!("{id} {name}: {ks:.4} (limit {LAB_KS})"));
    }
    for result in results {
        for c in result.criteria.iter().filter(|c| c.gating) {
            all &= detail(c.pass, format!("{} {}: {:.4} within [{}, {}]", result.theorem_id, c.name, c.value, bound(c.lower, "-inf"), bound(c.upper, "inf")));
        }
    }
    report.criterion("invariance-lab", all, "m in {100, 200, 400}, theta in {50, 100}; distributions at 500 replications".into());
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut report = Report { failures: Vec::new() };
    let study = power_study();
    let mut cache = CalibrationCache::new();

    let grid = LabGrid::default();
    let lab = run_lab(&LabSelection::All, &grid).expect("lab runs");

    block1(&mut report, &study, &mut cache);
    blocks23(&mut report, &study, &mut cache);
    null_uniformity(&mut report, &study, &mut cache);
    exact_identities(&mut report, &lab);
    gradient(&mut report);
    quality(&mut report);
    lab_checks(&mut report, &lab);

    println!("acceptance finished in {:.0} s", start.elapsed().as_secs_f64());
    if report.failures.is_empty() {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {}", report.failures.join(", "));
        ExitCode::FAILURE
    }
}
