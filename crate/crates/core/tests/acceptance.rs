//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! straight to stderr so it shows up even when output is captured.

use std::io::Write;
use std::time::Instant;

use cbf_minphase::cli::{execute_run, RunConfig, SUMMARY_FILE, TRAJECTORY_FILE};
use cbf_minphase::scenarios::*;
use cbf_minphase::simulation::{error_signal, fit_decay_rate, Classification, Trajectory, Verdict};
use cbf_minphase::verify;

fn report(id: u32, ok: bool, detail: String) {
    let status = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{status} criterion {id}: {detail}");
    assert!(ok, "criterion {id}: {detail}");
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

fn run(params: ScenarioParams) -> (Scenario, Trajectory, Verdict, f64) {
    let scenario = params.build().expect("scenario builds");
    let ((traj, verdict), secs) = timed(|| scenario.run_and_classify().expect("run completes"));
    (scenario, traj, verdict, secs)
}

fn with_wiring(name: &str, wiring: Wiring) -> ScenarioParams {
    let mut table = toml::Table::new();
    table.insert("wiring".into(), toml::Value::try_from(wiring).unwrap());
    ScenarioParams::from_table(name, table).unwrap()
}

#[test]
fn criterion_1_linear_minimum_phase() {
    let dir = tempfile::tempdir().unwrap();
    let (outcome, secs) = timed(|| execute_run(&RunConfig::new("linear_si"), dir.path()).unwrap());
    let s = &outcome.summary;
    let x = &s.final_sample.state;
    let target = [1.25, 0.0, 3.75];
    let state_err = x.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let eta_e = s.final_sample.eta[0];
    let mu_e = s.final_sample.mu;
    let ok = state_err <= 1e-2
        && s.verdict.min_h >= -1e-6
        && (eta_e - 3.75).abs() <= 1e-2
        && (mu_e - 7.5).abs() <= 1e-2
        && s.verdict.classification == Classification::Bounded
        && secs < 1.0;
    report(
        1,
        ok,
        format!(
            "final state error {state_err:.2e}, min h {:.3e}, eta_e {eta_e:.5}, mu_e {mu_e:.5}, {secs:.3} s",
            s.verdict.min_h
        ),
    );
}

#[test]
fn criterion_2_linear_nonminimum_phase() {
    let (_, traj, verdict, secs) = run(ScenarioParams::LinearSi(LinearSiParams {
        a: 1.0,
        ..Default::default()
    }));
    let max_x3 = traj.states.iter().map(|x| x[2].abs()).fold(0.0, f64::max);
    let t_end = *traj.times.last().unwrap();
    let ok = verdict.classification == Classification::Diverged
        && max_x3 > 1e4
        && t_end < 20.0
        && verdict.min_h >= -1e-6
        && secs < 1.0;
    report(
        2,
        ok,
        format!(
            "{}, max |x3| {max_x3:.4e} by t = {t_end:.3} s, min h {:.3e}, {secs:.3} s",
            verdict.classification, verdict.min_h
        ),
    );
}

#[test]
fn criterion_3_min_phase_equivalence() {
    let (r, secs) = timed(|| verify::min_phase_suite(verify::DEFAULT_SEED, 200));
    report(3, r.passed() && r.cases == 200 && secs < 5.0, format!("{}, {secs:.3} s", r.line()));
}

#[test]
fn criterion_4_forward_invariance() {
    let mut worst = f64::INFINITY;
    let mut runs = 0;
    let mut lines = Vec::new();
    let mut cases: Vec<(String, ScenarioParams)> = Vec::new();
    for name in SCENARIO_NAMES {
        for &wiring in ScenarioParams::wirings(name) {
            if wiring != Wiring::Unfiltered {
                cases.push((format!("{name}/{wiring}"), with_wiring(name, wiring)));
            }
        }
    }
    cases.push((
        "cartpole_si/kappa_ps gamma=2".into(),
        ScenarioParams::CartpoleSi(CartpoleSiParams {
            gamma: 2.0,
            ..Default::default()
        }),
    ));
    for (label, params) in cases {
        let (_, traj, _, _) = run(params);
        let m = traj.min_phi();
        worst = worst.min(m);
        runs += 1;
        if m < -1e-6 {
            lines.push(format!("{label}: min phi {m:.3e}"));
        }
    }
    report(
        4,
        worst >= -1e-6,
        format!("min phi over {runs} filtered runs {worst:.3e} {}", lines.join("; ")),
    );
}

#[test]
fn criterion_5_cartpole_gamma_threshold() {
    let theta_limit = 60f64.to_radians() + 1e-3;
    let (_, hi, hi_v, hi_s) = run(ScenarioParams::CartpoleSi(CartpoleSiParams {
        gamma: 10.0,
        ..Default::default()
    }));
    let hi_theta = hi.states.iter().map(|x| x[1].abs()).fold(0.0, f64::max);
    let hi_eta = hi.eta.iter().map(|e| e[0].abs()).fold(0.0, f64::max);
    let hi_ok = hi_v.classification == Classification::Bounded
        && hi_theta <= theta_limit
        && hi_eta <= 10.0
        && hi_v.min_h >= -1e-6
        && hi_s < 5.0;

    let (_, lo, lo_v, lo_s) = run(ScenarioParams::CartpoleSi(CartpoleSiParams {
        gamma: 2.0,
        ..Default::default()
    }));
    let lo_eta = lo.eta.iter().map(|e| e[0].abs()).fold(0.0, f64::max);
    let lo_ok = lo_v.drift && lo_v.divergence_time.is_some_and(|t| t < 30.0) && lo_s < 5.0;

    report(
        5,
        hi_ok && lo_ok,
        format!(
            "gamma=10: {} max|theta| {:.3} deg max|eta1| {hi_eta:.3} ({hi_s:.2} s); \
             gamma=2: drift {} max|eta1| {lo_eta:.3} final s_dot {:.4} ({lo_s:.2} s)",
            hi_v.classification,
            hi_theta.to_degrees(),
            lo_v.drift,
            lo_v.final_state[2]
        ),
    );
}

#[test]
fn criterion_6_multi_input_linear() {
    let (_, traj, eq_v, _) = run(with_wiring("linear_mi", Wiring::EqualityAugmentedQp));
    let x3 = traj.final_state().unwrap()[2];
    let t_end = *traj.times.last().unwrap();
    let (_, _, mn_v, _) = run(with_wiring("linear_mi", Wiring::MinNorm));
    let ok = eq_v.classification == Classification::Bounded
        && x3.abs() <= 1e-2
        && (t_end - 20.0).abs() < 1e-9
        && mn_v.classification == Classification::Diverged;
    report(
        6,
        ok,
        format!(
            "equality QP {} with x3(20) = {x3:.3e}; min-norm {}",
            eq_v.classification, mn_v.classification
        ),
    );
}

#[test]
fn criterion_7_multi_input_cartpole() {
    let (_, _, un, _) = run(with_wiring("cartpole_mi", Wiring::Unfiltered));
    let (_, _, mn, _) = run(with_wiring("cartpole_mi", Wiring::MinNorm));
    let (_, _, qp, _) = run(with_wiring("cartpole_mi", Wiring::ClfCbfQp));
    let theta_err = (qp.final_state[1] - 55f64.to_radians()).abs().to_degrees();
    let s_dot = qp.final_state[2];
    let ok = un.classification == Classification::Unsafe
        && mn.drift
        && qp.classification == Classification::Bounded
        && theta_err <= 1.0
        && s_dot.abs() <= 0.05;
    report(
        7,
        ok,
        format!(
            "unfiltered {}, min-norm {} (drift {}), clf-cbf-qp {} with |theta-55| = {theta_err:.3} deg, s_dot = {s_dot:.4}",
            un.classification, mn.classification, mn.drift, qp.classification
        ),
    );
}

#[test]
fn criterion_8_property_suites() {
    let bound = verify::gamma_bound_suite(verify::DEFAULT_SEED, 1000);
    let lyap = verify::lyapunov_suite(verify::DEFAULT_SEED, 200);

    // bounded error signal along the kappa_ps cart-pole run
    let (s, traj, _, _) = run(ScenarioParams::CartpoleSi(CartpoleSiParams::default()));
    let norms: Vec<f64> = error_signal(&traj, &s.spec).iter().map(|d| d.norm()).collect();
    let sup = norms.iter().copied().fold(0.0, f64::max);
    let half = norms.len() / 2;
    let early = norms[..half].iter().copied().fold(0.0, f64::max);
    let late = norms[half..].iter().copied().fold(0.0, f64::max);
    let bounded = sup.is_finite() && late <= early;

    // exponential envelope under constant mu
    let mut rates = Vec::new();
    let mut rate_ok = true;
    for gammas in [vec![2.0, 3.0], vec![3.0, 5.0], vec![4.0, 1.5]] {
        let p = LinearSiParams {
            wiring: Wiring::KappaPs,
            gammas: gammas.clone(),
            ..Default::default()
        };
        let (s, traj, _, _) = run(ScenarioParams::LinearSi(p));
        let norms: Vec<f64> = error_signal(&traj, &s.spec).iter().map(|d| d.norm()).collect();
        let rate = fit_decay_rate(&traj.times, &norms, 1e-10).unwrap_or(f64::NAN);
        rate_ok &= rate >= 0.9 * s.spec.gamma_min();
        rates.push(format!("{gammas:?} -> {rate:.3}"));
    }

    report(
        8,
        bound.passed() && lyap.passed() && bounded && rate_ok,
        format!(
            "{}; {}; sup|dphi| {sup:.3} (first half {early:.3}, second half {late:.3}); decay rates {}",
            bound.line(),
            lyap.line(),
            rates.join(", ")
        ),
    );
}

#[test]
fn criterion_9_qp_oracle() {
    let r = verify::qp_suite(verify::DEFAULT_SEED, 500);
    report(9, r.passed() && r.cases == 500, r.line());
}

#[test]
fn criterion_10_determinism() {
    let mut details = Vec::new();
    let mut ok = true;
    for name in SCENARIO_NAMES {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = RunConfig::new(name);
        execute_run(&cfg, a.path()).unwrap();
        execute_run(&cfg, b.path()).unwrap();
        let same = [TRAJECTORY_FILE, SUMMARY_FILE]
            .iter()
            .all(|f| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap());
        ok &= same;
        details.push(format!("{name} {}", if same { "identical" } else { "differs" }));
    }
    report(10, ok, details.join(", "));
}
