use std::path::Path;
use std::process::Command;

use cbf_minphase::cli::{execute_run, parse_csv, write_csv, RunConfig, SUMMARY_FILE, TRAJECTORY_FILE};
use cbf_minphase::numerics::with_negated_routh;
use cbf_minphase::scenarios::{linear_si, LinearSiParams};
use cbf_minphase::verify::{self, run_all};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cbf-minphase"))
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("binary runs").status.code().expect("exit code")
}

#[test]
fn csv_round_trip_is_exact() {
    let traj = linear_si(&LinearSiParams {
        horizon_s: 1.0,
        ..Default::default()
    })
    .unwrap()
    .run()
    .unwrap();
    let mut bytes = Vec::new();
    write_csv(&traj, &mut bytes).unwrap();
    let text = String::from_utf8(bytes).unwrap();
    assert!(!text.contains('\r'));
    let (header, rows) = parse_csv(&text).unwrap();
    assert_eq!(header.join(","), "t,x1,x2,x3,u1,mu,h,phi1,phi2,eta1,dphi1,dphi2");
    assert_eq!(rows.len(), traj.len());
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row[0], traj.times[k]);
        assert_eq!(&row[1..4], traj.states[k].as_slice());
        assert_eq!(row[4], traj.inputs[k][0]);
        assert_eq!(row[5], traj.mu[k]);
        assert_eq!(row[6], traj.h[k]);
        assert_eq!(&row[7..9], traj.phi[k].as_slice());
        assert_eq!(row[9], traj.eta[k][0]);
        assert_eq!(&row[10..12], traj.delta_phi[k].as_slice());
    }
}

#[test]
fn run_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ok");
    assert_eq!(exit_code(bin().args(["run", "--scenario", "linear_si", "--out"]).arg(&out)), 0);
    assert!(out.join(TRAJECTORY_FILE).exists() && out.join(SUMMARY_FILE).exists());

    let out = dir.path().join("nmp");
    assert_eq!(
        exit_code(bin().args(["run", "--scenario", "linear_si", "--set", "a=1", "--out"]).arg(&out)),
        0
    );

    // forcing the wrong expectation is a mismatch
    let out = dir.path().join("mismatch");
    assert_eq!(
        exit_code(
            bin()
                .args(["run", "--scenario", "linear_si", "--set", "expected=\"Diverged\"", "--out"])
                .arg(&out)
        ),
        2
    );
}

#[test]
fn malformed_or_unknown_config_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "scenario = \n",
        "scenario = \"linear_si\"\nhorizon_s = 3\n",
        "scenario = \"linear_si\"\n[params]\nhorizon = 3\n",
        "scenario = \"no_such\"\n",
        "scenario = \"linear_si\"\n[params]\ngammas = [2.0, -3.0]\n",
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = dir.path().join(format!("c{i}.toml"));
        std::fs::write(&cfg, text).unwrap();
        let out = dir.path().join(format!("out{i}"));
        let output = bin().arg("run").arg("--config").arg(&cfg).arg("--out").arg(&out).output().unwrap();
        assert_eq!(output.status.code(), Some(1), "case {i}");
        assert!(!output.stderr.is_empty());
        assert!(!out.exists(), "case {i} left output behind");
    }
}

#[test]
fn guard_violation_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new("cartpole_si");
    cfg.set("guard_deg", toml::Value::Float(20.0));
    let out = dir.path().join("run");
    assert!(execute_run(&cfg, &out).is_err());
    assert!(!out.join(TRAJECTORY_FILE).exists());
    assert!(!out.join(SUMMARY_FILE).exists());
}

fn sweep_index(dir: &Path) -> toml::Table {
    std::fs::read_to_string(dir.join("sweep_index.toml")).unwrap().parse().unwrap()
}

#[test]
fn sweep_over_a_matches_phase_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let code = exit_code(
        bin()
            .args(["sweep", "--scenario", "linear_si", "--param", "a", "--values", "-2", "-1", "1", "2", "--out"])
            .arg(dir.path())
            .env("CBF_MINPHASE_THREADS", "2"),
    );
    assert_eq!(code, 0);
    let index = sweep_index(dir.path());
    let runs = index["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 4);
    for run in runs {
        let a = run["value"].as_integer().unwrap();
        let class = run["classification"].as_str().unwrap();
        assert_eq!(class, if a < 0 { "Bounded" } else { "Diverged" }, "a = {a}");
        assert!(dir.path().join(run["dir"].as_str().unwrap()).join(SUMMARY_FILE).exists());
    }
}

#[test]
fn empty_sweep_fails() {
    let dir = tempfile::tempdir().unwrap();
    let code = exit_code(
        bin()
            .args(["sweep", "--scenario", "linear_si", "--param", "a", "--values", "--out"])
            .arg(dir.path()),
    );
    assert_eq!(code, 1);
}

#[test]
fn list_scenarios_names_all() {
    let out = bin().arg("list-scenarios").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for name in cbf_minphase::scenarios::SCENARIO_NAMES {
        assert!(text.contains(name));
    }
}

#[test]
fn verify_is_deterministic_and_passes() {
    let first = run_all(verify::DEFAULT_SEED);
    assert_eq!(first, run_all(verify::DEFAULT_SEED));
    for report in &first {
        assert!(report.passed(), "{}", report.line());
    }
    let out = bin().args(["verify", "--seed", "7"]).output().unwrap();
    let again = bin().args(["verify", "--seed", "7"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn negated_routh_is_caught() {
    let reports = with_negated_routh(|| run_all(verify::DEFAULT_SEED));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    for name in ["gamma_norm_bound", "min_phase_equivalence"] {
        assert!(failed.contains(&name), "{name} should fail, failed = {failed:?}");
    }
}

#[test]
fn shipped_configs_resolve_to_defaults() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in cbf_minphase::scenarios::SCENARIO_NAMES {
        let cfg = RunConfig::load(&dir.join(format!("{name}.toml"))).unwrap();
        assert_eq!(cfg.scenario, name);
        let params = cfg.resolve().unwrap();
        assert_eq!(params, cbf_minphase::scenarios::ScenarioParams::default_for(name).unwrap());
    }
}
