//! Command-line front end: runs, sweeps, verification suites and export.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenarios::{Scenario, ScenarioParams, SCENARIO_NAMES};
use crate::simulation::{Classification, StopReason, Trajectory, Verdict};
use crate::verify;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const THREADS_ENV: &str = "CBF_MINPHASE_THREADS";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SUMMARY_FILE: &str = "summary.toml";
pub const SWEEP_INDEX_FILE: &str = "sweep_index.toml";

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_MISMATCH: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "cbf-minphase", version, about = "Exponential CBF filters and their internal dynamics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write its trajectory and summary.
    Run(RunArgs),
    /// Repeat a run over several values of one parameter.
    Sweep(SweepArgs),
    /// Run the randomized property suites.
    Verify {
        #[arg(long, default_value_t = verify::DEFAULT_SEED)]
        seed: u64,
    },
    /// List bundled scenarios and the wirings they accept.
    ListScenarios,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Config file with `scenario = "..."` and a `[params]` table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Scenario name; overrides the one in the config file.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Parameter override `key=value`, value in TOML syntax.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Accepted for symmetry with `verify`; simulations are deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Parameter to vary.
    #[arg(long)]
    pub param: String,
    /// Values in TOML syntax, e.g. `2 10` or `"[2,3]" "[4,5]"`.
    #[arg(long, num_args = 0.., allow_negative_numbers = true, value_name = "VALUE")]
    pub values: Vec<String>,
}

/// A scenario name and its raw parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: String,
    pub params: toml::Table,
}

impl RunConfig {
    pub fn new(scenario: impl Into<String>) -> Self {
        Self {
            scenario: scenario.into(),
            params: toml::Table::new(),
        }
    }

    /// Parse a config document; only `scenario` and `[params]` are allowed.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let scenario = match table.remove("scenario") {
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(Error::Config(format!("'scenario' must be a string, got {}", other.type_str()))),
            None => String::new(),
        };
        let params = match table.remove("params") {
            Some(toml::Value::Table(t)) => t,
            Some(other) => return Err(Error::Config(format!("'params' must be a table, got {}", other.type_str()))),
            None => toml::Table::new(),
        };
        if let Some(key) = table.keys().next() {
            return Err(Error::Config(format!(
                "unknown top-level key '{key}' (allowed: scenario, params)"
            )));
        }
        Ok(Self { scenario, params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_args(args: &RunArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => Self::load(path)?,
            None => Self::new(""),
        };
        if let Some(name) = &args.scenario {
            cfg.scenario = name.clone();
        }
        if cfg.scenario.is_empty() {
            return Err(Error::Config("no scenario given (use --scenario or a config file)".into()));
        }
        for set in &args.sets {
            let (key, value) = set
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{set}'")))?;
            cfg.set(key.trim(), parse_value(value.trim()));
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: toml::Value) {
        let key = key.strip_prefix("params.").unwrap_or(key);
        self.params.insert(key.to_string(), value);
    }

    /// Validate against the scenario schema.
    pub fn resolve(&self) -> Result<ScenarioParams> {
        ScenarioParams::from_table(&self.scenario, self.params.clone())
    }
}

/// A TOML literal, or a bare string if it does not parse as one.
pub fn parse_value(text: &str) -> toml::Value {
    format!("v = {text}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerdictSummary {
    pub classification: Classification,
    pub expected: Classification,
    pub matched: bool,
    pub drift: bool,
    pub settled: bool,
    pub divergence_time_s: Option<f64>,
    pub min_h: f64,
    pub min_phi: f64,
    pub max_abs_eta: f64,
    pub max_state_norm: f64,
    pub saturation_fraction: f64,
    pub relaxed_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalSample {
    pub t_s: f64,
    pub steps: usize,
    pub stop: String,
    pub state: Vec<f64>,
    pub eta: Vec<f64>,
    pub mu: f64,
}

/// Contents of `summary.toml`. Wall-clock time is reported on stdout only
/// so the file is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub artifact_version: String,
    pub scenario: String,
    pub wiring: String,
    pub verdict: VerdictSummary,
    #[serde(rename = "final")]
    pub final_sample: FinalSample,
    pub params: toml::Table,
}

impl RunSummary {
    pub fn new(scenario: &Scenario, params: &ScenarioParams, traj: &Trajectory, verdict: &Verdict) -> Self {
        let stop = match traj.stop {
            None => "horizon",
            Some(StopReason::Horizon) => "horizon",
            Some(StopReason::Blowup) => "blowup",
            Some(StopReason::Drift) => "drift",
        };
        Self {
            artifact_version: ARTIFACT_VERSION.to_string(),
            scenario: scenario.name.to_string(),
            wiring: scenario.wiring.to_string(),
            verdict: VerdictSummary {
                classification: verdict.classification,
                expected: scenario.expected,
                matched: verdict.classification == scenario.expected,
                drift: verdict.drift,
                settled: verdict.settled,
                divergence_time_s: verdict.divergence_time,
                min_h: verdict.min_h,
                min_phi: verdict.min_phi,
                max_abs_eta: verdict.max_abs_eta,
                max_state_norm: verdict.max_state_norm,
                saturation_fraction: verdict.saturation_fraction,
                relaxed_steps: verdict.relaxed_steps,
            },
            final_sample: FinalSample {
                t_s: *traj.times.last().expect("non-empty trajectory"),
                steps: traj.len() - 1,
                stop: stop.to_string(),
                state: verdict.final_state.iter().copied().collect(),
                eta: traj.eta.last().map(|e| e.iter().copied().collect()).unwrap_or_default(),
                mu: *traj.mu.last().expect("non-empty trajectory"),
            },
            params: params.to_table(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("summary serializes")
    }
}

/// CSV header for the given dimensions.
pub fn csv_header(n: usize, m: usize, r: usize, q: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    cols.extend((1..=m).map(|i| format!("u{i}")));
    cols.push("mu".into());
    cols.push("h".into());
    cols.extend((1..=r).map(|i| format!("phi{i}")));
    cols.extend((1..=q).map(|i| format!("eta{i}")));
    cols.extend((1..=r).map(|i| format!("dphi{i}")));
    cols.join(",")
}

/// Trajectory as CSV with 17 significant digits and LF line endings.
pub fn write_csv<W: Write>(traj: &Trajectory, out: &mut W) -> std::io::Result<()> {
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.inputs.first().map_or(0, |u| u.len());
    let r = traj.phi.first().map_or(0, |p| p.len());
    let q = traj.eta.first().map_or(0, |e| e.len());
    writeln!(out, "{}", csv_header(n, m, r, q))?;
    for k in 0..traj.len() {
        let mut fields: Vec<f64> = Vec::with_capacity(2 + n + m + 2 * r + q);
        fields.push(traj.times[k]);
        fields.extend(traj.states[k].iter());
        fields.extend(traj.inputs[k].iter());
        fields.push(traj.mu[k]);
        fields.push(traj.h[k]);
        fields.extend(traj.phi[k].iter());
        if let Some(eta) = traj.eta.get(k) {
            fields.extend(eta.iter());
        }
        fields.extend(traj.delta_phi[k].iter());
        let line: Vec<String> = fields.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Header and numeric rows of an emitted trajectory.
pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Config("empty CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .enumerate()
        .map(|(i, line)| {
            let row: Vec<f64> = line
                .split(',')
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("CSV line {}: {e}", i + 2)))?;
            if row.len() != header.len() {
                return Err(Error::Config(format!(
                    "CSV line {}: {} fields, header has {}",
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(dir.join(name)).map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub wall_clock_s: f64,
}

impl RunOutcome {
    pub fn matched(&self) -> bool {
        self.summary.verdict.matched
    }
}

/// Build, simulate, classify and write both artifacts into `out`.
/// Nothing is written if any step fails.
pub fn execute_run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    let params = cfg.resolve()?;
    let scenario = params.build()?;
    let start = Instant::now();
    let (traj, verdict) = scenario.run_and_classify()?;
    let wall_clock_s = start.elapsed().as_secs_f64();
    let summary = RunSummary::new(&scenario, &params, &traj, &verdict);

    let mut csv = Vec::new();
    write_csv(&traj, &mut csv)?;
    std::fs::create_dir_all(out)?;
    write_atomic(out, TRAJECTORY_FILE, &csv)?;
    write_atomic(out, SUMMARY_FILE, summary.to_toml().as_bytes())?;
    Ok(RunOutcome { summary, wall_clock_s })
}

pub fn cmd_run(args: &RunArgs) -> u8 {
    let outcome = RunConfig::from_args(args).and_then(|cfg| execute_run(&cfg, &args.out));
    match outcome {
        Ok(o) => {
            let v = &o.summary.verdict;
            println!(
                "{} [{}]: {} (expected {}), min h = {:.3e}, wall-clock {:.3} s",
                o.summary.scenario, o.summary.wiring, v.classification, v.expected, v.min_h, o.wall_clock_s
            );
            if o.matched() {
                EXIT_OK
            } else {
                EXIT_MISMATCH
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub value: toml::Value,
    pub dir: String,
    pub classification: Option<Classification>,
    pub expected: Option<Classification>,
    pub matched: bool,
    pub drift: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepIndex {
    pub artifact_version: String,
    pub scenario: String,
    pub parameter: String,
    pub runs: Vec<SweepEntry>,
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// One run per value in `out/run_NNN`, then the index file.
pub fn execute_sweep(cfg: &RunConfig, param: &str, values: &[toml::Value], out: &Path) -> Result<SweepIndex> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.set(param, v.clone());
            c.resolve().map(|_| c)
        })
        .collect::<Result<_>>()?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let runs: Vec<SweepEntry> = pool.install(|| {
        configs
            .par_iter()
            .zip(values.par_iter())
            .enumerate()
            .map(|(i, (c, value))| {
                let dir = format!("run_{i:03}");
                match execute_run(c, &out.join(&dir)) {
                    Ok(o) => SweepEntry {
                        value: value.clone(),
                        dir,
                        classification: Some(o.summary.verdict.classification),
                        expected: Some(o.summary.verdict.expected),
                        matched: o.matched(),
                        drift: o.summary.verdict.drift,
                        error: None,
                    },
                    Err(e) => SweepEntry {
                        value: value.clone(),
                        dir,
                        classification: None,
                        expected: None,
                        matched: false,
                        drift: false,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    let index = SweepIndex {
        artifact_version: ARTIFACT_VERSION.to_string(),
        scenario: cfg.scenario.clone(),
        parameter: param.to_string(),
        runs,
    };
    std::fs::create_dir_all(out)?;
    let text = toml::to_string(&index).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(out, SWEEP_INDEX_FILE, text.as_bytes())?;
    Ok(index)
}

pub fn cmd_sweep(args: &SweepArgs) -> u8 {
    let values: Vec<toml::Value> = args.values.iter().map(|v| parse_value(v)).collect();
    let result = RunConfig::from_args(&args.run).and_then(|cfg| execute_sweep(&cfg, &args.param, &values, &args.run.out));
    match result {
        Ok(index) => {
            for run in &index.runs {
                match (&run.classification, &run.error) {
                    (Some(c), _) => println!(
                        "{} = {}: {}{} (expected {})",
                        index.parameter,
                        run.value,
                        c,
                        if run.drift { ", drift" } else { "" },
                        run.expected.map_or("?".to_string(), |e| e.to_string())
                    ),
                    (None, Some(e)) => println!("{} = {}: error: {e}", index.parameter, run.value),
                    _ => unreachable!("sweep entries carry a verdict or an error"),
                }
            }
            if index.runs.iter().any(|r| r.error.is_some()) {
                EXIT_ERROR
            } else if index.runs.iter().all(|r| r.matched) {
                EXIT_OK
            } else {
                EXIT_MISMATCH
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

pub fn cmd_verify(seed: u64) -> u8 {
    let reports = verify::run_all(seed);
    println!("seed {seed}");
    for report in &reports {
        println!("{}", report.line());
    }
    if reports.iter().all(verify::SuiteReport::passed) {
        EXIT_OK
    } else {
        EXIT_ERROR
    }
}

pub fn cmd_list_scenarios() -> u8 {
    for name in SCENARIO_NAMES {
        let wirings: Vec<String> = ScenarioParams::wirings(name).iter().map(|w| w.to_string()).collect();
        println!("{name}: {}", wirings.join(", "));
    }
    EXIT_OK
}

pub fn dispatch(cli: &Cli) -> u8 {
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Verify { seed } => cmd_verify(*seed),
        Command::ListScenarios => cmd_list_scenarios(),
    }
}
