//! Fixed-step closed-loop simulation and trajectory classification.

use std::fmt;

use crate::cbf_core::{eval_xi, ControlAffine, GammaSpec, OutputChain, StateFn};
use crate::error::{Error, Result};
use crate::filters::FilterDecision;
use crate::numerics::{self, Vector};

pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_HORIZON: f64 = 20.0;
pub const DEFAULT_BLOWUP: f64 = 1e4;
pub const DEFAULT_SAFETY_TOL: f64 = 1e-6;
pub const DEFAULT_SETTLE_TOL: f64 = 1e-3;
/// `μ` at or below this counts as a saturated barrier constraint.
pub const SATURATION_TOL: f64 = 1e-6;

/// Returns a reason when the state leaves the region where the model is valid.
pub type Guard = StateFn<Option<String>>;

#[derive(Clone)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub blowup: f64,
    /// Stop once `|η₁|` exceeds this.
    pub drift_threshold: Option<f64>,
    pub guard: Option<Guard>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            horizon: DEFAULT_HORIZON,
            blowup: DEFAULT_BLOWUP,
            drift_threshold: None,
            guard: None,
        }
    }
}

impl fmt::Debug for SimConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimConfig")
            .field("dt", &self.dt)
            .field("horizon", &self.horizon)
            .field("blowup", &self.blowup)
            .field("drift_threshold", &self.drift_threshold)
            .field("guard", &self.guard.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Horizon,
    Blowup,
    Drift,
}

/// Recorded closed-loop signals, one entry per sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub mu: Vec<f64>,
    pub h: Vec<f64>,
    pub xi: Vec<Vector>,
    pub phi: Vec<Vector>,
    /// Empty when no internal coordinates are configured.
    pub eta: Vec<Vector>,
    pub delta_phi: Vec<Vector>,
    pub intervened: Vec<bool>,
    pub relaxed: Vec<bool>,
    pub stop: Option<StopReason>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&Vector> {
        self.states.last()
    }

    pub fn min_phi(&self) -> f64 {
        self.phi
            .iter()
            .flat_map(|p| p.iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Integrate `ẋ = f(x) + g(x) u` under `policy`, holding each input for one
/// step.
pub fn simulate<P>(
    plant: &ControlAffine,
    chain: &OutputChain,
    spec: &GammaSpec,
    internal_map: Option<&StateFn<Vector>>,
    policy: P,
    x0: &Vector,
    cfg: &SimConfig,
) -> Result<Trajectory>
where
    P: Fn(f64, &Vector) -> Result<FilterDecision>,
{
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) || !(cfg.horizon >= 0.0 && cfg.horizon.is_finite()) {
        return Err(Error::Config(format!("invalid step {} or horizon {}", cfg.dt, cfg.horizon)));
    }
    if x0.len() != plant.n() {
        return Err(Error::Dimension("initial state length differs from the plant's".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { t: 0.0 });
    }
    if let Some(reason) = cfg.guard.as_ref().and_then(|g| g(x0)) {
        return Err(Error::GuardViolated { t: 0.0, reason });
    }

    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let mut traj = Trajectory::default();
    let mut x = x0.clone();
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        let decision = policy(t, &x).map_err(|e| e.at_step(k))?;
        if decision.u.len() != plant.m() {
            return Err(Error::Dimension("policy returned the wrong input length".into()).at_step(k));
        }
        let xi = eval_xi(chain, &x).map_err(|e| e.at_step(k))?;
        let phi = spec.t() * &xi;
        traj.delta_phi.push(&phi - spec.gamma() * decision.mu);
        traj.h.push(xi[0]);
        traj.xi.push(xi);
        traj.phi.push(phi);
        if let Some(map) = internal_map {
            traj.eta.push(map(&x));
        }
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.mu.push(decision.mu);
        traj.inputs.push(decision.u.clone());
        traj.intervened.push(decision.intervened);
        traj.relaxed.push(decision.relaxed_clf);

        if numerics::vec_norm_inf(&x) > cfg.blowup {
            traj.stop = Some(StopReason::Blowup);
            return Ok(traj);
        }
        if let (Some(limit), Some(eta)) = (cfg.drift_threshold, traj.eta.last()) {
            if eta[0].abs() > limit {
                traj.stop = Some(StopReason::Drift);
                return Ok(traj);
            }
        }
        if k == steps {
            break;
        }

        let u = decision.u;
        x = numerics::rk4_step(|_, y| plant.eval(y, &u), &x, t, cfg.dt).map_err(|e| e.at_step(k))?;
        if let Some(reason) = cfg.guard.as_ref().and_then(|g| g(&x)) {
            return Err(Error::GuardViolated { t: t + cfg.dt, reason }.at_step(k + 1));
        }
    }
    traj.stop = Some(StopReason::Horizon);
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Classification {
    Bounded,
    Diverged,
    Unsafe,
    Incomplete,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bounded => "Bounded",
            Self::Diverged => "Diverged",
            Self::Unsafe => "Unsafe",
            Self::Incomplete => "Incomplete",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyConfig {
    pub safety_tol: f64,
    pub blowup: f64,
    pub settle_tol: f64,
    pub drift_threshold: Option<f64>,
    pub horizon: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            safety_tol: DEFAULT_SAFETY_TOL,
            blowup: DEFAULT_BLOWUP,
            settle_tol: DEFAULT_SETTLE_TOL,
            drift_threshold: None,
            horizon: DEFAULT_HORIZON,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub classification: Classification,
    /// `|η₁|` crossed the drift threshold.
    pub drift: bool,
    pub settled: bool,
    pub min_h: f64,
    pub max_state_norm: f64,
    pub max_abs_eta: f64,
    pub min_phi: f64,
    pub saturation_fraction: f64,
    pub relaxed_steps: usize,
    pub final_state: Vector,
    pub divergence_time: Option<f64>,
}

/// Classify with precedence Unsafe > Diverged > Bounded; runs that stop
/// short of the horizon without diverging are Incomplete.
pub fn classify(traj: &Trajectory, cfg: &ClassifyConfig) -> Verdict {
    assert!(!traj.is_empty(), "cannot classify an empty trajectory");
    let min_h = traj.h.iter().copied().fold(f64::INFINITY, f64::min);
    let norms: Vec<f64> = traj.states.iter().map(numerics::vec_norm_inf).collect();
    let max_state_norm = norms.iter().copied().fold(0.0, f64::max);
    let max_abs_eta = traj.eta.iter().map(|e| e.amax()).fold(0.0, f64::max);

    let blowup_at = norms.iter().position(|&n| n > cfg.blowup);
    let drift_at = cfg
        .drift_threshold
        .and_then(|limit| traj.eta.iter().position(|e| e[0].abs() > limit));
    let first = match (blowup_at, drift_at) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let divergence_time = first.map(|i| traj.times[i]);

    let t_end = *traj.times.last().unwrap();
    let dt = if traj.len() > 1 { traj.times[1] - traj.times[0] } else { 0.0 };
    let classification = if min_h < -cfg.safety_tol {
        Classification::Unsafe
    } else if divergence_time.is_some() {
        Classification::Diverged
    } else if t_end < cfg.horizon - 0.5 * dt {
        Classification::Incomplete
    } else {
        Classification::Bounded
    };

    let final_state = traj.states.last().unwrap().clone();
    let settled = match traj.times.iter().position(|&t| t >= t_end - 1.0 - 1e-9) {
        Some(i) if t_end >= 1.0 - 1e-9 => {
            numerics::vec_norm_inf(&(&final_state - &traj.states[i])) < cfg.settle_tol
        }
        _ => false,
    };
    let saturated = traj.mu.iter().filter(|&&m| m <= SATURATION_TOL).count();
    Verdict {
        classification,
        drift: drift_at.is_some(),
        settled,
        min_h,
        max_state_norm,
        max_abs_eta,
        min_phi: traj.min_phi(),
        saturation_fraction: saturated as f64 / traj.len() as f64,
        relaxed_steps: traj.relaxed.iter().filter(|&&r| r).count(),
        final_state,
        divergence_time,
    }
}

/// Per-sample `Δφ = φ − Γ μ`.
pub fn error_signal(traj: &Trajectory, spec: &GammaSpec) -> Vec<Vector> {
    traj.phi
        .iter()
        .zip(&traj.mu)
        .map(|(phi, &mu)| phi - spec.gamma() * mu)
        .collect()
}

/// Exponential decay rate of `values` by a least-squares fit of
/// `ln values` against time, ignoring samples at or below `floor`.
pub fn fit_decay_rate(times: &[f64], values: &[f64], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > floor && v.is_finite())
        .map(|(&t, &v)| (t, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_y)).sum();
    Some(-sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use std::sync::Arc;

    fn integrator() -> (ControlAffine, OutputChain, GammaSpec) {
        let a = Matrix::zeros(1, 1);
        let b = Matrix::from_element(1, 1, 1.0);
        let c = Matrix::from_element(1, 1, 1.0);
        (
            ControlAffine::linear(a.clone(), b.clone()),
            OutputChain::linear(&a, &b, &c).unwrap(),
            GammaSpec::new(&[1.0]).unwrap(),
        )
    }

    fn zero_policy(_: f64, _: &Vector) -> Result<FilterDecision> {
        Ok(FilterDecision::passthrough(Vector::zeros(1), 0.0))
    }

    #[test]
    fn zero_input_keeps_state_constant() {
        let (plant, chain, spec) = integrator();
        let cfg = SimConfig {
            horizon: 1.0,
            dt: 0.1,
            ..SimConfig::default()
        };
        let x0 = Vector::from_element(1, 2.0);
        let traj = simulate(&plant, &chain, &spec, None, zero_policy, &x0, &cfg).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.states.iter().all(|x| x == &x0));
        assert_eq!(traj.stop, Some(StopReason::Horizon));
        assert_eq!(traj.inputs.len(), traj.len());
        assert_eq!(traj.delta_phi.len(), traj.len());
    }

    #[test]
    fn policy_errors_carry_step_index() {
        let (plant, chain, spec) = integrator();
        let cfg = SimConfig {
            horizon: 1.0,
            dt: 0.1,
            ..SimConfig::default()
        };
        let policy = |t: f64, _: &Vector| {
            if t > 0.25 {
                Err(Error::Infeasible)
            } else {
                zero_policy(t, &Vector::zeros(1))
            }
        };
        let err = simulate(&plant, &chain, &spec, None, policy, &Vector::zeros(1), &cfg).unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 3, .. }));
        assert_eq!(err.root(), &Error::Infeasible);
    }

    #[test]
    fn blowup_stops_early() {
        let a = Matrix::from_element(1, 1, 5.0);
        let b = Matrix::from_element(1, 1, 1.0);
        let plant = ControlAffine::linear(a.clone(), b.clone());
        let chain = OutputChain::linear(&a, &b, &Matrix::from_element(1, 1, 1.0)).unwrap();
        let spec = GammaSpec::new(&[1.0]).unwrap();
        let cfg = SimConfig::default();
        let traj = simulate(&plant, &chain, &spec, None, zero_policy, &Vector::from_element(1, 1.0), &cfg).unwrap();
        assert_eq!(traj.stop, Some(StopReason::Blowup));
        let v = classify(&traj, &ClassifyConfig::default());
        assert_eq!(v.classification, Classification::Diverged);
        let t = v.divergence_time.unwrap();
        assert!((t - (1e4f64).ln() / 5.0).abs() < 2e-3);
    }

    #[test]
    fn guard_aborts_run() {
        let (plant, chain, spec) = integrator();
        let guard: Guard = Arc::new(|x: &Vector| (x[0] > 1.5).then(|| "too far".to_string()));
        let cfg = SimConfig {
            horizon: 2.0,
            dt: 0.01,
            guard: Some(guard),
            ..SimConfig::default()
        };
        let policy = |_: f64, _: &Vector| Ok(FilterDecision::passthrough(Vector::from_element(1, 1.0), 1.0));
        let err = simulate(&plant, &chain, &spec, None, policy, &Vector::zeros(1), &cfg).unwrap_err();
        assert!(matches!(err.root(), Error::GuardViolated { .. }));
    }

    fn synthetic(h: Vec<f64>, norms: Vec<f64>) -> Trajectory {
        let n = h.len();
        Trajectory {
            times: (0..n).map(|i| i as f64).collect(),
            states: norms.iter().map(|&v| Vector::from_element(1, v)).collect(),
            inputs: vec![Vector::zeros(1); n],
            mu: vec![1.0; n],
            xi: h.iter().map(|&v| Vector::from_element(1, v)).collect(),
            phi: h.iter().map(|&v| Vector::from_element(1, v)).collect(),
            h,
            eta: Vec::new(),
            delta_phi: vec![Vector::zeros(1); n],
            intervened: vec![false; n],
            relaxed: vec![false; n],
            stop: Some(StopReason::Horizon),
        }
    }

    #[test]
    fn classification_precedence() {
        let cfg = ClassifyConfig {
            horizon: 3.0,
            ..ClassifyConfig::default()
        };
        let v = classify(&synthetic(vec![1.0; 4], vec![1.0; 4]), &cfg);
        assert_eq!(v.classification, Classification::Bounded);
        assert!(v.settled);
        let v = classify(&synthetic(vec![1.0, -0.1, 1.0, 1.0], vec![1.0; 4]), &cfg);
        assert_eq!(v.classification, Classification::Unsafe);
        let v = classify(&synthetic(vec![1.0, -0.1, 1.0, 1.0], vec![1.0, 1.0, 2e4, 1.0]), &cfg);
        assert_eq!(v.classification, Classification::Unsafe);
        let v = classify(&synthetic(vec![1.0; 4], vec![1.0, 1.0, 2e4, 3e4]), &cfg);
        assert_eq!(v.classification, Classification::Diverged);
        assert_eq!(v.divergence_time, Some(2.0));
        let v = classify(&synthetic(vec![1.0; 3], vec![1.0; 3]), &cfg);
        assert_eq!(v.classification, Classification::Incomplete);
    }

    #[test]
    fn decay_fit_recovers_rate() {
        let times: Vec<f64> = (0..100).map(|i| i as f64 * 0.05).collect();
        let values: Vec<f64> = times.iter().map(|t| 3.0 * (-2.5 * t).exp()).collect();
        assert!((fit_decay_rate(&times, &values, 0.0).unwrap() - 2.5).abs() < 1e-10);
    }
}
