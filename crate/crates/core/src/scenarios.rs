//! The four worked systems: a three-state linear plant with one or two
//! inputs and a cart-pole with drag (force only) or without drag (force and
//! torque).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::cbf_core::{eval_mu, in_s_phi, ControlAffine, GammaSpec, OutputChain, StateFn, REGULARITY_TOL};
use crate::error::{Error, Result};
use crate::filters::{self, AffineConstraint, Clf, FilterDecision};
use crate::internal_analysis::{
    extract_internal_linear, MinPhaseCertificate, PhaseVerdict, ZeroDynamicsLinear,
};
use crate::numerics::{self, Matrix, Vector};
use crate::simulation::{
    classify, simulate, Classification, ClassifyConfig, Guard, SimConfig, Trajectory, Verdict,
};

pub type Policy = Arc<dyn Fn(f64, &Vector) -> Result<FilterDecision> + Send + Sync>;

pub const SCENARIO_NAMES: [&str; 4] = ["linear_si", "cartpole_si", "linear_mi", "cartpole_mi"];

/// Smallest repeated rate for which the single-input cart-pole under the
/// κ_ps law is expected to stay bounded from the default start.
pub const CARTPOLE_SI_BOUNDED_GAMMA: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    Unfiltered,
    MinNorm,
    KappaPs,
    BaselineSaturation,
    EqualityAugmentedQp,
    ClfCbfQp,
}

impl fmt::Display for Wiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unfiltered => "unfiltered",
            Self::MinNorm => "min_norm",
            Self::KappaPs => "kappa_ps",
            Self::BaselineSaturation => "baseline_saturation",
            Self::EqualityAugmentedQp => "equality_augmented_qp",
            Self::ClfCbfQp => "clf_cbf_qp",
        })
    }
}

/// A plant, its barrier chain, a control policy and the run settings.
#[derive(Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub wiring: Wiring,
    pub plant: ControlAffine,
    pub chain: OutputChain,
    pub spec: GammaSpec,
    pub internal_map: Option<StateFn<Vector>>,
    pub reference: StateFn<Vector>,
    pub policy: Policy,
    pub x0: Vector,
    pub expected: Classification,
    pub sim: SimConfig,
    pub classify: ClassifyConfig,
    /// Exact internal dynamics, for linear plants.
    pub zero_dynamics: Option<ZeroDynamicsLinear>,
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("wiring", &self.wiring)
            .field("x0", &self.x0)
            .field("expected", &self.expected)
            .field("sim", &self.sim)
            .finish_non_exhaustive()
    }
}

impl Scenario {
    pub fn run(&self) -> Result<Trajectory> {
        let policy = &self.policy;
        simulate(
            &self.plant,
            &self.chain,
            &self.spec,
            self.internal_map.as_ref(),
            |t, x| policy(t, x),
            &self.x0,
            &self.sim,
        )
    }

    pub fn run_and_classify(&self) -> Result<(Trajectory, Verdict)> {
        let traj = self.run()?;
        let verdict = classify(&traj, &self.classify);
        Ok((traj, verdict))
    }

    pub fn n_eta(&self) -> usize {
        self.internal_map
            .as_ref()
            .map_or(0, |map| map(&self.x0).len())
    }

    fn unfiltered_policy(&self) -> Policy {
        let (chain, spec, reference) = (self.chain.clone(), self.spec.clone(), self.reference.clone());
        Arc::new(move |_, x| {
            let u = reference(x);
            let mu = eval_mu(&chain, &spec, x, &u)?;
            Ok(FilterDecision::passthrough(u, mu))
        })
    }

    fn min_norm_policy(&self) -> Policy {
        let (chain, spec, reference) = (self.chain.clone(), self.spec.clone(), self.reference.clone());
        Arc::new(move |_, x| filters::min_norm_filter(&chain, &spec, x, &reference(x)))
    }
}

fn v(data: &[f64]) -> Vector {
    Vector::from_column_slice(data)
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {value}")))
    }
}

fn check_len(name: &str, values: &[f64], len: usize) -> Result<()> {
    if values.len() != len || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("{name} must hold {len} finite numbers")));
    }
    Ok(())
}

fn check_theta_max(theta_max_deg: f64) -> Result<f64> {
    if theta_max_deg > 0.0 && theta_max_deg < 90.0 {
        Ok(theta_max_deg.to_radians())
    } else {
        Err(Error::Config(format!("theta_max_deg must lie in (0, 90), got {theta_max_deg}")))
    }
}

fn unsupported(name: &str, wiring: Wiring) -> Error {
    Error::Config(format!("scenario {name} does not support wiring {wiring}"))
}

/// Shared run settings.
struct RunSettings {
    dt_s: f64,
    horizon_s: f64,
    blowup: f64,
    safety_tol: f64,
    settle_tol: f64,
    drift_threshold: Option<f64>,
    guard: Option<Guard>,
}

impl RunSettings {
    fn configs(self) -> Result<(SimConfig, ClassifyConfig)> {
        check_positive("dt_s", self.dt_s)?;
        check_positive("horizon_s", self.horizon_s)?;
        check_positive("blowup", self.blowup)?;
        check_positive("safety_tol", self.safety_tol)?;
        check_positive("settle_tol", self.settle_tol)?;
        if let Some(d) = self.drift_threshold {
            check_positive("drift_threshold_m", d)?;
        }
        Ok((
            SimConfig {
                dt: self.dt_s,
                horizon: self.horizon_s,
                blowup: self.blowup,
                drift_threshold: self.drift_threshold,
                guard: self.guard,
            },
            ClassifyConfig {
                safety_tol: self.safety_tol,
                blowup: self.blowup,
                settle_tol: self.settle_tol,
                drift_threshold: self.drift_threshold,
                horizon: self.horizon_s,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// linear plant

/// `A(a)` and the first input column.
pub fn linear_plant(a: f64) -> (Matrix, Matrix) {
    (
        Matrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 3.0, 1.0, a]),
        Matrix::from_row_slice(3, 1, &[0.0, 1.0, 0.0]),
    )
}

/// Two-input variant: the second input drives `x₃` directly.
pub fn linear_plant_mi(a: f64) -> (Matrix, Matrix) {
    (
        linear_plant(a).0,
        Matrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
    )
}

fn linear_barrier() -> Matrix {
    Matrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0])
}

/// Undriven equilibrium on `span([a, 0, −3])` with `x₁ = 1.25`.
pub fn linear_equilibrium(a: f64) -> Result<Vector> {
    if a == 0.0 || !a.is_finite() {
        return Err(Error::Config(format!("a must be finite and nonzero, got {a}")));
    }
    Ok(v(&[a, 0.0, -3.0]) * (1.25 / a))
}

/// LQR gain with `Q = I`, `R = 1`, seeded by pole placement.
pub fn linear_reference_gain(a: f64) -> Result<Matrix> {
    let (am, bm) = linear_plant(a);
    let k0 = numerics::place_poles(&am, &bm, &[-1.0, -2.0, -3.0])?;
    numerics::lqr_gain(&am, &bm, &Matrix::identity(3, 3), &Matrix::identity(1, 1), &k0)
}

fn linear_reference(a: f64) -> Result<StateFn<f64>> {
    let k = linear_reference_gain(a)?;
    let x_e = linear_equilibrium(a)?;
    Ok(Arc::new(move |x: &Vector| -(&k * (x - &x_e))[0]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearSiParams {
    pub a: f64,
    pub gammas: Vec<f64>,
    pub x0: Vec<f64>,
    pub wiring: Wiring,
    /// Constant virtual input for the `kappa_ps` wiring.
    pub mu_e: f64,
    pub dt_s: f64,
    pub horizon_s: f64,
    pub blowup: f64,
    pub safety_tol: f64,
    pub settle_tol: f64,
    pub expected: Option<Classification>,
}

impl Default for LinearSiParams {
    fn default() -> Self {
        Self {
            a: -1.0,
            gammas: vec![2.0, 3.0],
            x0: vec![2.0, 0.0, 1.0],
            wiring: Wiring::MinNorm,
            mu_e: 7.5,
            dt_s: 1e-3,
            horizon_s: 20.0,
            blowup: 1e4,
            safety_tol: 1e-6,
            settle_tol: 1e-3,
            expected: None,
        }
    }
}

pub fn linear_si(params: &LinearSiParams) -> Result<Scenario> {
    check_len("x0", &params.x0, 3)?;
    let (a, b) = linear_plant(params.a);
    let c = linear_barrier();
    let spec = GammaSpec::new(&params.gammas)?;
    let chain = OutputChain::linear(&a, &b, &c)?;
    let zd = extract_internal_linear(&a, &b, &c, &spec)?;
    let reference = linear_reference(params.a)?;
    let (sim, classify) = RunSettings {
        dt_s: params.dt_s,
        horizon_s: params.horizon_s,
        blowup: params.blowup,
        safety_tol: params.safety_tol,
        settle_tol: params.settle_tol,
        drift_threshold: None,
        guard: None,
    }
    .configs()?;
    let n_map = zd.n.clone();
    let mut scenario = Scenario {
        name: "linear_si",
        wiring: params.wiring,
        plant: ControlAffine::linear(a, b),
        chain,
        spec,
        internal_map: Some(Arc::new(move |x: &Vector| &n_map * x)),
        reference: Arc::new(move |x: &Vector| Vector::from_element(1, reference(x))),
        policy: Arc::new(|_, _| Err(Error::Infeasible)),
        x0: v(&params.x0),
        expected: params.expected.unwrap_or(match zd.verdict {
            PhaseVerdict::MinimumPhase => Classification::Bounded,
            PhaseVerdict::NonMinimumPhase => Classification::Diverged,
        }),
        sim,
        classify,
        zero_dynamics: Some(zd),
    };
    scenario.policy = match params.wiring {
        Wiring::MinNorm => scenario.min_norm_policy(),
        Wiring::Unfiltered => scenario.unfiltered_policy(),
        Wiring::KappaPs => {
            let mu_e = params.mu_e;
            if mu_e < 0.0 {
                return Err(Error::NegativeMu(mu_e));
            }
            let (chain, spec) = (scenario.chain.clone(), scenario.spec.clone());
            Arc::new(move |_, x| filters::track_kappa_ps(&chain, &spec, x, mu_e))
        }
        other => return Err(unsupported("linear_si", other)),
    };
    ensure_x0_in_s_phi(&scenario)?;
    Ok(scenario)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearMiParams {
    pub a: f64,
    pub gammas: Vec<f64>,
    pub x0: Vec<f64>,
    pub wiring: Wiring,
    pub dt_s: f64,
    pub horizon_s: f64,
    pub blowup: f64,
    pub safety_tol: f64,
    pub settle_tol: f64,
    pub expected: Option<Classification>,
}

impl Default for LinearMiParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            gammas: vec![2.0, 3.0],
            x0: vec![2.0, 0.0, 1.0],
            wiring: Wiring::EqualityAugmentedQp,
            dt_s: 1e-3,
            horizon_s: 20.0,
            blowup: 1e4,
            safety_tol: 1e-6,
            settle_tol: 1e-3,
            expected: None,
        }
    }
}

/// Equality row that makes the closed-loop zero dynamics `η̇ = −η`:
/// `½ u₁ + u₂ = −2x₃ − 3x₁ − 5/2 x₂`.
pub fn linear_mi_stability_row(x: &Vector) -> AffineConstraint {
    AffineConstraint::eq(
        v(&[0.5, 1.0]),
        -2.0 * x[2] - 3.0 * x[0] - 2.5 * x[1],
        "internal_stability",
    )
}

pub fn linear_mi(params: &LinearMiParams) -> Result<Scenario> {
    check_len("x0", &params.x0, 3)?;
    let (a, b) = linear_plant_mi(params.a);
    let c = linear_barrier();
    let spec = GammaSpec::new(&params.gammas)?;
    let chain = OutputChain::linear(&a, &b, &c)?;
    let reference = linear_reference(params.a)?;
    let single_input = extract_internal_linear(&linear_plant(params.a).0, &linear_plant(params.a).1, &c, &spec)?;
    let (sim, classify) = RunSettings {
        dt_s: params.dt_s,
        horizon_s: params.horizon_s,
        blowup: params.blowup,
        safety_tol: params.safety_tol,
        settle_tol: params.settle_tol,
        drift_threshold: None,
        guard: None,
    }
    .configs()?;
    let expected = match params.wiring {
        Wiring::EqualityAugmentedQp => Classification::Bounded,
        _ => match single_input.verdict {
            PhaseVerdict::MinimumPhase => Classification::Bounded,
            PhaseVerdict::NonMinimumPhase => Classification::Diverged,
        },
    };
    let mut scenario = Scenario {
        name: "linear_mi",
        wiring: params.wiring,
        plant: ControlAffine::linear(a, b),
        chain,
        spec,
        internal_map: Some(Arc::new(|x: &Vector| Vector::from_element(1, x[2]))),
        reference: Arc::new(move |x: &Vector| v(&[reference(x), 0.0])),
        policy: Arc::new(|_, _| Err(Error::Infeasible)),
        x0: v(&params.x0),
        expected: params.expected.unwrap_or(expected),
        sim,
        classify,
        zero_dynamics: None,
    };
    scenario.policy = match params.wiring {
        Wiring::MinNorm => scenario.min_norm_policy(),
        Wiring::Unfiltered => scenario.unfiltered_policy(),
        Wiring::EqualityAugmentedQp => {
            let (chain, spec, reference) =
                (scenario.chain.clone(), scenario.spec.clone(), scenario.reference.clone());
            Arc::new(move |_, x| {
                filters::barrier_qp(&chain, &spec, x, &reference(x), vec![linear_mi_stability_row(x)])
            })
        }
        other => return Err(unsupported("linear_mi", other)),
    };
    ensure_x0_in_s_phi(&scenario)?;
    Ok(scenario)
}

fn ensure_x0_in_s_phi(scenario: &Scenario) -> Result<()> {
    if in_s_phi(&scenario.chain, &scenario.spec, &scenario.x0) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "x0 = {:?} lies outside the safe orthant",
            scenario.x0.as_slice()
        )))
    }
}

// ---------------------------------------------------------------------------
// cart-pole

const COS_GUARD: f64 = 1e-9;

fn cos_checked(theta: f64) -> Result<f64> {
    let c = theta.cos();
    if c.abs() < COS_GUARD {
        Err(Error::NonFinite(format!("cart-pole model is singular at θ = {theta}")))
    } else {
        Ok(c)
    }
}

/// State derivative of the single-input cart-pole with drag `b`,
/// `x = [s, θ, ṡ, θ̇]`.
pub fn cartpole_dynamics(b: f64, x: &Vector, u: f64) -> Result<Vector> {
    cos_checked(x[1])?;
    let dx = cartpole_si_plant(b).eval(x, &Vector::from_element(1, u));
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cart-pole derivative".into()));
    }
    Ok(dx)
}

pub fn cartpole_si_plant(b: f64) -> ControlAffine {
    ControlAffine::new(
        4,
        1,
        Arc::new(move |x: &Vector| {
            let (st, ct) = x[1].sin_cos();
            let d = 1.0 + st * st;
            let (sd, td) = (x[2], x[3]);
            v(&[
                sd,
                td,
                (-td * td * st + ct * st) / d - b * sd / ct,
                (-td * td * ct * st + 2.0 * st) / d,
            ])
        }),
        Arc::new(|x: &Vector| {
            let (st, ct) = x[1].sin_cos();
            let d = 1.0 + st * st;
            Matrix::from_column_slice(4, 1, &[0.0, 0.0, 1.0 / d, ct / d])
        }),
    )
}

/// Drag-free cart-pole with horizontal force `u₁` and torque `u₂`.
pub fn cartpole_mi_plant() -> ControlAffine {
    ControlAffine::new(
        4,
        2,
        Arc::new(|x: &Vector| {
            let (st, ct) = x[1].sin_cos();
            let d = 1.0 + st * st;
            let td = x[3];
            v(&[
                x[2],
                td,
                (-td * td * st + ct * st) / d,
                (-td * td * ct * st + 2.0 * st) / d,
            ])
        }),
        Arc::new(|x: &Vector| {
            let (st, ct) = x[1].sin_cos();
            let d = 1.0 + st * st;
            Matrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0 / d, ct / d, ct / d, 2.0 / d])
        }),
    )
}

/// Drift part of `θ̈`, shared by both cart-pole variants.
fn theta_ddot_free(x: &Vector) -> f64 {
    let (st, ct) = x[1].sin_cos();
    (-x[3] * x[3] * ct * st + 2.0 * st) / (1.0 + st * st)
}

fn cartpole_lie(theta_max: f64) -> StateFn<Vec<f64>> {
    let c_max = theta_max.cos();
    Arc::new(move |x: &Vector| {
        let (st, ct) = x[1].sin_cos();
        let td = x[3];
        vec![ct - c_max, -td * st, -theta_ddot_free(x) * st - td * td * ct]
    })
}

/// Chain of `h = cos θ − cos θ_max` for the single-input cart-pole.
pub fn cartpole_si_chain(theta_max: f64) -> OutputChain {
    OutputChain::new(
        2,
        1,
        cartpole_lie(theta_max),
        Arc::new(|x: &Vector| {
            let (st, ct) = x[1].sin_cos();
            Vector::from_element(1, -st * ct / (1.0 + st * st))
        }),
    )
}

pub fn cartpole_mi_chain(theta_max: f64) -> OutputChain {
    OutputChain::new(
        2,
        2,
        cartpole_lie(theta_max),
        Arc::new(|x: &Vector| {
            let (st, ct) = x[1].sin_cos();
            let d = 1.0 + st * st;
            v(&[-st * ct / d, -2.0 * st / d])
        }),
    )
}

/// `η = [s, ṡ cos θ − θ̇ + b s]`.
pub fn cartpole_internal(b: f64, x: &Vector) -> Vector {
    v(&[x[0], x[2] * x[1].cos() - x[3] + b * x[0]])
}

pub fn theta_d(eta2: f64, theta_max: f64) -> f64 {
    let lim = theta_max.sin();
    eta2.clamp(-lim, lim).asin()
}

/// `κ_ps(η) = γ² (cos θ_d(η) − cos θ_max)`.
pub fn kappa_ps_cartpole(eta: &Vector, gamma: f64, theta_max: f64) -> f64 {
    gamma * gamma * (theta_d(eta[1], theta_max).cos() - theta_max.cos())
}

/// Zero dynamics with the pole held at `θ`.
pub fn cartpole_zero_dynamics(b: f64, eta: &Vector, theta: f64) -> Vector {
    let c = theta.cos();
    v(&[(-b * eta[0] + eta[1]) / c, -theta.sin()])
}

/// Zero dynamics under `θ = θ_d(η)`.
pub fn cartpole_zero_dynamics_feedback(b: f64, theta_max: f64, eta: &Vector) -> Vector {
    cartpole_zero_dynamics(b, eta, theta_d(eta[1], theta_max))
}

/// Internal dynamics written in `(η, φ)`; `theta_sign` picks the branch of
/// `θ` that `φ₁` leaves ambiguous.
pub fn cartpole_internal_field(
    b: f64,
    theta_max: f64,
    spec: &GammaSpec,
    eta: &Vector,
    phi: &Vector,
    theta_sign: f64,
) -> Result<Vector> {
    let xi = spec.phi_to_xi(phi)?;
    let cos_theta = (xi[0] + theta_max.cos()).clamp(-1.0, 1.0);
    let theta = theta_sign.signum() * cos_theta.acos();
    let st = theta.sin();
    if st.abs() < REGULARITY_TOL {
        return Ok(cartpole_zero_dynamics(b, eta, theta));
    }
    let theta_dot = -xi[1] / st;
    let c = cos_checked(theta)?;
    let s_dot = (eta[1] + theta_dot - b * eta[0]) / c;
    Ok(v(&[s_dot, -st * (1.0 + s_dot * theta_dot)]))
}

fn cartpole_guard(limit_deg: f64) -> Guard {
    let limit = limit_deg.to_radians();
    Arc::new(move |x: &Vector| {
        (x[1].abs() > limit || !x[1].is_finite())
            .then(|| format!("|θ| = {:.3}° exceeds {limit_deg}°", x[1].to_degrees()))
    })
}

fn default_cartpole_x0() -> Vec<f64> {
    vec![0.1, PI / 6.0, 0.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartpoleSiParams {
    pub b: f64,
    pub gamma: f64,
    pub theta_max_deg: f64,
    pub x0: Vec<f64>,
    pub wiring: Wiring,
    pub dt_s: f64,
    pub horizon_s: f64,
    pub blowup: f64,
    pub safety_tol: f64,
    pub settle_tol: f64,
    pub drift_threshold_m: f64,
    pub guard_deg: f64,
    pub expected: Option<Classification>,
}

impl Default for CartpoleSiParams {
    fn default() -> Self {
        Self {
            b: 4.0,
            gamma: 10.0,
            theta_max_deg: 60.0,
            x0: default_cartpole_x0(),
            wiring: Wiring::KappaPs,
            dt_s: 1e-3,
            horizon_s: 30.0,
            blowup: 1e4,
            safety_tol: 1e-6,
            settle_tol: 1e-3,
            drift_threshold_m: 10.0,
            guard_deg: 85.0,
            expected: None,
        }
    }
}

/// Input realizing `μ = κ`; where the pole is upright the input has no
/// effect on the barrier and zero force is applied.
fn track_or_coast(chain: &OutputChain, spec: &GammaSpec, x: &Vector, kappa: f64) -> Result<FilterDecision> {
    match filters::track_kappa_ps(chain, spec, x, kappa) {
        Err(Error::DegenerateConstraint { .. }) => {
            let u = Vector::zeros(chain.m());
            let mu = eval_mu(chain, spec, x, &u)?;
            Ok(FilterDecision::passthrough(u, mu))
        }
        other => other,
    }
}

pub fn cartpole_si(params: &CartpoleSiParams) -> Result<Scenario> {
    check_len("x0", &params.x0, 4)?;
    check_positive("b", params.b)?;
    check_positive("gamma", params.gamma)?;
    let theta_max = check_theta_max(params.theta_max_deg)?;
    check_positive("guard_deg", params.guard_deg)?;
    if params.x0[1].abs() >= params.guard_deg.to_radians() {
        return Err(Error::Config("x0 pole angle exceeds guard_deg".into()));
    }
    let b = params.b;
    let spec = GammaSpec::repeated(params.gamma, 2)?;
    let chain = cartpole_si_chain(theta_max);
    let (sim, classify) = RunSettings {
        dt_s: params.dt_s,
        horizon_s: params.horizon_s,
        blowup: params.blowup,
        safety_tol: params.safety_tol,
        settle_tol: params.settle_tol,
        drift_threshold: Some(params.drift_threshold_m),
        guard: Some(cartpole_guard(params.guard_deg)),
    }
    .configs()?;
    let internal: StateFn<Vector> = Arc::new(move |x: &Vector| cartpole_internal(b, x));
    let expected = match params.wiring {
        Wiring::KappaPs if params.gamma >= CARTPOLE_SI_BOUNDED_GAMMA => Classification::Bounded,
        _ => Classification::Diverged,
    };
    let gamma = params.gamma;
    let policy: Policy = match params.wiring {
        Wiring::KappaPs => {
            let (chain, spec, internal) = (chain.clone(), spec.clone(), internal.clone());
            Arc::new(move |_, x| {
                let kappa = kappa_ps_cartpole(&internal(x), gamma, theta_max);
                track_or_coast(&chain, &spec, x, kappa)
            })
        }
        Wiring::BaselineSaturation => {
            let (chain, spec) = (chain.clone(), spec.clone());
            Arc::new(move |_, x| track_or_coast(&chain, &spec, x, 0.0))
        }
        other => return Err(unsupported("cartpole_si", other)),
    };
    let scenario = Scenario {
        name: "cartpole_si",
        wiring: params.wiring,
        plant: cartpole_si_plant(b),
        chain,
        spec,
        internal_map: Some(internal),
        reference: Arc::new(|_: &Vector| Vector::zeros(1)),
        policy,
        x0: v(&params.x0),
        expected: params.expected.unwrap_or(expected),
        sim,
        classify,
        zero_dynamics: None,
    };
    ensure_x0_in_s_phi(&scenario)?;
    Ok(scenario)
}

/// Input-output linearizing law `u = (L_g L_f^{r−1} y)⁻¹ (−L_f^r y − kᵀξ)`
/// applied on `channel` only.
pub fn io_linearize_siso(chain: &OutputChain, k_io: &[f64], x: &Vector, channel: usize) -> Result<Vector> {
    let r = chain.r();
    if k_io.len() != r || channel >= chain.m() {
        return Err(Error::Dimension("gain length or channel index out of range".into()));
    }
    let lie = chain.lie_derivatives(x);
    let gain = chain.decoupling(x)[channel];
    if gain.abs() < REGULARITY_TOL {
        return Err(Error::DegenerateConstraint { norm: gain.abs() });
    }
    let nu: f64 = -k_io.iter().zip(&lie).map(|(k, l)| k * l).sum::<f64>();
    let mut u = Vector::zeros(chain.m());
    u[channel] = (nu - lie[r]) / gain;
    Ok(u)
}

/// Chain of the tracking output `y = θ − θ_target` on the two-input plant.
pub fn cartpole_mi_tracking_chain(theta_target: f64) -> OutputChain {
    OutputChain::new(
        2,
        2,
        Arc::new(move |x: &Vector| vec![x[1] - theta_target, x[3], theta_ddot_free(x)]),
        Arc::new(|x: &Vector| {
            let (st, ct) = x[1].sin_cos();
            let d = 1.0 + st * st;
            v(&[ct / d, 2.0 / d])
        }),
    )
}

/// `V(η) = s² + ṡ²` with its Lie derivatives along the two-input plant.
pub fn cartpole_mi_clf() -> Clf {
    Clf {
        value: Arc::new(|x: &Vector| x[0] * x[0] + x[2] * x[2]),
        lf: Arc::new(|x: &Vector| {
            let (st, ct) = x[1].sin_cos();
            let d = 1.0 + st * st;
            let s_ddot = (-x[3] * x[3] * st + ct * st) / d;
            2.0 * x[0] * x[2] + 2.0 * x[2] * s_ddot
        }),
        lg: Arc::new(|x: &Vector| {
            let (st, ct) = x[1].sin_cos();
            let d = 1.0 + st * st;
            v(&[2.0 * x[2] / d, 2.0 * x[2] * ct / d])
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CartpoleMiParams {
    pub gamma: f64,
    pub theta_max_deg: f64,
    pub theta_target_deg: f64,
    pub k_io: Vec<f64>,
    pub clf_rate: f64,
    pub relax: bool,
    pub x0: Vec<f64>,
    pub wiring: Wiring,
    pub dt_s: f64,
    pub horizon_s: f64,
    pub blowup: f64,
    pub safety_tol: f64,
    pub settle_tol: f64,
    pub drift_threshold_m: f64,
    pub guard_deg: f64,
    pub expected: Option<Classification>,
}

impl Default for CartpoleMiParams {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            theta_max_deg: 60.0,
            theta_target_deg: 55.0,
            k_io: vec![25.0, 10.0],
            clf_rate: 0.5,
            relax: true,
            x0: vec![0.0, 10f64.to_radians(), 0.0, 8.5],
            wiring: Wiring::ClfCbfQp,
            dt_s: 1e-3,
            horizon_s: 30.0,
            blowup: 1e4,
            safety_tol: 1e-6,
            settle_tol: 1e-3,
            drift_threshold_m: 10.0,
            guard_deg: 85.0,
            expected: None,
        }
    }
}

pub fn cartpole_mi(params: &CartpoleMiParams) -> Result<Scenario> {
    check_len("x0", &params.x0, 4)?;
    check_len("k_io", &params.k_io, 2)?;
    check_positive("gamma", params.gamma)?;
    let theta_max = check_theta_max(params.theta_max_deg)?;
    if params.clf_rate < 0.0 {
        return Err(Error::Config(format!("clf_rate must be nonnegative, got {}", params.clf_rate)));
    }
    if params.x0[1].abs() >= params.guard_deg.to_radians() {
        return Err(Error::Config("x0 pole angle exceeds guard_deg".into()));
    }
    let spec = GammaSpec::repeated(params.gamma, 2)?;
    let chain = cartpole_mi_chain(theta_max);
    let tracking = cartpole_mi_tracking_chain(params.theta_target_deg.to_radians());
    let k_io = params.k_io.clone();
    let reference: StateFn<Vector> = Arc::new(move |x: &Vector| {
        io_linearize_siso(&tracking, &k_io, x, 1).unwrap_or_else(|_| Vector::zeros(2))
    });
    let (sim, classify) = RunSettings {
        dt_s: params.dt_s,
        horizon_s: params.horizon_s,
        blowup: params.blowup,
        safety_tol: params.safety_tol,
        settle_tol: params.settle_tol,
        drift_threshold: Some(params.drift_threshold_m),
        guard: Some(cartpole_guard(params.guard_deg)),
    }
    .configs()?;
    let expected = match params.wiring {
        Wiring::Unfiltered => Classification::Unsafe,
        Wiring::MinNorm => Classification::Diverged,
        _ => Classification::Bounded,
    };
    let mut scenario = Scenario {
        name: "cartpole_mi",
        wiring: params.wiring,
        plant: cartpole_mi_plant(),
        chain,
        spec,
        internal_map: Some(Arc::new(|x: &Vector| v(&[x[0], x[2]]))),
        reference,
        policy: Arc::new(|_, _| Err(Error::Infeasible)),
        x0: v(&params.x0),
        expected: params.expected.unwrap_or(expected),
        sim,
        classify,
        zero_dynamics: None,
    };
    scenario.policy = match params.wiring {
        Wiring::Unfiltered => scenario.unfiltered_policy(),
        Wiring::MinNorm => scenario.min_norm_policy(),
        Wiring::ClfCbfQp => {
            let (chain, spec, reference) =
                (scenario.chain.clone(), scenario.spec.clone(), scenario.reference.clone());
            let clf = cartpole_mi_clf();
            let (lambda, relax) = (params.clf_rate, params.relax);
            Arc::new(move |_, x| filters::clf_cbf_qp(&chain, &spec, x, &reference(x), &clf, lambda, relax))
        }
        other => return Err(unsupported("cartpole_mi", other)),
    };
    ensure_x0_in_s_phi(&scenario)?;
    Ok(scenario)
}

// ---------------------------------------------------------------------------
// certificate estimation

/// Sample-based certificate for the single-input cart-pole under κ_ps.
///
/// `V = ηᵀPη` with `P` solving the Lyapunov equation of the upright
/// zero-dynamics Jacobian; `α₄` and `l_φ` are the worst ratios over the
/// visited samples.
pub fn estimate_cartpole_certificate(
    traj: &Trajectory,
    b: f64,
    theta_max: f64,
    spec: &GammaSpec,
) -> Result<MinPhaseCertificate> {
    if traj.eta.len() != traj.len() || traj.is_empty() {
        return Err(Error::Dimension("trajectory has no internal coordinates".into()));
    }
    let j0 = Matrix::from_row_slice(2, 2, &[-b, 1.0, 0.0, -1.0]);
    let p = numerics::solve_lyapunov(&j0)?;
    let eig = SymmetricEigen::new(p.clone()).eigenvalues;
    let (lmin, lmax) = (eig.min(), eig.max());
    let gamma = spec.gammas()[0];

    let mut alpha4 = f64::INFINITY;
    let mut l_phi: f64 = 0.0;
    for ((eta, phi), x) in traj.eta.iter().zip(&traj.phi).zip(&traj.states) {
        let kappa = kappa_ps_cartpole(eta, gamma, theta_max);
        let q_zd = cartpole_zero_dynamics_feedback(b, theta_max, eta);
        let norm2 = eta.norm_squared();
        if norm2 > 1e-12 {
            alpha4 = alpha4.min(-2.0 * eta.dot(&(&p * &q_zd)) / norm2);
        }
        let dphi = phi - spec.gamma() * kappa;
        if dphi.norm() > 1e-9 {
            let q = cartpole_internal_field(b, theta_max, spec, eta, phi, x[1])?;
            l_phi = l_phi.max((q - &q_zd).norm() / dphi.norm());
        }
    }
    let cert = MinPhaseCertificate {
        alpha1: lmin,
        alpha2: lmax,
        alpha3: 2.0 * lmax,
        alpha4,
        l_phi,
        gamma_min: spec.gamma_min(),
    };
    if [cert.alpha1, cert.alpha2, cert.alpha4, cert.l_phi]
        .iter()
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("certificate estimate".into()));
    }
    Ok(cert)
}

// ---------------------------------------------------------------------------
// parameter sets

/// Parameters for any bundled scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioParams {
    LinearSi(LinearSiParams),
    CartpoleSi(CartpoleSiParams),
    LinearMi(LinearMiParams),
    CartpoleMi(CartpoleMiParams),
}

impl ScenarioParams {
    pub fn default_for(name: &str) -> Result<Self> {
        Ok(match name {
            "linear_si" => Self::LinearSi(LinearSiParams::default()),
            "cartpole_si" => Self::CartpoleSi(CartpoleSiParams::default()),
            "linear_mi" => Self::LinearMi(LinearMiParams::default()),
            "cartpole_mi" => Self::CartpoleMi(CartpoleMiParams::default()),
            other => {
                return Err(Error::Config(format!(
                    "unknown scenario '{other}' (expected one of {})",
                    SCENARIO_NAMES.join(", ")
                )))
            }
        })
    }

    /// Parse a `[params]` table; unknown keys are rejected.
    pub fn from_table(name: &str, table: toml::Table) -> Result<Self> {
        fn parse<T: serde::de::DeserializeOwned>(name: &str, table: toml::Table) -> Result<T> {
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("{name} params: {}", e.message())))
        }
        Ok(match name {
            "linear_si" => Self::LinearSi(parse(name, table)?),
            "cartpole_si" => Self::CartpoleSi(parse(name, table)?),
            "linear_mi" => Self::LinearMi(parse(name, table)?),
            "cartpole_mi" => Self::CartpoleMi(parse(name, table)?),
            other => return Self::default_for(other),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::LinearSi(_) => "linear_si",
            Self::CartpoleSi(_) => "cartpole_si",
            Self::LinearMi(_) => "linear_mi",
            Self::CartpoleMi(_) => "cartpole_mi",
        }
    }

    pub fn to_table(&self) -> toml::Table {
        let value = match self {
            Self::LinearSi(p) => toml::Table::try_from(p),
            Self::CartpoleSi(p) => toml::Table::try_from(p),
            Self::LinearMi(p) => toml::Table::try_from(p),
            Self::CartpoleMi(p) => toml::Table::try_from(p),
        };
        value.expect("parameter structs serialize to tables")
    }

    pub fn build(&self) -> Result<Scenario> {
        match self {
            Self::LinearSi(p) => linear_si(p),
            Self::CartpoleSi(p) => cartpole_si(p),
            Self::LinearMi(p) => linear_mi(p),
            Self::CartpoleMi(p) => cartpole_mi(p),
        }
    }

    /// Wirings a scenario accepts.
    pub fn wirings(name: &str) -> &'static [Wiring] {
        match name {
            "linear_si" => &[Wiring::MinNorm, Wiring::KappaPs, Wiring::Unfiltered],
            "cartpole_si" => &[Wiring::KappaPs, Wiring::BaselineSaturation],
            "linear_mi" => &[Wiring::EqualityAugmentedQp, Wiring::MinNorm, Wiring::Unfiltered],
            "cartpole_mi" => &[Wiring::ClfCbfQp, Wiring::MinNorm, Wiring::Unfiltered],
            _ => &[],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_equilibria() {
        assert_eq!(linear_equilibrium(-1.0).unwrap(), v(&[1.25, 0.0, 3.75]));
        assert_eq!(linear_equilibrium(1.0).unwrap(), v(&[1.25, 0.0, -3.75]));
        for a in [-2.0, -1.0, 0.5, 1.0] {
            let (am, _) = linear_plant(a);
            assert!((am * v(&[a, 0.0, -3.0])).amax() < 1e-15);
        }
    }

    #[test]
    fn reference_gain_stabilizes() {
        for a in [-1.0, 1.0] {
            let (am, bm) = linear_plant(a);
            let k = linear_reference_gain(a).unwrap();
            assert!(numerics::is_hurwitz(&(am - bm * k)));
        }
    }

    #[test]
    fn cartpole_derivative_examples() {
        let zero = cartpole_dynamics(4.0, &Vector::zeros(4), 0.0).unwrap();
        assert_eq!(zero, Vector::zeros(4));
        let dx = cartpole_dynamics(4.0, &v(&[0.0, 0.0, 1.0, 0.0]), 0.0).unwrap();
        assert!((dx[2] + 4.0).abs() < 1e-15);
        assert!(dx[3].abs() < 1e-15);
        assert!(cartpole_dynamics(4.0, &v(&[0.0, PI / 2.0, 0.0, 0.0]), 0.0).is_err());
    }

    #[test]
    fn internal_map_examples() {
        assert_eq!(cartpole_internal(4.0, &Vector::zeros(4)), Vector::zeros(2));
        assert_eq!(cartpole_internal(4.0, &v(&[1.0, 0.0, 2.0, 3.0])), v(&[1.0, 3.0]));
    }

    #[test]
    fn theta_d_examples() {
        let tm = 60f64.to_radians();
        assert_eq!(theta_d(0.0, tm), 0.0);
        assert!((theta_d(0.9, tm) - tm).abs() < 1e-15);
        assert!((theta_d(0.5, tm) - 30f64.to_radians()).abs() < 1e-15);
    }

    #[test]
    fn kappa_examples() {
        let tm = 60f64.to_radians();
        assert!(kappa_ps_cartpole(&v(&[0.0, 2.0]), 10.0, tm).abs() < 1e-12);
        assert!((kappa_ps_cartpole(&v(&[0.0, 0.0]), 10.0, tm) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn io_linearization_double_integrator() {
        let chain = OutputChain::new(
            2,
            1,
            Arc::new(|x: &Vector| vec![x[0], x[1], 0.0]),
            Arc::new(|_: &Vector| Vector::from_element(1, 1.0)),
        );
        let x = v(&[0.7, -0.3]);
        let u = io_linearize_siso(&chain, &[1.0, 2.0], &x, 0).unwrap();
        assert!((u[0] - (-x[0] - 2.0 * x[1])).abs() < 1e-15);
    }

    #[test]
    fn chains_match_plants() {
        let tm = 60f64.to_radians();
        let x = v(&[0.2, 0.4, -0.3, 0.7]);
        assert!(cartpole_si_chain(tm).consistency_error(&cartpole_si_plant(4.0), &x) < 1e-6);
        assert!(cartpole_mi_chain(tm).consistency_error(&cartpole_mi_plant(), &x) < 1e-6);
        let tracking = cartpole_mi_tracking_chain(55f64.to_radians());
        assert!(tracking.consistency_error(&cartpole_mi_plant(), &x) < 1e-6);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut table = toml::Table::new();
        table.insert("bogus".into(), toml::Value::Float(1.0));
        assert!(matches!(
            ScenarioParams::from_table("linear_si", table),
            Err(Error::Config(_))
        ));
        assert!(ScenarioParams::default_for("nope").is_err());
    }

    #[test]
    fn params_round_trip_through_toml() {
        for name in SCENARIO_NAMES {
            let params = ScenarioParams::default_for(name).unwrap();
            let back = ScenarioParams::from_table(name, params.to_table()).unwrap();
            assert_eq!(back, params);
        }
    }
}
