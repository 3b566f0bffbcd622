//! Safety-filter control laws built on the barrier constraint `μ(x, u) ≥ 0`.

use std::fmt;

use crate::cbf_core::{barrier_row, GammaSpec, OutputChain, StateFn, NONNEG_TOL, REGULARITY_TOL};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Vector};

pub const BARRIER_LABEL: &str = "barrier";
pub const CLF_LABEL: &str = "clf";

/// `u` counts as modified when it moves farther than this from the reference.
pub const INTERVENTION_TOL: f64 = 1e-9;

const MAX_QP_INPUTS: usize = 4;
const MAX_QP_INEQUALITIES: usize = 2;
const MAX_QP_EQUALITIES: usize = 2;
const ZERO_ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `aᵀ u ≥ b`
    Inequality,
    /// `aᵀ u = b`
    Equality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub kind: ConstraintKind,
    pub a: Vector,
    pub b: f64,
    pub label: String,
}

impl AffineConstraint {
    pub fn geq(a: Vector, b: f64, label: impl Into<String>) -> Self {
        Self {
            kind: ConstraintKind::Inequality,
            a,
            b,
            label: label.into(),
        }
    }

    pub fn eq(a: Vector, b: f64, label: impl Into<String>) -> Self {
        Self {
            kind: ConstraintKind::Equality,
            a,
            b,
            label: label.into(),
        }
    }

    /// `aᵀ u - b`; nonnegative (inequality) or zero (equality) when satisfied.
    pub fn residual(&self, u: &Vector) -> f64 {
        self.a.dot(u) - self.b
    }

    fn tolerance(&self) -> f64 {
        NONNEG_TOL * (1.0 + self.b.abs())
    }

    pub fn is_satisfied(&self, u: &Vector) -> bool {
        let res = self.residual(u);
        match self.kind {
            ConstraintKind::Inequality => res >= -self.tolerance(),
            ConstraintKind::Equality => res.abs() <= self.tolerance(),
        }
    }
}

/// Output of a safety filter at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterDecision {
    pub u: Vector,
    pub mu: f64,
    pub active: Vec<String>,
    pub intervened: bool,
    pub relaxed_clf: bool,
}

impl FilterDecision {
    /// Pass-through decision for an unfiltered controller; `mu` is still the
    /// barrier slack of the applied input.
    pub fn passthrough(u: Vector, mu: f64) -> Self {
        Self {
            u,
            mu,
            active: Vec::new(),
            intervened: false,
            relaxed_clf: false,
        }
    }
}

/// Minimizer of `½‖u − u_ref‖²` over a small polyhedron.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: Vector,
    pub objective: f64,
    /// Labels of the constraints in the optimal active set.
    pub active: Vec<String>,
    /// One multiplier per input constraint (zero when inactive), with
    /// `u − u_ref = Σ λᵢ aᵢ`.
    pub multipliers: Vec<f64>,
}

/// Exact small dense QP by active-set enumeration.
///
/// Equalities are always active; every subset of the inequalities is tried,
/// the equality-constrained projection is solved through its KKT system and
/// the feasible candidate with the lowest objective wins. Among equal
/// objectives the smaller active set is kept.
pub fn solve_qp_small(u_ref: &Vector, constraints: &[AffineConstraint]) -> Result<QpSolution> {
    let m = u_ref.len();
    if m == 0 || m > MAX_QP_INPUTS {
        return Err(Error::Dimension(format!("QP supports 1..={MAX_QP_INPUTS} inputs, got {m}")));
    }
    if constraints.iter().any(|c| c.a.len() != m) {
        return Err(Error::Dimension("constraint row length differs from input length".into()));
    }
    let count = |kind| constraints.iter().filter(|c| c.kind == kind).count();
    if count(ConstraintKind::Inequality) > MAX_QP_INEQUALITIES
        || count(ConstraintKind::Equality) > MAX_QP_EQUALITIES
    {
        return Err(Error::Dimension(
            "QP supports at most two inequality and two equality rows".into(),
        ));
    }
    if constraints
        .iter()
        .any(|c| !c.b.is_finite() || c.a.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite("constraint row".into()));
    }

    // rows without any input dependence are either vacuous or infeasible
    let mut live = Vec::new();
    for (idx, c) in constraints.iter().enumerate() {
        if c.a.norm() <= ZERO_ROW_TOL {
            if !c.is_satisfied(&Vector::zeros(m)) {
                return Err(Error::Infeasible);
            }
        } else {
            live.push(idx);
        }
    }
    let equalities: Vec<usize> = live
        .iter()
        .copied()
        .filter(|&i| constraints[i].kind == ConstraintKind::Equality)
        .collect();
    let inequalities: Vec<usize> = live
        .iter()
        .copied()
        .filter(|&i| constraints[i].kind == ConstraintKind::Inequality)
        .collect();

    let mut subsets: Vec<Vec<usize>> = (0u32..1 << inequalities.len())
        .map(|mask| {
            inequalities
                .iter()
                .enumerate()
                .filter(|(bit, _)| mask & (1 << bit) != 0)
                .map(|(_, &i)| i)
                .collect()
        })
        .collect();
    subsets.sort_by_key(|s| s.len());

    let mut best: Option<(f64, Vec<usize>, Vector, Vector)> = None;
    for subset in subsets {
        let rows: Vec<usize> = equalities.iter().chain(subset.iter()).copied().collect();
        let (u, lambda) = match project(u_ref, constraints, &rows) {
            Ok(sol) => sol,
            Err(Error::SingularMatrix { .. }) if !subset.is_empty() => continue,
            Err(Error::SingularMatrix { .. }) => {
                return Err(Error::Dimension("equality rows are linearly dependent".into()))
            }
            Err(e) => return Err(e),
        };
        if !live.iter().all(|&i| constraints[i].is_satisfied(&u)) {
            continue;
        }
        let objective = 0.5 * (&u - u_ref).norm_squared();
        let improves = best
            .as_ref()
            .is_none_or(|(obj, ..)| objective < *obj - 1e-12 * (1.0 + obj.abs()));
        if improves {
            best = Some((objective, rows, u, lambda));
        }
    }

    let (objective, rows, u, lambda) = best.ok_or(Error::Infeasible)?;
    let mut multipliers = vec![0.0; constraints.len()];
    for (k, &i) in rows.iter().enumerate() {
        multipliers[i] = lambda[k];
    }
    Ok(QpSolution {
        u,
        objective,
        active: rows.iter().map(|&i| constraints[i].label.clone()).collect(),
        multipliers,
    })
}

/// Projection of `u_ref` onto `{u | a_iᵀ u = b_i, i ∈ rows}`.
fn project(u_ref: &Vector, constraints: &[AffineConstraint], rows: &[usize]) -> Result<(Vector, Vector)> {
    if rows.is_empty() {
        return Ok((u_ref.clone(), Vector::zeros(0)));
    }
    let m = u_ref.len();
    let a = Matrix::from_fn(rows.len(), m, |i, j| constraints[rows[i]].a[j]);
    let rhs = Vector::from_iterator(
        rows.len(),
        rows.iter().map(|&i| constraints[i].b - constraints[i].a.dot(u_ref)),
    );
    let lambda = numerics::solve_linear(&(&a * a.transpose()), &rhs)?;
    Ok((u_ref + a.transpose() * &lambda, lambda))
}

/// The barrier constraint `μ(x, u) ≥ 0` as a QP row.
pub fn barrier_constraint(chain: &OutputChain, spec: &GammaSpec, x: &Vector) -> Result<AffineConstraint> {
    let row = barrier_row(chain, spec, x)?;
    Ok(AffineConstraint::geq(row.slope, -row.offset, BARRIER_LABEL))
}

fn intervened(u: &Vector, u_ref: &Vector) -> bool {
    (u - u_ref).amax() > INTERVENTION_TOL
}

/// Closest input to `u_ref` satisfying the barrier constraint.
pub fn min_norm_filter(
    chain: &OutputChain,
    spec: &GammaSpec,
    x: &Vector,
    u_ref: &Vector,
) -> Result<FilterDecision> {
    let row = barrier_row(chain, spec, x)?;
    if row.slope.len() != u_ref.len() {
        return Err(Error::Dimension("reference input length differs from the plant's".into()));
    }
    let norm = row.slope.norm();
    if norm < REGULARITY_TOL {
        return Err(Error::DegenerateConstraint { norm });
    }
    let mu_ref = row.mu(u_ref);
    if mu_ref >= 0.0 {
        return Ok(FilterDecision::passthrough(u_ref.clone(), mu_ref));
    }
    let u = if row.slope.len() == 1 {
        let slope = row.slope[0];
        let u_sat = -row.offset / slope;
        let u = if slope > 0.0 {
            u_sat.max(u_ref[0])
        } else {
            u_sat.min(u_ref[0])
        };
        Vector::from_element(1, u)
    } else {
        u_ref + &row.slope * (-mu_ref / (norm * norm))
    };
    let mu = row.mu(&u);
    Ok(FilterDecision {
        intervened: intervened(&u, u_ref),
        u,
        mu,
        active: vec![BARRIER_LABEL.to_string()],
        relaxed_clf: false,
    })
}

/// Barrier row plus caller-supplied rows (for example an internal-dynamics
/// equality) solved as one QP.
pub fn barrier_qp(
    chain: &OutputChain,
    spec: &GammaSpec,
    x: &Vector,
    u_ref: &Vector,
    extra: Vec<AffineConstraint>,
) -> Result<FilterDecision> {
    let row = barrier_row(chain, spec, x)?;
    let mut constraints = vec![AffineConstraint::geq(row.slope.clone(), -row.offset, BARRIER_LABEL)];
    constraints.extend(extra);
    let sol = solve_qp_small(u_ref, &constraints)?;
    Ok(FilterDecision {
        mu: row.mu(&sol.u),
        intervened: intervened(&sol.u, u_ref),
        u: sol.u,
        active: sol.active,
        relaxed_clf: false,
    })
}

/// Control Lyapunov function with closed-form Lie derivatives.
#[derive(Clone)]
pub struct Clf {
    pub value: StateFn<f64>,
    pub lf: StateFn<f64>,
    pub lg: StateFn<Vector>,
}

impl fmt::Debug for Clf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Clf { .. }")
    }
}

impl Clf {
    /// The decrease condition `L_f W + L_g W u + λ W ≤ 0` as a `≥` row.
    pub fn constraint(&self, x: &Vector, lambda: f64) -> AffineConstraint {
        let w = (self.value)(x);
        AffineConstraint::geq(-(self.lg)(x), (self.lf)(x) + lambda * w, CLF_LABEL)
    }
}

/// CLF-CBF-QP. On conflict with `relax` set, the CLF row is dropped and the
/// barrier row alone is enforced.
pub fn clf_cbf_qp(
    chain: &OutputChain,
    spec: &GammaSpec,
    x: &Vector,
    u_ref: &Vector,
    clf: &Clf,
    lambda: f64,
    relax: bool,
) -> Result<FilterDecision> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("CLF rate must be nonnegative, got {lambda}")));
    }
    match barrier_qp(chain, spec, x, u_ref, vec![clf.constraint(x, lambda)]) {
        Err(Error::Infeasible) if relax => {
            let mut decision = barrier_qp(chain, spec, x, u_ref, Vec::new())?;
            decision.relaxed_clf = true;
            Ok(decision)
        }
        other => other,
    }
}

/// Input that sets the virtual input to `kappa` exactly (minimum-norm
/// solution of `μ(x, u) = kappa`).
pub fn track_kappa_ps(chain: &OutputChain, spec: &GammaSpec, x: &Vector, kappa: f64) -> Result<FilterDecision> {
    if kappa < 0.0 {
        return Err(Error::NegativeMu(kappa));
    }
    let row = barrier_row(chain, spec, x)?;
    let norm = row.slope.norm();
    if norm < REGULARITY_TOL {
        return Err(Error::DegenerateConstraint { norm });
    }
    let u = &row.slope * ((kappa - row.offset) / (norm * norm));
    let active = if kappa <= NONNEG_TOL {
        vec![BARRIER_LABEL.to_string()]
    } else {
        Vec::new()
    };
    Ok(FilterDecision {
        mu: row.mu(&u),
        u,
        active,
        intervened: true,
        relaxed_clf: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cbf_core::eval_mu;
    use std::sync::Arc;

    fn v(data: &[f64]) -> Vector {
        Vector::from_column_slice(data)
    }

    fn linear_si(a33: f64) -> (OutputChain, GammaSpec) {
        let a = Matrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 3.0, 1.0, a33]);
        let b = Matrix::from_row_slice(3, 1, &[0.0, 1.0, 0.0]);
        let c = Matrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        (
            OutputChain::linear(&a, &b, &c).unwrap(),
            GammaSpec::new(&[2.0, 3.0]).unwrap(),
        )
    }

    /// Chain with a constant decoupling row `slope` and drift term `offset`.
    fn constant_chain(slope: Vector, offset: f64) -> (OutputChain, GammaSpec) {
        let m = slope.len();
        let chain = OutputChain::new(
            1,
            m,
            Arc::new(move |_: &Vector| vec![0.0, offset]),
            Arc::new(move |_: &Vector| slope.clone()),
        );
        (chain, GammaSpec::new(&[1.0]).unwrap())
    }

    #[test]
    fn feasible_reference_passes_through() {
        let (chain, spec) = constant_chain(v(&[1.0]), 3.0);
        let d = min_norm_filter(&chain, &spec, &v(&[0.0]), &v(&[0.0])).unwrap();
        assert_eq!(d.u, v(&[0.0]));
        assert_eq!(d.mu, 3.0);
        assert!(!d.intervened);
    }

    #[test]
    fn saturation_branch_on_linear_example() {
        let (chain, spec) = linear_si(-1.0);
        let x = v(&[0.5, -1.0, 2.0]);
        let u_ref = v(&[-10.0]);
        let d = min_norm_filter(&chain, &spec, &x, &u_ref).unwrap();
        assert!((d.u[0] - (-5.0 * x[1] - 6.0 * x[0])).abs() < 1e-12);
        assert!(d.mu.abs() < 1e-12);
        assert!(d.intervened);
    }

    #[test]
    fn multi_input_projection() {
        let (chain, spec) = constant_chain(v(&[1.0, 0.0]), -2.0);
        let d = min_norm_filter(&chain, &spec, &v(&[0.0]), &v(&[0.0, 0.0])).unwrap();
        assert!((d.u - v(&[2.0, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn degenerate_barrier_is_reported() {
        let (chain, spec) = constant_chain(v(&[0.0]), -1.0);
        assert!(matches!(
            min_norm_filter(&chain, &spec, &v(&[0.0]), &v(&[0.0])),
            Err(Error::DegenerateConstraint { .. })
        ));
        assert!(matches!(
            track_kappa_ps(&chain, &spec, &v(&[0.0]), 1.0),
            Err(Error::DegenerateConstraint { .. })
        ));
    }

    #[test]
    fn qp_examples() {
        let u_ref = v(&[0.3, -0.2]);
        let sol = solve_qp_small(&u_ref, &[]).unwrap();
        assert_eq!(sol.u, u_ref);

        let a = v(&[1.0, 2.0]);
        let sol = solve_qp_small(&u_ref, &[AffineConstraint::eq(a.clone(), 1.5, "e")]).unwrap();
        let expected = &u_ref + &a * ((1.5 - a.dot(&u_ref)) / a.norm_squared());
        assert!((sol.u - expected).amax() < 1e-14);

        let rows = [
            AffineConstraint::geq(v(&[1.0, 0.0]), 1.0, "u1"),
            AffineConstraint::geq(v(&[0.0, 1.0]), 1.0, "u2"),
        ];
        let sol = solve_qp_small(&v(&[0.0, 0.0]), &rows).unwrap();
        assert!((sol.u.clone() - v(&[1.0, 1.0])).amax() < 1e-14);
        assert_eq!(sol.active, vec!["u1".to_string(), "u2".to_string()]);
        assert!(sol.multipliers.iter().all(|l| (l - 1.0).abs() < 1e-14));
    }

    #[test]
    fn qp_infeasible_and_vacuous_rows() {
        let rows = [
            AffineConstraint::geq(v(&[1.0]), 1.0, "lo"),
            AffineConstraint::geq(v(&[-1.0]), 0.0, "hi"),
        ];
        assert_eq!(solve_qp_small(&v(&[0.0]), &rows), Err(Error::Infeasible));
        let vacuous = [AffineConstraint::geq(v(&[0.0, 0.0]), 0.0, "w")];
        assert_eq!(solve_qp_small(&v(&[1.0, 2.0]), &vacuous).unwrap().u, v(&[1.0, 2.0]));
        let impossible = [AffineConstraint::geq(v(&[0.0]), 1.0, "w")];
        assert_eq!(solve_qp_small(&v(&[0.0]), &impossible), Err(Error::Infeasible));
    }

    #[test]
    fn qp_rejects_oversized_problems() {
        let rows: Vec<_> = (0..3)
            .map(|i| AffineConstraint::geq(v(&[1.0]), i as f64, "r"))
            .collect();
        assert!(matches!(solve_qp_small(&v(&[0.0]), &rows), Err(Error::Dimension(_))));
        assert!(matches!(solve_qp_small(&Vector::zeros(5), &[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn clf_cbf_qp_reduces_to_min_norm_for_vacuous_clf() {
        let zero = Clf {
            value: Arc::new(|_| 0.0),
            lf: Arc::new(|_| 0.0),
            lg: Arc::new(|_| Vector::zeros(1)),
        };
        let (chain, spec) = linear_si(-1.0);
        let x = v(&[0.5, -1.0, 2.0]);
        for u_ref in [v(&[-10.0]), v(&[4.0])] {
            let qp = clf_cbf_qp(&chain, &spec, &x, &u_ref, &zero, 1.0, false).unwrap();
            let mn = min_norm_filter(&chain, &spec, &x, &u_ref).unwrap();
            assert!((qp.u - mn.u).amax() < 1e-12);
            assert!(!qp.relaxed_clf);
        }
    }

    #[test]
    fn clf_cbf_qp_relaxes_on_conflict() {
        // barrier: u ≥ 1, clf: demands u ≤ -1
        let (chain, spec) = constant_chain(v(&[1.0]), -1.0);
        let clf = Clf {
            value: Arc::new(|_| 1.0),
            lf: Arc::new(|_| 0.0),
            lg: Arc::new(|_| Vector::from_element(1, 1.0)),
        };
        let x = v(&[0.0]);
        assert_eq!(
            clf_cbf_qp(&chain, &spec, &x, &v(&[0.0]), &clf, 1.0, false),
            Err(Error::Infeasible)
        );
        let d = clf_cbf_qp(&chain, &spec, &x, &v(&[0.0]), &clf, 1.0, true).unwrap();
        assert!(d.relaxed_clf);
        assert!((d.u[0] - 1.0).abs() < 1e-14);
        assert!(d.mu >= -NONNEG_TOL);
    }

    #[test]
    fn clf_cbf_qp_keeps_reference_when_both_rows_slack() {
        let (chain, spec) = constant_chain(v(&[1.0]), 5.0);
        let clf = Clf {
            value: Arc::new(|_| 1.0),
            lf: Arc::new(|_| -3.0),
            lg: Arc::new(|_| Vector::from_element(1, 1.0)),
        };
        let d = clf_cbf_qp(&chain, &spec, &v(&[0.0]), &v(&[0.5]), &clf, 1.0, false).unwrap();
        assert_eq!(d.u, v(&[0.5]));
        assert!(!d.intervened);
    }

    #[test]
    fn kappa_tracking_examples() {
        let (chain, spec) = linear_si(-1.0);
        let x = v(&[1.25, 0.0, 3.75]);
        let d = track_kappa_ps(&chain, &spec, &x, 7.5).unwrap();
        assert!((eval_mu(&chain, &spec, &x, &d.u).unwrap() - 7.5).abs() < 1e-12);
        let d = track_kappa_ps(&chain, &spec, &x, 0.0).unwrap();
        assert!((d.u[0] - (-5.0 * x[1] - 6.0 * x[0])).abs() < 1e-12);
        assert_eq!(track_kappa_ps(&chain, &spec, &x, -1.0), Err(Error::NegativeMu(-1.0)));
    }
}
