//! Internal and zero dynamics: exact extraction for linear plants, local
//! Jacobian checks for nonlinear ones, and the multi-input obstruction.

use crate::cbf_core::GammaSpec;
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix, Vector};

const MARKOV_TOL: f64 = 1e-9;
const RANK_TOL: f64 = 1e-9;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseVerdict {
    MinimumPhase,
    NonMinimumPhase,
}

impl PhaseVerdict {
    pub fn from_hurwitz(stable: bool) -> Self {
        if stable {
            Self::MinimumPhase
        } else {
            Self::NonMinimumPhase
        }
    }
}

/// Linear internal dynamics `η̇ = A_eta η + B_eta φ` with `η = N x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroDynamicsLinear {
    pub a_eta: Matrix,
    pub b_eta: Matrix,
    /// `B_eta Γ`: the zero dynamics read `η̇ = A_eta η + b_gamma μ`.
    pub b_gamma: Vector,
    pub n: Matrix,
    /// Output rows `[c; cA; …; cA^{r-1}]`.
    pub d_xi: Matrix,
    pub verdict: PhaseVerdict,
}

/// Smallest `r` with `c A^{r-1} B ≠ 0`.
pub fn linear_relative_degree(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<usize> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || c.shape() != (1, n) {
        return Err(Error::Dimension("relative degree needs A n×n, B n×m, c 1×n".into()));
    }
    let mut row = c.clone();
    for k in 0..n {
        if (&row * b).amax() > MARKOV_TOL {
            return Ok(k + 1);
        }
        row = &row * a;
    }
    Err(Error::NoRelativeDegree)
}

/// Internal coordinates and dynamics of a single-input linear plant with
/// barrier row `h = c x`.
pub fn extract_internal_linear(
    a: &Matrix,
    b: &Matrix,
    c: &Matrix,
    spec: &GammaSpec,
) -> Result<ZeroDynamicsLinear> {
    let n = a.nrows();
    if b.ncols() != 1 {
        return Err(Error::Dimension("internal extraction is single-input".into()));
    }
    let r = linear_relative_degree(a, b, c)?;
    if r >= n {
        return Err(Error::Dimension(format!("relative degree {r} leaves no internal state")));
    }
    if spec.r() != r {
        return Err(Error::Dimension(format!(
            "rate list has {} entries but the relative degree is {r}",
            spec.r()
        )));
    }

    let mut d_xi = Matrix::zeros(r, n);
    let mut row = c.clone();
    for k in 0..r {
        d_xi.set_row(k, &row.row(0));
        row = &row * a;
    }

    // left null space of B: e_j − (B_j / B_p) e_p, greedily completing [dξ; N]
    let col = b.column(0);
    let p = col.iamax();
    let mut stacked = d_xi.clone();
    let mut n_rows: Vec<Matrix> = Vec::new();
    for j in (0..n).filter(|&j| j != p) {
        if n_rows.len() == n - r {
            break;
        }
        let mut cand = Matrix::zeros(1, n);
        cand[(0, j)] = 1.0;
        cand[(0, p)] = -col[j] / col[p];
        let trial = stacked.clone().insert_row(stacked.nrows(), 0.0);
        let mut trial = trial;
        trial.set_row(trial.nrows() - 1, &cand.row(0));
        if numerics::rank(&trial, RANK_TOL) == trial.nrows() {
            stacked = trial;
            n_rows.push(cand);
        }
    }
    if n_rows.len() != n - r {
        return Err(Error::SingularCoordinates);
    }
    let n_mat = Matrix::from_fn(n - r, n, |i, j| n_rows[i][(0, j)]);

    let m_inv = numerics::inverse(&stacked).map_err(|_| Error::SingularCoordinates)?;
    let l = &n_mat * a * m_inv;
    let l_xi = l.columns(0, r).into_owned();
    let a_eta = l.columns(r, n - r).into_owned();
    let t_inv = numerics::inverse(spec.t())?;
    let b_eta = l_xi * t_inv;
    let b_gamma = &b_eta * spec.gamma();
    let verdict = PhaseVerdict::from_hurwitz(numerics::routh_hurwitz(&numerics::char_poly(&a_eta)));
    Ok(ZeroDynamicsLinear {
        a_eta,
        b_eta,
        b_gamma,
        n: n_mat,
        d_xi,
        verdict,
    })
}

/// Equilibrium of the zero dynamics under a constant virtual input.
pub fn fixed_mu_equilibrium(zd: &ZeroDynamicsLinear, mu_e: f64) -> Result<Vector> {
    if mu_e < 0.0 {
        return Err(Error::NegativeMu(mu_e));
    }
    let eta = numerics::solve_linear(&zd.a_eta, &(&zd.b_gamma * mu_e))?;
    Ok(-eta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalJacobian {
    pub jacobian: Matrix,
    pub exponentially_stable: bool,
}

/// Central-difference Jacobian of `q(η, φ)` in `η` at `(eta_e, phi_e)` and
/// its Hurwitz verdict.
pub fn local_min_phase_jacobian<F>(field: F, eta_e: &Vector, phi_e: &Vector) -> Result<LocalJacobian>
where
    F: Fn(&Vector, &Vector) -> Vector,
{
    let q = eta_e.len();
    let mut jac = Matrix::zeros(q, q);
    for j in 0..q {
        let step = FD_STEP * eta_e[j].abs().max(1.0);
        let mut plus = eta_e.clone();
        let mut minus = eta_e.clone();
        plus[j] += step;
        minus[j] -= step;
        let diff = (field(&plus, phi_e) - field(&minus, phi_e)) / (2.0 * step);
        if diff.len() != q {
            return Err(Error::Dimension("internal field returned the wrong length".into()));
        }
        jac.set_column(j, &diff);
    }
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("internal-dynamics Jacobian".into()));
    }
    let exponentially_stable = numerics::routh_hurwitz(&numerics::char_poly(&jac));
    Ok(LocalJacobian {
        jacobian: jac,
        exponentially_stable,
    })
}

/// Direction `c ⊥ L_g L_f^{r-1} h` and the input field `q = g c` that moves
/// the state without moving the output chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstructionWitness {
    pub c: Vector,
    pub q: Vector,
}

pub fn multi_input_obstruction(lglfh: &Vector, g: &Matrix) -> Result<Option<ObstructionWitness>> {
    let m = lglfh.len();
    if m == 0 || g.ncols() != m {
        return Err(Error::Dimension("input matrix columns must match the decoupling row".into()));
    }
    if m == 1 {
        return Ok(None);
    }
    let rank = numerics::rank(g, RANK_TOL);
    if rank < m {
        return Err(Error::DependentColumns { rank, cols: m });
    }
    let norm = lglfh.norm();
    let mut best: Option<Vector> = None;
    for i in 0..m {
        let mut e = Vector::zeros(m);
        e[i] = 1.0;
        if norm > 0.0 {
            let l = lglfh / norm;
            e -= &l * l.dot(&e);
        }
        if best.as_ref().is_none_or(|b| e.norm() > b.norm() + 1e-12) {
            best = Some(e);
        }
    }
    let c = best.expect("m ≥ 2").normalize();
    let q = g * &c;
    Ok(Some(ObstructionWitness { c, q }))
}

/// Constants of a quadratic converse-Lyapunov certificate for the zero
/// dynamics together with the Lipschitz constant in `φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinPhaseCertificate {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub l_phi: f64,
    pub gamma_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sufficiency {
    Pass,
    FailAlpha,
}

/// Checks `α₄ > (α₃ l_φ / 2)²`.
pub fn gamma_min_sufficiency(cert: &MinPhaseCertificate) -> Result<Sufficiency> {
    let entries = [
        ("alpha1", cert.alpha1),
        ("alpha2", cert.alpha2),
        ("alpha3", cert.alpha3),
        ("alpha4", cert.alpha4),
        ("l_phi", cert.l_phi),
        ("gamma_min", cert.gamma_min),
    ];
    if let Some((name, v)) = entries.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidCertificate(format!("{name} = {v}")));
    }
    let bound = (cert.alpha3 * cert.l_phi / 2.0).powi(2);
    Ok(if cert.alpha4 > bound {
        Sufficiency::Pass
    } else {
        Sufficiency::FailAlpha
    })
}
