//! Small dense kernels: linear solves, Lyapunov equations, Routh-Hurwitz,
//! characteristic polynomials, LQR by Kleinman iteration and RK4.
//!
//! Everything here targets plants with a handful of states. Storage is
//! `nalgebra`'s dynamic matrices; the algorithms themselves are written out
//! so their tolerances and failure modes are explicit.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Pivots below this magnitude are treated as exact zeros.
pub const PIVOT_TOL: f64 = 1e-12;

/// Coefficients `c0..c_{d-1}` of the monic polynomial
/// `s^d + c_{d-1} s^{d-1} + ... + c0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoeffs {
    coeffs: Vec<f64>,
}

impl PolyCoeffs {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Dimension("monic polynomial needs degree >= 1".into()));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("polynomial coefficient".into()));
        }
        Ok(Self { coeffs })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len()
    }

    /// Ascending coefficients, leading 1 omitted.
    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Descending coefficients including the leading 1.
    pub fn descending(&self) -> Vec<f64> {
        std::iter::once(1.0)
            .chain(self.coeffs.iter().rev().copied())
            .collect()
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.descending().iter().fold(0.0, |acc, c| acc * s + c)
    }

    /// Evaluate the polynomial at a square matrix (Horner).
    pub fn eval_matrix(&self, a: &Matrix) -> Matrix {
        let n = a.nrows();
        let mut acc = Matrix::identity(n, n);
        for c in self.coeffs.iter().rev() {
            acc = &acc * a + Matrix::identity(n, n) * *c;
        }
        acc
    }
}

/// Monic polynomial with the given real roots.
pub fn poly_from_real_roots(roots: &[f64]) -> Result<PolyCoeffs> {
    // descending coefficients
    let mut desc = vec![1.0];
    for &root in roots {
        let mut next = vec![0.0; desc.len() + 1];
        for (i, c) in desc.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * root;
        }
        desc = next;
    }
    PolyCoeffs::new(desc[1..].iter().rev().copied().collect())
}

pub fn norm_inf(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_norm_inf(v: &Vector) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &Vector) -> Result<Vector> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!("{}x{} is not square", n, a.ncols())));
    }
    if b.len() != n {
        return Err(Error::Dimension(format!(
            "rhs length {} does not match {n}",
            b.len()
        )));
    }
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let (offset, pivot) = m
            .view((col, col), (n - col, 1))
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |best, (i, v)| {
                if v.abs() > best.1.abs() {
                    (i, *v)
                } else {
                    best
                }
            });
        if pivot.abs() < PIVOT_TOL {
            return Err(Error::SingularMatrix { pivot: pivot.abs() });
        }
        let p = col + offset;
        if p != col {
            m.swap_rows(p, col);
            rhs.swap_rows(p, col);
        }
        for row in col + 1..n {
            let factor = m[(row, col)] / m[(col, col)];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[(row, k)] -= factor * m[(col, k)];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = Vector::zeros(n);
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[(row, k)] * x[k]).sum();
        x[row] = (rhs[row] - tail) / m[(row, row)];
    }
    Ok(x)
}

/// Solve `A X = B` column by column.
pub fn solve_linear_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(a.ncols(), b.ncols());
    for (j, col) in b.column_iter().enumerate() {
        let x = solve_linear(a, &col.into_owned())?;
        out.set_column(j, &x);
    }
    Ok(out)
}

pub fn inverse(a: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    solve_linear_matrix(a, &Matrix::identity(n, n))
}

/// Row rank by elimination with partial pivoting; entries below `tol`
/// (relative to the largest entry) count as zero.
pub fn rank(m: &Matrix, tol: f64) -> usize {
    let mut w = m.clone();
    let scale = w.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let (rows, cols) = w.shape();
    let mut r = 0;
    for col in 0..cols {
        if r == rows {
            break;
        }
        let (p, pivot) = (r..rows)
            .map(|i| (i, w[(i, col)]))
            .fold((r, 0.0_f64), |best, cand| {
                if cand.1.abs() > best.1.abs() {
                    cand
                } else {
                    best
                }
            });
        if pivot.abs() <= tol * scale {
            continue;
        }
        w.swap_rows(p, r);
        for i in r + 1..rows {
            let f = w[(i, col)] / w[(r, col)];
            for k in col..cols {
                w[(i, k)] -= f * w[(r, k)];
            }
        }
        r += 1;
    }
    r
}

/// Solve `Aᵀ P + P A = -Q` by vectorization into an n²×n² linear system.
/// The returned `P` is symmetrized.
pub fn solve_lyapunov_with(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(Error::Dimension("Lyapunov equation needs square A and Q".into()));
    }
    // column-major vec: vec(AᵀP) = (I ⊗ Aᵀ) vec(P), vec(PA) = (Aᵀ ⊗ I) vec(P)
    let at = a.transpose();
    let eye = Matrix::identity(n, n);
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = Vector::from_iterator(n * n, q.iter().map(|v| -v));
    let p = solve_linear(&op, &rhs)?;
    let p = Matrix::from_column_slice(n, n, p.as_slice());
    Ok((&p + p.transpose()) * 0.5)
}

/// Solve `Aᵀ P + P A = -I`.
pub fn solve_lyapunov(a: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    solve_lyapunov_with(a, &Matrix::identity(n, n))
}

thread_local! {
    static NEGATE_ROUTH: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with the Routh-Hurwitz verdict negated on the current thread.
/// Mutation hook for the verification suites; never used by the library.
#[doc(hidden)]
pub fn with_negated_routh<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            NEGATE_ROUTH.with(|c| c.set(self.0));
        }
    }
    let prev = NEGATE_ROUTH.with(|c| c.replace(true));
    let _reset = Reset(prev);
    f()
}

/// True iff every root has strictly negative real part. Any vanishing entry
/// in the first column of the Routh array counts as "not Hurwitz".
pub fn routh_hurwitz(p: &PolyCoeffs) -> bool {
    let verdict = routh_first_column(p)
        .map(|col| {
            let scale = p.coeffs().iter().fold(1.0_f64, |acc, c| acc.max(c.abs()));
            col.iter().all(|v| *v > 1e-12 * scale)
        })
        .unwrap_or(false);
    verdict != NEGATE_ROUTH.with(|c| c.get())
}

fn routh_first_column(p: &PolyCoeffs) -> Option<Vec<f64>> {
    let desc = p.descending();
    let width = desc.len().div_ceil(2);
    let mut prev: Vec<f64> = desc.iter().step_by(2).copied().collect();
    let mut cur: Vec<f64> = desc.iter().skip(1).step_by(2).copied().collect();
    prev.resize(width, 0.0);
    cur.resize(width, 0.0);
    let mut first = vec![prev[0], cur[0]];
    for _ in 2..desc.len() {
        if cur[0] == 0.0 {
            return None;
        }
        let mut next = vec![0.0; width];
        for j in 0..width - 1 {
            next[j] = (cur[0] * prev[j + 1] - prev[0] * cur[j + 1]) / cur[0];
        }
        first.push(next[0]);
        prev = cur;
        cur = next;
    }
    Some(first)
}

/// Monic characteristic polynomial `det(sI - A)` by the Faddeev-LeVerrier
/// recursion.
pub fn char_poly(a: &Matrix) -> PolyCoeffs {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "char_poly needs a square matrix");
    assert!(n >= 1, "char_poly needs a non-empty matrix");
    let eye = Matrix::identity(n, n);
    let mut coeffs = vec![0.0; n];
    let mut m = Matrix::zeros(n, n);
    let mut c_prev = 1.0;
    for k in 1..=n {
        m = a * &m + &eye * c_prev;
        let c = -(a * &m).trace() / k as f64;
        coeffs[n - k] = c;
        c_prev = c;
    }
    PolyCoeffs { coeffs }
}

pub fn is_hurwitz(a: &Matrix) -> bool {
    a.nrows() > 0 && routh_hurwitz(&char_poly(a))
}

/// Single-input pole placement by Ackermann's formula: returns the 1×n gain
/// `K` such that `A - B K` has the requested (real) closed-loop poles.
pub fn place_poles(a: &Matrix, b: &Matrix, poles: &[f64]) -> Result<Matrix> {
    let n = a.nrows();
    if b.shape() != (n, 1) || poles.len() != n {
        return Err(Error::Dimension(
            "pole placement needs a single input and n poles".into(),
        ));
    }
    let mut ctrb = Matrix::zeros(n, n);
    let mut col = b.column(0).into_owned();
    for j in 0..n {
        ctrb.set_column(j, &col);
        col = a * col;
    }
    let mut last = Vector::zeros(n);
    last[n - 1] = 1.0;
    let w = solve_linear(&ctrb.transpose(), &last)?;
    let desired = poly_from_real_roots(poles)?;
    let k = w.transpose() * desired.eval_matrix(a);
    Ok(Matrix::from_row_slice(1, n, k.as_slice()))
}

/// LQR gain by Kleinman-Newton iteration from a stabilizing `k0`.
pub fn lqr_gain(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, k0: &Matrix) -> Result<Matrix> {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-9;
    let n = a.nrows();
    let m = b.ncols();
    if b.nrows() != n || k0.shape() != (m, n) || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension("LQR operand shapes disagree".into()));
    }
    let mut k = k0.clone();
    if !is_hurwitz(&(a - b * &k)) {
        return Err(Error::NotStabilizing);
    }
    for _ in 0..MAX_ITER {
        let closed = a - b * &k;
        let weight = q + k.transpose() * r * &k;
        let p = solve_lyapunov_with(&closed, &weight)?;
        let next = solve_linear_matrix(r, &(b.transpose() * p))?;
        let step = norm_inf(&(&next - &k));
        k = next;
        if step <= TOL {
            return Ok(k);
        }
    }
    Err(Error::NoConvergence { iterations: MAX_ITER })
}

/// One classical fourth-order Runge-Kutta step of `ẋ = f(t, x)`.
pub fn rk4_step<F>(f: F, x: &Vector, t: f64, dt: f64) -> Result<Vector>
where
    F: Fn(f64, &Vector) -> Vector,
{
    let finite = |v: Vector, at: f64| {
        if v.iter().all(|c| c.is_finite()) {
            Ok(v)
        } else {
            Err(Error::NonFiniteState { t: at })
        }
    };
    let half = 0.5 * dt;
    let k1 = finite(f(t, x), t)?;
    let k2 = finite(f(t + half, &(x + &k1 * half)), t + half)?;
    let k3 = finite(f(t + half, &(x + &k2 * half)), t + half)?;
    let k4 = finite(f(t + dt, &(x + &k3 * dt)), t + dt)?;
    finite(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0), t + dt)
}
