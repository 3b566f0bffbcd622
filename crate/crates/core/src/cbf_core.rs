//! Barrier output-chain algebra.
//!
//! A CBF `h` with relative degree `r` and decay rates `γ₁..γ_r` induces
//!
//! * the output derivative vector `ξ = [h, L_f h, …, L_f^{r-1} h]`,
//! * the cascading constraint vector `φ = T ξ` with `φ_{k+1} = φ̇_k + γ_k φ_k`,
//! * the virtual input `μ(x, u) = L_f^r h + L_g L_f^{r-1} h · u + kᵀ ξ`,
//!
//! where `k` holds the coefficients of `(s+γ₁)⋯(s+γ_r)`. Under `μ ≥ 0` the
//! orthant `φ ≥ 0` is forward invariant and `φ̇ = A_γ φ + B μ`.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::internal_analysis::linear_relative_degree;
use crate::numerics::{self, Matrix, PolyCoeffs, Vector};

/// Slack below which nonnegativity of `φ` and `μ` still counts as satisfied.
pub const NONNEG_TOL: f64 = 1e-9;

/// Decoupling rows with a smaller norm are treated as a relative-degree loss.
pub const REGULARITY_TOL: f64 = 1e-9;

pub type StateFn<T> = Arc<dyn Fn(&Vector) -> T + Send + Sync>;

/// Monic coefficients of `(s+γ₁)⋯(s+γ_r)`, ascending (`k₁ = ∏γᵢ`, `k_r = Σγᵢ`).
pub fn expand_gamma_polynomial(gammas: &[f64]) -> Result<PolyCoeffs> {
    validate_gammas(gammas)?;
    let roots: Vec<f64> = gammas.iter().map(|g| -g).collect();
    numerics::poly_from_real_roots(&roots)
}

fn validate_gammas(gammas: &[f64]) -> Result<()> {
    if gammas.is_empty() {
        return Err(Error::Dimension("at least one decay rate is required".into()));
    }
    match gammas.iter().find(|g| !g.is_finite() || **g <= 0.0) {
        Some(bad) => Err(Error::InvalidGamma(*bad)),
        None => Ok(()),
    }
}

/// Decay rates and the matrices they induce on the output chain.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaSpec {
    gammas: Vec<f64>,
    k: PolyCoeffs,
    t: Matrix,
    a_k: Matrix,
    a_gamma: Matrix,
    b: Vector,
    gamma: Vector,
}

impl GammaSpec {
    /// Rates are kept in the given order: `γ₁` is the rate of the innermost
    /// cascade stage and `γ_r` the one seen by `μ`.
    pub fn new(gammas: &[f64]) -> Result<Self> {
        let k = expand_gamma_polynomial(gammas)?;
        let r = gammas.len();

        // row k of T holds the ascending coefficients of ∏_{i<k}(s+γ_i)
        let mut t = Matrix::zeros(r, r);
        t[(0, 0)] = 1.0;
        for row in 1..r {
            for col in 0..=row {
                let shifted = if col > 0 { t[(row - 1, col - 1)] } else { 0.0 };
                t[(row, col)] = shifted + gammas[row - 1] * t[(row - 1, col)];
            }
        }

        let mut a_k = Matrix::zeros(r, r);
        for i in 0..r - 1 {
            a_k[(i, i + 1)] = 1.0;
        }
        for (j, c) in k.coeffs().iter().enumerate() {
            a_k[(r - 1, j)] = -c;
        }

        let mut a_gamma = Matrix::zeros(r, r);
        for (i, g) in gammas.iter().enumerate() {
            a_gamma[(i, i)] = -g;
            if i + 1 < r {
                a_gamma[(i, i + 1)] = 1.0;
            }
        }

        let mut b = Vector::zeros(r);
        b[r - 1] = 1.0;
        let gamma = -numerics::solve_linear(&a_gamma, &b)?;

        Ok(Self {
            gammas: gammas.to_vec(),
            k,
            t,
            a_k,
            a_gamma,
            b,
            gamma,
        })
    }

    /// `r` copies of the same rate.
    pub fn repeated(gamma: f64, r: usize) -> Result<Self> {
        Self::new(&vec![gamma; r])
    }

    pub fn r(&self) -> usize {
        self.gammas.len()
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gammas
    }

    pub fn gamma_min(&self) -> f64 {
        self.gammas.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Constraint coefficient vector `k` (ascending polynomial coefficients).
    pub fn k(&self) -> &PolyCoeffs {
        &self.k
    }

    /// `φ = T ξ`.
    pub fn t(&self) -> &Matrix {
        &self.t
    }

    /// Companion matrix of `k`.
    pub fn a_k(&self) -> &Matrix {
        &self.a_k
    }

    /// Upper-bidiagonal cascade matrix `T A_k T⁻¹`.
    pub fn a_gamma(&self) -> &Matrix {
        &self.a_gamma
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    /// Direction of the equilibrium line, `Γ = -A_γ⁻¹ B`.
    pub fn gamma(&self) -> &Vector {
        &self.gamma
    }

    /// Map a cascade vector back to output derivatives, `ξ = T⁻¹ φ`.
    pub fn phi_to_xi(&self, phi: &Vector) -> Result<Vector> {
        numerics::solve_linear(&self.t, phi)
    }
}

pub fn build_gamma_spec(gammas: &[f64]) -> Result<GammaSpec> {
    GammaSpec::new(gammas)
}

/// Control-affine plant `ẋ = f(x) + g(x) u`.
#[derive(Clone)]
pub struct ControlAffine {
    n: usize,
    m: usize,
    drift: StateFn<Vector>,
    input: StateFn<Matrix>,
}

impl fmt::Debug for ControlAffine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffine")
            .field("n", &self.n)
            .field("m", &self.m)
            .finish_non_exhaustive()
    }
}

impl ControlAffine {
    pub fn new(n: usize, m: usize, drift: StateFn<Vector>, input: StateFn<Matrix>) -> Self {
        Self { n, m, drift, input }
    }

    pub fn linear(a: Matrix, b: Matrix) -> Self {
        let (n, m) = (a.nrows(), b.ncols());
        let input = b.clone();
        Self::new(n, m, Arc::new(move |x| &a * x), Arc::new(move |_| input.clone()))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn drift(&self, x: &Vector) -> Vector {
        (self.drift)(x)
    }

    pub fn input_matrix(&self, x: &Vector) -> Matrix {
        (self.input)(x)
    }

    pub fn eval(&self, x: &Vector, u: &Vector) -> Vector {
        self.drift(x) + self.input_matrix(x) * u
    }
}

/// Closed-form Lie-derivative chain of a scalar output.
#[derive(Clone)]
pub struct OutputChain {
    r: usize,
    m: usize,
    lie: StateFn<Vec<f64>>,
    decoupling: StateFn<Vector>,
}

impl fmt::Debug for OutputChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OutputChain")
            .field("r", &self.r)
            .field("m", &self.m)
            .finish_non_exhaustive()
    }
}

impl OutputChain {
    /// `lie(x)` must return `[h, L_f h, …, L_f^r h]` (length `r + 1`) and
    /// `decoupling(x)` the row `L_g L_f^{r-1} h` (length `m`).
    pub fn new(r: usize, m: usize, lie: StateFn<Vec<f64>>, decoupling: StateFn<Vector>) -> Self {
        assert!(r >= 1, "relative degree must be at least one");
        Self { r, m, lie, decoupling }
    }

    /// Chain of `h(x) = c x` for `ẋ = A x + B u`; the relative degree is
    /// computed from the Markov parameters.
    pub fn linear(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Self> {
        let r = linear_relative_degree(a, b, c)?;
        let mut rows = Vec::with_capacity(r + 1);
        let mut row = c.clone();
        for _ in 0..=r {
            rows.push(row.clone());
            row = &row * a;
        }
        let decoupling = (&rows[r - 1] * b).row(0).transpose();
        Ok(Self::new(
            r,
            b.ncols(),
            Arc::new(move |x| rows.iter().map(|row| (row * x)[0]).collect()),
            Arc::new(move |_| decoupling.clone()),
        ))
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self, x: &Vector) -> f64 {
        (self.lie)(x)[0]
    }

    /// `[h, L_f h, …, L_f^r h]`.
    pub fn lie_derivatives(&self, x: &Vector) -> Vec<f64> {
        (self.lie)(x)
    }

    /// `L_g L_f^{r-1} h(x)`.
    pub fn decoupling(&self, x: &Vector) -> Vector {
        (self.decoupling)(x)
    }

    /// Relative-degree regularity at `x`: some decoupling entry is nonzero.
    pub fn is_regular(&self, x: &Vector) -> bool {
        self.decoupling(x).amax() > REGULARITY_TOL
    }

    /// Largest relative mismatch between central finite differences of the
    /// chain along `f` and `g` and the closed-form derivatives at `x`.
    pub fn consistency_error(&self, plant: &ControlAffine, x: &Vector) -> f64 {
        let lie = self.lie_derivatives(x);
        let decoupling = self.decoupling(x);
        let directional = |dir: &Vector| {
            let tau = 1e-6 / dir.amax().max(1.0);
            let plus = self.lie_derivatives(&(x + dir * tau));
            let minus = self.lie_derivatives(&(x - dir * tau));
            (0..self.r)
                .map(|k| (plus[k] - minus[k]) / (2.0 * tau))
                .collect::<Vec<_>>()
        };
        let rel = |fd: f64, exact: f64| (fd - exact).abs() / exact.abs().max(1.0);

        let along_f = directional(&plant.drift(x));
        let mut worst = (0..self.r)
            .map(|k| rel(along_f[k], lie[k + 1]))
            .fold(0.0, f64::max);
        let g = plant.input_matrix(x);
        for j in 0..plant.m() {
            let along_g = directional(&g.column(j).into_owned());
            for (k, fd) in along_g.iter().enumerate() {
                let exact = if k + 1 == self.r { decoupling[j] } else { 0.0 };
                worst = worst.max(rel(*fd, exact));
            }
        }
        worst
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// `ξ(x) = [h, L_f h, …, L_f^{r-1} h]`.
pub fn eval_xi(chain: &OutputChain, x: &Vector) -> Result<Vector> {
    let lie = chain.lie_derivatives(x);
    let xi = Vector::from_iterator(chain.r(), lie.into_iter().take(chain.r()));
    if xi.iter().all(|v| v.is_finite()) {
        Ok(xi)
    } else {
        Err(Error::NonFinite("output derivative vector".into()))
    }
}

pub fn eval_phi(chain: &OutputChain, spec: &GammaSpec, x: &Vector) -> Result<Vector> {
    Ok(spec.t() * eval_xi(chain, x)?)
}

/// The barrier constraint at a fixed state, `μ(x, u) = slope · u + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierRow {
    pub slope: Vector,
    pub offset: f64,
}

impl BarrierRow {
    pub fn mu(&self, u: &Vector) -> f64 {
        self.slope.dot(u) + self.offset
    }
}

pub fn barrier_row(chain: &OutputChain, spec: &GammaSpec, x: &Vector) -> Result<BarrierRow> {
    if chain.r() != spec.r() {
        return Err(Error::Dimension(format!(
            "chain relative degree {} but {} decay rates",
            chain.r(),
            spec.r()
        )));
    }
    let lie = chain.lie_derivatives(x);
    let k_xi: f64 = spec
        .k()
        .coeffs()
        .iter()
        .zip(&lie)
        .map(|(k, l)| k * l)
        .sum();
    let offset = finite(lie[chain.r()] + k_xi, "barrier drift term")?;
    let slope = chain.decoupling(x);
    if slope.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoupling row".into()));
    }
    Ok(BarrierRow { slope, offset })
}

/// Virtual input `μ(x, u)`.
pub fn eval_mu(chain: &OutputChain, spec: &GammaSpec, x: &Vector, u: &Vector) -> Result<f64> {
    let row = barrier_row(chain, spec, x)?;
    if row.slope.len() != u.len() {
        return Err(Error::Dimension(format!(
            "input length {} but {} channels",
            u.len(),
            row.slope.len()
        )));
    }
    finite(row.mu(u), "virtual input")
}

/// Membership in the forward-invariant orthant `S_φ = {x | φ(x) ≥ 0}`.
pub fn in_s_phi(chain: &OutputChain, spec: &GammaSpec, x: &Vector) -> bool {
    eval_phi(chain, spec, x)
        .map(|phi| phi.iter().all(|p| *p >= -NONNEG_TOL))
        .unwrap_or(false)
}

/// Output coordinates and virtual input at one state-input pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeState {
    pub xi: Vector,
    pub phi: Vector,
    pub mu: f64,
}

pub fn cascade_state(
    chain: &OutputChain,
    spec: &GammaSpec,
    x: &Vector,
    u: &Vector,
) -> Result<CascadeState> {
    let xi = eval_xi(chain, x)?;
    let phi = spec.t() * &xi;
    let mu = eval_mu(chain, spec, x, u)?;
    Ok(CascadeState { xi, phi, mu })
}

/// Point `Γ μ_e` on the equilibrium line of the cascade dynamics.
pub fn equilibria_line_point(spec: &GammaSpec, mu_e: f64) -> Result<Vector> {
    if mu_e < 0.0 {
        return Err(Error::NegativeMu(mu_e));
    }
    Ok(spec.gamma() * mu_e)
}
