//! Seeded randomized property suites with independent oracles.

use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cbf_core::GammaSpec;
use crate::filters::{solve_qp_small, AffineConstraint, ConstraintKind};
use crate::internal_analysis::{extract_internal_linear, PhaseVerdict};
use crate::numerics::{self, Matrix, PolyCoeffs, Vector};

pub const DEFAULT_SEED: u64 = 20240917;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// First failing case, if any.
    pub counterexample: Option<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let mut line = format!("{status} {:<24} {}/{} cases", self.name, self.cases - self.failures, self.cases);
        if let Some(c) = &self.counterexample {
            line.push_str(&format!("  first counterexample: {c}"));
        }
        line
    }
}

struct Tally {
    name: &'static str,
    cases: usize,
    failures: usize,
    counterexample: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            cases: 0,
            failures: 0,
            counterexample: None,
        }
    }

    fn record(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(describe());
            }
        }
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name,
            cases: self.cases,
            failures: self.failures,
            counterexample: self.counterexample,
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_gammas(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec<f64> {
    let r = rng.random_range(1..=4);
    (0..r).map(|_| rng.random_range(lo..hi)).collect()
}

/// `‖Γ‖₂ ≤ √2 / γ_min` for `γ_min ≥ √2`, plus Hurwitz-ness of the rate
/// polynomial.
pub fn gamma_bound_suite(seed: u64, cases: usize) -> SuiteReport {
    let mut rng = rng_for(seed, 1);
    let mut tally = Tally::new("gamma_norm_bound");
    for _ in 0..cases {
        let gammas = random_gammas(&mut rng, 2f64.sqrt(), 20.0);
        let ok = match GammaSpec::new(&gammas) {
            Ok(spec) => {
                let bound = 2f64.sqrt() / spec.gamma_min();
                spec.gamma().norm() <= bound * (1.0 + 1e-12) && numerics::routh_hurwitz(spec.k())
            }
            Err(_) => false,
        };
        tally.record(ok, || format!("gammas = {gammas:?}"));
    }
    tally.finish()
}

/// Cascade structure: `T A_k T⁻¹ = A_γ`, `Γ` equals the cascaded
/// reciprocals, and the rate polynomial is Hurwitz.
pub fn gamma_structure_suite(seed: u64, cases: usize) -> SuiteReport {
    let mut rng = rng_for(seed, 2);
    let mut tally = Tally::new("cascade_structure");
    for _ in 0..cases {
        let gammas = random_gammas(&mut rng, 0.1, 20.0);
        let ok = GammaSpec::new(&gammas).is_ok_and(|spec| {
            let t_inv = numerics::inverse(spec.t()).expect("T is unit lower triangular");
            let similar = spec.t() * spec.a_k() * t_inv;
            let r = gammas.len();
            let reciprocals = (0..r).all(|k| {
                let expected = 1.0 / gammas[k..].iter().product::<f64>();
                (spec.gamma()[k] - expected).abs() <= 1e-10 * expected.max(1.0)
            });
            let scale = spec.a_k().amax().max(1.0);
            (similar - spec.a_gamma()).amax() <= 1e-8 * scale
                && reciprocals
                && numerics::routh_hurwitz(spec.k())
        });
        tally.record(ok, || format!("gammas = {gammas:?}"));
    }
    tally.finish()
}

/// Residual and positive definiteness of the Lyapunov solution for random
/// cascade matrices.
pub fn lyapunov_suite(seed: u64, cases: usize) -> SuiteReport {
    let mut rng = rng_for(seed, 3);
    let mut tally = Tally::new("lyapunov_residual");
    for _ in 0..cases {
        let gammas = random_gammas(&mut rng, 0.1, 20.0);
        let spec = GammaSpec::new(&gammas).expect("positive rates");
        let a = spec.a_gamma();
        let ok = numerics::solve_lyapunov(a).is_ok_and(|p| {
            let r = p.nrows();
            let residual = a.transpose() * &p + &p * a + Matrix::identity(r, r);
            residual.amax() <= 1e-8 && Cholesky::new(p.clone()).is_some() && (&p - p.transpose()).amax() <= 1e-10
        });
        tally.record(ok, || format!("gammas = {gammas:?}"));
    }
    tally.finish()
}

/// Polynomial with the given real roots and complex pairs `σ ± iω`.
fn poly_from_roots(real: &[f64], pairs: &[(f64, f64)]) -> PolyCoeffs {
    let mut coeffs = vec![1.0];
    let mut mul = |factor: &[f64]| {
        let mut next = vec![0.0; coeffs.len() + factor.len() - 1];
        for (i, a) in coeffs.iter().enumerate() {
            for (j, b) in factor.iter().enumerate() {
                next[i + j] += a * b;
            }
        }
        coeffs = next;
    };
    for &r in real {
        mul(&[-r, 1.0]);
    }
    for &(s, w) in pairs {
        mul(&[s * s + w * w, -2.0 * s, 1.0]);
    }
    coeffs.pop();
    PolyCoeffs::new(coeffs).expect("monic")
}

fn random_root_part(rng: &mut ChaCha8Rng) -> f64 {
    let magnitude = rng.random_range(0.05..5.0);
    if rng.random_bool(0.5) {
        -magnitude
    } else {
        magnitude
    }
}

/// Routh test against polynomials built from known roots.
pub fn routh_suite(seed: u64, cases: usize) -> SuiteReport {
    let mut rng = rng_for(seed, 4);
    let mut tally = Tally::new("routh_vs_roots");
    for _ in 0..cases {
        let degree = rng.random_range(1..=4);
        let n_pairs = rng.random_range(0..=degree / 2);
        let real: Vec<f64> = (0..degree - 2 * n_pairs)
            .map(|_| {
                // mostly stable draws so both outcomes are well represented
                let r = random_root_part(&mut rng);
                if rng.random_bool(0.3) {
                    -r.abs()
                } else {
                    r
                }
            })
            .collect();
        let pairs: Vec<(f64, f64)> = (0..n_pairs)
            .map(|_| (random_root_part(&mut rng), rng.random_range(0.1..5.0)))
            .collect();
        let expected = real.iter().all(|r| *r < 0.0) && pairs.iter().all(|p| p.0 < 0.0);
        let poly = poly_from_roots(&real, &pairs);
        tally.record(numerics::routh_hurwitz(&poly) == expected, || {
            format!("real roots {real:?}, pairs {pairs:?}, expected hurwitz = {expected}")
        });
    }
    tally.finish()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Well-conditioned random matrix `I + E` with `‖E‖` small.
fn random_invertible(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    loop {
        let m = Matrix::identity(n, n) + random_matrix(rng, n, n, 0.6);
        if numerics::inverse(&m).is_ok_and(|inv| inv.amax() < 20.0) {
            return m;
        }
    }
}

/// A random single-input plant built in normal form with a known internal
/// block, then hidden behind a random change of coordinates.
pub struct BlockPlant {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub r: usize,
    pub internal_eigenvalues: Vec<f64>,
}

impl BlockPlant {
    pub fn oracle_min_phase(&self) -> bool {
        self.internal_eigenvalues.iter().all(|l| *l < 0.0)
    }
}

pub fn random_block_plant(rng: &mut ChaCha8Rng) -> BlockPlant {
    let n = rng.random_range(2..=5);
    let r = rng.random_range(1..n);
    let q = n - r;
    let eig: Vec<f64> = (0..q)
        .map(|_| {
            let m = rng.random_range(0.2..3.0);
            if rng.random_bool(0.5) {
                -m
            } else {
                m
            }
        })
        .collect();
    let v = random_invertible(rng, q);
    let internal = &v * Matrix::from_diagonal(&Vector::from_vec(eig.clone())) * numerics::inverse(&v).expect("invertible");

    let mut a_bar = Matrix::zeros(n, n);
    for i in 0..r - 1 {
        a_bar[(i, i + 1)] = 1.0;
    }
    let last = random_matrix(rng, 1, n, 2.0);
    a_bar.set_row(r - 1, &last.row(0));
    let coupling = random_matrix(rng, q, r, 2.0);
    a_bar.view_mut((r, 0), (q, r)).copy_from(&coupling);
    a_bar.view_mut((r, r), (q, q)).copy_from(&internal);
    let mut b_bar = Matrix::zeros(n, 1);
    let gain = rng.random_range(0.5..2.0);
    b_bar[(r - 1, 0)] = if rng.random_bool(0.5) { gain } else { -gain };
    let mut c_bar = Matrix::zeros(1, n);
    c_bar[(0, 0)] = 1.0;

    // z = S x
    let s = random_invertible(rng, n);
    let s_inv = numerics::inverse(&s).expect("invertible");
    BlockPlant {
        a: &s_inv * a_bar * &s,
        b: &s_inv * b_bar,
        c: c_bar * &s,
        r,
        internal_eigenvalues: eig,
    }
}

/// Extraction verdict against the constructed internal block.
pub fn min_phase_suite(seed: u64, cases: usize) -> SuiteReport {
    let mut rng = rng_for(seed, 5);
    let mut tally = Tally::new("min_phase_equivalence");
    for _ in 0..cases {
        let plant = random_block_plant(&mut rng);
        let spec = GammaSpec::repeated(2.0, plant.r).expect("positive rate");
        let expected = PhaseVerdict::from_hurwitz(plant.oracle_min_phase());
        let got = extract_internal_linear(&plant.a, &plant.b, &plant.c, &spec);
        let ok = got.as_ref().is_ok_and(|zd| {
            zd.verdict == expected && (&zd.n * &plant.b).amax() <= 1e-10 * zd.n.amax().max(1.0)
        });
        tally.record(ok, || {
            format!(
                "n = {}, r = {}, internal eigenvalues {:?}, got {:?}",
                plant.a.nrows(),
                plant.r,
                plant.internal_eigenvalues,
                got.map(|zd| zd.verdict)
            )
        });
    }
    tally.finish()
}

/// A random feasible QP instance.
pub fn random_qp(rng: &mut ChaCha8Rng) -> (Vector, Vec<AffineConstraint>) {
    let m = rng.random_range(1..=3);
    let n_eq = rng.random_range(0..=(m - 1).min(2));
    let n_ineq = rng.random_range(0..=2);
    let u_ref = Vector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
    let anchor = Vector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
    let mut rows = Vec::new();
    for i in 0..n_eq {
        let a = Vector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        rows.push(AffineConstraint::eq(a.clone(), a.dot(&anchor), format!("eq{i}")));
    }
    for i in 0..n_ineq {
        let a = Vector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        let slack = rng.random_range(0.0..1.0);
        rows.push(AffineConstraint::geq(a.clone(), a.dot(&anchor) - slack, format!("in{i}")));
    }
    (u_ref, rows)
}

/// Orthonormal basis of the null space of the equality rows and a particular
/// solution, by Gram-Schmidt on the row space.
fn equality_parametrization(m: usize, rows: &[AffineConstraint]) -> Option<(Vector, Vec<Vector>)> {
    let eqs: Vec<&AffineConstraint> = rows.iter().filter(|c| c.kind == ConstraintKind::Equality).collect();
    if eqs.is_empty() {
        let basis = (0..m)
            .map(|i| {
                let mut e = Vector::zeros(m);
                e[i] = 1.0;
                e
            })
            .collect();
        return Some((Vector::zeros(m), basis));
    }
    let a = Matrix::from_fn(eqs.len(), m, |i, j| eqs[i].a[j]);
    let b = Vector::from_iterator(eqs.len(), eqs.iter().map(|c| c.b));
    let particular = a.transpose() * numerics::solve_linear(&(&a * a.transpose()), &b).ok()?;
    let mut row_basis: Vec<Vector> = Vec::new();
    for c in &eqs {
        let mut v = c.a.clone();
        for q in &row_basis {
            v -= q * q.dot(&v);
        }
        row_basis.push(v.normalize());
    }
    let mut null = Vec::new();
    for i in 0..m {
        let mut v = Vector::zeros(m);
        v[i] = 1.0;
        for q in row_basis.iter().chain(null.iter()) {
            v -= q * q.dot(&v);
        }
        if v.norm() > 1e-8 {
            null.push(v.normalize());
        }
    }
    Some((particular, null))
}

/// Best objective found by successive grid refinement over the feasible set.
/// Grid points are feasible, so this bounds the optimum from above; it can
/// stall short of it when the minimizer lies on an oblique constraint.
pub fn brute_force_qp(u_ref: &Vector, rows: &[AffineConstraint]) -> Option<f64> {
    const GRID: i32 = 6;
    const LEVELS: usize = 60;
    const MAX_POINTS: usize = 200_000;
    let m = u_ref.len();
    let (particular, basis) = equality_parametrization(m, rows)?;
    let d = basis.len();
    let point = |w: &[f64]| -> Vector {
        let mut u = particular.clone();
        for (k, q) in basis.iter().enumerate() {
            u += q * w[k];
        }
        u
    };
    let feasible = |u: &Vector| {
        rows.iter()
            .filter(|c| c.kind == ConstraintKind::Inequality)
            .all(|c| c.residual(u) >= -1e-12)
    };
    let objective = |u: &Vector| 0.5 * (u - u_ref).norm_squared();

    if d == 0 {
        let u = point(&[]);
        return feasible(&u).then(|| objective(&u));
    }
    let mut center: Vec<f64> = basis.iter().map(|q| q.dot(&(u_ref - &particular))).collect();
    let mut half_width = 10.0 + center.iter().fold(0.0_f64, |acc, c| acc.max(c.abs()));
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut grid = GRID;
    for _ in 0..LEVELS {
        let per_axis = (2 * grid + 1) as usize;
        let total = per_axis.pow(d as u32);
        for idx in 0..total {
            let mut rem = idx;
            let w: Vec<f64> = (0..d)
                .map(|k| {
                    let step = (rem % per_axis) as i32 - grid;
                    rem /= per_axis;
                    center[k] + half_width * step as f64 / grid as f64
                })
                .collect();
            let u = point(&w);
            if feasible(&u) {
                let obj = objective(&u);
                if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                    best = Some((obj, w));
                }
            }
        }
        match &best {
            Some((_, w)) => {
                center = w.clone();
                grid = GRID;
                half_width *= 0.6;
            }
            // nothing feasible yet: densify the grid over the same box
            None if ((4 * grid + 1) as usize).pow(d as u32) <= MAX_POINTS => grid *= 2,
            None => break,
        }
    }
    best.map(|(obj, _)| obj)
}

/// Projection of `u_ref` onto the constraint set: equalities are
/// eliminated exactly, inequalities handled by Dykstra's alternating
/// projections. Returns the objective at the limit point.
pub fn dykstra_qp(u_ref: &Vector, rows: &[AffineConstraint]) -> Option<f64> {
    const MAX_SWEEPS: usize = 1_000_000;
    let (particular, basis) = equality_parametrization(u_ref.len(), rows)?;
    let lift = |w: &Vector| {
        let mut u = particular.clone();
        for (k, q) in basis.iter().enumerate() {
            u += q * w[k];
        }
        u
    };
    // rows in the reduced coordinates
    let reduced: Vec<(Vector, f64)> = rows
        .iter()
        .filter(|c| c.kind == ConstraintKind::Inequality)
        .map(|c| {
            let a = Vector::from_iterator(basis.len(), basis.iter().map(|q| q.dot(&c.a)));
            (a, c.b - c.a.dot(&particular))
        })
        .collect();
    let target = Vector::from_iterator(basis.len(), basis.iter().map(|q| q.dot(&(u_ref - &particular))));
    let mut w = target.clone();
    let mut corrections = vec![Vector::zeros(basis.len()); reduced.len()];
    for _ in 0..MAX_SWEEPS {
        let mut change = 0.0_f64;
        for ((a, b), p) in reduced.iter().zip(corrections.iter_mut()) {
            let y = &w + &*p;
            let norm2 = a.norm_squared();
            let next = if norm2 > 0.0 {
                &y + a * ((b - a.dot(&y)).max(0.0) / norm2)
            } else {
                y.clone()
            };
            let new_p = &y - &next;
            change = change.max((&next - &w).amax()).max((&new_p - &*p).amax());
            w = next;
            *p = new_p;
        }
        if change <= 1e-16 {
            break;
        }
    }
    let u = lift(&w);
    rows.iter()
        .all(|c| c.residual(&u) >= -1e-9 && (c.kind == ConstraintKind::Inequality || c.residual(&u).abs() <= 1e-9))
        .then(|| 0.5 * (&u - u_ref).norm_squared())
}

/// Active-set QP against Dykstra projection and grid refinement, plus KKT
/// conditions.
pub fn qp_suite(seed: u64, cases: usize) -> SuiteReport {
    let mut rng = rng_for(seed, 6);
    let mut tally = Tally::new("qp_oracle_kkt");
    for _ in 0..cases {
        let (u_ref, rows) = random_qp(&mut rng);
        let sol = solve_qp_small(&u_ref, &rows);
        let oracle = dykstra_qp(&u_ref, &rows);
        let grid = brute_force_qp(&u_ref, &rows);
        let ok = match (&sol, oracle, grid) {
            (Ok(sol), Some(best), Some(grid_best)) => {
                let mut stationarity = &sol.u - &u_ref;
                for (c, l) in rows.iter().zip(&sol.multipliers) {
                    stationarity -= &c.a * *l;
                }
                let dual = rows
                    .iter()
                    .zip(&sol.multipliers)
                    .all(|(c, l)| c.kind == ConstraintKind::Equality || *l >= -1e-8);
                let complementary = rows
                    .iter()
                    .zip(&sol.multipliers)
                    .all(|(c, l)| (l * c.residual(&sol.u)).abs() <= 1e-8);
                let primal = rows.iter().all(|c| c.is_satisfied(&sol.u));
                (sol.objective - best).abs() <= 1e-6
                    && grid_best >= sol.objective - 1e-9
                    && stationarity.amax() <= 1e-8
                    && dual
                    && complementary
                    && primal
            }
            _ => false,
        };
        tally.record(ok, || {
            format!(
                "u_ref = {:?}, rows = {:?}, solver = {:?}, projection = {oracle:?}, grid = {grid:?}",
                u_ref.as_slice(),
                rows.iter().map(|c| (c.kind, c.a.as_slice().to_vec(), c.b)).collect::<Vec<_>>(),
                sol.as_ref().map(|s| s.objective)
            )
        });
    }
    tally.finish()
}

/// All suites at their standard sizes.
pub fn run_all(seed: u64) -> Vec<SuiteReport> {
    vec![
        gamma_bound_suite(seed, 1000),
        gamma_structure_suite(seed, 200),
        lyapunov_suite(seed, 200),
        routh_suite(seed, 500),
        min_phase_suite(seed, 200),
        qp_suite(seed, 500),
    ]
}
