//! Dense convex quadratic programs with homogeneous inequality constraints.
//!
//! Problems have the form `min ½ xᵀHx + gᵀx  s.t.  Dx ≥ 0` and are solved with the
//! Goldfarb–Idnani dual active-set method. Multipliers follow the convention
//! `Hx + g = Dᵀλ`, `λ ≥ 0`.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bernstein::ConstraintSystem;
use crate::design::DesignSystem;
use crate::error::{DorqfError, Result};

/// Slack below which a row counts as active.
pub const ACTIVE_TOL: f64 = 1e-8;
/// Condition estimate of `TᵀT` above which the normal equations are abandoned for QR.
pub const CONDITION_LIMIT: f64 = 1e8;

const SYMMETRY_TOL: f64 = 1e-10;
const DEPENDENT_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constraints: DMatrix<f64>,
}

impl QpProblem {
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>, constraints: DMatrix<f64>) -> Result<Self> {
        let k = hessian.nrows();
        if hessian.ncols() != k || linear.len() != k || constraints.ncols() != k {
            return Err(DorqfError::Dimension(format!(
                "hessian {}x{}, linear term {}, constraints {}x{}",
                hessian.nrows(),
                hessian.ncols(),
                linear.len(),
                constraints.nrows(),
                constraints.ncols()
            )));
        }
        let scale = hessian.amax().max(1.0);
        if (&hessian - hessian.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(DorqfError::InvalidArgument("hessian is not symmetric".into()));
        }
        Ok(Self {
            hessian,
            linear,
            constraints,
        })
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    pub fn kkt_residuals(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
        kkt_residuals(&self.hessian, &self.linear, &self.constraints, x, lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `max(0, -min_r D_r x)`
    pub primal: f64,
    /// `max(0, -min_r λ_r)`
    pub dual: f64,
    /// `‖Hx + g - Dᵀλ‖∞`
    pub stationarity: f64,
    /// `max_r |λ_r (Dx)_r|`
    pub complementarity: f64,
}

impl KktResiduals {
    /// The tolerances every returned solution is held to.
    pub fn acceptable(&self, linear_scale: f64) -> bool {
        self.primal <= ACTIVE_TOL
            && self.dual <= ACTIVE_TOL
            && self.stationarity <= 1e-6 * (1.0 + linear_scale)
            && self.complementarity <= 1e-6
    }
}

pub fn kkt_residuals(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    d: &DMatrix<f64>,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
) -> KktResiduals {
    let slack = d * x;
    let grad = h * x + g - d.transpose() * lambda;
    KktResiduals {
        primal: slack.iter().fold(0.0f64, |m, &s| m.max(-s)),
        dual: lambda.iter().fold(0.0f64, |m, &l| m.max(-l)),
        stationarity: grad.amax(),
        complementarity: slack
            .iter()
            .zip(lambda.iter())
            .fold(0.0f64, |m, (s, l)| m.max((s * l).abs())),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Rows with `|D_r x| ≤ 1e-8`.
    pub active_set: Vec<usize>,
    /// One multiplier per constraint row, zero off the working set.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Dual objective after each step; non-decreasing.
    pub dual_trace: Vec<f64>,
}

/// Raw solver output for `min ½ (x - c)ᵀ RᵀR (x - c)` with `c` the start point.
struct GiOutput {
    x: DVector<f64>,
    working: Vec<usize>,
    u: Vec<f64>,
    iterations: usize,
    trace: Vec<f64>,
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for r in 0..j.nrows() {
        let (x, y) = (j[(r, a)], j[(r, b)]);
        j[(r, a)] = c * x + s * y;
        j[(r, b)] = -s * x + c * y;
    }
}

/// Goldfarb–Idnani iterations starting from the unconstrained minimizer `start`
/// with `j0 = R⁻¹` (so `J Jᵀ = H⁻¹`).
fn goldfarb_idnani(
    j0: &DMatrix<f64>,
    start: &DVector<f64>,
    d: &DMatrix<f64>,
    row_norms: &[f64],
    h: &DMatrix<f64>,
) -> Result<GiOutput> {
    let k = start.len();
    let rows = d.nrows();
    let max_iter = 10 * (rows + k);
    let mut x = start.clone();
    let mut j = j0.clone();
    let mut r = DMatrix::<f64>::zeros(k, k);
    let mut working: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut f = 0.0;
    let mut trace = vec![f];
    let mut iterations = 0;
    let viol_tol = 1e-13 * (1.0 + start.amax());

    let not_converged = |x: &DVector<f64>, working: &[usize], u: &[f64], it: usize| {
        let mut lambda = DVector::zeros(rows);
        for (&w, &l) in working.iter().zip(u) {
            lambda[w] = l;
        }
        let g = -(h * start);
        let res = kkt_residuals(h, &g, d, x, &lambda);
        DorqfError::NotConverged {
            iterations: it,
            best: x.iter().copied().collect(),
            primal_violation: res.primal,
            stationarity: res.stationarity,
        }
    };

    'outer: loop {
        // most violated row, measured in normalized slack
        let slack = d * &x;
        let mut p = None;
        let mut worst = -viol_tol;
        for i in 0..rows {
            if row_norms[i] == 0.0 || working.contains(&i) {
                continue;
            }
            let s = slack[i] / row_norms[i];
            if s < worst {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else { break };
        let np = d.row(p).transpose();
        let mut sp = slack[p];
        let mut u_plus = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(not_converged(&x, &working, &u, iterations));
            }
            let q = working.len();
            let dv = j.transpose() * &np;
            let tail_norm = dv.rows(q, k - q).norm();
            let mut z = DVector::zeros(k);
            for c in q..k {
                z.axpy(dv[c], &j.column(c), 1.0);
            }
            // r = R⁻¹ d₁ by back substitution
            let mut rv = vec![0.0; q];
            for i in (0..q).rev() {
                let mut acc = dv[i];
                for c in i + 1..q {
                    acc -= r[(i, c)] * rv[c];
                }
                rv[i] = acc / r[(i, i)];
            }
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (idx, &rj) in rv.iter().enumerate() {
                if rj > 0.0 {
                    let ratio = u[idx] / rj;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(idx);
                    }
                }
            }
            let zn = z.dot(&np);
            let t2 = if tail_norm <= DEPENDENT_TOL * dv.norm() || zn <= 0.0 {
                f64::INFINITY
            } else {
                -sp / zn
            };
            if t1.is_infinite() && t2.is_infinite() {
                return Err(DorqfError::Infeasible);
            }
            if t2.is_infinite() {
                for (uj, rj) in u.iter_mut().zip(&rv) {
                    *uj -= t1 * rj;
                }
                u_plus += t1;
                drop_constraint(&mut j, &mut r, &mut working, &mut u, drop.unwrap());
                continue;
            }
            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            f += t * zn * (0.5 * t + u_plus);
            for (uj, rj) in u.iter_mut().zip(&rv) {
                *uj -= t * rj;
            }
            u_plus += t;
            sp += t * zn;
            trace.push(f);
            if t2 <= t1 {
                add_constraint(&mut j, &mut r, dv, q);
                working.push(p);
                u.push(u_plus);
                continue 'outer;
            }
            drop_constraint(&mut j, &mut r, &mut working, &mut u, drop.unwrap());
        }
    }
    Ok(GiOutput {
        x,
        working,
        u,
        iterations,
        trace,
    })
}

fn add_constraint(j: &mut DMatrix<f64>, r: &mut DMatrix<f64>, mut dv: DVector<f64>, q: usize) {
    let k = dv.len();
    for c in (q + 1..k).rev() {
        if dv[c] == 0.0 {
            continue;
        }
        let (cs, sn, h) = givens(dv[c - 1], dv[c]);
        dv[c - 1] = h;
        dv[c] = 0.0;
        rotate_columns(j, c - 1, c, cs, sn);
    }
    for i in 0..=q {
        r[(i, q)] = dv[i];
    }
}

fn drop_constraint(
    j: &mut DMatrix<f64>,
    r: &mut DMatrix<f64>,
    working: &mut Vec<usize>,
    u: &mut Vec<f64>,
    l: usize,
) {
    let q = working.len();
    for c in l..q - 1 {
        for i in 0..q {
            r[(i, c)] = r[(i, c + 1)];
        }
    }
    for i in 0..q {
        r[(i, q - 1)] = 0.0;
    }
    for i in l..q - 1 {
        let (cs, sn, h) = givens(r[(i, i)], r[(i + 1, i)]);
        r[(i, i)] = h;
        r[(i + 1, i)] = 0.0;
        for c in i + 1..q - 1 {
            let (a, b) = (r[(i, c)], r[(i + 1, c)]);
            r[(i, c)] = cs * a + sn * b;
            r[(i + 1, c)] = -sn * a + cs * b;
        }
        rotate_columns(j, i, i + 1, cs, sn);
    }
    working.remove(l);
    u.remove(l);
}

fn row_norms(d: &DMatrix<f64>) -> Vec<f64> {
    d.row_iter().map(|r| r.norm()).collect()
}

fn upper_inverse(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = r.nrows();
    let max_diag = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..k).any(|i| r[(i, i)].abs() <= 1e-14 * max_diag.max(f64::MIN_POSITIVE)) {
        return Err(DorqfError::Singular);
    }
    r.clone()
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(DorqfError::Singular)
}

/// Upper-triangular `R` with `H = RᵀR`.
fn cholesky_upper(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(h.clone()).ok_or(DorqfError::Singular)?;
    Ok(chol.l().transpose())
}

fn assemble(
    out: GiOutput,
    d: &DMatrix<f64>,
    multiplier_scale: f64,
    objective: f64,
    trace_offset: f64,
) -> QpSolution {
    let slack = d * &out.x;
    let active_set = (0..d.nrows())
        .filter(|&i| slack[i].abs() <= ACTIVE_TOL)
        .collect();
    let mut multipliers = DVector::zeros(d.nrows());
    for (&w, &l) in out.working.iter().zip(&out.u) {
        multipliers[w] = l * multiplier_scale;
    }
    QpSolution {
        x: out.x,
        active_set,
        multipliers,
        objective,
        iterations: out.iterations,
        converged: true,
        dual_trace: out
            .trace
            .iter()
            .map(|t| t * multiplier_scale + trace_offset)
            .collect(),
    }
}

/// Solves `min ½xᵀHx + gᵀx s.t. Dx ≥ 0` for positive definite `H`.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    let r = cholesky_upper(&problem.hessian)?;
    let j0 = upper_inverse(&r)?;
    let start = -(&j0 * (j0.transpose() * &problem.linear));
    let out = goldfarb_idnani(
        &j0,
        &start,
        &problem.constraints,
        &row_norms(&problem.constraints),
        &problem.hessian,
    )?;
    let objective = problem.objective(&out.x);
    let f0 = problem.objective(&start);
    let sol = assemble(out, &problem.constraints, 1.0, objective, f0);
    debug!("qp solved in {} iterations", sol.iterations);
    Ok(sol)
}

/// Repeated projections `argmin_{Dx ≥ 0} (x - z)ᵀ Ω (x - z)` sharing one factorization.
#[derive(Debug, Clone)]
pub struct ConeProjector {
    omega: DMatrix<f64>,
    j0: DMatrix<f64>,
    constraints: DMatrix<f64>,
    norms: Vec<f64>,
}

impl ConeProjector {
    pub fn new(omega: &DMatrix<f64>, constraints: &ConstraintSystem) -> Result<Self> {
        if omega.nrows() != constraints.cols() || omega.ncols() != constraints.cols() {
            return Err(DorqfError::Dimension(format!(
                "weight matrix {}x{} for {} coefficients",
                omega.nrows(),
                omega.ncols(),
                constraints.cols()
            )));
        }
        let r = cholesky_upper(omega)?;
        Self::from_factor(omega.clone(), &r, &constraints.matrix)
    }

    /// `r` must satisfy `omega = rᵀ r`.
    pub(crate) fn from_factor(omega: DMatrix<f64>, r: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            omega,
            j0: upper_inverse(r)?,
            constraints: d.clone(),
            norms: row_norms(d),
        })
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    /// Multipliers and objective refer to `(x - z)ᵀ Ω (x - z)` without the ½.
    pub fn project(&self, z: &DVector<f64>) -> Result<QpSolution> {
        if z.len() != self.omega.nrows() {
            return Err(DorqfError::Dimension(format!(
                "point of length {} for {} coefficients",
                z.len(),
                self.omega.nrows()
            )));
        }
        let out = goldfarb_idnani(&self.j0, z, &self.constraints, &self.norms, &self.omega)?;
        let diff = &out.x - z;
        let objective = diff.dot(&(&self.omega * &diff));
        Ok(assemble(out, &self.constraints, 2.0, objective, 0.0))
    }

    /// Projects many points in parallel; output order matches input order.
    pub fn project_many(&self, zs: &[DVector<f64>]) -> Result<Vec<QpSolution>> {
        zs.par_iter().map(|z| self.project(z)).collect()
    }
}

pub fn project_onto_cone(
    z: &DVector<f64>,
    omega: &DMatrix<f64>,
    constraints: &ConstraintSystem,
) -> Result<QpSolution> {
    ConeProjector::new(omega, constraints)?.project(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factorization {
    Cholesky,
    Qr,
}

/// Factored least-squares problem `min Σ_i ‖Y_i - T_i ψ‖² + ridge ‖ψ‖²`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    factor: DMatrix<f64>,
    inverse_factor: DMatrix<f64>,
    solution: DVector<f64>,
    method: Factorization,
    ridge: f64,
}

const GRAM_CHUNK: usize = 32;

/// `(Σ T_iᵀT_i, Σ T_iᵀY_i)` over `indices`, summed in a fixed order.
pub fn accumulate_normal_equations(
    design: &DesignSystem,
    indices: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let k = design.k();
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = indices
        .par_chunks(GRAM_CHUNK)
        .map(|chunk| {
            let mut g = DMatrix::zeros(k, k);
            let mut b = DVector::zeros(k);
            for &i in chunk {
                let t = design.block(i);
                g.gemm_tr(1.0, t, t, 1.0);
                b.gemv_tr(1.0, t, &design.responses()[i], 1.0);
            }
            (g, b)
        })
        .collect();
    let mut g = DMatrix::zeros(k, k);
    let mut b = DVector::zeros(k);
    for (pg, pb) in parts {
        g += pg;
        b += pb;
    }
    (g, b)
}

/// `Σ T_iᵀ Y_i` for replacement responses.
pub fn accumulate_rhs(design: &DesignSystem, responses: &[DVector<f64>]) -> DVector<f64> {
    let mut b = DVector::zeros(design.k());
    for (t, y) in design.blocks().iter().zip(responses) {
        b.gemv_tr(1.0, t, y, 1.0);
    }
    b
}

impl LeastSquares {
    pub fn from_design(design: &DesignSystem, ridge: f64) -> Result<Self> {
        let all: Vec<usize> = (0..design.n()).collect();
        let (gram, rhs) = accumulate_normal_equations(design, &all);
        Self::from_parts(design, Some(&all), gram, rhs, ridge)
    }

    /// Builds from an accumulated Gram matrix; `rows` names the subjects it came
    /// from so the QR fallback can restack them.
    pub fn from_parts(
        design: &DesignSystem,
        rows: Option<&[usize]>,
        gram: DMatrix<f64>,
        rhs: DVector<f64>,
        ridge: f64,
    ) -> Result<Self> {
        if ridge < 0.0 || !ridge.is_finite() {
            return Err(DorqfError::InvalidArgument(format!("ridge must be non-negative, got {ridge}")));
        }
        let k = gram.nrows();
        let mut h = gram.clone();
        for i in 0..k {
            h[(i, i)] += ridge;
        }
        let chol = cholesky_upper(&h);
        let (factor, method) = match chol {
            Ok(r) if condition_estimate(&r) <= CONDITION_LIMIT => (r, Factorization::Cholesky),
            other => {
                if other.is_ok() {
                    debug!("normal equations ill-conditioned; refactoring by QR");
                }
                match rows {
                    Some(idx) => (qr_factor(design, idx, ridge)?, Factorization::Qr),
                    None => (other?, Factorization::Cholesky),
                }
            }
        };
        let inverse_factor = upper_inverse(&factor)?;
        let solution = &inverse_factor * (inverse_factor.transpose() * &rhs);
        Ok(Self {
            gram: h,
            rhs,
            factor,
            inverse_factor,
            solution,
            method,
            ridge,
        })
    }

    pub fn solution(&self) -> &DVector<f64> {
        &self.solution
    }

    /// `TᵀT + ridge·I`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    /// Upper-triangular `R` with `RᵀR = TᵀT + ridge·I`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn method(&self) -> Factorization {
        self.method
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// `(TᵀT + ridge·I)⁻¹`.
    pub fn gram_inverse(&self) -> DMatrix<f64> {
        &self.inverse_factor * self.inverse_factor.transpose()
    }

    /// Unconstrained solution for a new right-hand side with the same design.
    pub fn solve_rhs(&self, rhs: &DVector<f64>) -> DVector<f64> {
        &self.inverse_factor * (self.inverse_factor.transpose() * rhs)
    }

    /// Projector onto `{Dψ ≥ 0}` in the metric of the normal equations.
    pub fn projector(&self, constraints: &ConstraintSystem) -> Result<ConeProjector> {
        if constraints.cols() != self.gram.nrows() {
            return Err(DorqfError::Dimension(format!(
                "constraint system has {} columns, design has {}",
                constraints.cols(),
                self.gram.nrows()
            )));
        }
        Ok(ConeProjector {
            omega: self.gram.clone(),
            j0: self.inverse_factor.clone(),
            constraints: constraints.matrix.clone(),
            norms: row_norms(&constraints.matrix),
        })
    }
}

fn condition_estimate(r: &DMatrix<f64>) -> f64 {
    let diag: Vec<f64> = (0..r.nrows()).map(|i| r[(i, i)].abs()).collect();
    let hi = diag.iter().copied().fold(0.0, f64::max);
    let lo = diag.iter().copied().fold(f64::INFINITY, f64::min);
    (hi / lo).powi(2)
}

fn qr_factor(design: &DesignSystem, rows: &[usize], ridge: f64) -> Result<DMatrix<f64>> {
    let (m, k) = (design.m(), design.k());
    let extra = if ridge > 0.0 { k } else { 0 };
    let mut t = DMatrix::zeros(rows.len() * m + extra, k);
    for (s, &i) in rows.iter().enumerate() {
        t.view_mut((s * m, 0), (m, k)).copy_from(design.block(i));
    }
    for c in 0..extra {
        t[(rows.len() * m + c, c)] = ridge.sqrt();
    }
    if t.nrows() < k {
        return Err(DorqfError::Singular);
    }
    let r = t.qr().r();
    upper_inverse(&r)?;
    Ok(r)
}

pub fn solve_unconstrained_ls(design: &DesignSystem, ridge: f64) -> Result<DVector<f64>> {
    Ok(LeastSquares::from_design(design, ridge)?.solution().clone())
}

/// `min Σ_i ‖Q_iY - T_i ψ‖²  s.t.  Dψ ≥ 0`. Multipliers satisfy
/// `2(TᵀT ψ - TᵀY) = Dᵀλ` and the objective is the residual sum of squares.
pub fn solve_constrained_ls(
    design: &DesignSystem,
    constraints: &ConstraintSystem,
    ridge: f64,
) -> Result<QpSolution> {
    let ls = LeastSquares::from_design(design, ridge)?;
    let mut sol = ls.projector(constraints)?.project(ls.solution())?;
    sol.objective = design.rss(&sol.x);
    let kkt = kkt_residuals(
        &(ls.gram() * 2.0),
        &(ls.rhs() * -2.0),
        &constraints.matrix,
        &sol.x,
        &sol.multipliers,
    );
    if !kkt.acceptable(2.0 * ls.rhs().amax()) {
        warn!("constrained fit has loose KKT residuals: {kkt:?}");
    }
    Ok(sol)
}
