//! Bernstein polynomial bases and the joint-monotonicity constraint system.
//!
//! Coefficient functions are `β_j(p) = Σ_k β_jk b_k(p, N)` and the transport map is
//! `h(x) = Σ_{k≥1} θ_k b_k(x, N)` (the constant basis is dropped, pinning
//! `h(0) = 0`). A polynomial with non-decreasing Bernstein coefficients is
//! non-decreasing, so every monotonicity requirement becomes a first-difference
//! inequality on coefficients. Because `β_0 + Σ z_j β_j` is linear in
//! `z ∈ [0,1]^q`, its derivative is smallest at a vertex of the cube, which
//! gives one difference block per subset of covariates.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{DorqfError, Result};

/// Largest number of scalar covariates accepted by [`build_constraint_system`].
pub const MAX_SUBSET_COVARIATES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub order: usize,
    pub includes_constant: bool,
}

impl BasisSpec {
    pub fn new(order: usize, includes_constant: bool) -> Result<Self> {
        if order == 0 {
            return Err(DorqfError::InvalidArgument(
                "Bernstein order must be at least 1".into(),
            ));
        }
        Ok(Self {
            order,
            includes_constant,
        })
    }

    /// Basis for a coefficient function `β_j`.
    pub fn coefficient(order: usize) -> Result<Self> {
        Self::new(order, true)
    }

    /// Basis for the transport map `h`, without `b_0`.
    pub fn transport(order: usize) -> Result<Self> {
        Self::new(order, false)
    }

    pub fn dim(&self) -> usize {
        if self.includes_constant {
            self.order + 1
        } else {
            self.order
        }
    }
}

fn binomial_row(n: usize) -> Vec<f64> {
    let mut row = vec![1.0; n + 1];
    for k in 1..n {
        row[k] = row[k - 1] * (n + 1 - k) as f64 / k as f64;
    }
    row
}

/// Writes `b_k(x, N)` for the basis into `out` without validating `x`.
pub(crate) fn bernstein_into(x: f64, spec: BasisSpec, binom: &[f64], out: &mut [f64]) {
    let n = spec.order;
    let y = 1.0 - x;
    let first = usize::from(!spec.includes_constant);
    for (slot, k) in out.iter_mut().zip(first..=n) {
        *slot = binom[k] * x.powi(k as i32) * y.powi((n - k) as i32);
    }
}

/// Precomputed binomial coefficients for repeated evaluation at one order.
#[derive(Debug, Clone)]
pub struct BernsteinEvaluator {
    spec: BasisSpec,
    binom: Vec<f64>,
}

impl BernsteinEvaluator {
    pub fn new(spec: BasisSpec) -> Self {
        Self {
            spec,
            binom: binomial_row(spec.order),
        }
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        check_unit(x)?;
        let mut out = vec![0.0; self.spec.dim()];
        bernstein_into(x, self.spec, &self.binom, &mut out);
        Ok(out)
    }

    pub(crate) fn eval_into(&self, x: f64, out: &mut [f64]) {
        bernstein_into(x, self.spec, &self.binom, out);
    }

    /// Row-per-point basis matrix.
    pub fn matrix(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        let dim = self.spec.dim();
        let mut m = DMatrix::zeros(xs.len(), dim);
        let mut row = vec![0.0; dim];
        for (i, &x) in xs.iter().enumerate() {
            check_unit(x)?;
            self.eval_into(x, &mut row);
            for (j, v) in row.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Ok(m)
    }

    /// `Σ_k c_k b_k(x)` at each point.
    pub fn combine(&self, coeffs: &[f64], xs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() != self.spec.dim() {
            return Err(DorqfError::Dimension(format!(
                "{} coefficients for a basis of dimension {}",
                coeffs.len(),
                self.spec.dim()
            )));
        }
        let mut row = vec![0.0; coeffs.len()];
        xs.iter()
            .map(|&x| {
                check_unit(x)?;
                self.eval_into(x, &mut row);
                Ok(row.iter().zip(coeffs).map(|(b, c)| b * c).sum())
            })
            .collect()
    }
}

fn check_unit(x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(DorqfError::OutsideUnitInterval {
            what: "basis argument".into(),
            value: x,
        });
    }
    Ok(())
}

/// `(b_0(x,N), …, b_N(x,N))`, without `b_0` unless `spec.includes_constant`.
pub fn bernstein_eval(x: f64, spec: BasisSpec) -> Result<Vec<f64>> {
    BernsteinEvaluator::new(spec).eval(x)
}

/// Coefficients of `f'` in the order-`N-1` basis: `N·(c_{k+1} - c_k)`.
pub fn bernstein_derivative_coeffs(coeffs: &[f64]) -> Result<Vec<f64>> {
    if coeffs.len() < 2 {
        return Err(DorqfError::Dimension(format!(
            "derivative needs at least 2 coefficients, got {}",
            coeffs.len()
        )));
    }
    let n = (coeffs.len() - 1) as f64;
    Ok(coeffs.windows(2).map(|w| n * (w[1] - w[0])).collect())
}

/// The `N × (N+1)` first-difference matrix; with `include_first_nonneg` an extra
/// leading row selects the first coefficient.
pub fn monotone_difference_matrix(order: usize, include_first_nonneg: bool) -> DMatrix<f64> {
    let offset = usize::from(include_first_nonneg);
    let mut a = DMatrix::zeros(order + offset, order + 1);
    if include_first_nonneg {
        a[(0, 0)] = 1.0;
    }
    for k in 0..order {
        a[(k + offset, k)] = -1.0;
        a[(k + offset, k + 1)] = 1.0;
    }
    a
}

/// Position of each coefficient block inside `ψ = (β_0, β_1, …, β_q, θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoefficientLayout {
    pub q: usize,
    pub order: usize,
    pub has_distributional: bool,
}

impl CoefficientLayout {
    pub fn new(q: usize, order: usize, has_distributional: bool) -> Result<Self> {
        BasisSpec::new(order, true)?;
        Ok(Self {
            q,
            order,
            has_distributional,
        })
    }

    /// `K_n = (q+1)(N+1) + N·[has_distributional]`.
    pub fn dim(&self) -> usize {
        (self.q + 1) * (self.order + 1) + if self.has_distributional { self.order } else { 0 }
    }

    /// Slice of `β_j`, `j = 0..=q`.
    pub fn beta(&self, j: usize) -> Range<usize> {
        assert!(j <= self.q, "coefficient index {j} out of range (q = {})", self.q);
        let w = self.order + 1;
        j * w..(j + 1) * w
    }

    pub fn theta(&self) -> Option<Range<usize>> {
        self.has_distributional.then(|| {
            let start = (self.q + 1) * (self.order + 1);
            start..start + self.order
        })
    }

    pub fn coefficient_spec(&self) -> BasisSpec {
        BasisSpec {
            order: self.order,
            includes_constant: true,
        }
    }

    pub fn transport_spec(&self) -> BasisSpec {
        BasisSpec {
            order: self.order,
            includes_constant: false,
        }
    }
}

/// What a constraint row enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintLabel {
    /// `(β_0 + Σ_{j∈S} β_j)_{k+1} - (…)_k ≥ 0`, with `S` given as a bit mask
    /// (bit `j-1` set when `β_j` is included).
    Subset { mask: u32, step: usize },
    /// `θ_1 ≥ 0`.
    TransportFirst,
    /// `θ_{k+2} - θ_{k+1} ≥ 0`.
    TransportStep { step: usize },
}

impl fmt::Display for ConstraintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ConstraintLabel::Subset { mask, step } => {
                write!(f, "beta0")?;
                let mut bits = mask;
                while bits != 0 {
                    let j = bits.trailing_zeros() + 1;
                    write!(f, "+beta{j}")?;
                    bits &= bits - 1;
                }
                write!(f, "[{step}]")
            }
            ConstraintLabel::TransportFirst => write!(f, "theta[first]"),
            ConstraintLabel::TransportStep { step } => write!(f, "theta[{step}]"),
        }
    }
}

/// Stacked inequalities `D ψ ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSystem {
    pub matrix: DMatrix<f64>,
    pub labels: Vec<ConstraintLabel>,
}

impl ConstraintSystem {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// `min_r (D ψ)_r`, or `+∞` for an empty system.
    pub fn min_slack(&self, psi: &[f64]) -> f64 {
        (0..self.rows())
            .map(|r| {
                self.matrix
                    .row(r)
                    .iter()
                    .zip(psi)
                    .map(|(d, x)| d * x)
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_feasible(&self, psi: &[f64], tol: f64) -> bool {
        self.min_slack(psi) >= -tol
    }

    /// One line per row: the label followed by the `K_n` entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for c in 0..self.cols() {
            out.push_str(&format!(",c{c}"));
        }
        out.push('\n');
        for (r, label) in self.labels.iter().enumerate() {
            out.push_str(&label.to_string());
            for c in 0..self.cols() {
                out.push_str(&format!(",{}", self.matrix[(r, c)]));
            }
            out.push('\n');
        }
        out
    }
}

/// Whether the transport block carries the extra `θ_1 ≥ 0` row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportAnchor {
    /// Full monotonicity of `h` on `[0, 1]` given `h(0) = 0`.
    #[default]
    FirstNonnegative,
    /// Differences of `θ` only.
    DifferencesOnly,
}

pub fn build_constraint_system(layout: &CoefficientLayout) -> Result<ConstraintSystem> {
    build_constraint_system_with(layout, TransportAnchor::default())
}

pub fn build_constraint_system_with(
    layout: &CoefficientLayout,
    anchor: TransportAnchor,
) -> Result<ConstraintSystem> {
    if layout.q > MAX_SUBSET_COVARIATES {
        return Err(DorqfError::TooManyCovariates(layout.q));
    }
    let n = layout.order;
    let subsets = 1usize << layout.q;
    let theta_rows = match (layout.has_distributional, anchor) {
        (false, _) => 0,
        (true, TransportAnchor::FirstNonnegative) => n,
        (true, TransportAnchor::DifferencesOnly) => n - 1,
    };
    let rows = subsets * n + theta_rows;
    let mut matrix = DMatrix::zeros(rows, layout.dim());
    let mut labels = Vec::with_capacity(rows);

    let mut r = 0;
    for mask in 0..subsets {
        for step in 0..n {
            for j in 0..=layout.q {
                if j > 0 && mask & (1 << (j - 1)) == 0 {
                    continue;
                }
                let base = layout.beta(j).start;
                matrix[(r, base + step)] = -1.0;
                matrix[(r, base + step + 1)] = 1.0;
            }
            labels.push(ConstraintLabel::Subset {
                mask: mask as u32,
                step,
            });
            r += 1;
        }
    }
    if let Some(theta) = layout.theta() {
        if anchor == TransportAnchor::FirstNonnegative {
            matrix[(r, theta.start)] = 1.0;
            labels.push(ConstraintLabel::TransportFirst);
            r += 1;
        }
        for step in 0..n - 1 {
            matrix[(r, theta.start + step)] = -1.0;
            matrix[(r, theta.start + step + 1)] = 1.0;
            labels.push(ConstraintLabel::TransportStep { step });
            r += 1;
        }
    }
    debug_assert_eq!(r, rows);
    Ok(ConstraintSystem { matrix, labels })
}
