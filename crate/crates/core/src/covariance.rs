//! Residual-process covariance by eigendecomposition of the residual second-moment
//! matrix, and the sandwich covariance of the unconstrained coefficients.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignSystem;
use crate::error::{DorqfError, Result};
use crate::qp::LeastSquares;

pub const DEFAULT_PVE: f64 = 0.99;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualCovariance {
    /// Retained eigenvalues, descending and positive.
    pub eigenvalues: Vec<f64>,
    /// `m × K`, orthonormal columns.
    pub eigenvectors: DMatrix<f64>,
    pub noise_variance: f64,
    pub pve: f64,
    /// Fraction of positive variance carried by the retained components.
    pub explained: f64,
    /// `Σ λ_k φ_k φ_kᵀ + σ² I`.
    pub matrix: DMatrix<f64>,
}

impl ResidualCovariance {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Second-moment matrix `EᵀE / n` of residual rows.
pub fn residual_second_moment(residuals: &DMatrix<f64>) -> DMatrix<f64> {
    let n = residuals.nrows() as f64;
    let mut c = residuals.transpose() * residuals;
    c /= n;
    c
}

/// Replaces the diagonal by the mean of its nearest off-diagonal neighbours, which
/// removes white measurement noise without touching the smooth part.
fn off_diagonal_surface(c: &DMatrix<f64>) -> DMatrix<f64> {
    let m = c.nrows();
    let mut g = c.clone();
    if m < 2 {
        return g;
    }
    for l in 0..m {
        g[(l, l)] = match l {
            0 => c[(0, 1)],
            _ if l == m - 1 => c[(l, l - 1)],
            _ => 0.5 * (c[(l, l - 1)] + c[(l, l + 1)]),
        };
    }
    g
}

/// Sorted eigenpairs of a symmetric matrix, largest first.
pub(crate) fn sorted_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn estimate_residual_covariance(residuals: &DMatrix<f64>, pve: f64) -> Result<ResidualCovariance> {
    if residuals.nrows() < 2 {
        return Err(DorqfError::InsufficientSample(residuals.nrows()));
    }
    if !(pve > 0.0 && pve <= 1.0) {
        return Err(DorqfError::InvalidArgument(format!("PVE must lie in (0, 1], got {pve}")));
    }
    if let Some(i) = residuals.iter().position(|v| !v.is_finite()) {
        return Err(DorqfError::NonFinite(i));
    }
    let m = residuals.ncols();
    let c = residual_second_moment(residuals);
    let g = off_diagonal_surface(&c);
    let (values, vectors) = sorted_eigen(&g);
    let positive: Vec<f64> = values.iter().map(|&v| v.max(0.0)).collect();
    let total: f64 = positive.iter().sum();
    let mut k = 0;
    let mut acc = 0.0;
    if total > 0.0 {
        while k < m && positive[k] > 0.0 {
            acc += positive[k];
            k += 1;
            if acc / total >= pve - 1e-12 {
                break;
            }
        }
    }
    let eigenvalues = positive[..k].to_vec();
    let eigenvectors = vectors.columns(0, k).clone_owned();
    let deficit: f64 = (0..m).map(|l| c[(l, l)] - g[(l, l)]).sum::<f64>() / m as f64;
    let noise_variance = deficit.max(0.0);
    let mut matrix = DMatrix::identity(m, m) * noise_variance;
    for (j, &lam) in eigenvalues.iter().enumerate() {
        let phi = eigenvectors.column(j);
        matrix.ger(lam, &phi, &phi, 1.0);
    }
    Ok(ResidualCovariance {
        eigenvalues,
        eigenvectors,
        noise_variance,
        pve,
        explained: if total > 0.0 { acc / total } else { 1.0 },
        matrix,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandwichCovariance {
    /// `Δ̂_n`, the covariance of the unconstrained estimator.
    pub matrix: DMatrix<f64>,
}

const SANDWICH_CHUNK: usize = 32;

/// `Σ_i T_iᵀ Σ T_i`, accumulated subject by subject in a fixed order.
pub fn meat(design: &DesignSystem, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma.nrows() != design.m() || sigma.ncols() != design.m() {
        return Err(DorqfError::Dimension(format!(
            "residual covariance is {}x{}, grid has {} points",
            sigma.nrows(),
            sigma.ncols(),
            design.m()
        )));
    }
    let k = design.k();
    let indices: Vec<usize> = (0..design.n()).collect();
    let parts: Vec<DMatrix<f64>> = indices
        .par_chunks(SANDWICH_CHUNK)
        .map(|chunk| {
            let mut acc = DMatrix::zeros(k, k);
            let mut st = DMatrix::zeros(design.m(), k);
            for &i in chunk {
                let t = design.block(i);
                st.gemm(1.0, sigma, t, 0.0);
                acc.gemm_tr(1.0, t, &st, 1.0);
            }
            acc
        })
        .collect();
    let mut total = DMatrix::zeros(k, k);
    for p in parts {
        total += p;
    }
    Ok(total)
}

/// `(TᵀT)⁻¹ [Σ_i T_iᵀ Σ T_i] (TᵀT)⁻¹`.
pub fn sandwich_with(
    design: &DesignSystem,
    ls: &LeastSquares,
    sigma: &DMatrix<f64>,
) -> Result<SandwichCovariance> {
    let bread = ls.gram_inverse();
    let filling = meat(design, sigma)?;
    let mut matrix = &bread * filling * &bread;
    matrix = (&matrix + matrix.transpose()) * 0.5;
    Ok(SandwichCovariance { matrix })
}

pub fn sandwich_covariance(
    design: &DesignSystem,
    resid_cov: &ResidualCovariance,
) -> Result<SandwichCovariance> {
    let ls = LeastSquares::from_design(design, 0.0)?;
    sandwich_with(design, &ls, &resid_cov.matrix)
}

/// Symmetric square root factor `A` with `A Aᵀ = Δ` after flooring small negative
/// eigenvalues. Fails when the most negative eigenvalue exceeds round-off.
pub fn psd_factor(delta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sorted_eigen(delta);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let lowest = values.last().copied().unwrap_or(0.0);
    if lowest < -1e-8 * top.max(f64::MIN_POSITIVE) && lowest < -1e-300 {
        return Err(DorqfError::NotPositiveSemidefinite(lowest));
    }
    let scales = DVector::from_iterator(values.len(), values.iter().map(|v| v.max(0.0).sqrt()));
    let mut a = vectors;
    for (j, s) in scales.iter().enumerate() {
        a.column_mut(j).scale_mut(*s);
    }
    Ok(a)
}
