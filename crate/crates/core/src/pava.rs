//! Isotonic least-squares regression by pool-adjacent-violators, and the
//! intercept-free monotone map between predictor and outcome quantiles.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::design::Dataset;
use crate::error::{DorqfError, Result};
use crate::quantile::{ProbabilityGrid, QuantileFunction};

/// Weighted isotonic (non-decreasing) least-squares fit of `y`.
pub fn isotonic_regression(y: &[f64], w: &[f64]) -> Vec<f64> {
    assert_eq!(y.len(), w.len());
    // (mean, weight, count) per pooled block
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&yi, &wi) in y.iter().zip(w) {
        blocks.push((yi, wi, 1));
        while blocks.len() > 1 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let wt = w1 + w2;
            let mean = if wt > 0.0 { (m1 * w1 + m2 * w2) / wt } else { 0.5 * (m1 + m2) };
            *blocks.last_mut().unwrap() = (mean, wt, c1 + c2);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}

/// Non-decreasing map `x ↦ ĥ(x)`, linear between breakpoints and constant outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PavaFit {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl PavaFit {
    /// Fits pooled `(x, y)` pairs with equal weights.
    pub fn from_pairs(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(DorqfError::InvalidArgument(format!(
                "isotonic fit needs matching non-empty inputs, got {} and {}",
                x.len(),
                y.len()
            )));
        }
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
        let mut bx: Vec<f64> = Vec::new();
        let mut by: Vec<f64> = Vec::new();
        let mut bw: Vec<f64> = Vec::new();
        for &i in &order {
            match bx.last() {
                Some(&last) if last == x[i] => {
                    let k = by.len() - 1;
                    by[k] += y[i];
                    bw[k] += 1.0;
                }
                _ => {
                    bx.push(x[i]);
                    by.push(y[i]);
                    bw.push(1.0);
                }
            }
        }
        for (s, w) in by.iter_mut().zip(&bw) {
            *s /= w;
        }
        let values = isotonic_regression(&by, &bw);
        Ok(Self {
            breakpoints: bx,
            values,
        })
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        let b = &self.breakpoints;
        let v = &self.values;
        if x <= b[0] {
            return v[0];
        }
        if x >= b[b.len() - 1] {
            return v[v.len() - 1];
        }
        let hi = b.partition_point(|&t| t <= x);
        let lo = hi - 1;
        let w = (x - b[lo]) / (b[hi] - b[lo]);
        v[lo] + w * (v[hi] - v[lo])
    }

    pub fn predict(&self, qx: &QuantileFunction) -> Result<QuantileFunction> {
        let vals = qx.values().iter().map(|&x| self.evaluate(x)).collect();
        QuantileFunction::new(Arc::clone(qx.grid()), vals)
    }

    pub fn curve(&self, grid: &Arc<ProbabilityGrid>, qx: &[f64]) -> Result<QuantileFunction> {
        QuantileFunction::new(Arc::clone(grid), qx.iter().map(|&x| self.evaluate(x)).collect())
    }
}

/// Pools `(scaled Q_iX(p_l), Q_iY(p_l))` over subjects and grid points.
pub fn fit_pava_baseline(data: &Dataset) -> Result<PavaFit> {
    let preds = data.predictors().ok_or_else(|| {
        DorqfError::InvalidArgument("the isotonic baseline needs a distributional predictor".into())
    })?;
    fit_pava_subset(data, preds, &(0..data.n()).collect::<Vec<_>>())
}

pub(crate) fn fit_pava_subset(
    data: &Dataset,
    preds: &[QuantileFunction],
    rows: &[usize],
) -> Result<PavaFit> {
    let mut x = Vec::with_capacity(rows.len() * data.grid().len());
    let mut y = Vec::with_capacity(x.capacity());
    for &i in rows {
        x.extend_from_slice(preds[i].values());
        y.extend_from_slice(data.outcomes()[i].values());
    }
    PavaFit::from_pairs(&x, &y)
}
