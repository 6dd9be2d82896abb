//! Datasets and the stacked regression design `Q_Y = T ψ + ε`.
//!
//! For subject `i`, `T_i = [B_0, z_i1·B_0, …, z_iq·B_0, S_i]` where `B_0` holds the
//! Bernstein basis at the grid points and `S_i` the constant-free basis at the
//! subject's scaled predictor quantiles. Stacking is subject-major.

use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bernstein::{
    build_constraint_system, BasisSpec, BernsteinEvaluator, CoefficientLayout,
};
use crate::error::{DorqfError, Result};
use crate::quantile::{check_monotone, AffineScale, ProbabilityGrid, QuantileFunction};

const UNIT_TOL: f64 = 1e-12;

/// Subjects with an outcome quantile function, scalar covariates scaled to
/// `[0, 1]`, and optionally a predictor quantile function scaled to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    grid: Arc<ProbabilityGrid>,
    subject_ids: Vec<String>,
    outcomes: Vec<QuantileFunction>,
    covariates: Vec<Vec<f64>>,
    covariate_names: Vec<String>,
    covariate_scales: Vec<AffineScale>,
    predictors: Option<Vec<QuantileFunction>>,
    predictor_scale: Option<AffineScale>,
}

/// Unscaled inputs for [`Dataset::from_raw`] and [`Dataset::with_scales`].
#[derive(Debug, Clone, Default)]
pub struct RawData {
    pub subject_ids: Vec<String>,
    pub outcomes: Vec<QuantileFunction>,
    /// One row per subject, one entry per covariate.
    pub covariates: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
    pub predictors: Option<Vec<QuantileFunction>>,
}

impl Dataset {
    /// Scales every covariate and the predictor by their observed ranges.
    pub fn from_raw(raw: RawData) -> Result<Self> {
        let q = raw.covariate_names.len();
        let covariate_scales = (0..q)
            .map(|j| {
                AffineScale::spanning(raw.covariates.iter().map(|row| &row[j])).map_err(|_| {
                    DorqfError::InvalidArgument(format!(
                        "covariate '{}' is constant and cannot be scaled",
                        raw.covariate_names[j]
                    ))
                })
            })
            .collect::<Result<Vec<_>>>();
        Self::check_rows(&raw)?;
        let covariate_scales = covariate_scales?;
        let predictor_scale = match &raw.predictors {
            Some(ps) => Some(
                AffineScale::spanning(ps.iter().flat_map(|qf| qf.values())).map_err(|_| {
                    DorqfError::InvalidArgument("predictor quantile functions are constant".into())
                })?,
            ),
            None => None,
        };
        Self::with_scales(raw, covariate_scales, predictor_scale)
    }

    /// Applies the given affine maps; any value outside its declared range is an error.
    pub fn with_scales(
        raw: RawData,
        covariate_scales: Vec<AffineScale>,
        predictor_scale: Option<AffineScale>,
    ) -> Result<Self> {
        Self::check_rows(&raw)?;
        let RawData {
            subject_ids,
            outcomes,
            covariates,
            covariate_names,
            predictors,
        } = raw;
        if covariate_scales.len() != covariate_names.len() {
            return Err(DorqfError::Dimension(format!(
                "{} covariate scales for {} covariates",
                covariate_scales.len(),
                covariate_names.len()
            )));
        }
        let grid = Arc::clone(outcomes[0].grid());
        let covariates = covariates
            .into_iter()
            .map(|row| {
                row.iter()
                    .zip(&covariate_scales)
                    .map(|(&v, s)| s.forward_checked(v))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let predictors = match (predictors, predictor_scale) {
            (Some(ps), Some(scale)) => Some(
                ps.iter()
                    .map(|qf| {
                        if !qf.same_grid(&outcomes[0]) {
                            return Err(DorqfError::GridMismatch);
                        }
                        let vals = qf
                            .values()
                            .iter()
                            .map(|&v| scale.forward_checked(v))
                            .collect::<Result<Vec<_>>>()?;
                        QuantileFunction::new(Arc::clone(&grid), vals)
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            (None, _) => None,
            (Some(_), None) => {
                return Err(DorqfError::InvalidArgument(
                    "predictor quantile functions need a scale".into(),
                ))
            }
        };
        Ok(Self {
            grid,
            subject_ids,
            outcomes,
            covariates,
            covariate_names,
            covariate_scales,
            predictors: predictors.clone(),
            predictor_scale: predictors.as_ref().and(predictor_scale),
        })
    }

    fn check_rows(raw: &RawData) -> Result<()> {
        let n = raw.outcomes.len();
        if n == 0 {
            return Err(DorqfError::InvalidArgument("dataset has no subjects".into()));
        }
        if raw.subject_ids.len() != n || raw.covariates.len() != n {
            return Err(DorqfError::Dimension(format!(
                "{} outcomes, {} subject ids, {} covariate rows",
                n,
                raw.subject_ids.len(),
                raw.covariates.len()
            )));
        }
        let q = raw.covariate_names.len();
        if let Some(i) = raw.covariates.iter().position(|r| r.len() != q) {
            return Err(DorqfError::Dimension(format!(
                "subject {i} has {} covariates, expected {q}",
                raw.covariates[i].len()
            )));
        }
        if let Some(ps) = &raw.predictors {
            if ps.len() != n {
                return Err(DorqfError::Dimension(format!(
                    "{} predictor quantile functions for {n} subjects",
                    ps.len()
                )));
            }
        }
        if raw.outcomes.iter().any(|o| !o.same_grid(&raw.outcomes[0])) {
            return Err(DorqfError::GridMismatch);
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn q(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn grid(&self) -> &Arc<ProbabilityGrid> {
        &self.grid
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn outcomes(&self) -> &[QuantileFunction] {
        &self.outcomes
    }

    /// Scaled covariates, one row per subject.
    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_scales(&self) -> &[AffineScale] {
        &self.covariate_scales
    }

    /// Scaled predictor quantile functions.
    pub fn predictors(&self) -> Option<&[QuantileFunction]> {
        self.predictors.as_deref()
    }

    pub fn predictor_scale(&self) -> Option<AffineScale> {
        self.predictor_scale
    }

    pub fn has_predictor(&self) -> bool {
        self.predictors.is_some()
    }

    /// Pointwise mean of the scaled predictor quantile functions.
    pub fn mean_predictor(&self) -> Option<Vec<f64>> {
        let ps = self.predictors.as_ref()?;
        let mut mean = vec![0.0; self.grid.len()];
        for qf in ps {
            for (m, v) in mean.iter_mut().zip(qf.values()) {
                *m += v;
            }
        }
        let n = ps.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Some(mean)
    }

    /// Subjects at `indices`, keeping the scaling of the full dataset.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            grid: Arc::clone(&self.grid),
            subject_ids: indices.iter().map(|&i| self.subject_ids[i].clone()).collect(),
            outcomes: indices.iter().map(|&i| self.outcomes[i].clone()).collect(),
            covariates: indices.iter().map(|&i| self.covariates[i].clone()).collect(),
            covariate_names: self.covariate_names.clone(),
            covariate_scales: self.covariate_scales.clone(),
            predictors: self
                .predictors
                .as_ref()
                .map(|ps| indices.iter().map(|&i| ps[i].clone()).collect()),
            predictor_scale: self.predictor_scale,
        }
    }

    pub fn without_covariate(&self, j: usize) -> Result<Self> {
        if j >= self.q() {
            return Err(DorqfError::InvalidArgument(format!(
                "covariate index {j} out of range (q = {})",
                self.q()
            )));
        }
        let mut out = self.clone();
        out.covariate_names.remove(j);
        out.covariate_scales.remove(j);
        for row in &mut out.covariates {
            row.remove(j);
        }
        Ok(out)
    }

    pub fn without_predictor(&self) -> Result<Self> {
        if !self.has_predictor() {
            return Err(DorqfError::InvalidArgument(
                "dataset has no distributional predictor".into(),
            ));
        }
        let mut out = self.clone();
        out.predictors = None;
        out.predictor_scale = None;
        Ok(out)
    }

    /// Same subjects with the outcome quantile functions replaced.
    pub fn with_outcomes(&self, outcomes: Vec<QuantileFunction>) -> Result<Self> {
        if outcomes.len() != self.n() {
            return Err(DorqfError::Dimension(format!(
                "{} outcomes for {} subjects",
                outcomes.len(),
                self.n()
            )));
        }
        if outcomes.iter().any(|o| o.grid().as_ref() != self.grid.as_ref()) {
            return Err(DorqfError::GridMismatch);
        }
        let mut out = self.clone();
        out.outcomes = outcomes;
        Ok(out)
    }

    /// Permutes subjects; used to check order invariance.
    pub fn permuted(&self, order: &[usize]) -> Self {
        self.subset(order)
    }
}

/// Per-subject design blocks and responses.
#[derive(Debug, Clone)]
pub struct DesignSystem {
    layout: CoefficientLayout,
    grid: Arc<ProbabilityGrid>,
    basis: DMatrix<f64>,
    blocks: Vec<DMatrix<f64>>,
    responses: Vec<DVector<f64>>,
}

pub fn build_design(data: &Dataset, order: usize) -> Result<DesignSystem> {
    let layout = CoefficientLayout::new(data.q(), order, data.has_predictor())?;
    let grid = Arc::clone(data.grid());
    let m = grid.len();
    if m < layout.dim() {
        warn!(
            "grid has {m} points but the model has {} coefficients per subject; \
             the unconstrained covariance will be unavailable for single subjects",
            layout.dim()
        );
    }
    for (i, row) in data.covariates().iter().enumerate() {
        if let Some(&v) = row.iter().find(|&&v| !(-UNIT_TOL..=1.0 + UNIT_TOL).contains(&v)) {
            return Err(DorqfError::OutsideUnitInterval {
                what: format!("covariate of subject {i}"),
                value: v,
            });
        }
    }
    let coef = BernsteinEvaluator::new(layout.coefficient_spec());
    let basis = coef.matrix(grid.points())?;
    let transport = BernsteinEvaluator::new(layout.transport_spec());

    let blocks = (0..data.n())
        .into_par_iter()
        .map(|i| {
            subject_block(
                &layout,
                &basis,
                &transport,
                &data.covariates()[i],
                data.predictors().map(|ps| ps[i].values()),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let responses = data
        .outcomes()
        .iter()
        .map(|o| DVector::from_column_slice(o.values()))
        .collect();
    Ok(DesignSystem {
        layout,
        grid,
        basis,
        blocks,
        responses,
    })
}

/// `T_i` for one subject given scaled covariates and scaled predictor values.
pub(crate) fn subject_block(
    layout: &CoefficientLayout,
    basis: &DMatrix<f64>,
    transport: &BernsteinEvaluator,
    z: &[f64],
    predictor: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    let m = basis.nrows();
    let w = layout.order + 1;
    let mut t = DMatrix::zeros(m, layout.dim());
    t.view_mut((0, 0), (m, w)).copy_from(basis);
    for (j, &zj) in z.iter().enumerate() {
        let cols = layout.beta(j + 1);
        t.view_mut((0, cols.start), (m, w)).copy_from(&(basis * zj));
    }
    if let (Some(theta), Some(x)) = (layout.theta(), predictor) {
        let mut row = vec![0.0; layout.order];
        for (l, &xl) in x.iter().enumerate() {
            if !(-UNIT_TOL..=1.0 + UNIT_TOL).contains(&xl) {
                return Err(DorqfError::OutsideUnitInterval {
                    what: "scaled predictor quantile".into(),
                    value: xl,
                });
            }
            transport.eval_into(xl.clamp(0.0, 1.0), &mut row);
            for (k, v) in row.iter().enumerate() {
                t[(l, theta.start + k)] = *v;
            }
        }
    }
    Ok(t)
}

impl DesignSystem {
    pub fn layout(&self) -> &CoefficientLayout {
        &self.layout
    }

    pub fn grid(&self) -> &Arc<ProbabilityGrid> {
        &self.grid
    }

    /// `B_0`: coefficient basis at the grid points.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    pub fn m(&self) -> usize {
        self.grid.len()
    }

    pub fn k(&self) -> usize {
        self.layout.dim()
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &DMatrix<f64> {
        &self.blocks[i]
    }

    pub fn responses(&self) -> &[DVector<f64>] {
        &self.responses
    }

    /// Replaces the responses, keeping the design.
    pub fn with_responses(&self, responses: Vec<DVector<f64>>) -> Result<Self> {
        if responses.len() != self.n() || responses.iter().any(|r| r.len() != self.m()) {
            return Err(DorqfError::Dimension("responses do not match the design".into()));
        }
        Ok(Self {
            responses,
            ..self.clone()
        })
    }

    /// The full `nm × K_n` matrix `T`.
    pub fn stacked_design(&self) -> DMatrix<f64> {
        let (m, k) = (self.m(), self.k());
        let mut t = DMatrix::zeros(self.n() * m, k);
        for (i, b) in self.blocks.iter().enumerate() {
            t.view_mut((i * m, 0), (m, k)).copy_from(b);
        }
        t
    }

    /// The stacked response `Q_Y`.
    pub fn stacked_response(&self) -> DVector<f64> {
        let m = self.m();
        let mut y = DVector::zeros(self.n() * m);
        for (i, r) in self.responses.iter().enumerate() {
            y.rows_mut(i * m, m).copy_from(r);
        }
        y
    }

    /// `T_i ψ`.
    pub fn fitted(&self, i: usize, psi: &DVector<f64>) -> DVector<f64> {
        &self.blocks[i] * psi
    }

    /// Residual curves `Q_iY - T_i ψ` as an `n × m` matrix.
    pub fn residuals(&self, psi: &DVector<f64>) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n(), self.m());
        for i in 0..self.n() {
            let r = &self.responses[i] - &self.blocks[i] * psi;
            e.row_mut(i).copy_from(&r.transpose());
        }
        e
    }

    pub fn rss(&self, psi: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .zip(&self.responses)
            .map(|(t, y)| (y - t * psi).norm_squared())
            .sum()
    }
}

/// Evaluates `β_0(p) + Σ z_j β_j(p) + h(q_x(p))` on the grid of `qx` (or of `grid`
/// when there is no predictor).
pub fn predict_quantile(
    psi: &[f64],
    layout: &CoefficientLayout,
    grid: &Arc<ProbabilityGrid>,
    z: &[f64],
    qx: Option<&QuantileFunction>,
) -> Result<QuantileFunction> {
    if psi.len() != layout.dim() {
        return Err(DorqfError::Dimension(format!(
            "coefficient vector has length {}, layout needs {}",
            psi.len(),
            layout.dim()
        )));
    }
    if z.len() != layout.q {
        return Err(DorqfError::Dimension(format!(
            "{} covariates supplied, model has {}",
            z.len(),
            layout.q
        )));
    }
    if let Some(&v) = z.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(DorqfError::OutsideUnitInterval {
            what: "scaled covariate".into(),
            value: v,
        });
    }
    if layout.has_distributional != qx.is_some() {
        return Err(DorqfError::InvalidArgument(
            "predictor quantile function must be given exactly when the model has one".into(),
        ));
    }
    if let Some(q) = qx {
        if q.grid().as_ref() != grid.as_ref() {
            return Err(DorqfError::GridMismatch);
        }
    }
    let constraints = build_constraint_system(layout)?;
    let feasible = constraints.is_feasible(psi, 1e-8);
    if !feasible {
        warn!("coefficients violate the monotonicity constraints; checking the prediction");
    }
    let basis = BernsteinEvaluator::new(BasisSpec::coefficient(layout.order)?).matrix(grid.points())?;
    let transport = BernsteinEvaluator::new(layout.transport_spec());
    let t = subject_block(layout, &basis, &transport, z, qx.map(|q| q.values()))?;
    let values: Vec<f64> = (&t * DVector::from_column_slice(psi)).iter().copied().collect();
    if !feasible {
        check_monotone(&values)?;
    }
    QuantileFunction::new(Arc::clone(grid), values)
}
