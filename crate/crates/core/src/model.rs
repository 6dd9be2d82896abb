//! Fitting, prediction, order selection and the fit archive.

use std::sync::Arc;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bernstein::{
    build_constraint_system_with, BasisSpec, BernsteinEvaluator, CoefficientLayout, ConstraintLabel,
    ConstraintSystem, TransportAnchor,
};
use crate::covariance::{estimate_residual_covariance, sandwich_with, ResidualCovariance, DEFAULT_PVE};
use crate::design::{build_design, predict_quantile, Dataset, DesignSystem};
use crate::error::{DorqfError, Result};
use crate::pava::fit_pava_subset;
use crate::qp::{accumulate_normal_equations, ConeProjector, Factorization, LeastSquares};
use crate::quantile::{AffineScale, ProbabilityGrid, QuantileFunction};
use crate::rng::label_key;

pub const ARCHIVE_VERSION: &str = "dorqf-fit/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub order: usize,
    pub ridge: f64,
    pub pve: f64,
    pub anchor: TransportAnchor,
    /// Skip the residual covariance and sandwich steps.
    pub point_estimate_only: bool,
}

impl FitOptions {
    pub fn with_order(order: usize) -> Self {
        Self {
            order,
            ..Self::default()
        }
    }
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            order: 3,
            ridge: 0.0,
            pve: DEFAULT_PVE,
            anchor: TransportAnchor::default(),
            point_estimate_only: false,
        }
    }
}

/// A functional quantity that is linear in `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// `β_j(p)`; index 0 is the intercept.
    Beta(usize),
    /// `γ(p) = β_0(p) + h(q̄_x(p))` at the mean scaled predictor.
    Additive,
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Beta(j) => write!(f, "beta{j}"),
            Target::Additive => f.write_str("gamma"),
        }
    }
}

impl std::str::FromStr for Target {
    type Err = DorqfError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "gamma" || s == "additive" {
            return Ok(Target::Additive);
        }
        s.strip_prefix("beta")
            .and_then(|j| j.parse().ok())
            .map(Target::Beta)
            .ok_or_else(|| DorqfError::InvalidArgument(format!("unknown target '{s}'")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub created: Option<String>,
    pub input_digest: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DorqfFit {
    pub options: FitOptions,
    pub layout: CoefficientLayout,
    pub grid: Arc<ProbabilityGrid>,
    pub n: usize,
    pub psi_r: DVector<f64>,
    pub psi_ur: DVector<f64>,
    pub constraints: ConstraintSystem,
    pub active_set: Vec<usize>,
    /// Multipliers of the residual sum of squares: `2(TᵀTψ - TᵀY) = Dᵀλ`.
    pub multipliers: DVector<f64>,
    pub rss_constrained: f64,
    pub rss_unconstrained: f64,
    /// `Ω̂ = TᵀT / n`.
    pub omega: DMatrix<f64>,
    pub residual_covariance: Option<ResidualCovariance>,
    /// `Δ̂_n`.
    pub delta: Option<DMatrix<f64>>,
    pub residuals_constrained: DMatrix<f64>,
    pub residuals_unconstrained: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub covariate_scales: Vec<AffineScale>,
    pub predictor_scale: Option<AffineScale>,
    /// Pointwise mean of the scaled training predictors.
    pub mean_predictor: Option<Vec<f64>>,
    pub factorization: Factorization,
    pub provenance: Provenance,
}

pub fn fit(data: &Dataset, order: usize) -> Result<DorqfFit> {
    fit_with(data, &FitOptions::with_order(order))
}

pub fn fit_with(data: &Dataset, options: &FitOptions) -> Result<DorqfFit> {
    let design = build_design(data, options.order)?;
    fit_design(data, &design, options)
}

/// Fits on a prebuilt design; `data` supplies metadata only.
pub fn fit_design(data: &Dataset, design: &DesignSystem, options: &FitOptions) -> Result<DorqfFit> {
    let layout = *design.layout();
    let constraints = build_constraint_system_with(&layout, options.anchor)?;
    let ls = LeastSquares::from_design(design, options.ridge)?;
    let psi_ur = ls.solution().clone();
    let sol = ls.projector(&constraints)?.project(&psi_ur)?;
    let psi_r = sol.x;
    let residuals_unconstrained = design.residuals(&psi_ur);
    let residuals_constrained = design.residuals(&psi_r);
    let rss_unconstrained = residuals_unconstrained.norm_squared();
    let rss_constrained = residuals_constrained.norm_squared();
    let (residual_covariance, delta) = if options.point_estimate_only {
        (None, None)
    } else {
        let rc = estimate_residual_covariance(&residuals_unconstrained, options.pve)?;
        let delta = sandwich_with(design, &ls, &rc.matrix)?.matrix;
        (Some(rc), Some(delta))
    };
    let n = design.n();
    debug!(
        "fit N={} K={} rss_r={rss_constrained:.6} rss_ur={rss_unconstrained:.6} active={}",
        layout.order,
        layout.dim(),
        sol.active_set.len()
    );
    Ok(DorqfFit {
        options: *options,
        layout,
        grid: Arc::clone(design.grid()),
        n,
        psi_r,
        psi_ur,
        constraints,
        active_set: sol.active_set,
        multipliers: sol.multipliers,
        rss_constrained,
        rss_unconstrained,
        omega: ls.gram() / n as f64,
        residual_covariance,
        delta,
        residuals_constrained,
        residuals_unconstrained,
        covariate_names: data.covariate_names().to_vec(),
        covariate_scales: data.covariate_scales().to_vec(),
        predictor_scale: data.predictor_scale(),
        mean_predictor: data.mean_predictor(),
        factorization: ls.method(),
        provenance: Provenance::default(),
    })
}

impl DorqfFit {
    pub fn order(&self) -> usize {
        self.layout.order
    }

    pub fn q(&self) -> usize {
        self.layout.q
    }

    /// Evaluation matrix `E` with `target(p_l) = (E ψ)_l` on the fit grid.
    pub fn target_matrix(&self, target: Target) -> Result<DMatrix<f64>> {
        target_matrix(&self.layout, &self.grid, target, self.mean_predictor.as_deref())
    }

    /// Constrained estimate of a target on the fit grid.
    pub fn target_curve(&self, target: Target) -> Result<Vec<f64>> {
        Ok((self.target_matrix(target)? * &self.psi_r).iter().copied().collect())
    }

    /// `β̂_j` at arbitrary points of `[0, 1]`.
    pub fn coefficient_at(&self, j: usize, points: &[f64]) -> Result<Vec<f64>> {
        if j > self.layout.q {
            return Err(DorqfError::InvalidArgument(format!("no coefficient beta{j}")));
        }
        let coeffs: Vec<f64> = self.psi_r.as_slice()[self.layout.beta(j)].to_vec();
        BernsteinEvaluator::new(self.layout.coefficient_spec()).combine(&coeffs, points)
    }

    /// `ĥ` at scaled predictor values in `[0, 1]`.
    pub fn transport_at(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let theta = self
            .layout
            .theta()
            .ok_or_else(|| DorqfError::InvalidArgument("model has no distributional predictor".into()))?;
        let coeffs: Vec<f64> = self.psi_r.as_slice()[theta].to_vec();
        BernsteinEvaluator::new(self.layout.transport_spec()).combine(&coeffs, xs)
    }

    /// Prediction from scaled covariates and a scaled predictor quantile function.
    pub fn predict_scaled(&self, z: &[f64], qx: Option<&QuantileFunction>) -> Result<QuantileFunction> {
        predict_quantile(self.psi_r.as_slice(), &self.layout, &self.grid, z, qx)
    }

    /// Prediction from raw-scale inputs using the stored affine maps. Covariates
    /// outside the training range are an error; predictor values are clamped into
    /// the training range.
    pub fn predict(&self, z_raw: &[f64], qx_raw: Option<&QuantileFunction>) -> Result<QuantileFunction> {
        if z_raw.len() != self.covariate_scales.len() {
            return Err(DorqfError::Dimension(format!(
                "{} covariates supplied, model has {}",
                z_raw.len(),
                self.covariate_scales.len()
            )));
        }
        let z = z_raw
            .iter()
            .zip(&self.covariate_scales)
            .map(|(&v, s)| s.forward_checked(v))
            .collect::<Result<Vec<_>>>()?;
        let scaled = match (qx_raw, self.predictor_scale) {
            (Some(q), Some(scale)) => Some(scale_predictor(q, &scale)?),
            (None, None) => None,
            _ => {
                return Err(DorqfError::InvalidArgument(
                    "predictor quantile function must be given exactly when the model has one".into(),
                ))
            }
        };
        self.predict_scaled(&z, scaled.as_ref())
    }

    pub fn active_labels(&self) -> Vec<ConstraintLabel> {
        self.active_set.iter().map(|&r| self.constraints.labels[r]).collect()
    }

    pub fn projector(&self) -> Result<ConeProjector> {
        ConeProjector::new(&self.omega, &self.constraints)
    }

    pub fn to_archive(&self) -> FitArchive {
        FitArchive::from_fit(self)
    }
}

/// Maps a raw predictor quantile function into `[0, 1]`, clamping values that fall
/// outside the scale's range.
pub fn scale_predictor(q: &QuantileFunction, scale: &AffineScale) -> Result<QuantileFunction> {
    let mut clamped = 0;
    let vals = q
        .values()
        .iter()
        .map(|&v| {
            let u = scale.forward(v);
            if !(0.0..=1.0).contains(&u) {
                clamped += 1;
            }
            u.clamp(0.0, 1.0)
        })
        .collect();
    if clamped > 0 {
        debug!("{clamped} predictor values clamped into the training range");
    }
    QuantileFunction::new(Arc::clone(q.grid()), vals)
}

pub fn target_matrix(
    layout: &CoefficientLayout,
    grid: &ProbabilityGrid,
    target: Target,
    mean_predictor: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    let m = grid.len();
    let basis = BernsteinEvaluator::new(BasisSpec::coefficient(layout.order)?).matrix(grid.points())?;
    let mut e = DMatrix::zeros(m, layout.dim());
    let w = layout.order + 1;
    match target {
        Target::Beta(j) => {
            if j > layout.q {
                return Err(DorqfError::InvalidArgument(format!(
                    "target beta{j} but the model has {} covariates",
                    layout.q
                )));
            }
            e.view_mut((0, layout.beta(j).start), (m, w)).copy_from(&basis);
        }
        Target::Additive => {
            let theta = layout.theta().ok_or_else(|| {
                DorqfError::InvalidArgument("additive effect needs a distributional predictor".into())
            })?;
            let qx = mean_predictor
                .ok_or_else(|| DorqfError::InvalidArgument("mean predictor is unavailable".into()))?;
            if qx.len() != m {
                return Err(DorqfError::GridMismatch);
            }
            e.view_mut((0, 0), (m, w)).copy_from(&basis);
            let s = BernsteinEvaluator::new(layout.transport_spec())
                .matrix(&qx.iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>())?;
            e.view_mut((0, theta.start), (m, layout.order)).copy_from(&s);
        }
    }
    Ok(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvWeighting {
    /// Squared Wasserstein distance on the grid quadrature.
    #[default]
    Quadrature,
    /// Plain sum of squared errors over grid points.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub orders: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
    pub weighting: CvWeighting,
    pub ridge: f64,
    pub anchor: TransportAnchor,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            orders: (1..=8).collect(),
            folds: 5,
            seed: 0,
            weighting: CvWeighting::Quadrature,
            ridge: 0.0,
            anchor: TransportAnchor::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCandidate {
    pub order: usize,
    pub cvsse: Option<f64>,
    pub fold_errors: Vec<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub candidates: Vec<CvCandidate>,
    pub folds: usize,
    pub seed: u64,
    pub weighting: CvWeighting,
    pub selected: usize,
    /// Fold index of each subject, in dataset order.
    pub assignment: Vec<usize>,
}

/// Subject-level folds: subjects are ordered by a seeded hash of their id and dealt
/// round-robin, so the split does not depend on input order.
pub fn fold_assignment(ids: &[String], folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        label_key(seed, &ids[a])
            .cmp(&label_key(seed, &ids[b]))
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    let mut out = vec![0; ids.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank % folds;
    }
    out
}

fn held_out_error(
    design: &DesignSystem,
    psi: &DVector<f64>,
    rows: &[usize],
    weighting: CvWeighting,
) -> f64 {
    rows.iter()
        .map(|&i| {
            let fitted = design.fitted(i, psi);
            let y = &design.responses()[i];
            match weighting {
                CvWeighting::Quadrature => design.grid().integrate_sq_diff(y.as_slice(), fitted.as_slice()),
                CvWeighting::Unweighted => (y - fitted).norm_squared(),
            }
        })
        .sum()
}

/// Constrained fit from accumulated normal equations over `train`.
fn constrained_from_parts(
    design: &DesignSystem,
    constraints: &ConstraintSystem,
    train: &[usize],
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    ridge: f64,
) -> Result<DVector<f64>> {
    let ls = LeastSquares::from_parts(design, Some(train), gram, rhs, ridge)?;
    Ok(ls.projector(constraints)?.project(ls.solution())?.x)
}

fn cv_candidate(data: &Dataset, order: usize, assignment: &[usize], opts: &CvOptions) -> Result<Vec<f64>> {
    let design = build_design(data, order)?;
    let constraints = build_constraint_system_with(design.layout(), opts.anchor)?;
    let members: Vec<Vec<usize>> = (0..opts.folds)
        .map(|v| (0..data.n()).filter(|&i| assignment[i] == v).collect())
        .collect();
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = members
        .iter()
        .map(|rows| accumulate_normal_equations(&design, rows))
        .collect();
    (0..opts.folds)
        .map(|v| {
            let train: Vec<usize> = (0..data.n()).filter(|&i| assignment[i] != v).collect();
            if train.len() * design.m() <= design.k() {
                return Err(DorqfError::InvalidArgument(format!(
                    "order {order}: {} coefficients exceed {} training rows",
                    design.k(),
                    train.len() * design.m()
                )));
            }
            let k = design.k();
            let mut gram = DMatrix::zeros(k, k);
            let mut rhs = DVector::zeros(k);
            for (u, (g, b)) in parts.iter().enumerate() {
                if u != v {
                    gram += g;
                    rhs += b;
                }
            }
            let psi = constrained_from_parts(&design, &constraints, &train, gram, rhs, opts.ridge)?;
            Ok(held_out_error(&design, &psi, &members[v], opts.weighting))
        })
        .collect()
}

pub fn cross_validate(data: &Dataset, opts: &CvOptions) -> Result<CvReport> {
    if opts.folds < 2 || opts.folds > data.n() {
        return Err(DorqfError::InvalidArgument(format!(
            "need 2 ≤ V ≤ n folds, got V = {} with n = {}",
            opts.folds,
            data.n()
        )));
    }
    if opts.orders.is_empty() {
        return Err(DorqfError::InvalidArgument("no candidate orders".into()));
    }
    let assignment = fold_assignment(data.subject_ids(), opts.folds, opts.seed);
    let mut orders = opts.orders.clone();
    orders.sort_unstable();
    orders.dedup();
    let candidates: Vec<CvCandidate> = orders
        .par_iter()
        .map(|&order| match cv_candidate(data, order, &assignment, opts) {
            Ok(fold_errors) => CvCandidate {
                order,
                cvsse: Some(fold_errors.iter().sum()),
                fold_errors,
                failure: None,
            },
            Err(e) => {
                warn!("cross-validation candidate N = {order} failed: {e}");
                CvCandidate {
                    order,
                    cvsse: None,
                    fold_errors: Vec::new(),
                    failure: Some(e.to_string()),
                }
            }
        })
        .collect();
    let selected = candidates
        .iter()
        .filter_map(|c| c.cvsse.map(|s| (c.order, s)))
        .fold(None::<(usize, f64)>, |best, (o, s)| match best {
            Some((_, b)) if s >= b => best,
            _ => Some((o, s)),
        })
        .map(|(o, _)| o)
        .ok_or_else(|| DorqfError::InvalidArgument("every cross-validation candidate failed".into()))?;
    Ok(CvReport {
        candidates,
        folds: opts.folds,
        seed: opts.seed,
        weighting: opts.weighting,
        selected,
        assignment,
    })
}

/// `1 - Σ_i ∫(Q_i - Q̂_i)² / Σ_i ∫(Q_i - Q̄)²` for given predictions.
pub fn r_squared(outcomes: &[QuantileFunction], predictions: &[Vec<f64>]) -> Result<f64> {
    let grid = outcomes
        .first()
        .ok_or_else(|| DorqfError::InvalidArgument("no subjects".into()))?
        .grid();
    let n = outcomes.len() as f64;
    let grand = outcomes.iter().map(|q| grid.integrate(q.values())).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (q, pred) in outcomes.iter().zip(predictions) {
        num += grid.integrate_sq_diff(q.values(), pred);
        den += grid.integrate(&q.values().iter().map(|v| (v - grand).powi(2)).collect::<Vec<_>>());
    }
    if den == 0.0 {
        return Err(DorqfError::InvalidArgument("outcomes have no variation".into()));
    }
    Ok(1.0 - num / den)
}

pub fn loocv_r_squared(data: &Dataset, order: usize) -> Result<f64> {
    loocv_r_squared_with(data, &FitOptions::with_order(order))
}

pub fn loocv_r_squared_with(data: &Dataset, options: &FitOptions) -> Result<f64> {
    let n = data.n();
    if n < 3 {
        return Err(DorqfError::InsufficientSample(n));
    }
    let design = build_design(data, options.order)?;
    let constraints = build_constraint_system_with(design.layout(), options.anchor)?;
    let all: Vec<usize> = (0..n).collect();
    let (gram, rhs) = accumulate_normal_equations(&design, &all);
    let predictions = (0..n)
        .into_par_iter()
        .map(|i| {
            let t = design.block(i);
            let g = &gram - t.transpose() * t;
            let b = &rhs - t.transpose() * &design.responses()[i];
            let train: Vec<usize> = all.iter().copied().filter(|&j| j != i).collect();
            let psi = constrained_from_parts(&design, &constraints, &train, g, b, options.ridge)?;
            Ok(design.fitted(i, &psi).iter().copied().collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    r_squared(data.outcomes(), &predictions)
}

/// Leave-one-subject-out R² of the intercept-free isotonic baseline.
pub fn pava_loocv_r_squared(data: &Dataset) -> Result<f64> {
    let n = data.n();
    if n < 3 {
        return Err(DorqfError::InsufficientSample(n));
    }
    let preds = data.predictors().ok_or_else(|| {
        DorqfError::InvalidArgument("the isotonic baseline needs a distributional predictor".into())
    })?;
    let predictions = (0..n)
        .into_par_iter()
        .map(|i| {
            let train: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let f = fit_pava_subset(data, preds, &train)?;
            Ok(preds[i].values().iter().map(|&x| f.evaluate(x)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    r_squared(data.outcomes(), &predictions)
}

/// Serialized fit; matrices are stored as row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArchive {
    pub version: String,
    pub options: FitOptions,
    pub layout: CoefficientLayout,
    pub grid: Vec<f64>,
    pub n: usize,
    pub psi_r: Vec<f64>,
    pub psi_ur: Vec<f64>,
    pub constraint_labels: Vec<String>,
    pub constraint_rows: Vec<ConstraintLabel>,
    pub active_set: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub rss_constrained: f64,
    pub rss_unconstrained: f64,
    pub omega: Vec<Vec<f64>>,
    pub sigma: Option<Vec<Vec<f64>>>,
    pub fpca: Option<FpcaSummary>,
    pub delta: Option<Vec<Vec<f64>>>,
    pub covariate_names: Vec<String>,
    pub covariate_scales: Vec<AffineScale>,
    pub predictor_scale: Option<AffineScale>,
    pub mean_predictor: Option<Vec<f64>>,
    pub factorization: Factorization,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaSummary {
    pub eigenvalues: Vec<f64>,
    pub noise_variance: f64,
    pub pve: f64,
    pub explained: f64,
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(DorqfError::Dimension("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

impl FitArchive {
    pub fn from_fit(fit: &DorqfFit) -> Self {
        Self {
            version: ARCHIVE_VERSION.to_string(),
            options: fit.options,
            layout: fit.layout,
            grid: fit.grid.points().to_vec(),
            n: fit.n,
            psi_r: fit.psi_r.iter().copied().collect(),
            psi_ur: fit.psi_ur.iter().copied().collect(),
            constraint_labels: fit.constraints.labels.iter().map(|l| l.to_string()).collect(),
            constraint_rows: fit.constraints.labels.clone(),
            active_set: fit.active_set.clone(),
            multipliers: fit.multipliers.iter().copied().collect(),
            rss_constrained: fit.rss_constrained,
            rss_unconstrained: fit.rss_unconstrained,
            omega: matrix_rows(&fit.omega),
            sigma: fit.residual_covariance.as_ref().map(|rc| matrix_rows(&rc.matrix)),
            fpca: fit.residual_covariance.as_ref().map(|rc| FpcaSummary {
                eigenvalues: rc.eigenvalues.clone(),
                noise_variance: rc.noise_variance,
                pve: rc.pve,
                explained: rc.explained,
            }),
            delta: fit.delta.as_ref().map(matrix_rows),
            covariate_names: fit.covariate_names.clone(),
            covariate_scales: fit.covariate_scales.clone(),
            predictor_scale: fit.predictor_scale,
            mean_predictor: fit.mean_predictor.clone(),
            factorization: fit.factorization,
            provenance: fit.provenance.clone(),
        }
    }

    /// Rebuilds a fit for prediction and inference. Residual matrices are not
    /// archived and come back empty.
    pub fn into_fit(self) -> Result<DorqfFit> {
        if self.version != ARCHIVE_VERSION {
            return Err(DorqfError::InvalidArgument(format!(
                "unsupported archive version '{}'",
                self.version
            )));
        }
        let layout = CoefficientLayout::new(self.layout.q, self.layout.order, self.layout.has_distributional)?;
        let constraints = build_constraint_system_with(&layout, self.options.anchor)?;
        if constraints.labels != self.constraint_rows {
            return Err(DorqfError::InvalidArgument(
                "archived constraint rows do not match the layout".into(),
            ));
        }
        if self.psi_r.len() != layout.dim() || self.psi_ur.len() != layout.dim() {
            return Err(DorqfError::Dimension("archived coefficients do not match the layout".into()));
        }
        let grid = Arc::new(ProbabilityGrid::new(self.grid)?);
        let sigma = self.sigma.as_deref().map(matrix_from_rows).transpose()?;
        let residual_covariance = match (self.fpca, sigma) {
            (Some(s), Some(matrix)) => Some(ResidualCovariance {
                eigenvectors: DMatrix::zeros(matrix.nrows(), 0),
                eigenvalues: s.eigenvalues,
                noise_variance: s.noise_variance,
                pve: s.pve,
                explained: s.explained,
                matrix,
            }),
            _ => None,
        };
        let m = grid.len();
        Ok(DorqfFit {
            options: self.options,
            layout,
            grid,
            n: self.n,
            psi_r: DVector::from_vec(self.psi_r),
            psi_ur: DVector::from_vec(self.psi_ur),
            constraints,
            active_set: self.active_set,
            multipliers: DVector::from_vec(self.multipliers),
            rss_constrained: self.rss_constrained,
            rss_unconstrained: self.rss_unconstrained,
            omega: matrix_from_rows(&self.omega)?,
            residual_covariance,
            delta: self.delta.as_deref().map(matrix_from_rows).transpose()?,
            residuals_constrained: DMatrix::zeros(0, m),
            residuals_unconstrained: DMatrix::zeros(0, m),
            covariate_names: self.covariate_names,
            covariate_scales: self.covariate_scales,
            predictor_scale: self.predictor_scale,
            mean_predictor: self.mean_predictor,
            factorization: self.factorization,
            provenance: self.provenance,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DorqfError::InvalidArgument(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| DorqfError::InvalidArgument(format!("invalid fit archive: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::RawData;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Linear-in-p data: Q_i(p) = 1 + 2p + z_i·p + 0.5·x_i(p) + noise.
    fn synthetic(n: usize, noise: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Arc::new(ProbabilityGrid::equispaced(30, 0.02, 0.98).unwrap());
        let mut outcomes = Vec::new();
        let mut preds = Vec::new();
        let mut zs = Vec::new();
        for _ in 0..n {
            let z: f64 = rng.random();
            let c: f64 = rng.random_range(1.0..2.0);
            let x: Vec<f64> = g.points().iter().map(|p| c * p).collect();
            let mut y: Vec<f64> = g
                .points()
                .iter()
                .zip(&x)
                .map(|(p, xv)| 1.0 + 2.0 * p + z * p + 0.5 * xv + noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            y.sort_by(f64::total_cmp);
            outcomes.push(QuantileFunction::new(Arc::clone(&g), y).unwrap());
            preds.push(QuantileFunction::new(Arc::clone(&g), x).unwrap());
            zs.push(vec![z]);
        }
        Dataset::from_raw(RawData {
            subject_ids: (0..n).map(|i| format!("s{i:03}")).collect(),
            outcomes,
            covariates: zs,
            covariate_names: vec!["z".into()],
            predictors: Some(preds),
        })
        .unwrap()
    }

    #[test]
    fn constrained_rss_dominates_unconstrained() {
        let d = synthetic(40, 0.3, 1);
        let f = fit(&d, 3).unwrap();
        assert!(f.rss_constrained >= f.rss_unconstrained - 1e-9);
        assert!(f.constraints.is_feasible(f.psi_r.as_slice(), 1e-8));
        for i in 0..d.n() {
            let p = f.predict_scaled(&d.covariates()[i], Some(&d.predictors().unwrap()[i])).unwrap();
            assert!(p.values().windows(2).all(|w| w[1] >= w[0] - 1e-9));
        }
    }

    #[test]
    fn target_matrix_matches_coefficient_evaluation() {
        let d = synthetic(30, 0.1, 2);
        let f = fit(&d, 4).unwrap();
        let curve = f.target_curve(Target::Beta(1)).unwrap();
        let direct = f.coefficient_at(1, f.grid.points()).unwrap();
        for (a, b) in curve.iter().zip(&direct) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let gamma = f.target_curve(Target::Additive).unwrap();
        let h = f.transport_at(f.mean_predictor.as_ref().unwrap()).unwrap();
        let b0 = f.coefficient_at(0, f.grid.points()).unwrap();
        for l in 0..gamma.len() {
            assert_abs_diff_eq!(gamma[l], b0[l] + h[l], epsilon = 1e-12);
        }
    }

    #[test]
    fn target_parsing() {
        assert_eq!("beta1".parse::<Target>().unwrap(), Target::Beta(1));
        assert_eq!("gamma".parse::<Target>().unwrap(), Target::Additive);
        assert!("delta".parse::<Target>().is_err());
        assert_eq!(Target::Beta(2).to_string(), "beta2");
    }

    #[test]
    fn archive_round_trip_predicts_identically() {
        let d = synthetic(25, 0.2, 3);
        let f = fit(&d, 2).unwrap();
        let json = f.to_archive().to_json().unwrap();
        let back = FitArchive::from_json(&json).unwrap().into_fit().unwrap();
        assert_eq!(back.psi_r, f.psi_r);
        assert_eq!(back.delta, f.delta);
        for i in 0..d.n() {
            let a = f.predict_scaled(&d.covariates()[i], Some(&d.predictors().unwrap()[i])).unwrap();
            let b = back.predict_scaled(&d.covariates()[i], Some(&d.predictors().unwrap()[i])).unwrap();
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn archive_rejects_wrong_version() {
        let d = synthetic(10, 0.2, 3);
        let mut a = fit(&d, 1).unwrap().to_archive();
        a.version = "other".into();
        assert!(a.into_fit().is_err());
    }

    #[test]
    fn folds_ignore_subject_order() {
        let ids: Vec<String> = (0..23).map(|i| format!("id{i}")).collect();
        let a = fold_assignment(&ids, 5, 9);
        let mut rev = ids.clone();
        rev.reverse();
        let b = fold_assignment(&rev, 5, 9);
        for (i, id) in ids.iter().enumerate() {
            let j = rev.iter().position(|r| r == id).unwrap();
            assert_eq!(a[i], b[j]);
        }
        let mut counts = [0; 5];
        a.iter().for_each(|&f| counts[f] += 1);
        assert!(counts.iter().all(|&c| c == 4 || c == 5));
    }

    #[test]
    fn cv_fold_errors_sum_to_total() {
        let d = synthetic(30, 0.2, 4);
        let r = cross_validate(
            &d,
            &CvOptions {
                orders: vec![1, 2, 3],
                ..CvOptions::default()
            },
        )
        .unwrap();
        for c in &r.candidates {
            let total: f64 = c.fold_errors.iter().sum();
            assert!((total - c.cvsse.unwrap()).abs() <= 1e-10);
            assert!(c.fold_errors.iter().all(|&e| e >= 0.0));
        }
        let best = r
            .candidates
            .iter()
            .filter_map(|c| c.cvsse)
            .fold(f64::INFINITY, f64::min);
        let sel = r.candidates.iter().find(|c| c.order == r.selected).unwrap();
        assert_eq!(sel.cvsse.unwrap(), best);
    }

    #[test]
    fn r_squared_extremes() {
        let d = synthetic(10, 0.2, 5);
        let perfect: Vec<Vec<f64>> = d.outcomes().iter().map(|q| q.values().to_vec()).collect();
        assert_abs_diff_eq!(r_squared(d.outcomes(), &perfect).unwrap(), 1.0, epsilon = 1e-15);
        let g = d.grid();
        let grand = d.outcomes().iter().map(|q| g.integrate(q.values())).sum::<f64>() / 10.0;
        let flat = vec![vec![grand; g.len()]; 10];
        assert_abs_diff_eq!(r_squared(d.outcomes(), &flat).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn loocv_needs_three_subjects() {
        let d = synthetic(2, 0.2, 6);
        assert!(matches!(loocv_r_squared(&d, 1), Err(DorqfError::InsufficientSample(2))));
    }

    #[test]
    fn loocv_matches_explicit_refits() {
        let d = synthetic(8, 0.3, 7);
        let fast = loocv_r_squared(&d, 2).unwrap();
        let preds: Vec<Vec<f64>> = (0..d.n())
            .map(|i| {
                let rest: Vec<usize> = (0..d.n()).filter(|&j| j != i).collect();
                let f = fit_with(
                    &d.subset(&rest),
                    &FitOptions {
                        point_estimate_only: true,
                        ..FitOptions::with_order(2)
                    },
                )
                .unwrap();
                f.predict_scaled(&d.covariates()[i], Some(&d.predictors().unwrap()[i]))
                    .unwrap()
                    .into_values()
            })
            .collect();
        let slow = r_squared(d.outcomes(), &preds).unwrap();
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-8);
    }
}
