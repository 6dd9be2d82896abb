//! Projection-based joint confidence bands, the band-derived global test, and the
//! residual-bootstrap test for dropping one term.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bernstein::build_constraint_system_with;
use crate::covariance::psd_factor;
use crate::design::{build_design, Dataset};
use crate::error::{DorqfError, Result};
use crate::model::{DorqfFit, FitOptions, Target};
use crate::qp::{accumulate_rhs, LeastSquares};
use crate::rng::stream_rng;

pub const DEFAULT_BAND_SAMPLES: usize = 1000;
pub const DEFAULT_BOOTSTRAP_SAMPLES: usize = 500;
const SD_FLOOR: f64 = 1e-12;

/// Projected draws of one target, kept so bands at several levels share samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandSamples {
    pub target: Target,
    pub grid: Vec<f64>,
    /// Constrained estimate of the target.
    pub center: Vec<f64>,
    pub pointwise_sd: Vec<f64>,
    /// Sup-standardized deviation of each projected draw from the center.
    pub sup_stats: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    /// Smallest `D ψ_b` over all draws.
    pub min_slack: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub target: Target,
    pub grid: Vec<f64>,
    pub center: Vec<f64>,
    pub pointwise_sd: Vec<f64>,
    pub critical: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub samples: usize,
    pub seed: u64,
}

impl ConfidenceBand {
    pub fn covers(&self, truth: &[f64]) -> bool {
        truth
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(t, (lo, hi))| *lo <= *t && *t <= *hi)
    }

    /// Mean of `upper - lower` over the grid.
    pub fn mean_width(&self) -> f64 {
        let w: f64 = self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).sum();
        w / self.grid.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    JointBand,
    ResidualBootstrap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub samples: usize,
    pub seed: u64,
    pub method: TestMethod,
    /// Term whose effect is tested.
    pub null_model: String,
}

/// `u_(⌈(1-α)B⌉)`, the inverted-CDF order statistic of the sup statistics.
pub fn critical_value(sup_stats: &[f64], alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DorqfError::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if sup_stats.is_empty() {
        return Err(DorqfError::InvalidArgument("no samples".into()));
    }
    let mut sorted = sup_stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let rank = (((1.0 - alpha) * b as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(b) - 1])
}

impl BandSamples {
    pub fn band(&self, alpha: f64) -> Result<ConfidenceBand> {
        let critical = critical_value(&self.sup_stats, alpha)?;
        let lower = self
            .center
            .iter()
            .zip(&self.pointwise_sd)
            .map(|(c, s)| c - critical * s)
            .collect();
        let upper = self
            .center
            .iter()
            .zip(&self.pointwise_sd)
            .map(|(c, s)| c + critical * s)
            .collect();
        Ok(ConfidenceBand {
            target: self.target,
            grid: self.grid.clone(),
            center: self.center.clone(),
            pointwise_sd: self.pointwise_sd.clone(),
            critical,
            lower,
            upper,
            alpha,
            samples: self.samples,
            seed: self.seed,
        })
    }

    /// Sup-standardized distance of the center from zero.
    pub fn observed_statistic(&self) -> f64 {
        self.center
            .iter()
            .zip(&self.pointwise_sd)
            .map(|(c, s)| c.abs() / s)
            .fold(0.0, f64::max)
    }

    /// Fraction of draws whose sup statistic reaches the observed one; the smallest
    /// level on the `b/B` grid at which the band excludes zero somewhere.
    pub fn p_value(&self) -> GlobalTestResult {
        let t = self.observed_statistic();
        let exceed = self.sup_stats.iter().filter(|&&u| u >= t).count();
        GlobalTestResult {
            statistic: t,
            p_value: exceed as f64 / self.sup_stats.len() as f64,
            samples: self.samples,
            seed: self.seed,
            method: TestMethod::JointBand,
            null_model: self.target.to_string(),
        }
    }
}

/// Draws `Z_b ~ N(ψ̂_ur, Δ̂_n)`, projects each onto the constraint cone under `Ω̂`,
/// and summarizes the target curve across draws.
pub fn projected_samples(fit: &DorqfFit, target: Target, samples: usize, seed: u64) -> Result<BandSamples> {
    if samples < 2 {
        return Err(DorqfError::InvalidArgument(format!("need at least 2 samples, got {samples}")));
    }
    let delta = fit
        .delta
        .as_ref()
        .ok_or_else(|| DorqfError::InvalidArgument("fit has no coefficient covariance".into()))?;
    let factor = psd_factor(delta)?;
    let k = fit.layout.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<DVector<f64>> = (0..samples)
        .map(|_| {
            let eps = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
            &fit.psi_ur + &factor * eps
        })
        .collect();
    let projector = fit.projector()?;
    let projected = projector.project_many(&draws)?;
    let e = fit.target_matrix(target)?;
    let center: Vec<f64> = (&e * &fit.psi_r).iter().copied().collect();
    let curves: Vec<DVector<f64>> = projected.iter().map(|s| &e * &s.x).collect();
    let min_slack = projected
        .iter()
        .map(|s| fit.constraints.min_slack(s.x.as_slice()))
        .fold(f64::INFINITY, f64::min);
    let m = center.len();
    let mut mean = vec![0.0; m];
    for c in &curves {
        for (acc, v) in mean.iter_mut().zip(c.iter()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= samples as f64);
    let mut var = vec![0.0; m];
    for c in &curves {
        for ((acc, v), mu) in var.iter_mut().zip(c.iter()).zip(&mean) {
            *acc += (v - mu).powi(2);
        }
    }
    let mut floored = 0;
    let pointwise_sd: Vec<f64> = var
        .iter()
        .map(|v| {
            let sd = (v / (samples - 1) as f64).sqrt();
            if sd < SD_FLOOR {
                floored += 1;
                SD_FLOOR
            } else {
                sd
            }
        })
        .collect();
    if floored > 0 {
        warn!("pointwise standard deviation floored at {SD_FLOOR} at {floored} grid points");
    }
    let sup_stats = curves
        .iter()
        .map(|c| {
            c.iter()
                .zip(&center)
                .zip(&pointwise_sd)
                .map(|((v, ctr), s)| (v - ctr).abs() / s)
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(BandSamples {
        target,
        grid: fit.grid.points().to_vec(),
        center,
        pointwise_sd,
        sup_stats,
        samples,
        seed,
        min_slack,
    })
}

pub fn joint_band(fit: &DorqfFit, target: Target, alpha: f64, samples: usize, seed: u64) -> Result<ConfidenceBand> {
    projected_samples(fit, target, samples, seed)?.band(alpha)
}

pub fn band_global_pvalue(fit: &DorqfFit, target: Target, samples: usize, seed: u64) -> Result<GlobalTestResult> {
    Ok(projected_samples(fit, target, samples, seed)?.p_value())
}

/// A term that can be removed to form the null model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// Zero-based scalar covariate index.
    Covariate(usize),
    Predictor,
}

impl Term {
    pub fn label(&self, data: &Dataset) -> String {
        match self {
            Term::Covariate(j) => data
                .covariate_names()
                .get(*j)
                .cloned()
                .unwrap_or_else(|| format!("z{}", j + 1)),
            Term::Predictor => "predictor".into(),
        }
    }
}

/// Residual sum of squares from the normal equations.
fn rss_from_normal(ls: &LeastSquares, psi: &DVector<f64>, rhs: &DVector<f64>, yy: f64) -> f64 {
    let quad = psi.dot(&(ls.gram() * psi)) - ls.ridge() * psi.norm_squared();
    (yy - 2.0 * psi.dot(rhs) + quad).max(0.0)
}

fn f_statistic(rss_null: f64, rss_full: f64) -> f64 {
    if rss_full <= 0.0 {
        return if rss_null > 0.0 { f64::INFINITY } else { 0.0 };
    }
    ((rss_null - rss_full) / rss_full).max(0.0)
}

/// Tests whether `drop` has any effect by comparing constrained fits of the full
/// and reduced models; null data are regenerated by adding resampled full-model
/// residual curves to the reduced-model fitted values.
pub fn bootstrap_effect_test(
    data: &Dataset,
    options: &FitOptions,
    drop: Term,
    samples: usize,
    seed: u64,
) -> Result<GlobalTestResult> {
    if samples == 0 {
        return Err(DorqfError::InvalidArgument("need at least one bootstrap sample".into()));
    }
    let null_data = match drop {
        Term::Covariate(j) => data.without_covariate(j)?,
        Term::Predictor => data.without_predictor()?,
    };
    let full = build_design(data, options.order)?;
    let null = build_design(&null_data, options.order)?;
    let full_ls = LeastSquares::from_design(&full, options.ridge)?;
    let null_ls = LeastSquares::from_design(&null, options.ridge)?;
    let full_proj = full_ls.projector(&build_constraint_system_with(full.layout(), options.anchor)?)?;
    let null_proj = null_ls.projector(&build_constraint_system_with(null.layout(), options.anchor)?)?;

    let psi_full = full_proj.project(full_ls.solution())?.x;
    let psi_null = null_proj.project(null_ls.solution())?.x;
    let rss_full = full.rss(&psi_full);
    let rss_null = null.rss(&psi_null);
    let observed = f_statistic(rss_null, rss_full);

    let n = data.n();
    let residuals: Vec<DVector<f64>> = (0..n)
        .map(|i| &full.responses()[i] - full.fitted(i, &psi_full))
        .collect();
    let null_fitted: Vec<DVector<f64>> = (0..n).map(|i| null.fitted(i, &psi_null)).collect();

    let stats = (0..samples)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let ystar: Vec<DVector<f64>> = (0..n)
                .map(|i| &null_fitted[i] + &residuals[rng.random_range(0..n)])
                .collect();
            let yy: f64 = ystar.iter().map(|y| y.norm_squared()).sum();
            let rf = accumulate_rhs(&full, &ystar);
            let rn = accumulate_rhs(&null, &ystar);
            let pf = full_proj.project(&full_ls.solve_rhs(&rf))?.x;
            let pn = null_proj.project(&null_ls.solve_rhs(&rn))?.x;
            Ok(f_statistic(
                rss_from_normal(&null_ls, &pn, &rn, yy),
                rss_from_normal(&full_ls, &pf, &rf, yy),
            ))
        })
        .collect::<Result<Vec<f64>>>()?;
    let exceed = stats.iter().filter(|&&t| t >= observed).count();
    Ok(GlobalTestResult {
        statistic: observed,
        p_value: exceed as f64 / samples as f64,
        samples,
        seed,
        method: TestMethod::ResidualBootstrap,
        null_model: drop.label(data),
    })
}

/// Centered Gaussian draws from a PSD covariance; used by tests and simulations.
pub fn gaussian_draws(mean: &DVector<f64>, cov: &DMatrix<f64>, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let factor = psd_factor(cov)?;
    let k = mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let eps = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
            mean + &factor * eps
        })
        .collect())
}
