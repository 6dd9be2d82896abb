//! Monte Carlo studies: estimation accuracy, band coverage, and test power.

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DorqfError, Result};
use crate::inference::{bootstrap_effect_test, projected_samples, Term, DEFAULT_BAND_SAMPLES};
use crate::model::{cross_validate, fit_with, CvOptions, FitOptions, Target};
use crate::pava::fit_pava_baseline;
use crate::quantile::{wasserstein_distance, ProbabilityGrid};
use crate::rng::derive_stream;

use super::scenario::{generate_scenario, Replicate, ScenarioSpec};

/// Largest tolerated fraction of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderChoice {
    Fixed(usize),
    /// V-fold cross-validation over the candidate orders, rerun in every replication.
    CrossValidated { orders: Vec<usize>, folds: usize },
}

impl Default for OrderChoice {
    fn default() -> Self {
        OrderChoice::CrossValidated {
            orders: (1..=8).collect(),
            folds: 5,
        }
    }
}

impl OrderChoice {
    fn select(&self, rep: &Replicate, seed: u64) -> Result<usize> {
        match self {
            OrderChoice::Fixed(n) => Ok(*n),
            OrderChoice::CrossValidated { orders, folds } => {
                let opts = CvOptions {
                    orders: orders.clone(),
                    folds: *folds,
                    seed: derive_stream(&[seed, rep.rep as u64, 0xc7]),
                    ..CvOptions::default()
                };
                Ok(cross_validate(&rep.train, &opts)?.selected)
            }
        }
    }
}

/// Integrated squared bias, variance, and their sum across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub bias2: f64,
    pub variance: f64,
    pub mse: f64,
}

impl MetricSummary {
    /// From per-replication error curves `e_r(p) = estimate - truth`.
    pub fn from_errors(errors: &[Vec<f64>], grid: &ProbabilityGrid) -> Result<Self> {
        let r = errors.len();
        if r == 0 {
            return Err(DorqfError::InvalidArgument("no successful replications".into()));
        }
        let m = grid.len();
        let mean: Vec<f64> = (0..m)
            .map(|l| errors.iter().map(|e| e[l]).sum::<f64>() / r as f64)
            .collect();
        let var: Vec<f64> = (0..m)
            .map(|l| errors.iter().map(|e| (e[l] - mean[l]).powi(2)).sum::<f64>() / r as f64)
            .collect();
        let bias2 = grid.integrate(&mean.iter().map(|v| v * v).collect::<Vec<_>>());
        let variance = grid.integrate(&var);
        Ok(Self {
            bias2,
            variance,
            mse: bias2 + variance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub order: OrderChoice,
    /// Also fit the isotonic baseline.
    pub pava: bool,
    /// Mean Wasserstein prediction error on the held-out subjects.
    pub wasserstein: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            order: OrderChoice::default(),
            pava: false,
            wasserstein: true,
        }
    }
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRecord {
    pub rep: usize,
    pub order: Option<usize>,
    pub beta1_ise: Option<f64>,
    pub gamma_ise: Option<f64>,
    pub pava_gamma_ise: Option<f64>,
    pub mean_wasserstein: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub spec: ScenarioSpec,
    pub config: EstimationConfig,
    pub beta1: Option<MetricSummary>,
    pub gamma: MetricSummary,
    pub pava_gamma: Option<MetricSummary>,
    /// Mean over replications of the per-replication mean test distance.
    pub wasserstein_mean: Option<f64>,
    /// Standard deviation across replications of the same quantity.
    pub wasserstein_sd: Option<f64>,
    pub mean_order: f64,
    pub failures: usize,
    pub records: Vec<EstimationRecord>,
}

struct EstimationOutcome {
    order: usize,
    beta1: Option<Vec<f64>>,
    gamma: Vec<f64>,
    pava_gamma: Option<Vec<f64>>,
    wasserstein: Option<f64>,
}

fn difference(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn estimation_replicate(spec: &ScenarioSpec, config: &EstimationConfig, r: usize) -> Result<EstimationOutcome> {
    let rep = generate_scenario(spec, r)?;
    let grid = rep.train.grid().clone();
    let order = config.order.select(&rep, spec.seed)?;
    let fit = fit_with(
        &rep.train,
        &FitOptions {
            point_estimate_only: true,
            ..FitOptions::with_order(order)
        },
    )?;
    let p = grid.points();
    let beta1 = if rep.train.q() > 0 {
        let truth: Vec<f64> = p.iter().map(|&p| rep.truth.beta1(p)).collect();
        Some(difference(&fit.target_curve(Target::Beta(1))?, &truth))
    } else {
        None
    };
    let gamma_truth: Vec<f64> = p.iter().map(|&p| rep.truth.gamma(p)).collect();
    let scale = rep
        .train
        .predictor_scale()
        .ok_or_else(|| DorqfError::InvalidArgument("no predictor".into()))?;
    let scaled: Vec<f64> = rep
        .mean_latent_predictor()
        .iter()
        .map(|&x| scale.forward_clamped(x))
        .collect();
    let gamma_hat: Vec<f64> = fit
        .coefficient_at(0, p)?
        .iter()
        .zip(fit.transport_at(&scaled)?)
        .map(|(b, h)| b + h)
        .collect();
    let gamma = difference(&gamma_hat, &gamma_truth);
    let pava_gamma = if config.pava {
        let pava = fit_pava_baseline(&rep.train)?;
        let curve: Vec<f64> = scaled.iter().map(|&x| pava.evaluate(x)).collect();
        Some(difference(&curve, &gamma_truth))
    } else {
        None
    };
    let wasserstein = if config.wasserstein && !rep.test.outcomes.is_empty() {
        let mut total = 0.0;
        for t in 0..rep.test.outcomes.len() {
            let pred = fit.predict(&rep.test.covariates[t], Some(&rep.test.predictors[t]))?;
            total += wasserstein_distance(&pred, &rep.test.outcomes[t])?;
        }
        Some(total / rep.test.outcomes.len() as f64)
    } else {
        None
    };
    Ok(EstimationOutcome {
        order,
        beta1,
        gamma,
        pava_gamma,
        wasserstein,
    })
}

fn check_failures(failed: usize, total: usize) -> Result<()> {
    if failed as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(DorqfError::StudyFailed { failed, total });
    }
    Ok(())
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Repeats generate, select, fit, and evaluate over `spec.reps` replications.
pub fn run_estimation_study(spec: &ScenarioSpec, config: &EstimationConfig) -> Result<EstimationReport> {
    spec.validate()?;
    let grid = spec.grid()?;
    let outcomes: Vec<Result<EstimationOutcome>> = (0..spec.reps)
        .into_par_iter()
        .map(|r| estimation_replicate(spec, config, r))
        .collect();
    let mut records = Vec::with_capacity(spec.reps);
    let mut ok = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                let ise = |e: &Vec<f64>| grid.integrate(&e.iter().map(|v| v * v).collect::<Vec<_>>());
                records.push(EstimationRecord {
                    rep: r,
                    order: Some(o.order),
                    beta1_ise: o.beta1.as_ref().map(ise),
                    gamma_ise: Some(ise(&o.gamma)),
                    pava_gamma_ise: o.pava_gamma.as_ref().map(ise),
                    mean_wasserstein: o.wasserstein,
                    failure: None,
                });
                ok.push(o);
            }
            Err(e) => {
                warn!("replication {r} failed: {e}");
                records.push(EstimationRecord {
                    rep: r,
                    order: None,
                    beta1_ise: None,
                    gamma_ise: None,
                    pava_gamma_ise: None,
                    mean_wasserstein: None,
                    failure: Some(e.to_string()),
                });
            }
        }
    }
    let failures = spec.reps - ok.len();
    check_failures(failures, spec.reps)?;
    let beta1 = if ok.iter().all(|o| o.beta1.is_some()) {
        let errs: Vec<Vec<f64>> = ok.iter().filter_map(|o| o.beta1.clone()).collect();
        Some(MetricSummary::from_errors(&errs, &grid)?)
    } else {
        None
    };
    let gamma = MetricSummary::from_errors(&ok.iter().map(|o| o.gamma.clone()).collect::<Vec<_>>(), &grid)?;
    let pava_gamma = if config.pava {
        let errs: Vec<Vec<f64>> = ok.iter().filter_map(|o| o.pava_gamma.clone()).collect();
        Some(MetricSummary::from_errors(&errs, &grid)?)
    } else {
        None
    };
    let wd: Vec<f64> = ok.iter().filter_map(|o| o.wasserstein).collect();
    let (wasserstein_mean, wasserstein_sd) = if wd.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_sd(&wd);
        (Some(m), Some(s))
    };
    let mean_order = ok.iter().map(|o| o.order as f64).sum::<f64>() / ok.len() as f64;
    info!(
        "estimation study {:?} n = {} L = {:?}: {} of {} replications succeeded",
        spec.scenario,
        spec.n,
        spec.l,
        ok.len(),
        spec.reps
    );
    Ok(EstimationReport {
        spec: spec.clone(),
        config: config.clone(),
        beta1,
        gamma,
        pava_gamma,
        wasserstein_mean,
        wasserstein_sd,
        mean_order,
        failures,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub order: usize,
    pub n: usize,
    pub l: Option<usize>,
    pub alpha: f64,
    pub coverage: f64,
    pub mean_width: f64,
    pub successes: usize,
    pub failures: usize,
}

/// Joint-band coverage of `β_1` for each fixed order, sharing the generated data
/// across orders within a replication.
pub fn run_coverage_study(
    spec: &ScenarioSpec,
    orders: &[usize],
    alpha: f64,
    band_samples: usize,
) -> Result<Vec<CoverageCell>> {
    spec.validate()?;
    if !spec.scenario.has_covariate() {
        return Err(DorqfError::InvalidArgument("coverage of beta1 needs a covariate".into()));
    }
    let grid = spec.grid()?;
    let truth: Vec<f64> = grid.points().iter().map(|&p| spec.truth().beta1(p)).collect();
    let per_rep: Vec<Vec<Result<(bool, f64)>>> = (0..spec.reps)
        .into_par_iter()
        .map(|r| {
            let rep = match generate_scenario(spec, r) {
                Ok(rep) => rep,
                Err(e) => return orders.iter().map(|_| Err(DorqfError::InvalidArgument(e.to_string()))).collect(),
            };
            orders
                .iter()
                .map(|&order| {
                    let fit = fit_with(&rep.train, &FitOptions::with_order(order))?;
                    let seed = derive_stream(&[spec.seed, r as u64, order as u64, 0xba]);
                    let band = projected_samples(&fit, Target::Beta(1), band_samples, seed)?.band(alpha)?;
                    Ok((band.covers(&truth), band.mean_width()))
                })
                .collect()
        })
        .collect();
    orders
        .iter()
        .enumerate()
        .map(|(k, &order)| {
            let mut hits = 0usize;
            let mut width = 0.0;
            let mut ok = 0usize;
            for (r, row) in per_rep.iter().enumerate() {
                match &row[k] {
                    Ok((c, w)) => {
                        ok += 1;
                        hits += usize::from(*c);
                        width += w;
                    }
                    Err(e) => warn!("coverage replication {r} with N = {order} failed: {e}"),
                }
            }
            check_failures(spec.reps - ok, spec.reps)?;
            Ok(CoverageCell {
                order,
                n: spec.n,
                l: spec.l,
                alpha,
                coverage: hits as f64 / ok as f64,
                mean_width: width / ok as f64,
                successes: ok,
                failures: spec.reps - ok,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMethod {
    /// Reject when the joint band for `β_1` excludes zero somewhere.
    JointBand,
    /// Residual-bootstrap comparison of the full and covariate-free models.
    Bootstrap { samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCell {
    pub n: usize,
    pub d: f64,
    pub order: usize,
    pub alpha: f64,
    pub rejection_rate: f64,
    pub mean_p_value: f64,
    pub successes: usize,
    pub failures: usize,
}

/// Rejection rate of the test of `β_1 ≡ 0` at level `alpha`.
pub fn run_power_study(
    spec: &ScenarioSpec,
    order: usize,
    alpha: f64,
    method: PowerMethod,
) -> Result<PowerCell> {
    spec.validate()?;
    if !spec.scenario.has_covariate() {
        return Err(DorqfError::InvalidArgument("the power study needs a covariate".into()));
    }
    let p_values: Vec<Result<f64>> = (0..spec.reps)
        .into_par_iter()
        .map(|r| {
            let rep = generate_scenario(spec, r)?;
            let seed = derive_stream(&[spec.seed, r as u64, 0x7e]);
            match method {
                PowerMethod::JointBand => {
                    let fit = fit_with(&rep.train, &FitOptions::with_order(order))?;
                    Ok(projected_samples(&fit, Target::Beta(1), DEFAULT_BAND_SAMPLES, seed)?
                        .p_value()
                        .p_value)
                }
                PowerMethod::Bootstrap { samples } => Ok(bootstrap_effect_test(
                    &rep.train,
                    &FitOptions::with_order(order),
                    Term::Covariate(0),
                    samples,
                    seed,
                )?
                .p_value),
            }
        })
        .collect();
    let mut ok = Vec::new();
    for (r, p) in p_values.into_iter().enumerate() {
        match p {
            Ok(p) => ok.push(p),
            Err(e) => warn!("power replication {r} failed: {e}"),
        }
    }
    let failures = spec.reps - ok.len();
    check_failures(failures, spec.reps)?;
    let rejections = ok.iter().filter(|&&p| p <= alpha).count();
    Ok(PowerCell {
        n: spec.n,
        d: spec.d,
        order,
        alpha,
        rejection_rate: rejections as f64 / ok.len() as f64,
        mean_p_value: ok.iter().sum::<f64>() / ok.len() as f64,
        successes: ok.len(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::Scenario;

    fn small(scenario: Scenario) -> ScenarioSpec {
        let mut s = ScenarioSpec::new(scenario, 40, 50);
        s.m = 20;
        s.reps = 4;
        s.test_size = 10;
        s
    }

    #[test]
    fn summary_decomposes_mse() {
        let g = ProbabilityGrid::equispaced(3, 0.1, 0.9).unwrap();
        let errs = vec![vec![1.0, 1.0, 1.0], vec![3.0, 3.0, 3.0]];
        let s = MetricSummary::from_errors(&errs, &g).unwrap();
        // weights sum to one: bias 2, variance 1
        assert!((s.bias2 - 4.0).abs() < 1e-12);
        assert!((s.variance - 1.0).abs() < 1e-12);
        assert!((s.mse - 5.0).abs() < 1e-12);
    }

    #[test]
    fn estimation_study_runs_and_repeats() {
        let spec = small(Scenario::A1);
        let cfg = EstimationConfig {
            order: OrderChoice::CrossValidated {
                orders: vec![1, 2, 3],
                folds: 3,
            },
            pava: false,
            wasserstein: true,
        };
        let a = run_estimation_study(&spec, &cfg).unwrap();
        let b = run_estimation_study(&spec, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.failures, 0);
        assert!(a.beta1.unwrap().mse > 0.0);
        assert!(a.wasserstein_mean.unwrap() > 0.0);
        assert!((1.0..=3.0).contains(&a.mean_order));
    }

    #[test]
    fn scenario_b_compares_with_pava() {
        let spec = small(Scenario::B);
        let cfg = EstimationConfig {
            order: OrderChoice::Fixed(3),
            pava: true,
            wasserstein: false,
        };
        let r = run_estimation_study(&spec, &cfg).unwrap();
        assert!(r.beta1.is_none());
        assert!(r.pava_gamma.unwrap().mse.is_finite());
    }

    #[test]
    fn coverage_and_power_cells_are_proportions() {
        let spec = small(Scenario::A1);
        let cells = run_coverage_study(&spec, &[2, 3], 0.05, 200).unwrap();
        assert_eq!(cells.len(), 2);
        for c in &cells {
            assert!((0.0..=1.0).contains(&c.coverage));
            assert!(c.mean_width > 0.0);
        }
        let mut spec = small(Scenario::A2);
        spec.d = 0.0;
        let p = run_power_study(&spec, 2, 0.05, PowerMethod::JointBand).unwrap();
        assert!((0.0..=1.0).contains(&p.rejection_rate));
    }

    #[test]
    fn too_many_failures_abort() {
        assert!(check_failures(1, 10).is_ok());
        assert!(matches!(check_failures(2, 10), Err(DorqfError::StudyFailed { failed: 2, total: 10 })));
    }
}
