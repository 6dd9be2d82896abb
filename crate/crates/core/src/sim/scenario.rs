//! Data-generating scenarios.
//!
//! A1: `Q_Y(p) = β_0(p) + z β_1(p) + h(Q_X(p)) + ε(p)` with `β_0(p) = 2 + 3p`,
//! `β_1(p) = sin(πp/2)`, `h(x) = (x/10)³`, `Q_X(p) = c·Q_N(p; 10, 1)`,
//! `z ~ U(0,1)` and `c ~ U(1,2)`. A2 scales `β_1` by `d`. B keeps only `h(Q_X)`.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::design::{Dataset, RawData};
use crate::error::{DorqfError, Result};
use crate::normal::normal_quantile;
use crate::quantile::{quantiles_of_sorted, AffineScale, ProbabilityGrid, QuantileFunction};
use crate::rng::{derive_stream, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    A1,
    A2,
    B,
}

impl Scenario {
    fn code(self) -> u64 {
        match self {
            Scenario::A1 => 1,
            Scenario::A2 => 2,
            Scenario::B => 3,
        }
    }

    pub fn has_covariate(self) -> bool {
        !matches!(self, Scenario::B)
    }
}

impl std::str::FromStr for Scenario {
    type Err = DorqfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A1" => Ok(Scenario::A1),
            "A2" => Ok(Scenario::A2),
            "B" => Ok(Scenario::B),
            _ => Err(DorqfError::InvalidArgument(format!("unknown scenario '{s}'"))),
        }
    }
}

/// How the nominal noise level is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// The level is a variance.
    Variance,
    /// The level is a standard deviation.
    #[default]
    StandardDeviation,
}

/// Where the pointwise noise enters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Added to each raw draw before the empirical quantiles are taken.
    #[default]
    BeforeSampling,
    /// Added to the empirical quantile function at each grid point, then re-sorted.
    AfterQuantiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n: usize,
    /// Raw draws per subject; `None` observes the latent quantile functions directly.
    pub l: Option<usize>,
    pub m: usize,
    pub d: f64,
    pub reps: usize,
    pub seed: u64,
    pub noise_level: f64,
    pub noise_scale: NoiseScale,
    pub noise_mode: NoiseMode,
    pub test_size: usize,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, n: usize, l: usize) -> Self {
        Self {
            scenario,
            n,
            l: Some(l),
            m: 100,
            d: 1.0,
            reps: 100,
            seed: 1,
            noise_level: 0.1,
            noise_scale: NoiseScale::StandardDeviation,
            noise_mode: NoiseMode::BeforeSampling,
            test_size: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.reps == 0 || self.m < 2 || self.l == Some(0) || self.l == Some(1) {
            return Err(DorqfError::InvalidArgument(format!(
                "invalid scenario sizes: n = {}, reps = {}, m = {}, L = {:?}",
                self.n, self.reps, self.m, self.l
            )));
        }
        if !(self.d >= 0.0 && self.d.is_finite()) || !(self.noise_level >= 0.0) {
            return Err(DorqfError::InvalidArgument(format!(
                "need d ≥ 0 and noise ≥ 0, got d = {}, noise = {}",
                self.d, self.noise_level
            )));
        }
        Ok(())
    }

    pub fn noise_sd(&self) -> f64 {
        match self.noise_scale {
            NoiseScale::Variance => self.noise_level.sqrt(),
            NoiseScale::StandardDeviation => self.noise_level,
        }
    }

    pub fn grid(&self) -> Result<Arc<ProbabilityGrid>> {
        Ok(Arc::new(ProbabilityGrid::equispaced(self.m, 0.005, 0.995)?))
    }

    pub fn truth(&self) -> Truth {
        Truth {
            scenario: self.scenario,
            d: match self.scenario {
                Scenario::A1 => 1.0,
                Scenario::A2 => self.d,
                Scenario::B => 0.0,
            },
        }
    }

    /// Stream identifier for one replication and role.
    pub fn stream(&self, rep: usize, role: u64) -> u64 {
        derive_stream(&[
            self.scenario.code(),
            self.n as u64,
            self.l.map_or(u64::MAX, |l| l as u64),
            self.d.to_bits(),
            self.m as u64,
            rep as u64,
            role,
        ])
    }
}

/// True coefficient functions of a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truth {
    pub scenario: Scenario,
    /// Multiplier on `sin(πp/2)`; zero in scenario B.
    pub d: f64,
}

pub const MEAN_PREDICTOR_SCALE: f64 = 1.5;

impl Truth {
    pub fn beta0(&self, p: f64) -> f64 {
        match self.scenario {
            Scenario::B => 0.0,
            _ => 2.0 + 3.0 * p,
        }
    }

    pub fn beta1(&self, p: f64) -> f64 {
        self.d * (FRAC_PI_2 * p).sin()
    }

    pub fn h(&self, x: f64) -> f64 {
        (x / 10.0).powi(3)
    }

    pub fn predictor_quantile(&self, c: f64, p: f64) -> f64 {
        c * normal_quantile(p, 10.0, 1.0)
    }

    pub fn outcome_quantile(&self, z: f64, c: f64, p: f64) -> f64 {
        self.beta0(p) + z * self.beta1(p) + self.h(self.predictor_quantile(c, p))
    }

    /// `β_0(p) + h(E[c]·Q_N(p))`, the additive effect at the population mean predictor.
    pub fn gamma(&self, p: f64) -> f64 {
        self.beta0(p) + self.h(self.predictor_quantile(MEAN_PREDICTOR_SCALE, p))
    }

    /// `β_0(p) + h(x)` for an arbitrary raw predictor value.
    pub fn gamma_at(&self, p: f64, x: f64) -> f64 {
        self.beta0(p) + self.h(x)
    }
}

/// Held-out subjects on the raw scale.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub covariates: Vec<Vec<f64>>,
    pub predictors: Vec<QuantileFunction>,
    /// Quantile functions as observed (empirical unless latent).
    pub outcomes: Vec<QuantileFunction>,
    /// Noise-free latent outcome quantile functions.
    pub latent_outcomes: Vec<QuantileFunction>,
}

#[derive(Debug, Clone)]
pub struct Replicate {
    pub rep: usize,
    pub train: Dataset,
    pub test: TestSet,
    pub truth: Truth,
    /// Per-subject predictor multipliers `c_i` of the training set.
    pub scales: Vec<f64>,
}

impl Replicate {
    /// `q_x(p) = (1/n) Σ_i Q_iX(p)` over the training subjects' latent predictor
    /// quantile functions, on the grid and the raw scale.
    pub fn mean_latent_predictor(&self) -> Vec<f64> {
        let cbar = self.scales.iter().sum::<f64>() / self.scales.len() as f64;
        self.train
            .grid()
            .points()
            .iter()
            .map(|&p| self.truth.predictor_quantile(cbar, p))
            .collect()
    }
}

struct Subject {
    z: f64,
    c: f64,
    x: QuantileFunction,
    y: QuantileFunction,
    latent_y: QuantileFunction,
}

fn empirical(mut v: Vec<f64>, grid: &Arc<ProbabilityGrid>) -> Result<QuantileFunction> {
    v.sort_by(f64::total_cmp);
    QuantileFunction::new(Arc::clone(grid), quantiles_of_sorted(&v, grid.points()))
}

fn sorted_qf(mut v: Vec<f64>, grid: &Arc<ProbabilityGrid>) -> Result<QuantileFunction> {
    v.sort_by(f64::total_cmp);
    QuantileFunction::new(Arc::clone(grid), v)
}

/// Open-interval uniform draw.
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn draw_subject(
    spec: &ScenarioSpec,
    truth: &Truth,
    grid: &Arc<ProbabilityGrid>,
    rng: &mut ChaCha8Rng,
) -> Result<Subject> {
    let z = if spec.scenario.has_covariate() { rng.random::<f64>() } else { 0.0 };
    let c = rng.random_range(1.0..2.0);
    let sd = spec.noise_sd();
    let noise = Normal::new(0.0, sd).map_err(|e| DorqfError::InvalidArgument(e.to_string()))?;
    let latent_y: Vec<f64> = grid.points().iter().map(|&p| truth.outcome_quantile(z, c, p)).collect();
    let latent_y = QuantileFunction::new(Arc::clone(grid), latent_y)?;
    let (x, y) = match spec.l {
        None => {
            let x: Vec<f64> = grid.points().iter().map(|&p| truth.predictor_quantile(c, p)).collect();
            let y: Vec<f64> = latent_y
                .values()
                .iter()
                .map(|v| v + if sd > 0.0 { noise.sample(rng) } else { 0.0 })
                .collect();
            (QuantileFunction::new(Arc::clone(grid), x)?, sorted_qf(y, grid)?)
        }
        Some(l) => {
            let xs: Vec<f64> = (0..l).map(|_| truth.predictor_quantile(c, open_unit(rng))).collect();
            let ys: Vec<f64> = (0..l)
                .map(|_| {
                    let v = open_unit(rng);
                    let e = match spec.noise_mode {
                        NoiseMode::BeforeSampling if sd > 0.0 => noise.sample(rng),
                        _ => 0.0,
                    };
                    truth.outcome_quantile(z, c, v) + e
                })
                .collect();
            let mut y = empirical(ys, grid)?;
            if spec.noise_mode == NoiseMode::AfterQuantiles && sd > 0.0 {
                let noisy = y.values().iter().map(|v| v + noise.sample(rng)).collect();
                y = sorted_qf(noisy, grid)?;
            }
            (empirical(xs, grid)?, y)
        }
    };
    Ok(Subject { z, c, x, y, latent_y })
}

/// Generates the training set and the held-out set of one replication.
pub fn generate_scenario(spec: &ScenarioSpec, rep: usize) -> Result<Replicate> {
    spec.validate()?;
    let grid = spec.grid()?;
    let truth = spec.truth();
    let mut rng = stream_rng(spec.seed, spec.stream(rep, 0));
    let train = (0..spec.n)
        .map(|_| draw_subject(spec, &truth, &grid, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = stream_rng(spec.seed, spec.stream(rep, 1));
    let test = (0..spec.test_size)
        .map(|_| draw_subject(spec, &truth, &grid, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let q = usize::from(spec.scenario.has_covariate());
    let cov = |s: &Subject| if q == 1 { vec![s.z] } else { Vec::new() };
    let raw = RawData {
        subject_ids: (0..spec.n).map(|i| format!("s{:04}", i + 1)).collect(),
        outcomes: train.iter().map(|s| s.y.clone()).collect(),
        covariates: train.iter().map(cov).collect(),
        covariate_names: if q == 1 { vec!["z1".into()] } else { Vec::new() },
        predictors: Some(train.iter().map(|s| s.x.clone()).collect()),
    };
    let predictor_scale = AffineScale::spanning(train.iter().flat_map(|s| s.x.values()))?;
    let data = Dataset::with_scales(raw, vec![AffineScale::new(0.0, 1.0)?; q], Some(predictor_scale))?;
    Ok(Replicate {
        rep,
        train: data,
        test: TestSet {
            covariates: test.iter().map(cov).collect(),
            predictors: test.iter().map(|s| s.x.clone()).collect(),
            outcomes: test.iter().map(|s| s.y.clone()).collect(),
            latent_outcomes: test.iter().map(|s| s.latent_y.clone()).collect(),
        },
        truth,
        scales: train.iter().map(|s| s.c).collect(),
    })
}
