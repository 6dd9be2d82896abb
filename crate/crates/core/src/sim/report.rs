//! Study grids and their CSV tables.
//!
//! Numbers are written with a fixed format so that identical studies give
//! byte-identical files.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{DorqfError, Result};

use super::scenario::{NoiseMode, NoiseScale, Scenario, ScenarioSpec};
use super::study::{
    run_coverage_study, run_estimation_study, run_power_study, CoverageCell, EstimationConfig,
    EstimationReport, MetricSummary, OrderChoice, PowerCell, PowerMethod,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    /// `β_1` accuracy in scenario A1.
    Beta1,
    /// Additive-effect accuracy in scenario A1.
    Gamma,
    /// Additive effect against the isotonic baseline in scenario B.
    Baseline,
    /// Held-out Wasserstein prediction error in scenario A1.
    Wasserstein,
    /// Joint-band coverage in scenario A1.
    Coverage,
    /// Rejection rates in scenario A2.
    Power,
}

impl std::str::FromStr for Table {
    type Err = DorqfError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" => Ok(Table::Beta1),
            "2" => Ok(Table::Gamma),
            "3" => Ok(Table::Baseline),
            "s1" => Ok(Table::Wasserstein),
            "s2" => Ok(Table::Coverage),
            "power" => Ok(Table::Power),
            _ => Err(DorqfError::InvalidArgument(format!(
                "unknown table '{s}', expected one of 1, 2, 3, s1, s2, power"
            ))),
        }
    }
}

impl std::fmt::Display for Table {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Table::Beta1 => "1",
            Table::Gamma => "2",
            Table::Baseline => "3",
            Table::Wasserstein => "s1",
            Table::Coverage => "s2",
            Table::Power => "power",
        })
    }
}

/// Cells and shared settings of a study grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyGrid {
    pub ns: Vec<usize>,
    /// `None` is the latent mode.
    pub ls: Vec<Option<usize>>,
    pub reps: usize,
    pub seed: u64,
    pub m: usize,
    pub noise_level: f64,
    pub noise_scale: NoiseScale,
    pub noise_mode: NoiseMode,
    pub test_size: usize,
    pub order: OrderChoice,
    /// Fixed orders of the coverage table.
    pub coverage_orders: Vec<usize>,
    pub alpha: f64,
    pub band_samples: usize,
    pub ds: Vec<f64>,
    pub power_order: usize,
    pub power_method: PowerMethod,
}

impl StudyGrid {
    /// Default cells of the given table.
    pub fn standard(table: Table) -> Self {
        let (ls, reps) = match table {
            Table::Beta1 | Table::Gamma | Table::Wasserstein => (vec![Some(200), Some(400)], 100),
            Table::Baseline | Table::Coverage => (vec![Some(200)], 100),
            Table::Power => (vec![Some(200)], 200),
        };
        Self {
            ns: vec![200, 300, 400],
            ls,
            reps,
            seed: 1,
            m: 100,
            noise_level: 0.1,
            noise_scale: NoiseScale::StandardDeviation,
            noise_mode: NoiseMode::BeforeSampling,
            test_size: 100,
            order: OrderChoice::default(),
            coverage_orders: vec![2, 3, 4],
            alpha: 0.05,
            band_samples: 1000,
            ds: vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0],
            power_order: 3,
            power_method: PowerMethod::JointBand,
        }
    }

    pub fn spec(&self, scenario: Scenario, n: usize, l: Option<usize>, d: f64) -> ScenarioSpec {
        ScenarioSpec {
            scenario,
            n,
            l,
            m: self.m,
            d,
            reps: self.reps,
            seed: self.seed,
            noise_level: self.noise_level,
            noise_scale: self.noise_scale,
            noise_mode: self.noise_mode,
            test_size: self.test_size,
        }
    }
}

/// Results of one table's studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableResults {
    Estimation(Vec<EstimationReport>),
    Coverage(Vec<CoverageCell>),
    Power(Vec<PowerCell>),
}

impl TableResults {
    pub fn failures(&self) -> usize {
        match self {
            TableResults::Estimation(r) => r.iter().map(|r| r.failures).sum(),
            TableResults::Coverage(c) => c.iter().map(|c| c.failures).sum(),
            TableResults::Power(p) => p.iter().map(|p| p.failures).sum(),
        }
    }
}

/// Runs every cell of `table` in row order.
pub fn run_table(table: Table, grid: &StudyGrid) -> Result<TableResults> {
    match table {
        Table::Beta1 | Table::Gamma | Table::Wasserstein => {
            let config = EstimationConfig {
                order: grid.order.clone(),
                pava: false,
                wasserstein: table == Table::Wasserstein,
            };
            estimation_cells(grid, Scenario::A1, &config).map(TableResults::Estimation)
        }
        Table::Baseline => {
            let config = EstimationConfig {
                order: grid.order.clone(),
                pava: true,
                wasserstein: false,
            };
            estimation_cells(grid, Scenario::B, &config).map(TableResults::Estimation)
        }
        Table::Coverage => {
            let mut cells = Vec::new();
            for &l in &grid.ls {
                for &n in &grid.ns {
                    let spec = grid.spec(Scenario::A1, n, l, 1.0);
                    cells.extend(run_coverage_study(&spec, &grid.coverage_orders, grid.alpha, grid.band_samples)?);
                }
            }
            cells.sort_by_key(|c| (c.order, c.l.unwrap_or(usize::MAX), c.n));
            Ok(TableResults::Coverage(cells))
        }
        Table::Power => {
            let mut cells = Vec::new();
            for &l in &grid.ls {
                for &n in &grid.ns {
                    for &d in &grid.ds {
                        let spec = grid.spec(Scenario::A2, n, l, d);
                        cells.push(run_power_study(&spec, grid.power_order, grid.alpha, grid.power_method)?);
                    }
                }
            }
            Ok(TableResults::Power(cells))
        }
    }
}

fn estimation_cells(grid: &StudyGrid, scenario: Scenario, config: &EstimationConfig) -> Result<Vec<EstimationReport>> {
    let mut out = Vec::new();
    for &n in &grid.ns {
        for &l in &grid.ls {
            out.push(run_estimation_study(&grid.spec(scenario, n, l, 1.0), config)?);
        }
    }
    Ok(out)
}

fn sci(x: f64) -> String {
    format!("{x:.6e}")
}

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

fn opt_sci(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), sci)
}

pub fn format_l(l: Option<usize>) -> String {
    l.map_or_else(|| "inf".into(), |l| l.to_string())
}

fn metric_cells(s: Option<&MetricSummary>) -> String {
    match s {
        Some(s) => format!("{},{},{}", sci(s.bias2), sci(s.variance), sci(s.mse)),
        None => "NA,NA,NA".into(),
    }
}

/// CSV text for `table`.
pub fn table_csv(table: Table, results: &TableResults) -> Result<String> {
    let mut out = String::new();
    match (table, results) {
        (Table::Beta1 | Table::Gamma, TableResults::Estimation(reports)) => {
            out.push_str("n,L,bias2,var,mse,mean_order,failures,reps\n");
            for r in reports {
                let s = if table == Table::Beta1 { r.beta1.as_ref() } else { Some(&r.gamma) };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.spec.n,
                    format_l(r.spec.l),
                    metric_cells(s),
                    fixed(r.mean_order),
                    r.failures,
                    r.spec.reps
                );
            }
        }
        (Table::Baseline, TableResults::Estimation(reports)) => {
            out.push_str("n,L,method,bias2,var,mse,failures,reps\n");
            for r in reports {
                for (method, s) in [("dorqf", Some(&r.gamma)), ("pava", r.pava_gamma.as_ref())] {
                    let _ = writeln!(
                        out,
                        "{},{},{method},{},{},{}",
                        r.spec.n,
                        format_l(r.spec.l),
                        metric_cells(s),
                        r.failures,
                        r.spec.reps
                    );
                }
            }
        }
        (Table::Wasserstein, TableResults::Estimation(reports)) => {
            out.push_str("n,L,mean_wd,sd_wd,mean_order,failures,reps\n");
            for r in reports {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.spec.n,
                    format_l(r.spec.l),
                    opt_sci(r.wasserstein_mean),
                    opt_sci(r.wasserstein_sd),
                    fixed(r.mean_order),
                    r.failures,
                    r.spec.reps
                );
            }
        }
        (Table::Coverage, TableResults::Coverage(cells)) => {
            out.push_str("order,n,L,alpha,coverage,mean_width,failures,reps\n");
            for c in cells {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    c.order,
                    c.n,
                    format_l(c.l),
                    c.alpha,
                    fixed(c.coverage),
                    fixed(c.mean_width),
                    c.failures,
                    c.successes + c.failures
                );
            }
        }
        (Table::Power, TableResults::Power(cells)) => {
            out.push_str("n,d,order,alpha,rejection_rate,mean_p_value,failures,reps\n");
            for c in cells {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    c.n,
                    c.d,
                    c.order,
                    c.alpha,
                    fixed(c.rejection_rate),
                    fixed(c.mean_p_value),
                    c.failures,
                    c.successes + c.failures
                );
            }
        }
        _ => {
            return Err(DorqfError::InvalidArgument(format!(
                "results do not belong to table {table}"
            )))
        }
    }
    Ok(out)
}

/// Per-replication records of estimation studies.
pub fn records_csv(results: &TableResults) -> Option<String> {
    let TableResults::Estimation(reports) = results else {
        return None;
    };
    let mut out = String::from("n,L,rep,order,beta1_ise,gamma_ise,pava_gamma_ise,mean_wd,failure\n");
    for r in reports {
        for rec in &r.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.spec.n,
                format_l(r.spec.l),
                rec.rep,
                rec.order.map_or_else(|| "NA".into(), |o| o.to_string()),
                opt_sci(rec.beta1_ise),
                opt_sci(rec.gamma_ise),
                opt_sci(rec.pava_gamma_ise),
                opt_sci(rec.mean_wasserstein),
                rec.failure.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
    }
    Some(out)
}

/// Whitespace-separated `d rate` blocks per `n`, separated by blank lines.
pub fn power_curve_data(cells: &[PowerCell]) -> String {
    let mut out = String::from("# d rejection_rate\n");
    let mut last = None;
    for c in cells {
        if last.is_some_and(|n| n != c.n) {
            out.push_str("\n\n");
        }
        if last != Some(c.n) {
            let _ = writeln!(out, "# n = {}", c.n);
        }
        let _ = writeln!(out, "{} {}", c.d, fixed(c.rejection_rate));
        last = Some(c.n);
    }
    out
}
