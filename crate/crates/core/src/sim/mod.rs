//! Simulation scenarios, Monte Carlo studies, and their report tables.

pub mod report;
pub mod scenario;
pub mod study;

pub use report::{records_csv, run_table, table_csv, StudyGrid, Table, TableResults};
pub use scenario::{generate_scenario, NoiseMode, NoiseScale, Replicate, Scenario, ScenarioSpec, TestSet, Truth};
pub use study::{
    run_coverage_study, run_estimation_study, run_power_study, CoverageCell, EstimationConfig,
    EstimationRecord, EstimationReport, MetricSummary, OrderChoice, PowerCell, PowerMethod,
};
