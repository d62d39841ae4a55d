//! Monte Carlo study: a synthetic finite population, PPS cohort and survey
//! draws under informative and noninformative participation, and summary
//! tables of bias, variance, MSE and variance-estimator calibration.

pub mod metrics;
pub mod population;
pub mod pps;
pub mod report;
pub mod scenario;

pub use metrics::{summarize, Metric, MetricsTable, Table1Row, Table2Row, LambdaBiasRow};
pub use population::{build_registry, generate_population, Population, PopulationConfig};
pub use pps::{draw_pps, draw_pps_sample, pps_probabilities};
pub use report::{emit_report, run_gamma_d_sweep, run_meta, write_sweep, SweepRow};
pub use scenario::{
    population_truth, run_replicate, PropensityTerm, run_scenario, run_scenario_on, stream_rng, EstimatorRecord, ReplicateRecord,
    ScenarioConfig, ScenarioOutcome, SizeCoefficients, Truth,
};
