//! Target-population absolute risk from a nonrepresentative cohort.
//!
//! Cohort units receive kernel-weighted pseudoweights transferred from a
//! probability survey, optionally poststratified to registry counts. A
//! weighted Cox model with a Breslow or PAR baseline then gives absolute
//! risks, with Taylor linearization variances that account for every
//! weighting step. The [`simulation`] module runs the Monte Carlo study.

pub mod data;
pub mod error;
pub mod linalg;
pub mod optim;
pub mod pipeline;
pub mod propensity;
pub mod pseudoweight;
pub mod simulation;
pub mod survival;
pub mod variance;

pub use data::{
    check_cells, ingest_registry, ingest_sample, ingest_sample_with_warnings, write_sample_csv, ColumnNames,
    Formula, HazardInterval, RegistrySummary, Sample, SampleKind, Schema, Term, Unit,
};
pub use error::{Error, Result};
pub use optim::NewtonOptions;
pub use pipeline::{Estimator, EstimatorFit, PipelineConfig, StudyData, Target, Weighting};
pub use propensity::{fit_propensity, resolve_scale, PropensityFit, ScaleMode};
pub use pseudoweight::{
    balance_diagnostics, kw_weights, poststratify, silverman_bandwidth, Bandwidth, BalanceRow, WeightSet,
    WeightVariant,
};
pub use survival::{
    absolute_risk, breslow_baseline, compute_fp_truth, fit_weighted_cox, par_baseline, BaselineCumHazard,
    BaselineMethod, RiskEstimate, RiskModelFit,
};
pub use variance::{cloglog_ci, fd_deviates, influence_deviates, tl_variance, CombinedDesign, DeviateSet, SinglePsu};
