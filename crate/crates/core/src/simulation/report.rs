//! Files written by a simulation run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::metrics::{format_value, parse_value, write_lambda0, write_table1, write_table2, MetricsTable};
use super::population::{Population, PopulationConfig};
use super::scenario::{run_scenario_on, ScenarioConfig, ScenarioOutcome, Truth};
use crate::error::{Error, Result};
use crate::pipeline::Estimator;

pub const PPS_METHOD: &str = "randomized systematic PPS on a uniform random permutation, certainty units removed";

/// Writes `table1.csv`, `table2.csv`, `lambda0_bias.csv` and `run_meta.json`.
pub fn emit_report(dir: &Path, outcomes: &[ScenarioOutcome], meta: &serde_json::Value) -> Result<Vec<PathBuf>> {
    if outcomes.is_empty() || outcomes.iter().any(|o| o.config.estimators.is_empty()) {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut table = MetricsTable::default();
    for o in outcomes {
        table.extend(o.table.clone());
    }
    let paths = ["table1.csv", "table2.csv", "lambda0_bias.csv", "run_meta.json"].map(|f| dir.join(f));
    write_table1(&table.table1, &paths[0])?;
    write_table2(&table.table2, &paths[1])?;
    write_lambda0(&table.lambda0, &paths[2])?;
    std::fs::write(&paths[3], serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(paths.to_vec())
}

/// Every setting that affects the numbers, plus per-scenario summaries.
pub fn run_meta(pop_cfg: &PopulationConfig, outcomes: &[ScenarioOutcome]) -> serde_json::Value {
    let scenarios: Vec<_> = outcomes
        .iter()
        .map(|o| {
            json!({
                "config": o.config,
                "failures": o.failures,
                "population_event_rate": o.population_event_rate,
                "mean_cohort_event_rate": o.mean_cohort_event_rate(),
                "truth": o.truth,
            })
        })
        .collect();
    json!({
        "population": pop_cfg,
        "scenarios": scenarios,
        "pps_method": PPS_METHOD,
        "scale": "auto: n_s / sum(survey weights)",
        "propensity_tolerance": crate::propensity::default_options(),
        "cox_tolerance": crate::survival::default_options(),
        "bandwidth": "Silverman on cohort propensity linear predictors",
        "ties": "Breslow",
        "single_psu": "error",
        "rng": "ChaCha8; population on stream 0 of the population seed, replicate b on stream b+1 of the scenario seed",
        "registry_hazard": "population Nelson-Aalen increments binned into equal-width intervals",
        "risk_profiles": "componentwise 25/50/75% population quantiles",
    })
}

/// Naive-estimator baseline bias at the risk time for one cohort event
/// coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma_d: f64,
    pub cohort_event_rate: f64,
    pub rb_pct_breslow: f64,
    pub rb_pct_par: f64,
}

/// Varies the event coefficient of the cohort size measure, fitting only
/// the naive estimator.
pub fn run_gamma_d_sweep(
    pop: &Population,
    pop_cfg: &PopulationConfig,
    base: &ScenarioConfig,
    gammas: &[f64],
) -> Result<Vec<SweepRow>> {
    let grid = vec![base.risk_time];
    let truth: Truth = super::scenario::population_truth(pop, &grid, base.risk_time)?;
    gammas
        .iter()
        .map(|&g| {
            let mut scen = base.clone();
            scen.name = format!("gamma_d={g}");
            scen.cohort_size.d = g;
            scen.estimators = vec![Estimator::Naive];
            scen.lambda_grid = grid.clone();
            let out = run_scenario_on(pop, &truth, pop_cfg, &scen)?;
            let rb = |method: &str| {
                out.table
                    .lambda0
                    .iter()
                    .find(|r| r.method == format!("Naive ({method})"))
                    .map_or(f64::NAN, |r| r.metric.rb_pct)
            };
            Ok(SweepRow {
                gamma_d: g,
                cohort_event_rate: out.mean_cohort_event_rate(),
                rb_pct_breslow: rb("B"),
                rb_pct_par: rb("P"),
            })
        })
        .collect()
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["gamma_d", "cohort_event_rate", "rb_pct_breslow", "rb_pct_par"])?;
    for r in rows {
        w.write_record([r.gamma_d, r.cohort_event_rate, r.rb_pct_breslow, r.rb_pct_par].map(format_value))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let v: Vec<f64> = rec.iter().map(parse_value).collect::<Result<_>>()?;
            Ok(SweepRow {
                gamma_d: v[0],
                cohort_event_rate: v[1],
                rb_pct_breslow: v[2],
                rb_pct_par: v[3],
            })
        })
        .collect()
}
