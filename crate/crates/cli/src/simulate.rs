use std::path::PathBuf;

use clap::Args;
use riskcal::simulation::{
    emit_report, generate_population, population_truth, run_gamma_d_sweep, run_meta, run_scenario_on, stream_rng,
    write_sweep, PopulationConfig, ScenarioConfig,
};
use riskcal::Estimator;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{config, CliResult};
use crate::study::{out_dir, read_json};

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Reference scenarios to run, comma separated (1-4).
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    pub scenario: Vec<u8>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Seed of the population and of the replicate streams.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pop_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Estimators, comma separated: survey, naive, kws, post_kws, post_kws_pop.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<Estimator>>,
    /// Correlation of z3 with z1 and with z2.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Draw a fresh population for every replicate.
    #[arg(long)]
    pub regenerate_fp: bool,
    /// Also sweep the event coefficient of the cohort size measure
    /// (naive estimator only); values comma separated, default 0 to 0.5.
    #[arg(
        long,
        value_delimiter = ',',
        num_args = 0..,
        default_missing_value = "0,0.1,0.2,0.3,0.4,0.5"
    )]
    pub sweep_gamma_d: Option<Vec<f64>>,
    /// JSON file with `population` and `scenario` objects overriding any
    /// configuration field; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Replaces fields of `base` with those in `patch`; unknown fields are errors.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&Value>, what: &str) -> CliResult<T> {
    let mut v = serde_json::to_value(base)?;
    if let Some(patch) = patch {
        let obj = patch.as_object().ok_or_else(|| config(format!("config `{what}` must be an object")))?;
        for (k, val) in obj {
            if v.get(k).is_none() {
                return Err(config(format!("unknown {what} field `{k}` in config")));
            }
            v[k] = val.clone();
        }
    }
    serde_json::from_value(v).map_err(|e| config(format!("config `{what}`: {e}")))
}

pub fn run(args: SimulateArgs) -> CliResult<()> {
    let file: Value = match &args.config {
        Some(p) => read_json(p, "config")?,
        None => json!({}),
    };
    if let Some(extra) = file.as_object().and_then(|o| o.keys().find(|k| *k != "population" && *k != "scenario")) {
        return Err(config(format!("unknown config section `{extra}`")));
    }
    let mut pop_cfg: PopulationConfig = overlay(&PopulationConfig::default(), file.get("population"), "population")?;
    if let Some(s) = args.seed {
        pop_cfg.seed = s;
    }
    if let Some(m) = args.pop_size {
        pop_cfg.size = m;
    }
    if args.rho.is_some() {
        pop_cfg.rho = args.rho;
    }
    pop_cfg.validate().map_err(|e| config(e.to_string()))?;

    if args.scenario.is_empty() {
        return Err(config("--scenario needs at least one scenario"));
    }
    let mut scenarios = Vec::new();
    for &id in &args.scenario {
        let reference = ScenarioConfig::reference(id).map_err(|e| config(e.to_string()))?;
        let mut s: ScenarioConfig = overlay(&reference, file.get("scenario"), "scenario")?;
        if let Some(r) = args.reps {
            s.reps = r;
        }
        if let Some(seed) = args.seed {
            s.seed = seed;
        }
        if let Some(e) = &args.estimators {
            s.estimators = e.clone();
        }
        s.regenerate_fp |= args.regenerate_fp;
        s.validate(pop_cfg.size).map_err(|e| config(e.to_string()))?;
        scenarios.push(s);
    }
    out_dir(&args.out)?;

    let pop = generate_population(&pop_cfg, &mut stream_rng(pop_cfg.seed, 0))?;
    log::info!("population of {} with event rate {:.4}", pop.len(), pop.event_rate());
    let mut outcomes = Vec::new();
    for s in &scenarios {
        let truth = population_truth(&pop, &s.lambda_grid, s.risk_time)?;
        let o = run_scenario_on(&pop, &truth, &pop_cfg, s)?;
        log::info!("scenario {}: {} of {} replicates failed", s.name, o.failures, s.reps);
        outcomes.push(o);
    }
    let mut meta = run_meta(&pop_cfg, &outcomes);
    if let Some(gammas) = &args.sweep_gamma_d {
        let rows = run_gamma_d_sweep(&pop, &pop_cfg, &scenarios[0], gammas)?;
        write_sweep(&rows, &args.out.join("gamma_d_sweep.csv"))?;
        meta["gamma_d_sweep"] = json!({ "base_scenario": scenarios[0].name, "gamma_d": gammas });
    }
    for path in emit_report(&args.out, &outcomes, &meta)? {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}
