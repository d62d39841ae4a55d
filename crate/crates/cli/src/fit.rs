use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use riskcal::variance::{fd_deviates, influence_deviates, tl_variance, CombinedDesign, SinglePsu};
use riskcal::{BaselineCumHazard, BaselineMethod, NewtonOptions, Target};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{config, CliResult};
use crate::study::{
    absolute, existing, out_dir, parse_formula, read_json, rebuild, record_meta, write_json, Rebuilt, WeightInputs,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Breslow,
    Par,
}

impl From<Baseline> for BaselineMethod {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::Breslow => BaselineMethod::Breslow,
            Baseline::Par => BaselineMethod::Par,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    /// Closed-form influence deviates.
    Tl,
    /// Deviates by finite-difference refits; small data only.
    Fd,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinglePsuArg {
    Error,
    Centered,
}

impl From<SinglePsuArg> for SinglePsu {
    fn from(s: SinglePsuArg) -> Self {
        match s {
            SinglePsuArg::Error => SinglePsu::Error,
            SinglePsuArg::Centered => SinglePsu::Centered,
        }
    }
}

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Weights CSV written by `weight`; its JSON summary must sit beside it.
    #[arg(long)]
    pub weights: PathBuf,
    /// Risk-model covariates, e.g. "age+bmi+C(race)".
    #[arg(long)]
    pub model: String,
    #[arg(long, value_enum, default_value_t = Baseline::Breslow)]
    pub baseline: Baseline,
    /// Registry summary; overrides the one recorded by `weight`.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value_t = VarianceMethod::Tl)]
    pub variance: VarianceMethod,
    #[arg(long, value_enum, default_value_t = SinglePsuArg::Error)]
    pub single_psu: SinglePsuArg,
    #[arg(long)]
    pub out: PathBuf,
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub weights: PathBuf,
    pub weight_inputs: WeightInputs,
    pub model: String,
    pub baseline: Baseline,
    pub cox: NewtonOptions,
    pub variance: VarianceMethod,
    pub single_psu: SinglePsuArg,
    pub estimator: String,
    pub covariates: Vec<String>,
    pub beta: Vec<f64>,
    /// Linearization standard errors; absent when variance is off.
    pub se: Vec<Option<f64>>,
    pub iterations: usize,
    pub score_norm: f64,
    pub scale: f64,
    pub cumulative_hazard: BaselineCumHazard,
}

#[derive(Deserialize)]
struct WeightSummary {
    inputs: WeightInputs,
}

/// Standard errors of `targets`; `None` when variance is off.
pub fn standard_errors(
    r: &Rebuilt,
    targets: &[Target],
    method: VarianceMethod,
    single_psu: SinglePsu,
) -> CliResult<(Vec<f64>, Vec<Option<f64>>)> {
    let data = &r.study.data;
    let values: Vec<f64> = targets.iter().map(|t| r.fit.value(t)).collect::<riskcal::Result<_>>()?;
    let deviates = match method {
        VarianceMethod::None => return Ok((values, vec![None; targets.len()])),
        VarianceMethod::Tl => influence_deviates(data, Some(&r.weighting), &r.fit, targets)?,
        VarianceMethod::Fd => fd_deviates(data, &r.cfg, r.fit.estimator, targets, FD_STEP)?,
    };
    let design = CombinedDesign::from_data(data);
    let se = deviates
        .iter()
        .map(|d| Ok(Some(tl_variance(d, &design, single_psu)?.sqrt())))
        .collect::<riskcal::Result<_>>()?;
    Ok((values, se))
}

/// Final weights from a weights CSV, keyed by unit id.
fn read_weights(path: &Path) -> CliResult<HashMap<String, f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| config(format!("weights file `{}` has no `{name}` column", path.display())))
    };
    let (id, fin) = (col("id")?, col("final")?);
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let w: f64 = rec[fin]
            .parse()
            .map_err(|_| config(format!("weights file `{}`: bad weight `{}`", path.display(), &rec[fin])))?;
        out.insert(rec[id].to_string(), w);
    }
    Ok(out)
}

/// The JSON summary written next to a weights CSV.
pub fn weight_inputs(weights: &Path) -> CliResult<WeightInputs> {
    existing(weights, "weights")?;
    let summary = weights.with_extension("json");
    if !summary.is_file() {
        return Err(config(format!(
            "weights summary `{}` not found; run `riskcal weight` first",
            summary.display()
        )));
    }
    Ok(read_json::<WeightSummary>(&summary, "weights summary")?.inputs)
}

pub fn run(args: FitArgs) -> CliResult<()> {
    let mut inputs = weight_inputs(&args.weights)?;
    if let Some(r) = &args.registry {
        existing(r, "registry")?;
        inputs.registry = Some(absolute(r));
    }
    if args.baseline == Baseline::Par && inputs.registry.is_none() {
        return Err(config("--baseline par needs a registry summary"));
    }
    if !(args.tol > 0.0) || args.max_iter == 0 {
        return Err(config("--tol must be positive and --max-iter at least 1"));
    }
    let model = parse_formula(&args.model, "--model")?;
    out_dir(&args.out)?;
    let cox = NewtonOptions::new(args.tol, args.max_iter);
    let r = rebuild(&inputs, &model, cox)?;

    // The recorded weights must be the ones this study reproduces.
    let recorded = read_weights(&args.weights)?;
    let ids = &r.study.data.cohort.ids;
    if recorded.len() != ids.len() {
        return Err(riskcal::Error::InvalidArgument(format!(
            "weights file has {} units, cohort has {}",
            recorded.len(),
            ids.len()
        ))
        .into());
    }
    for (id, w) in ids.iter().zip(&r.fit.weights) {
        let got = recorded.get(id).copied().unwrap_or(f64::NAN);
        if !((got - w).abs() <= 1e-9 * w.abs()) {
            return Err(riskcal::Error::InvalidArgument(format!(
                "weight of unit `{id}` in the weights file ({got}) differs from the recomputed {w}"
            ))
            .into());
        }
    }

    let p = r.fit.fit.beta.len();
    let targets: Vec<Target> = (0..p).map(|index| Target::Beta { index }).collect();
    let (beta, se) = standard_errors(&r, &targets, args.variance, args.single_psu.into())?;
    let covariates = r.study.cohort.names().z.clone();
    println!("{:<20} {:>14} {:>14}", "covariate", "beta", "se");
    for (k, name) in covariates.iter().enumerate() {
        let s = se[k].map_or("NA".to_string(), |s| format!("{s:.6}"));
        println!("{name:<20} {:>14.6} {s:>14}", beta[k]);
    }
    let method: BaselineMethod = args.baseline.into();
    let record = FitRecord {
        weights: absolute(&args.weights),
        weight_inputs: inputs,
        model: args.model.clone(),
        baseline: args.baseline,
        cox,
        variance: args.variance,
        single_psu: args.single_psu,
        estimator: r.fit.estimator.name().to_string(),
        covariates,
        beta,
        se,
        iterations: r.fit.fit.iterations,
        score_norm: r.fit.fit.score_norm,
        scale: r.cfg.scale,
        cumulative_hazard: r.fit.baseline(method)?.clone(),
    };
    write_json(&args.out.join("fit.json"), &record)?;

    let mut w = csv::Writer::from_path(args.out.join("baseline.csv"))?;
    w.write_record(["t", "cum_hazard"])?;
    for (t, v) in record.cumulative_hazard.knots.iter().zip(&record.cumulative_hazard.values) {
        w.write_record([format!("{t:?}"), format!("{v:?}")])?;
    }
    w.flush()?;

    record_meta(
        &args.out,
        "fit",
        json!({
            "weights": record.weights,
            "weight_inputs": record.weight_inputs,
            "model": record.model,
            "baseline": record.baseline,
            "cox_options": cox,
            "propensity_options": r.cfg.propensity,
            "scale": r.cfg.scale,
            "bandwidth": r.weighting.silverman.bandwidth.value(),
            "ties": "Breslow",
            "variance": record.variance,
            "fd_step": FD_STEP,
            "single_psu": record.single_psu,
        }),
    )?;
    Ok(())
}
