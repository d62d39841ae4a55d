use std::path::PathBuf;

use clap::Args;
use riskcal::{cloglog_ci, BaselineMethod, Formula, Target};
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{config, CliResult};
use crate::fit::{standard_errors, FitRecord, SinglePsuArg, VarianceMethod};
use crate::study::{existing, out_dir, read_json, rebuild, record_meta};

#[derive(Debug, Args)]
pub struct RiskArgs {
    /// `fit.json` written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Covariate profile: a JSON object keyed by covariate name, or an array
    /// in model order.
    #[arg(long)]
    pub profile: PathBuf,
    /// Risk horizon.
    #[arg(long, required_unless_present = "grid")]
    pub time: Option<f64>,
    /// Evaluation grid `t0:t1:step`, endpoints included.
    #[arg(long)]
    pub grid: Option<String>,
    /// Overrides the variance method recorded by `fit`.
    #[arg(long, value_enum)]
    pub variance: Option<VarianceMethod>,
    #[arg(long, value_enum)]
    pub single_psu: Option<SinglePsuArg>,
    /// Confidence level of the intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let bad = || config(format!("--grid must be t0:t1:step with 0 <= t0 <= t1 and step > 0, got `{text}`"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [t0, t1, step] = parts[..] else { return Err(bad()) };
    if !(t0 >= 0.0 && t1 >= t0 && step > 0.0 && t1.is_finite()) {
        return Err(bad());
    }
    let n = ((t1 - t0) / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|k| t0 + k as f64 * step).collect();
    if grid.last().is_some_and(|&t| t1 - t > 1e-9 * step) {
        grid.push(t1);
    }
    Ok(grid)
}

fn parse_profile(v: &Value, names: &[String]) -> CliResult<Vec<f64>> {
    let bad = |m: String| config(format!("--profile: {m}"));
    match v {
        Value::Array(a) => {
            if a.len() != names.len() {
                return Err(bad(format!("{} values for {} covariates", a.len(), names.len())));
            }
            a.iter().map(|x| x.as_f64().ok_or_else(|| bad(format!("`{x}` is not a number")))).collect()
        }
        Value::Object(m) => {
            if let Some(extra) = m.keys().find(|k| !names.contains(k)) {
                return Err(bad(format!("unknown covariate `{extra}`")));
            }
            names
                .iter()
                .map(|n| {
                    m.get(n)
                        .ok_or_else(|| bad(format!("missing covariate `{n}`")))?
                        .as_f64()
                        .ok_or_else(|| bad(format!("`{n}` is not a number")))
                })
                .collect()
        }
        _ => Err(bad("expected an object or an array".into())),
    }
}

pub fn run(args: RiskArgs) -> CliResult<()> {
    if !args.fit.is_file() {
        return Err(config(format!(
            "fit artifact `{}` not found; run `riskcal fit` first",
            args.fit.display()
        )));
    }
    existing(&args.profile, "profile")?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(config("--level must lie in (0, 1)"));
    }
    let record: FitRecord = read_json(&args.fit, "fit artifact")?;
    let profile_json: Value = read_json(&args.profile, "profile")?;
    let z = parse_profile(&profile_json, &record.covariates)?;
    let mut times = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => Vec::new(),
    };
    if let Some(t) = args.time {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(config("--time must be finite and nonnegative"));
        }
        times.push(t);
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    let variance = args.variance.unwrap_or(record.variance);
    let single_psu = args.single_psu.unwrap_or(record.single_psu);
    out_dir(&args.out)?;

    let model = Formula::parse(&record.model)?;
    let r = rebuild(&record.weight_inputs, &model, record.cox)?;
    let drift = r.fit.fit.beta.iter().zip(&record.beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if drift > 1e-8 * (1.0 + record.beta.iter().map(|b| b.abs()).fold(0.0, f64::max)) {
        return Err(riskcal::Error::InvalidArgument(format!(
            "inputs no longer reproduce the recorded fit (coefficients differ by {drift:e})"
        ))
        .into());
    }
    let method: BaselineMethod = record.baseline.into();
    let targets: Vec<Target> = times.iter().map(|&t| Target::Risk { z: z.clone(), t, method }).collect();
    let (values, se) = standard_errors(&r, &targets, variance, single_psu.into())?;
    let q = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + args.level / 2.0);

    let path = args.out.join("risk.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["t", "r_hat", "se", "lo", "hi"])?;
    println!("{:>10} {:>12} {:>12} {:>12} {:>12}", "t", "r_hat", "se", "lo", "hi");
    for ((t, r_hat), s) in times.iter().zip(&values).zip(&se) {
        let (se_s, lo, hi) = match s {
            Some(s) => {
                let (lo, hi) = cloglog_ci(*r_hat, *s, q);
                (format!("{s:?}"), format!("{lo:?}"), format!("{hi:?}"))
            }
            None => ("NA".into(), "NA".into(), "NA".into()),
        };
        println!("{t:>10.4} {r_hat:>12.6} {se_s:>12.12} {lo:>12.12} {hi:>12.12}");
        w.write_record([format!("{t:?}"), format!("{r_hat:?}"), se_s, lo, hi])?;
    }
    w.flush()?;

    record_meta(
        &args.out,
        "risk",
        json!({
            "fit": std::path::absolute(&args.fit).unwrap_or(args.fit.clone()),
            "profile": z,
            "covariates": record.covariates,
            "times": times,
            "baseline": record.baseline,
            "variance": variance,
            "single_psu": single_psu,
            "level": args.level,
            "interval": "Wald on the complementary log-log scale",
            "cox_options": record.cox,
            "scale": r.cfg.scale,
        }),
    )?;
    log::info!("wrote {}", path.display());
    Ok(())
}
