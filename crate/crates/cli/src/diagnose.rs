use std::path::PathBuf;

use clap::Args;
use riskcal::{balance_diagnostics, Formula, Term};
use serde_json::json;

use crate::error::{config, CliResult};
use crate::fit::weight_inputs;
use crate::study::{load, out_dir, parse_formula, parse_list, record_meta, write_json};

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Weights CSV written by `weight`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Numeric covariates to compare, comma separated; defaults to the
    /// numeric propensity covariates.
    #[arg(long)]
    pub covariates: Option<String>,
    /// Directory for `balance.csv` and `diagnostics.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn weight_summary(w: &[f64]) -> serde_json::Value {
    let total: f64 = w.iter().sum();
    let sq: f64 = w.iter().map(|x| x * x).sum();
    json!({
        "n": w.len(),
        "total": total,
        "min": w.iter().copied().fold(f64::INFINITY, f64::min),
        "max": w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "effective_sample_size": total * total / sq,
    })
}

pub fn run(args: DiagnoseArgs) -> CliResult<()> {
    let inputs = weight_inputs(&args.weights)?;
    let names: Vec<String> = match &args.covariates {
        Some(list) => parse_list(list),
        None => parse_formula(&inputs.propensity, "--propensity")?
            .terms
            .iter()
            .filter_map(|t| match t {
                Term::Numeric(c) => Some(c.clone()),
                Term::Categorical { .. } => None,
            })
            .collect(),
    };
    if names.is_empty() {
        return Err(config("no numeric covariates to compare"));
    }
    let formula = Formula {
        terms: names.iter().cloned().map(Term::Numeric).collect(),
    };
    let study = load(&inputs, &formula, &formula)?;

    let mut rdr = csv::Reader::from_path(&args.weights)?;
    let mut by_id = std::collections::HashMap::new();
    for rec in rdr.deserialize::<(String, f64, f64, f64)>() {
        let (id, _, _, fin) = rec?;
        by_id.insert(id, fin);
    }
    let w: Vec<f64> = study
        .data
        .cohort
        .ids
        .iter()
        .map(|id| by_id.get(id).copied().ok_or_else(|| config(format!("unit `{id}` is missing from the weights file"))))
        .collect::<CliResult<_>>()?;
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let rows = balance_diagnostics(&study.cohort, &w, &study.survey, &refs)?;

    println!(
        "{:<16} {:>12} {:>12} {:>12} {:>10} {:>10}",
        "covariate", "survey", "weighted", "unweighted", "std_diff", "raw_diff"
    );
    for r in &rows {
        println!(
            "{:<16} {:>12.4} {:>12.4} {:>12.4} {:>10.4} {:>10.4}{}",
            r.covariate,
            r.survey_mean,
            r.cohort_mean,
            r.unweighted_cohort_mean,
            r.std_diff,
            r.unweighted_std_diff,
            if r.flagged { "  *" } else { "" }
        );
    }
    let summary = weight_summary(&w);
    println!("weights: {summary}");

    if let Some(dir) = &args.out {
        out_dir(dir)?;
        let mut wr = csv::Writer::from_path(dir.join("balance.csv"))?;
        for r in &rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        write_json(&dir.join("diagnostics.json"), &json!({ "balance": rows, "weights": summary }))?;
        record_meta(
            dir,
            "diagnose",
            json!({
                "weights": std::path::absolute(&args.weights).unwrap_or(args.weights.clone()),
                "covariates": names,
                "flag_threshold": 0.1,
                "std_diff": "difference of weighted means over the pooled weighted SD",
            }),
        )?;
    }
    Ok(())
}
