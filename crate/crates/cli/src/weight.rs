use std::path::PathBuf;

use clap::Args;
use riskcal::pipeline::{weigh, weight_set};
use riskcal::pseudoweight::SpreadTerm;
use riskcal::{Estimator, Formula, WeightSet};
use serde_json::json;

use crate::error::CliResult;
use crate::study::{absolute, load, out_dir, parse_list, pipeline_config, record_meta, write_json, Columns, WeightInputs};

#[derive(Debug, Args)]
pub struct WeightArgs {
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub survey: PathBuf,
    /// Propensity covariates, e.g. "age+bmi+C(race)".
    #[arg(long)]
    pub propensity: String,
    /// Survey scale factor: `auto` (n_s / sum of survey weights) or a value in (0, 1).
    #[arg(long, default_value = "auto")]
    pub scale: String,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iter: usize,
    /// Poststratification of the KW weights: to registry event counts (rg),
    /// to event and non-event counts (pop), or none.
    #[arg(long, default_value = "none", value_parser = ["rg", "pop", "none"])]
    pub poststrat: String,
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Post-stratum columns, comma separated.
    #[arg(long, default_value = "")]
    pub cells: String,
    /// Merge an empty post-stratum into its neighbour instead of failing.
    #[arg(long)]
    pub collapse_cells: bool,
    #[command(flatten)]
    pub columns: Columns,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn inputs(args: &WeightArgs) -> WeightInputs {
    WeightInputs {
        cohort: absolute(&args.cohort),
        survey: absolute(&args.survey),
        registry: args.registry.as_deref().map(absolute),
        columns: args.columns.clone(),
        propensity: args.propensity.clone(),
        cells: parse_list(&args.cells),
        scale: args.scale.clone(),
        tol: args.tol,
        max_iter: args.max_iter,
        poststrat: args.poststrat.clone(),
        collapse_cells: args.collapse_cells,
    }
}

fn spread_name(t: SpreadTerm) -> &'static str {
    match t {
        SpreadTerm::Sd => "sd",
        SpreadTerm::Iqr => "iqr/1.34",
        SpreadTerm::None => "none (uniform shares)",
    }
}

pub fn write_weights_csv(path: &std::path::Path, ids: &[String], ws: &WeightSet) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "kw", "post_factor", "final"])?;
    for (l, id) in ids.iter().enumerate() {
        w.write_record([
            id.clone(),
            format!("{:?}", ws.kw[l]),
            format!("{:?}", ws.post_factor[l]),
            format!("{:?}", ws.final_weights[l]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: WeightArgs) -> CliResult<()> {
    let inputs = inputs(&args);
    let study = load(&inputs, &Formula::default(), &Formula::default())?;
    out_dir(&args.out)?;
    let cfg = pipeline_config(&inputs, &study, riskcal::survival::default_options())?;
    let est: Estimator = inputs.estimator()?;
    let weighting = weigh(&study.data, &cfg)?;
    let ws = weight_set(&study.data, &weighting, est.variant().expect("kernel estimator"), cfg.collapse_cells)?;

    let prop = &weighting.propensity;
    let mut names = vec!["(intercept)".to_string()];
    names.extend(study.cohort.names().z_star.iter().cloned());
    println!("{:<20} {:>14}", "term", "gamma");
    for (n, g) in names.iter().zip(&prop.gamma) {
        println!("{n:<20} {g:>14.6}");
    }
    let h = weighting.silverman.bandwidth.value();
    let survey_total: f64 = study.data.survey.w.iter().sum();
    let kw_total: f64 = ws.kw.iter().sum();
    let final_total: f64 = ws.final_weights.iter().sum();
    println!(
        "scale a = {:.6}; bandwidth h = {}; survey weight total {survey_total:.3}; KW total {kw_total:.3}; final total {final_total:.3}",
        cfg.scale,
        h.map_or("degenerate".to_string(), |h| format!("{h:.6}")),
    );

    let csv_path = args.out.join("weights.csv");
    write_weights_csv(&csv_path, &study.data.cohort.ids, &ws)?;
    let summary = json!({
        "inputs": inputs,
        "estimator": est.name(),
        "scale": cfg.scale,
        "propensity": {
            "terms": names,
            "gamma": prop.gamma,
            "iterations": prop.iterations,
            "score_norm": prop.score_norm,
        },
        "bandwidth": {
            "h": h,
            "rule": "0.9 * min(sd, iqr / 1.34) * n^(-1/5) on cohort linear predictors",
            "spread_term": spread_name(weighting.silverman.term),
            "sd": weighting.silverman.sd,
            "iqr": weighting.silverman.iqr,
        },
        "mass": {
            "survey_weight_total": survey_total,
            "kw_total": kw_total,
            "final_total": final_total,
        },
        "cells": ws.groups,
        "warnings": study.warnings,
    });
    write_json(&args.out.join("weights.json"), &summary)?;
    record_meta(
        &args.out,
        "weight",
        json!({
            "inputs": inputs,
            "scale": cfg.scale,
            "propensity_options": cfg.propensity,
            "bandwidth": h,
            "kernel": "gaussian",
            "iqr_quantiles": "linear interpolation between order statistics",
            "collapse_cells": cfg.collapse_cells,
        }),
    )?;
    log::info!("wrote {}", csv_path.display());
    Ok(())
}
