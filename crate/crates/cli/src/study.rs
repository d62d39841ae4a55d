//! Inputs shared by the pipeline stages. Each stage records what it read so
//! the next stage can rebuild the same study from files alone.

use std::path::{Path, PathBuf};

use clap::Args;
use riskcal::pipeline::{fit_estimator, weigh, EstimatorFit, PipelineConfig, StudyData, Weighting};
use riskcal::propensity::resolve_scale_weights;
use riskcal::{
    check_cells, ingest_registry, ingest_sample_with_warnings, Estimator, Formula, NewtonOptions,
    Sample, SampleKind, ScaleMode, Schema, WeightVariant,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{config, CliResult};

/// CSV column names for unit roles.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct Columns {
    /// Unit id column.
    #[arg(long = "id-col", default_value = "id")]
    pub id: String,
    #[arg(long = "time-col", default_value = "time")]
    pub time: String,
    #[arg(long = "event-col", default_value = "event")]
    pub event: String,
    /// Survey weight column.
    #[arg(long = "weight-col", default_value = "weight")]
    pub weight: String,
    /// Survey stratum column; one stratum when absent.
    #[arg(long = "stratum-col")]
    pub stratum: Option<String>,
    /// Survey PSU column; each unit its own PSU when absent.
    #[arg(long = "psu-col")]
    pub psu: Option<String>,
    /// Accept survey strata holding a single PSU.
    #[arg(long)]
    pub allow_single_psu: bool,
}

/// Everything the weight stage read, recorded in its JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightInputs {
    pub cohort: PathBuf,
    pub survey: PathBuf,
    pub registry: Option<PathBuf>,
    pub columns: Columns,
    pub propensity: String,
    pub cells: Vec<String>,
    pub scale: String,
    pub tol: f64,
    pub max_iter: usize,
    pub poststrat: String,
    pub collapse_cells: bool,
}

impl WeightInputs {
    pub fn estimator(&self) -> CliResult<Estimator> {
        let variant: WeightVariant = self.poststrat.parse().map_err(|e: riskcal::Error| config(e.to_string()))?;
        Ok(match variant {
            WeightVariant::KwOnly => Estimator::Kws,
            WeightVariant::PostRg => Estimator::PostKws,
            WeightVariant::PostPop => Estimator::PostKwsPop,
        })
    }

    pub fn scale_mode(&self) -> CliResult<ScaleMode> {
        self.scale.parse().map_err(|e: riskcal::Error| config(e.to_string()))
    }

    /// Rejects missing files and inconsistent flags before any work.
    pub fn check(&self) -> CliResult<()> {
        existing(&self.cohort, "cohort")?;
        existing(&self.survey, "survey")?;
        if let Some(r) = &self.registry {
            existing(r, "registry")?;
        }
        let est = self.estimator()?;
        self.scale_mode()?;
        if est != Estimator::Kws && self.registry.is_none() {
            return Err(config(format!("--poststrat {} needs --registry", self.poststrat)));
        }
        if est != Estimator::Kws && self.cells.is_empty() {
            return Err(config(format!("--poststrat {} needs --cells", self.poststrat)));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(config("--tol must be positive and --max-iter at least 1"));
        }
        Ok(())
    }
}

pub fn existing(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config(format!("{what} file `{}` does not exist", path.display())))
    }
}

pub fn parse_formula(text: &str, flag: &str) -> CliResult<Formula> {
    Formula::parse(text).map_err(|e| config(format!("{flag}: {e}")))
}

pub fn parse_list(text: &str) -> Vec<String> {
    text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn has_column(path: &Path, column: &str) -> CliResult<bool> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.headers()?.iter().any(|h| h.trim() == column))
}

/// Ingested samples and the study view built from them.
pub struct Study {
    pub cohort: Sample,
    pub survey: Sample,
    pub data: StudyData,
    pub warnings: Vec<String>,
}

/// Reads both samples. `model` gives the cohort's risk-model covariates and
/// `survey_model` the survey's (empty when the survey is only a weight donor).
pub fn load(inputs: &WeightInputs, model: &Formula, survey_model: &Formula) -> CliResult<Study> {
    inputs.check()?;
    let files = [&inputs.cohort, &inputs.survey];
    let mut propensity = parse_formula(&inputs.propensity, "--propensity")?;
    propensity.resolve_levels(&files)?;
    let mut model = model.clone();
    model.resolve_levels(&files)?;
    let mut survey_model = survey_model.clone();
    survey_model.resolve_levels(&files)?;
    let c = &inputs.columns;
    let base = Schema {
        id: Some(c.id.clone()),
        time: Some(c.time.clone()),
        event: Some(c.event.clone()),
        weight: None,
        stratum: None,
        psu: None,
        model,
        propensity,
        cells: inputs.cells.clone(),
        allow_single_psu: c.allow_single_psu,
    };
    let cohort_schema = Schema {
        weight: has_column(&inputs.cohort, &c.weight)?.then(|| c.weight.clone()),
        ..base.clone()
    };
    let survey_schema = Schema {
        weight: Some(c.weight.clone()),
        stratum: c.stratum.clone(),
        psu: c.psu.clone(),
        model: survey_model,
        ..base
    };
    let (cohort, mut warnings) = ingest_sample_with_warnings(&inputs.cohort, &cohort_schema, SampleKind::Cohort)?;
    let (survey, w2) = ingest_sample_with_warnings(&inputs.survey, &survey_schema, SampleKind::Survey)?;
    warnings.extend(w2);
    for w in &warnings {
        log::warn!("{w}");
    }
    let registry = inputs.registry.as_deref().map(ingest_registry).transpose()?;
    let est = inputs.estimator()?;
    if let (Some(reg), true) = (&registry, est != Estimator::Kws) {
        check_cells(&cohort, reg, est == Estimator::PostKwsPop)?;
    }
    let data = StudyData::from_samples(&cohort, &survey, registry);
    Ok(Study {
        cohort,
        survey,
        data,
        warnings,
    })
}

pub fn pipeline_config(inputs: &WeightInputs, study: &Study, cox: NewtonOptions) -> CliResult<PipelineConfig> {
    let a = resolve_scale_weights(&study.data.survey.w, inputs.scale_mode()?)?;
    let mut cfg = PipelineConfig::new(a);
    cfg.propensity = NewtonOptions::new(inputs.tol, inputs.max_iter);
    cfg.cox = cox;
    cfg.collapse_cells = inputs.collapse_cells;
    Ok(cfg)
}

/// Weighting and estimator fit rebuilt from recorded inputs.
pub struct Rebuilt {
    pub study: Study,
    pub cfg: PipelineConfig,
    pub weighting: Weighting,
    pub fit: EstimatorFit,
}

pub fn rebuild(inputs: &WeightInputs, model: &Formula, cox: NewtonOptions) -> CliResult<Rebuilt> {
    let study = load(inputs, model, &Formula::default())?;
    let cfg = pipeline_config(inputs, &study, cox)?;
    let weighting = weigh(&study.data, &cfg)?;
    let fit = fit_estimator(&study.data, &cfg, inputs.estimator()?, Some(&weighting))?;
    Ok(Rebuilt {
        study,
        cfg,
        weighting,
        fit,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config(format!("cannot read {what} `{}`: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config(format!("{what} `{}` is malformed: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Adds this stage's settings to `run_meta.json` in `dir`, keeping entries
/// written by other stages.
pub fn record_meta(dir: &Path, stage: &str, meta: Value) -> CliResult<()> {
    let path = dir.join("run_meta.json");
    let mut all = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str::<Value>(&text).unwrap_or_else(|_| json!({})),
        Err(_) => json!({}),
    };
    if !all.is_object() {
        all = json!({});
    }
    all["riskcal_version"] = json!(env!("CARGO_PKG_VERSION"));
    all[stage] = meta;
    write_json(&path, &all)
}

pub fn out_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| config(format!("cannot create output directory `{}`: {e}", dir.display())))
}
