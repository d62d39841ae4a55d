//! Unit records, samples, registry summaries and their file formats.
//!
//! Samples are read from headered CSV files through a [`Schema`] that maps
//! roles (time, event, weight, design ids, covariates, post-stratum labels)
//! onto columns. Registry summaries are JSON documents:
//!
//! ```json
//! {"population_size": 200000,
//!  "event_cells": {"1": 8000, "2": 8200},
//!  "nonevent_cells": {"1": 92000, "2": 91800},
//!  "composite_hazard": [{"t0": 0, "t1": 15, "rate": 0.005}]}
//! ```
//!
//! Post-stratum keys are the unit's cell labels joined with `|`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowIssue};
use crate::linalg::Covariates;

/// Separator between labels of a multi-column post-stratum key.
pub const CELL_SEPARATOR: &str = "|";

pub fn cell_key<S: AsRef<str>>(labels: &[S]) -> String {
    labels.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(CELL_SEPARATOR)
}

/// One person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub id: String,
    /// Risk-model covariates.
    pub z: Vec<f64>,
    /// Propensity-model covariates.
    pub z_star: Vec<f64>,
    /// Post-stratum labels.
    pub z0_star: Vec<String>,
    /// Observed follow-up time.
    pub x: f64,
    /// Event indicator.
    pub d: bool,
    /// Base weight: 1 for cohort units, the sampling weight for survey units.
    pub w: f64,
    pub stratum: i64,
    pub psu: i64,
}

impl Unit {
    pub fn cell_key(&self) -> String {
        cell_key(&self.z0_star)
    }

    fn problem(&self, kind: SampleKind, p: usize, p_star: usize, cells: usize) -> Option<String> {
        if !(self.x.is_finite() && self.x >= 0.0) {
            return Some(format!("time must be finite and nonnegative, got {}", self.x));
        }
        if !(self.w.is_finite() && self.w > 0.0) {
            return Some(format!("weight must be finite and positive, got {}", self.w));
        }
        if kind == SampleKind::Cohort && self.w != 1.0 {
            return Some(format!("cohort units carry weight 1, got {}", self.w));
        }
        if self.z.len() != p || self.z_star.len() != p_star || self.z0_star.len() != cells {
            return Some("covariate dimensions do not match the sample".into());
        }
        if self.z.iter().chain(&self.z_star).any(|v| !v.is_finite()) {
            return Some("nonfinite covariate".into());
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Cohort,
    Survey,
    FinitePopulation,
}

/// Column names for the three covariate blocks of a sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub z: Vec<String>,
    pub z_star: Vec<String>,
    pub cells: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DesignCheck {
    /// Every survey stratum must hold at least two PSUs.
    #[default]
    Strict,
    AllowSinglePsu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StratumInfo {
    pub stratum: i64,
    pub psus: usize,
}

/// Stratum / PSU structure of a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Design {
    pub strata: Vec<StratumInfo>,
}

impl Design {
    pub fn single_psu_strata(&self) -> Vec<i64> {
        self.strata.iter().filter(|s| s.psus < 2).map(|s| s.stratum).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    kind: SampleKind,
    names: ColumnNames,
    units: Vec<Unit>,
}

impl Sample {
    pub fn new(kind: SampleKind, names: ColumnNames, units: Vec<Unit>) -> Result<Sample> {
        Self::with_design_check(kind, names, units, DesignCheck::Strict)
    }

    /// Builds and validates a sample. Cohort units are reassigned to a single
    /// stratum with each unit its own PSU.
    pub fn with_design_check(
        kind: SampleKind,
        names: ColumnNames,
        mut units: Vec<Unit>,
        check: DesignCheck,
    ) -> Result<Sample> {
        if units.is_empty() {
            return Err(Error::Sample("sample has no units".into()));
        }
        let mut seen = HashSet::with_capacity(units.len());
        for u in &units {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Sample(format!("duplicate unit id `{}`", u.id)));
            }
        }
        let (p, ps, nc) = (names.z.len(), names.z_star.len(), names.cells.len());
        let issues: Vec<RowIssue> = units
            .iter()
            .enumerate()
            .filter_map(|(i, u)| {
                u.problem(kind, p, ps, nc).map(|reason| RowIssue {
                    row: i + 1,
                    id: u.id.clone(),
                    reason,
                })
            })
            .collect();
        if !issues.is_empty() {
            return Err(Error::InvalidRows {
                path: "<memory>".into(),
                rows: issues,
            });
        }
        if kind == SampleKind::Cohort {
            for (i, u) in units.iter_mut().enumerate() {
                u.stratum = 0;
                u.psu = i as i64;
            }
        }
        let sample = Sample { kind, names, units };
        if kind == SampleKind::Survey && check == DesignCheck::Strict {
            let single = sample.design().single_psu_strata();
            if let Some(s) = single.first() {
                return Err(Error::SinglePsu {
                    stratum: s.to_string(),
                });
            }
        }
        Ok(sample)
    }

    pub fn kind(&self) -> SampleKind {
        self.kind
    }

    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.units.iter().map(|u| u.w).sum()
    }

    pub fn times(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.x).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.units.iter().map(|u| u.d).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.w).collect()
    }

    pub fn z_matrix(&self) -> Covariates {
        Covariates::from_rows(self.names.z.len(), self.units.iter().map(|u| u.z.as_slice()))
    }

    pub fn z_star_matrix(&self) -> Covariates {
        Covariates::from_rows(
            self.names.z_star.len(),
            self.units.iter().map(|u| u.z_star.as_slice()),
        )
    }

    pub fn design(&self) -> Design {
        let mut psus: BTreeMap<i64, HashSet<i64>> = BTreeMap::new();
        for u in &self.units {
            psus.entry(u.stratum).or_default().insert(u.psu);
        }
        Design {
            strata: psus
                .into_iter()
                .map(|(stratum, set)| StratumInfo {
                    stratum,
                    psus: set.len(),
                })
                .collect(),
        }
    }

    /// Index of a named covariate in `z` or `z_star`.
    pub fn covariate(&self, name: &str) -> Option<Vec<f64>> {
        if let Some(k) = self.names.z.iter().position(|n| n == name) {
            return Some(self.units.iter().map(|u| u.z[k]).collect());
        }
        let k = self.names.z_star.iter().position(|n| n == name)?;
        Some(self.units.iter().map(|u| u.z_star[k]).collect())
    }
}

/// One model term as written in a formula: `age` or `C(race)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Term {
    Numeric(String),
    /// Dummy-coded categorical; `levels[0]` is the reference level.
    Categorical { column: String, levels: Vec<String> },
}

impl Term {
    pub fn column(&self) -> &str {
        match self {
            Term::Numeric(c) => c,
            Term::Categorical { column, .. } => column,
        }
    }

    /// Names of the covariates this term expands to.
    pub fn expanded_names(&self) -> Vec<String> {
        match self {
            Term::Numeric(c) => vec![c.clone()],
            Term::Categorical { column, levels } => {
                levels.iter().skip(1).map(|l| format!("{column}[{l}]")).collect()
            }
        }
    }
}

/// Main-effects formula: terms joined by `+`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Formula {
    pub terms: Vec<Term>,
}

impl Formula {
    pub fn parse(text: &str) -> Result<Formula> {
        let mut terms = Vec::new();
        for raw in text.split('+') {
            let t = raw.trim();
            if t.is_empty() {
                return Err(Error::InvalidArgument(format!("empty term in formula `{text}`")));
            }
            if let Some(inner) = t.strip_prefix("C(").and_then(|r| r.strip_suffix(')')) {
                terms.push(Term::Categorical {
                    column: inner.trim().to_string(),
                    levels: Vec::new(),
                });
            } else if t.contains(['(', ')', '*', ':']) {
                return Err(Error::InvalidArgument(format!(
                    "unsupported term `{t}`; only main effects and C(column) are allowed"
                )));
            } else {
                terms.push(Term::Numeric(t.to_string()));
            }
        }
        Ok(Formula { terms })
    }

    pub fn expanded_names(&self) -> Vec<String> {
        self.terms.iter().flat_map(Term::expanded_names).collect()
    }

    /// Fills categorical level sets from the union of values found in the
    /// given CSV files (sorted; the first level is the reference).
    pub fn resolve_levels<P: AsRef<Path>>(&mut self, files: &[P]) -> Result<()> {
        for term in &mut self.terms {
            let Term::Categorical { column, levels } = term else {
                continue;
            };
            let mut found = std::collections::BTreeSet::new();
            for f in files {
                let path = f.as_ref();
                let mut rdr = csv::Reader::from_path(path)?;
                let headers = rdr.headers()?.clone();
                let Some(idx) = headers.iter().position(|h| h == column) else {
                    continue;
                };
                for rec in rdr.records() {
                    let rec = rec?;
                    found.insert(rec[idx].trim().to_string());
                }
            }
            found.remove("");
            *levels = found.into_iter().collect();
        }
        Ok(())
    }
}

/// Maps sample roles onto CSV columns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Unit id column; row numbers are used when absent.
    pub id: Option<String>,
    pub time: Option<String>,
    pub event: Option<String>,
    pub weight: Option<String>,
    pub stratum: Option<String>,
    pub psu: Option<String>,
    pub model: Formula,
    pub propensity: Formula,
    pub cells: Vec<String>,
    #[serde(default)]
    pub allow_single_psu: bool,
}

fn parse_event(s: &str) -> Option<bool> {
    match s {
        "1" | "1.0" | "true" | "TRUE" | "True" => Some(true),
        "0" | "0.0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

struct Columns {
    index: HashMap<String, usize>,
    path: String,
}

impl Columns {
    fn get(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::MissingColumn {
            path: self.path.clone(),
            column: name.to_string(),
        })
    }

    fn opt(&self, name: &Option<String>) -> Result<Option<usize>> {
        name.as_deref().map(|n| self.get(n)).transpose()
    }
}

enum Resolved {
    Numeric(usize),
    Categorical(usize, Vec<String>),
}

fn resolve_terms(cols: &Columns, formula: &Formula) -> Result<Vec<Resolved>> {
    formula
        .terms
        .iter()
        .map(|t| match t {
            Term::Numeric(c) => Ok(Resolved::Numeric(cols.get(c)?)),
            Term::Categorical { column, levels } => {
                if levels.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "categorical term C({column}) has no resolved levels"
                    )));
                }
                Ok(Resolved::Categorical(cols.get(column)?, levels.clone()))
            }
        })
        .collect()
}

fn expand_row(rec: &csv::StringRecord, terms: &[Resolved], out: &mut Vec<f64>, problems: &mut Vec<String>) {
    for t in terms {
        match t {
            Resolved::Numeric(i) => match rec[*i].trim().parse::<f64>() {
                Ok(v) if v.is_finite() => out.push(v),
                Ok(v) => {
                    problems.push(format!("nonfinite covariate {v}"));
                    out.push(0.0)
                }
                Err(_) => {
                    problems.push(format!("covariate value `{}` is missing or not numeric", &rec[*i]));
                    out.push(0.0)
                }
            },
            Resolved::Categorical(i, levels) => {
                let v = rec[*i].trim();
                if !levels.iter().any(|l| l == v) {
                    problems.push(format!("unknown category `{v}`"));
                }
                out.extend(levels.iter().skip(1).map(|l| if l == v { 1.0 } else { 0.0 }));
            }
        }
    }
}

/// Reads and validates a sample; warnings (e.g. coerced cohort weights) are
/// returned alongside.
pub fn ingest_sample_with_warnings(path: &Path, schema: &Schema, kind: SampleKind) -> Result<(Sample, Vec<String>)> {
    let path_str = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path)?;
    let cols = Columns {
        index: rdr
            .headers()?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect(),
        path: path_str.clone(),
    };
    let id_col = cols.opt(&schema.id)?;
    let time_col = cols.opt(&schema.time)?;
    let event_col = cols.opt(&schema.event)?;
    let weight_col = cols.opt(&schema.weight)?;
    let stratum_col = cols.opt(&schema.stratum)?;
    let psu_col = cols.opt(&schema.psu)?;
    let model = resolve_terms(&cols, &schema.model)?;
    let prop = resolve_terms(&cols, &schema.propensity)?;
    let cell_cols: Vec<usize> = schema.cells.iter().map(|c| cols.get(c)).collect::<Result<_>>()?;

    let mut units = Vec::new();
    let mut issues = Vec::new();
    let mut coerced = 0usize;
    let mut seen = HashSet::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = row + 1;
        let id = id_col.map_or_else(|| row.to_string(), |i| rec[i].trim().to_string());
        let mut problems = Vec::new();
        if id.is_empty() {
            problems.push("missing id".to_string());
        } else if !seen.insert(id.clone()) {
            problems.push("duplicate id".to_string());
        }
        let mut number = |col: Option<usize>, what: &str, default: f64| -> f64 {
            let Some(i) = col else { return default };
            match rec[i].trim().parse::<f64>() {
                Ok(v) => v,
                Err(_) => {
                    problems.push(format!("{what} `{}` is missing or not numeric", &rec[i]));
                    default
                }
            }
        };
        let x = number(time_col, "time", 0.0);
        let mut w = number(weight_col, "weight", 1.0);
        let stratum = number(stratum_col, "stratum", 0.0);
        let psu = number(psu_col, "psu", row as f64);
        if !(x.is_finite() && x >= 0.0) {
            problems.push(format!("negative or nonfinite time {x}"));
        }
        if !(w.is_finite() && w > 0.0) {
            problems.push(format!("weight must be positive, got {w}"));
        }
        if stratum.fract() != 0.0 || psu.fract() != 0.0 {
            problems.push("stratum and psu ids must be integers".into());
        }
        let d = match event_col {
            None => false,
            Some(i) => parse_event(rec[i].trim()).unwrap_or_else(|| {
                problems.push(format!("event `{}` is not 0/1", &rec[i]));
                false
            }),
        };
        if kind == SampleKind::Cohort && w != 1.0 {
            coerced += 1;
            w = 1.0;
        }
        let mut z = Vec::new();
        expand_row(&rec, &model, &mut z, &mut problems);
        let mut z_star = Vec::new();
        expand_row(&rec, &prop, &mut z_star, &mut problems);
        let z0_star: Vec<String> = cell_cols.iter().map(|&i| rec[i].trim().to_string()).collect();
        if z0_star.iter().any(String::is_empty) {
            problems.push("missing post-stratum label".into());
        }
        if !problems.is_empty() {
            issues.push(RowIssue {
                row,
                id: id.clone(),
                reason: problems.join(", "),
            });
            continue;
        }
        units.push(Unit {
            id,
            z,
            z_star,
            z0_star,
            x,
            d,
            w,
            stratum: stratum as i64,
            psu: psu as i64,
        });
    }
    if !issues.is_empty() {
        return Err(Error::InvalidRows {
            path: path_str,
            rows: issues,
        });
    }
    let mut warnings = Vec::new();
    if coerced > 0 {
        warnings.push(format!(
            "{path_str}: {coerced} cohort weights differed from 1 and were set to 1"
        ));
    }
    let names = ColumnNames {
        z: schema.model.expanded_names(),
        z_star: schema.propensity.expanded_names(),
        cells: schema.cells.clone(),
    };
    let check = if schema.allow_single_psu {
        DesignCheck::AllowSinglePsu
    } else {
        DesignCheck::Strict
    };
    let sample = Sample::with_design_check(kind, names, units, check).map_err(|e| match e {
        Error::InvalidRows { rows, .. } => Error::InvalidRows {
            path: path_str.clone(),
            rows,
        },
        other => other,
    })?;
    Ok((sample, warnings))
}

/// Reads and validates a sample, logging any warnings.
pub fn ingest_sample(path: &Path, schema: &Schema, kind: SampleKind) -> Result<Sample> {
    let (sample, warnings) = ingest_sample_with_warnings(path, schema, kind)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(sample)
}

/// Writes a sample as CSV and returns the schema that reads it back.
pub fn write_sample_csv(sample: &Sample, path: &Path) -> Result<Schema> {
    let names = sample.names();
    let mut header: Vec<String> = ["id", "time", "event", "weight", "stratum", "psu"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(names.z.iter().cloned());
    // z* columns reuse a z column only when the values agree everywhere.
    let mut star_source = Vec::new();
    let mut star_names = Vec::new();
    for (k, name) in names.z_star.iter().enumerate() {
        let shared = names.z.iter().position(|n| n == name).filter(|&j| {
            sample.units().iter().all(|u| u.z[j].to_bits() == u.z_star[k].to_bits())
        });
        match shared {
            Some(j) => {
                star_source.push(None);
                star_names.push(names.z[j].clone());
            }
            None => {
                let mut col = name.clone();
                while header.contains(&col) {
                    col.push_str(".star");
                }
                header.push(col.clone());
                star_source.push(Some(k));
                star_names.push(col);
            }
        }
    }
    header.extend(names.cells.iter().cloned());

    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(&header)?;
    for u in sample.units() {
        let mut rec = vec![
            u.id.clone(),
            u.x.to_string(),
            (u.d as u8).to_string(),
            u.w.to_string(),
            u.stratum.to_string(),
            u.psu.to_string(),
        ];
        rec.extend(u.z.iter().map(f64::to_string));
        rec.extend(star_source.iter().flatten().map(|&k| u.z_star[k].to_string()));
        rec.extend(u.z0_star.iter().cloned());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(Schema {
        id: Some("id".into()),
        time: Some("time".into()),
        event: Some("event".into()),
        weight: Some("weight".into()),
        stratum: Some("stratum".into()),
        psu: Some("psu".into()),
        model: Formula {
            terms: names.z.iter().cloned().map(Term::Numeric).collect(),
        },
        propensity: Formula {
            terms: star_names.into_iter().map(Term::Numeric).collect(),
        },
        cells: names.cells.clone(),
        allow_single_psu: true,
    })
}

/// Piece of the composite hazard: constant `rate` on `[t0, t1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardInterval {
    pub t0: f64,
    pub t1: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrySummary {
    pub population_size: u64,
    pub event_cells: IndexMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonevent_cells: Option<IndexMap<String, u64>>,
    pub composite_hazard: Vec<HazardInterval>,
}

#[derive(Deserialize)]
struct RawRegistry {
    population_size: f64,
    event_cells: IndexMap<String, f64>,
    #[serde(default)]
    nonevent_cells: Option<IndexMap<String, f64>>,
    composite_hazard: Vec<HazardInterval>,
}

fn count(key: &str, v: f64) -> Result<u64> {
    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
        return Err(Error::Registry(format!(
            "count for cell `{key}` must be a nonnegative integer, got {v}"
        )));
    }
    Ok(v as u64)
}

impl RegistrySummary {
    pub fn new(
        population_size: u64,
        event_cells: IndexMap<String, u64>,
        nonevent_cells: Option<IndexMap<String, u64>>,
        composite_hazard: Vec<HazardInterval>,
    ) -> Result<RegistrySummary> {
        let reg = RegistrySummary {
            population_size,
            event_cells,
            nonevent_cells,
            composite_hazard,
        };
        reg.validate()?;
        Ok(reg)
    }

    fn validate(&self) -> Result<()> {
        if self.population_size == 0 {
            return Err(Error::Registry("population size must be positive".into()));
        }
        if self.event_cells.is_empty() {
            return Err(Error::Registry("no event cells".into()));
        }
        let m1 = self.events_total();
        if m1 > self.population_size {
            return Err(Error::Registry(format!(
                "event counts sum to {m1}, exceeding the population size {}",
                self.population_size
            )));
        }
        if let Some(m0) = &self.nonevent_cells {
            let total = m1 + m0.values().sum::<u64>();
            if total != self.population_size {
                return Err(Error::Registry(format!(
                    "event and non-event counts sum to {total}, population size is {}",
                    self.population_size
                )));
            }
        }
        let h = &self.composite_hazard;
        if h.is_empty() {
            return Err(Error::Registry("composite hazard table is empty".into()));
        }
        if h[0].t0 != 0.0 {
            return Err(Error::Registry(format!(
                "composite hazard must start at 0, starts at {}",
                h[0].t0
            )));
        }
        for (k, iv) in h.iter().enumerate() {
            if !(iv.t0.is_finite() && iv.t1.is_finite() && iv.t1 > iv.t0) {
                return Err(Error::Registry(format!("hazard interval {k} is empty or nonfinite")));
            }
            if !(iv.rate.is_finite() && iv.rate >= 0.0) {
                return Err(Error::Registry(format!("hazard interval {k} has invalid rate {}", iv.rate)));
            }
            if k > 0 {
                let prev = h[k - 1].t1;
                if iv.t0 < prev {
                    return Err(Error::Registry(format!(
                        "hazard intervals overlap: [{}, {}) and [{}, {})",
                        h[k - 1].t0,
                        prev,
                        iv.t0,
                        iv.t1
                    )));
                }
                if iv.t0 > prev {
                    return Err(Error::Registry(format!("hazard table has a gap between {prev} and {}", iv.t0)));
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<RegistrySummary> {
        let raw: RawRegistry = serde_json::from_str(text)?;
        let population_size = count("population_size", raw.population_size)?;
        let conv = |m: IndexMap<String, f64>| -> Result<IndexMap<String, u64>> {
            m.into_iter().map(|(k, v)| Ok((k.clone(), count(&k, v)?))).collect()
        };
        RegistrySummary::new(
            population_size,
            conv(raw.event_cells)?,
            raw.nonevent_cells.map(conv).transpose()?,
            raw.composite_hazard,
        )
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        f.write_all(self.to_json_string().as_bytes())?;
        Ok(())
    }

    /// M1: total registry events.
    pub fn events_total(&self) -> u64 {
        self.event_cells.values().sum()
    }

    /// End of the time range covered by the composite hazard.
    pub fn hazard_end(&self) -> f64 {
        self.composite_hazard.last().map_or(0.0, |h| h.t1)
    }

    /// Integral of the composite hazard over `[0, t]`; `None` past the table.
    pub fn cumulative_hazard(&self, t: f64) -> Option<f64> {
        if t > self.hazard_end() {
            return None;
        }
        let mut acc = 0.0;
        for iv in &self.composite_hazard {
            if t <= iv.t0 {
                break;
            }
            acc += iv.rate * (t.min(iv.t1) - iv.t0);
        }
        Some(acc)
    }

    /// Rate in effect on the open interval `(a, b)`, which must lie inside
    /// one table interval.
    pub(crate) fn rate_on(&self, a: f64, b: f64) -> f64 {
        let mid = 0.5 * (a + b);
        self.composite_hazard
            .iter()
            .find(|iv| mid >= iv.t0 && mid < iv.t1)
            .map_or(0.0, |iv| iv.rate)
    }
}

pub fn ingest_registry(path: &Path) -> Result<RegistrySummary> {
    let text = std::fs::read_to_string(path)?;
    RegistrySummary::from_json_str(&text)
}

/// Checks that every unit's post-stratum key is present in the registry.
pub fn check_cells(sample: &Sample, registry: &RegistrySummary, include_nonevents: bool) -> Result<()> {
    for u in sample.units() {
        let key = u.cell_key();
        let cells = if u.d || !include_nonevents {
            if !u.d {
                continue;
            }
            &registry.event_cells
        } else {
            registry.nonevent_cells.as_ref().ok_or_else(|| {
                Error::Registry("registry has no non-event cells".into())
            })?
        };
        if !cells.contains_key(&key) {
            return Err(Error::UnmatchedCell { id: u.id.clone(), key });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    fn survey_schema() -> Schema {
        Schema {
            id: Some("id".into()),
            time: Some("time".into()),
            event: Some("event".into()),
            weight: Some("w".into()),
            model: Formula::parse("z1").unwrap(),
            propensity: Formula::parse("z1").unwrap(),
            ..Schema::default()
        }
    }

    #[test]
    fn survey_weights_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.csv", "id,time,event,w,z1\na,1,0,10,0.5\nb,2,1,20,1.5\nc,3,0,30,2\n");
        let s = ingest_sample(&p, &survey_schema(), SampleKind::Survey).unwrap();
        assert_eq!(s.total_weight(), 60.0);
        assert_eq!(s.design().strata.len(), 1);
    }

    #[test]
    fn negative_time_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.csv", "id,time,event,w,z1\na,1,0,10,0.5\nbad,-1,1,20,1.5\nc,3,0,30,2\n");
        let err = ingest_sample(&p, &survey_schema(), SampleKind::Survey).unwrap_err();
        match err {
            Error::InvalidRows { rows, .. } => {
                assert_eq!(rows.len(), 1);
                assert_eq!(rows[0].id, "bad");
                assert_eq!(rows[0].row, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cohort_weights_are_coerced_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.csv", "id,time,event,w,z1\na,1,0,2.0,0.5\nb,2,1,2.0,1.5\n");
        let (s, warnings) = ingest_sample_with_warnings(&p, &survey_schema(), SampleKind::Cohort).unwrap();
        assert!(s.units().iter().all(|u| u.w == 1.0));
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn missing_column_and_missing_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.csv", "id,time,event,z1\na,1,0,0.5\nb,2,1,1\n");
        assert!(matches!(
            ingest_sample(&p, &survey_schema(), SampleKind::Survey),
            Err(Error::MissingColumn { .. })
        ));
        let p = write(&dir, "t.csv", "id,time,event,w,z1\na,1,0,1,\nb,2,1,1,1\n");
        assert!(matches!(
            ingest_sample(&p, &survey_schema(), SampleKind::Survey),
            Err(Error::InvalidRows { .. })
        ));
    }

    #[test]
    fn survey_single_psu_stratum_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "s.csv", "id,time,event,w,z1,h,c\na,1,0,1,0,1,1\nb,1,0,1,0,1,2\nc,1,0,1,0,2,3\n");
        let mut schema = survey_schema();
        schema.stratum = Some("h".into());
        schema.psu = Some("c".into());
        assert!(matches!(
            ingest_sample(&p, &schema, SampleKind::Survey),
            Err(Error::SinglePsu { .. })
        ));
        schema.allow_single_psu = true;
        assert!(ingest_sample(&p, &schema, SampleKind::Survey).is_ok());
    }

    #[test]
    fn categorical_expansion() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.csv", "id,time,event,race\na,1,0,W\nb,2,1,B\nc,2,1,H\n");
        let mut f = Formula::parse("C(race)").unwrap();
        f.resolve_levels(&[&p]).unwrap();
        assert_eq!(f.expanded_names(), vec!["race[H]", "race[W]"]);
        let schema = Schema {
            time: Some("time".into()),
            event: Some("event".into()),
            propensity: f,
            ..Schema::default()
        };
        let s = ingest_sample(&p, &schema, SampleKind::Cohort).unwrap();
        assert_eq!(s.units()[0].z_star, vec![0.0, 1.0]);
        assert_eq!(s.units()[1].z_star, vec![0.0, 0.0]);
    }

    #[test]
    fn registry_examples() {
        let ok = r#"{"population_size": 200000, "event_cells": {"g1": 50, "g2": 50},
                     "composite_hazard": [{"t0": 0, "t1": 15, "rate": 0.005}]}"#;
        let r = RegistrySummary::from_json_str(ok).unwrap();
        assert_eq!(r.events_total(), 100);
        assert!((r.cumulative_hazard(10.0).unwrap() - 0.05).abs() < 1e-15);
        assert!(r.cumulative_hazard(16.0).is_none());

        let overlap = r#"{"population_size": 200000, "event_cells": {"g1": 50},
            "composite_hazard": [{"t0": 0, "t1": 5, "rate": 0.01}, {"t0": 4, "t1": 10, "rate": 0.01}]}"#;
        let e = RegistrySummary::from_json_str(overlap).unwrap_err();
        assert!(e.to_string().contains("overlap"), "{e}");

        let inconsistent = r#"{"population_size": 200000, "event_cells": {"g1": 50, "g2": 50},
            "nonevent_cells": {"g1": 100000, "g2": 99901},
            "composite_hazard": [{"t0": 0, "t1": 15, "rate": 0.005}]}"#;
        assert!(matches!(
            RegistrySummary::from_json_str(inconsistent),
            Err(Error::Registry(_))
        ));

        let negative = r#"{"population_size": 10, "event_cells": {"g1": -1},
            "composite_hazard": [{"t0": 0, "t1": 15, "rate": 0.005}]}"#;
        assert!(matches!(RegistrySummary::from_json_str(negative), Err(Error::Registry(_))));
    }

    #[test]
    fn unmatched_cell_is_reported() {
        let names = ColumnNames {
            cells: vec!["g".into()],
            ..ColumnNames::default()
        };
        let unit = |id: &str, g: &str, d| Unit {
            id: id.into(),
            z: vec![],
            z_star: vec![],
            z0_star: vec![g.into()],
            x: 1.0,
            d,
            w: 1.0,
            stratum: 0,
            psu: 0,
        };
        let s = Sample::new(SampleKind::Cohort, names, vec![unit("a", "1", true), unit("b", "3", true)]).unwrap();
        let r = RegistrySummary::from_json_str(
            r#"{"population_size": 100, "event_cells": {"1": 5, "2": 5},
                "composite_hazard": [{"t0": 0, "t1": 15, "rate": 0.005}]}"#,
        )
        .unwrap();
        assert!(matches!(check_cells(&s, &r, false), Err(Error::UnmatchedCell { .. })));
    }
}
