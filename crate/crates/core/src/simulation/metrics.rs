//! Monte Carlo summaries and their CSV layouts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative bias (%), empirical variance, MSE and the ratio of the mean
/// linearization variance to the empirical variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub rb_pct: f64,
    pub variance: f64,
    pub mse: f64,
    pub tl_ratio: f64,
}

impl Metric {
    pub const MISSING: Metric = Metric {
        rb_pct: f64::NAN,
        variance: f64::NAN,
        mse: f64::NAN,
        tl_ratio: f64::NAN,
    };
}

/// Summarizes estimates against a fixed truth. `tl` holds per-replicate
/// linearization variances when available.
pub fn summarize(estimates: &[f64], truth: f64, tl: Option<&[f64]>) -> Metric {
    summarize_paired(estimates, &vec![truth; estimates.len()], tl)
}

/// As [`summarize`] with a truth per replicate.
pub fn summarize_paired(estimates: &[f64], truth: &[f64], tl: Option<&[f64]>) -> Metric {
    let b = estimates.len();
    if b == 0 || estimates.iter().any(|v| v.is_nan()) {
        return Metric::MISSING;
    }
    let bf = b as f64;
    let mean = estimates.iter().sum::<f64>() / bf;
    let rb_pct = estimates.iter().zip(truth).map(|(e, t)| (e - t) / t).sum::<f64>() / bf * 100.0;
    let variance = if b > 1 {
        estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (bf - 1.0)
    } else {
        f64::NAN
    };
    let mse = estimates.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / bf;
    let tl_ratio = match tl {
        Some(v) if v.len() == b => v.iter().sum::<f64>() / bf / variance,
        _ => f64::NAN,
    };
    Metric {
        rb_pct,
        variance,
        mse,
        tl_ratio,
    }
}

/// Log hazard ratio summaries for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub scenario: String,
    pub estimator: String,
    pub beta: [Metric; 3],
}

/// Absolute risk summaries for one estimator and baseline method at the
/// low, medium and high profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub scenario: String,
    pub method: String,
    pub risk: [Metric; 3],
}

/// Baseline cumulative hazard summary at one time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaBiasRow {
    pub scenario: String,
    pub method: String,
    pub t: f64,
    pub metric: Metric,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub table1: Vec<Table1Row>,
    pub table2: Vec<Table2Row>,
    pub lambda0: Vec<LambdaBiasRow>,
}

impl MetricsTable {
    pub fn extend(&mut self, other: MetricsTable) {
        self.table1.extend(other.table1);
        self.table2.extend(other.table2);
        self.lambda0.extend(other.lambda0);
    }

    pub fn table2_row(&self, scenario: &str, method: &str) -> Option<&Table2Row> {
        self.table2.iter().find(|r| r.scenario == scenario && r.method == method)
    }

    pub fn table1_row(&self, scenario: &str, estimator: &str) -> Option<&Table1Row> {
        self.table1.iter().find(|r| r.scenario == scenario && r.estimator == estimator)
    }
}

pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NA".to_string()
    } else {
        // Shortest representation that parses back to the same bits.
        format!("{v:?}")
    }
}

pub fn parse_value(s: &str) -> Result<f64> {
    if s == "NA" {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::InvalidArgument(format!("bad number `{s}` in metrics table")))
}

const BETAS: [&str; 3] = ["beta1", "beta2", "beta3"];
const RISKS: [&str; 3] = ["r_low", "r_med", "r_high"];

fn wide_header(prefixes: &[&str], names: &[&str]) -> Vec<String> {
    prefixes
        .iter()
        .flat_map(|p| names.iter().map(move |n| format!("{p}_{n}")))
        .collect()
}

fn metric_fields(m: &[Metric; 3], with_ratio: bool) -> Vec<String> {
    let mut out: Vec<String> = m.iter().map(|x| format_value(x.rb_pct)).collect();
    out.extend(m.iter().map(|x| format_value(x.variance)));
    if with_ratio {
        out.extend(m.iter().map(|x| format_value(x.tl_ratio)));
    }
    out.extend(m.iter().map(|x| format_value(x.mse)));
    out
}

fn parse_metrics(fields: &[&str], with_ratio: bool) -> Result<[Metric; 3]> {
    let v: Vec<f64> = fields.iter().map(|s| parse_value(s)).collect::<Result<_>>()?;
    let mut out = [Metric::MISSING; 3];
    for (k, m) in out.iter_mut().enumerate() {
        m.rb_pct = v[k];
        m.variance = v[3 + k];
        if with_ratio {
            m.tl_ratio = v[6 + k];
            m.mse = v[9 + k];
        } else {
            m.mse = v[6 + k];
        }
    }
    Ok(out)
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_table1(rows: &[Table1Row], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["scenario".to_string(), "estimator".to_string()];
    header.extend(wide_header(&["rb_pct", "variance", "mse"], &BETAS));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.scenario.clone(), r.estimator.clone()];
        rec.extend(metric_fields(&r.beta, false));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table2(rows: &[Table2Row], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["scenario".to_string(), "method".to_string()];
    header.extend(wide_header(&["rb_pct", "variance", "tl_ratio", "mse"], &RISKS));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.scenario.clone(), r.method.clone()];
        rec.extend(metric_fields(&r.risk, true));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lambda0(rows: &[LambdaBiasRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["scenario", "method", "t", "rb_pct", "variance", "mse"])?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.method.clone(),
            format_value(r.t),
            format_value(r.metric.rb_pct),
            format_value(r.metric.variance),
            format_value(r.metric.mse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn records(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records().map(|x| x.map_err(Error::from)).collect()
}

pub fn read_table1(path: &Path) -> Result<Vec<Table1Row>> {
    records(path)?
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.iter().collect();
            Ok(Table1Row {
                scenario: f[0].to_string(),
                estimator: f[1].to_string(),
                beta: parse_metrics(&f[2..], false)?,
            })
        })
        .collect()
}

pub fn read_table2(path: &Path) -> Result<Vec<Table2Row>> {
    records(path)?
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.iter().collect();
            Ok(Table2Row {
                scenario: f[0].to_string(),
                method: f[1].to_string(),
                risk: parse_metrics(&f[2..], true)?,
            })
        })
        .collect()
}

pub fn read_lambda0(path: &Path) -> Result<Vec<LambdaBiasRow>> {
    records(path)?
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.iter().collect();
            Ok(LambdaBiasRow {
                scenario: f[0].to_string(),
                method: f[1].to_string(),
                t: parse_value(f[2])?,
                metric: Metric {
                    rb_pct: parse_value(f[3])?,
                    variance: parse_value(f[4])?,
                    mse: parse_value(f[5])?,
                    tl_ratio: f64::NAN,
                },
            })
        })
        .collect()
}
