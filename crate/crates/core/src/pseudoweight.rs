//! Kernel-weighted pseudoweights (survey weights distributed to cohort units
//! by Gaussian-kernel proximity of propensity linear predictors) and
//! registry poststratification.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{RegistrySummary, Sample};
use crate::error::{Error, Result};
use crate::linalg::{quantile_position, quantile_sorted, Covariates};

/// Silverman bandwidth, or the zero-spread sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Positive(f64),
    /// Every cohort linear predictor is equal; shares fall back to uniform.
    Degenerate,
}

impl Bandwidth {
    pub fn value(self) -> Option<f64> {
        match self {
            Bandwidth::Positive(h) => Some(h),
            Bandwidth::Degenerate => None,
        }
    }
}

/// Which spread measure the rule of thumb picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadTerm {
    Sd,
    Iqr,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Silverman {
    pub sd: f64,
    pub iqr: f64,
    pub term: SpreadTerm,
    pub bandwidth: Bandwidth,
}

/// `0.9 * min(sd, iqr / 1.34) * n^(-1/5)`. A zero term is skipped when the
/// other is positive.
pub fn silverman_from_parts(sd: f64, iqr: f64, n: usize) -> (Bandwidth, SpreadTerm) {
    let r = iqr / 1.34;
    let (spread, term) = if sd > 0.0 && (r <= 0.0 || sd <= r) {
        (sd, SpreadTerm::Sd)
    } else if r > 0.0 {
        (r, SpreadTerm::Iqr)
    } else {
        return (Bandwidth::Degenerate, SpreadTerm::None);
    };
    (Bandwidth::Positive(0.9 * spread * (n as f64).powf(-0.2)), term)
}

pub fn silverman(q: &[f64]) -> Result<Silverman> {
    let n = q.len();
    if n < 2 {
        return Err(Error::InvalidArgument("bandwidth needs at least two cohort units".into()));
    }
    let mut sorted = q.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let sd = crate::linalg::sample_sd(q);
    let (bandwidth, term) = silverman_from_parts(sd, iqr, n);
    Ok(Silverman { sd, iqr, term, bandwidth })
}

pub fn silverman_bandwidth(q: &[f64]) -> Result<Bandwidth> {
    Ok(silverman(q)?.bandwidth)
}

/// Gradient of the bandwidth with respect to the propensity coefficients,
/// where `q = x * gamma` row by row.
pub fn silverman_gradient(q: &[f64], x: &Covariates, rule: &Silverman) -> Vec<f64> {
    let (n, p) = (q.len(), x.p());
    let scale = 0.9 * (n as f64).powf(-0.2);
    match rule.term {
        SpreadTerm::None => vec![0.0; p],
        SpreadTerm::Sd => {
            let qbar = crate::linalg::mean(q);
            let mut xbar = vec![0.0; p];
            for row in x.rows() {
                for (m, v) in xbar.iter_mut().zip(row) {
                    *m += v;
                }
            }
            xbar.iter_mut().for_each(|m| *m /= n as f64);
            let mut g = vec![0.0; p];
            for (row, &qi) in x.rows().zip(q) {
                let dq = qi - qbar;
                for k in 0..p {
                    g[k] += dq * (row[k] - xbar[k]);
                }
            }
            let denom = (n - 1) as f64 * rule.sd;
            g.iter().map(|v| scale * v / denom).collect()
        }
        SpreadTerm::Iqr => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| q[a].total_cmp(&q[b]));
            let dquant = |prob: f64| -> Vec<f64> {
                let (lo, frac) = quantile_position(n, prob);
                let a = x.row(order[lo]);
                if frac == 0.0 || lo + 1 >= n {
                    return a.to_vec();
                }
                let b = x.row(order[lo + 1]);
                a.iter().zip(b).map(|(u, v)| u + frac * (v - u)).collect()
            };
            let (q3, q1) = (dquant(0.75), dquant(0.25));
            q3.iter().zip(&q1).map(|(a, b)| scale * (a - b) / 1.34).collect()
        }
    }
}

const DENSE_LIMIT: usize = 32 << 20;
const CHUNK: usize = 256;

/// Kernel share matrix `s[l, j]`: the fraction of survey unit `j`'s weight
/// given to cohort unit `l`. Cohort base weights `c` act as replicate counts.
/// Stored dense (survey-major) when it fits, otherwise recomputed on demand.
#[derive(Debug, Clone)]
pub struct KernelShares {
    q_c: Vec<f64>,
    q_s: Vec<f64>,
    c: Vec<f64>,
    c_total: f64,
    bandwidth: Bandwidth,
    log_norm: Vec<f64>,
    dense: Option<Vec<f64>>,
}

/// Derivatives of the share matrix with respect to the propensity
/// coefficients, contracted the two ways the influence chain needs:
/// `cohort[l] = sum_j w_j s_lj k_lj` and `survey[j] = sum_l s_lj k_lj`, where
/// `k_lj` is the gradient of the log-kernel.
#[derive(Debug, Clone)]
pub struct GammaSensitivity {
    pub cohort: Vec<Vec<f64>>,
    pub survey: Vec<Vec<f64>>,
}

impl KernelShares {
    pub fn new(q_c: &[f64], q_s: &[f64], c: &[f64], bandwidth: Bandwidth) -> KernelShares {
        assert_eq!(q_c.len(), c.len());
        let (n_c, n_s) = (q_c.len(), q_s.len());
        let mut shares = KernelShares {
            q_c: q_c.to_vec(),
            q_s: q_s.to_vec(),
            c: c.to_vec(),
            c_total: c.iter().sum(),
            bandwidth,
            log_norm: Vec::new(),
            dense: None,
        };
        let Bandwidth::Positive(h) = bandwidth else {
            return shares;
        };
        shares.log_norm = (0..n_s)
            .into_par_iter()
            .map(|j| {
                let qj = q_s[j];
                let mut m = f64::NEG_INFINITY;
                for (&ql, &cl) in q_c.iter().zip(c) {
                    if cl > 0.0 {
                        m = m.max(log_kernel(ql, qj, h));
                    }
                }
                let s: f64 = q_c
                    .iter()
                    .zip(c)
                    .map(|(&ql, &cl)| cl * (log_kernel(ql, qj, h) - m).exp())
                    .sum();
                m + s.ln()
            })
            .collect();
        if n_c.saturating_mul(n_s) <= DENSE_LIMIT {
            let mut data = vec![0.0; n_c * n_s];
            data.par_chunks_mut(n_c.max(1)).enumerate().for_each(|(j, row)| {
                shares.fill(j, 0, row);
            });
            shares.dense = Some(data);
        }
        shares
    }

    pub fn n_cohort(&self) -> usize {
        self.q_c.len()
    }

    pub fn n_survey(&self) -> usize {
        self.q_s.len()
    }

    pub fn bandwidth(&self) -> Bandwidth {
        self.bandwidth
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }

    /// Computes shares of survey unit `j` for cohort units `l0..l0+out.len()`.
    fn fill(&self, j: usize, l0: usize, out: &mut [f64]) {
        match self.bandwidth {
            Bandwidth::Degenerate => {
                for (o, &cl) in out.iter_mut().zip(&self.c[l0..]) {
                    *o = cl / self.c_total;
                }
            }
            Bandwidth::Positive(h) => {
                let (qj, lj) = (self.q_s[j], self.log_norm[j]);
                for ((o, &ql), &cl) in out.iter_mut().zip(&self.q_c[l0..]).zip(&self.c[l0..]) {
                    *o = cl * (log_kernel(ql, qj, h) - lj).exp();
                }
            }
        }
    }

    fn with_block<R>(&self, j: usize, l0: usize, l1: usize, buf: &mut [f64], f: impl FnOnce(&[f64]) -> R) -> R {
        match &self.dense {
            Some(data) => {
                let n_c = self.q_c.len();
                f(&data[j * n_c + l0..j * n_c + l1])
            }
            None => {
                let out = &mut buf[..l1 - l0];
                self.fill(j, l0, out);
                f(out)
            }
        }
    }

    /// Shares of survey unit `j` across all cohort units.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.q_c.len()];
        self.fill(j, 0, &mut out);
        out
    }

    /// `out[t][j] = sum_l s_lj v[t][l]` for each input vector.
    pub fn project(&self, v: &[&[f64]]) -> Vec<Vec<f64>> {
        let n_c = self.q_c.len();
        let per_j: Vec<Vec<f64>> = (0..self.q_s.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; n_c],
                |buf, j| {
                    self.with_block(j, 0, n_c, buf, |s| {
                        v.iter().map(|vt| s.iter().zip(vt.iter()).map(|(a, b)| a * b).sum()).collect()
                    })
                },
            )
            .collect();
        (0..v.len()).map(|t| per_j.iter().map(|r| r[t]).collect()).collect()
    }

    /// `out[t][l] = sum_j s_lj v[t][j]` for each input vector.
    pub fn back_project(&self, v: &[&[f64]]) -> Vec<Vec<f64>> {
        let n_c = self.q_c.len();
        let n_s = self.q_s.len();
        let chunks: Vec<Vec<Vec<f64>>> = (0..n_c.div_ceil(CHUNK))
            .into_par_iter()
            .map(|k| {
                let (l0, l1) = (k * CHUNK, ((k + 1) * CHUNK).min(n_c));
                let mut acc = vec![vec![0.0; l1 - l0]; v.len()];
                let mut buf = vec![0.0; l1 - l0];
                for j in 0..n_s {
                    self.with_block(j, l0, l1, &mut buf, |s| {
                        for (a, vt) in acc.iter_mut().zip(v) {
                            let coef = vt[j];
                            if coef != 0.0 {
                                for (x, &sv) in a.iter_mut().zip(s) {
                                    *x += coef * sv;
                                }
                            }
                        }
                    });
                }
                acc
            })
            .collect();
        (0..v.len())
            .map(|t| chunks.iter().flat_map(|c| c[t].iter().copied()).collect())
            .collect()
    }

    /// KW pseudoweights for the given survey weights.
    pub fn kw_weights(&self, w_s: &[f64]) -> Vec<f64> {
        self.back_project(&[w_s]).pop().unwrap()
    }

    /// See [`GammaSensitivity`]. `x_c`, `x_s` are the propensity design rows
    /// (with intercept) and `dh` the bandwidth gradient.
    pub fn gamma_sensitivity(&self, x_c: &Covariates, x_s: &Covariates, w_s: &[f64], dh: &[f64]) -> GammaSensitivity {
        let p = x_c.p();
        let (n_c, n_s) = (self.q_c.len(), self.q_s.len());
        let Bandwidth::Positive(h) = self.bandwidth else {
            return GammaSensitivity {
                cohort: vec![vec![0.0; p]; n_c],
                survey: vec![vec![0.0; p]; n_s],
            };
        };
        let combine = |x_self: &[f64], s1: f64, sx: &[f64], su2: f64, sign: f64| -> Vec<f64> {
            (0..p)
                .map(|k| -sign * (x_self[k] * s1 - sx[k]) / h + dh[k] * su2 / h)
                .collect()
        };
        // Survey side: sum over cohort units, with u = (q_l - q_j) / h.
        let survey: Vec<Vec<f64>> = (0..n_s)
            .into_par_iter()
            .map_init(
                || vec![0.0; n_c],
                |buf, j| {
                    let qj = self.q_s[j];
                    self.with_block(j, 0, n_c, buf, |s| {
                        let (mut s1, mut su2) = (0.0, 0.0);
                        let mut sx = vec![0.0; p];
                        for (l, &slj) in s.iter().enumerate() {
                            let u = (self.q_c[l] - qj) / h;
                            let su = slj * u;
                            s1 += su;
                            su2 += su * u;
                            for (a, xv) in sx.iter_mut().zip(x_c.row(l)) {
                                *a += su * xv;
                            }
                        }
                        // sum_l s u (x_l - x_j) = sx - x_j s1
                        combine(x_s.row(j), s1, &sx, su2, -1.0)
                    })
                },
            )
            .collect();
        let chunks: Vec<Vec<Vec<f64>>> = (0..n_c.div_ceil(CHUNK))
            .into_par_iter()
            .map(|k| {
                let (l0, l1) = (k * CHUNK, ((k + 1) * CHUNK).min(n_c));
                let len = l1 - l0;
                let mut t1 = vec![0.0; len];
                let mut tu2 = vec![0.0; len];
                let mut tx = vec![vec![0.0; p]; len];
                let mut buf = vec![0.0; len];
                for j in 0..n_s {
                    let (qj, wj, xj) = (self.q_s[j], w_s[j], x_s.row(j));
                    self.with_block(j, l0, l1, &mut buf, |s| {
                        for (i, &slj) in s.iter().enumerate() {
                            if slj == 0.0 {
                                continue;
                            }
                            let u = (self.q_c[l0 + i] - qj) / h;
                            let wsu = wj * slj * u;
                            t1[i] += wsu;
                            tu2[i] += wsu * u;
                            for (a, xv) in tx[i].iter_mut().zip(xj) {
                                *a += wsu * xv;
                            }
                        }
                    });
                }
                // sum_j w s u (x_l - x_j) = x_l t1 - tx
                (0..len)
                    .map(|i| combine(x_c.row(l0 + i), t1[i], &tx[i], tu2[i], 1.0))
                    .collect()
            })
            .collect();
        GammaSensitivity {
            cohort: chunks.into_iter().flatten().collect(),
            survey,
        }
    }
}

#[inline]
fn log_kernel(ql: f64, qj: f64, h: f64) -> f64 {
    let u = (ql - qj) / h;
    -0.5 * u * u
}

/// KW pseudoweights with unit cohort base weights.
pub fn kw_weights(q_cohort: &[f64], q_survey: &[f64], w_survey: &[f64], h: Bandwidth) -> Vec<f64> {
    KernelShares::new(q_cohort, q_survey, &vec![1.0; q_cohort.len()], h).kw_weights(w_survey)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightVariant {
    KwOnly,
    PostRg,
    PostPop,
}

impl std::str::FromStr for WeightVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<WeightVariant> {
        match s {
            "none" | "kw" => Ok(WeightVariant::KwOnly),
            "rg" => Ok(WeightVariant::PostRg),
            "pop" => Ok(WeightVariant::PostPop),
            _ => Err(Error::InvalidArgument(format!("poststratification must be rg, pop or none, got `{s}`"))),
        }
    }
}

/// One calibration group: a registry cell, or several when empty cells were
/// collapsed into a neighbour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGroup {
    pub keys: Vec<String>,
    pub events: bool,
    pub registry_count: f64,
    pub kw_sum: f64,
    pub units: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub kw: Vec<f64>,
    pub post_factor: Vec<f64>,
    pub final_weights: Vec<f64>,
    pub bandwidth: Bandwidth,
    pub variant: WeightVariant,
    pub groups: Vec<CellGroup>,
    /// Calibration group of each cohort unit; `None` when its factor is 1.
    pub unit_group: Vec<Option<usize>>,
}

impl WeightSet {
    pub fn kw_only(kw: Vec<f64>, bandwidth: Bandwidth) -> WeightSet {
        let n = kw.len();
        WeightSet {
            final_weights: kw.clone(),
            kw,
            post_factor: vec![1.0; n],
            bandwidth,
            variant: WeightVariant::KwOnly,
            groups: Vec::new(),
            unit_group: vec![None; n],
        }
    }
}

fn build_groups(
    cells: &IndexMap<String, u64>,
    events: bool,
    unit_keys: &[(usize, &str)],
    kw: &[f64],
    collapse: bool,
) -> Result<(Vec<CellGroup>, Vec<(usize, usize)>)> {
    let pos: IndexMap<&str, usize> = cells.keys().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cells.len()];
    for &(l, key) in unit_keys {
        let &i = pos.get(key).ok_or_else(|| Error::UnmatchedCell {
            id: format!("#{}", l + 1),
            key: key.to_string(),
        })?;
        members[i].push(l);
    }
    let counts: Vec<u64> = cells.values().copied().collect();
    let label = if events { "event" } else { "non-event" };
    // Each registry cell maps to the group that calibrates it.
    let mut target: Vec<Option<usize>> = vec![None; cells.len()];
    let nonempty: Vec<usize> = (0..cells.len()).filter(|&i| !members[i].is_empty()).collect();
    for i in 0..cells.len() {
        if !members[i].is_empty() {
            if counts[i] == 0 {
                return Err(Error::EmptyCell {
                    cell: cells.get_index(i).unwrap().0.clone(),
                    reason: format!("registry {label} count is 0 but the cohort has {} such units", members[i].len()),
                });
            }
            target[i] = Some(i);
        } else if counts[i] > 0 {
            let key = cells.get_index(i).unwrap().0.clone();
            if !collapse {
                return Err(Error::EmptyCell {
                    cell: key,
                    reason: format!("no cohort {label} units for a registry count of {}", counts[i]),
                });
            }
            let neighbour = nonempty
                .iter()
                .rev()
                .find(|&&k| k < i)
                .or_else(|| nonempty.iter().find(|&&k| k > i))
                .copied()
                .ok_or_else(|| Error::EmptyCell {
                    cell: key.clone(),
                    reason: "no nonempty cell to collapse into".into(),
                })?;
            log::warn!(
                "collapsing empty {label} cell `{key}` into `{}`",
                cells.get_index(neighbour).unwrap().0
            );
            target[i] = Some(neighbour);
        }
    }
    let mut groups = Vec::new();
    let mut group_of = vec![usize::MAX; cells.len()];
    for &i in &nonempty {
        group_of[i] = groups.len();
        let kw_sum: f64 = members[i].iter().map(|&l| kw[l]).sum();
        groups.push(CellGroup {
            keys: vec![cells.get_index(i).unwrap().0.clone()],
            events,
            registry_count: counts[i] as f64,
            kw_sum,
            units: members[i].len(),
            factor: 0.0,
        });
    }
    for i in 0..cells.len() {
        if let Some(t) = target[i] {
            if t != i {
                let g = &mut groups[group_of[t]];
                g.keys.push(cells.get_index(i).unwrap().0.clone());
                g.registry_count += counts[i] as f64;
            }
        }
    }
    for g in &mut groups {
        g.factor = g.registry_count / g.kw_sum;
    }
    let assignment = nonempty
        .iter()
        .flat_map(|&i| members[i].iter().map(move |&l| (l, i)))
        .map(|(l, i)| (l, group_of[i]))
        .collect();
    Ok((groups, assignment))
}

/// Poststratifies KW weights to registry counts. `keys[l]` is the cohort
/// unit's cell key and `events[l]` its event flag.
pub fn poststratify_arrays(
    kw: &[f64],
    keys: &[String],
    events: &[bool],
    registry: &RegistrySummary,
    variant: WeightVariant,
    collapse: bool,
    bandwidth: Bandwidth,
) -> Result<WeightSet> {
    let mut set = WeightSet::kw_only(kw.to_vec(), bandwidth);
    set.variant = variant;
    if variant == WeightVariant::KwOnly {
        return Ok(set);
    }
    let pick = |ev: bool| -> Vec<(usize, &str)> {
        keys.iter()
            .zip(events)
            .enumerate()
            .filter(|(_, (_, &d))| d == ev)
            .map(|(l, (k, _))| (l, k.as_str()))
            .collect()
    };
    let mut passes = vec![(true, &registry.event_cells)];
    if variant == WeightVariant::PostPop {
        let m0 = registry
            .nonevent_cells
            .as_ref()
            .ok_or_else(|| Error::Registry("population poststratification needs non-event cells".into()))?;
        passes.push((false, m0));
    }
    for (ev, cells) in passes {
        let (groups, assignment) = build_groups(cells, ev, &pick(ev), kw, collapse)?;
        let offset = set.groups.len();
        for (l, g) in assignment {
            set.unit_group[l] = Some(offset + g);
            set.post_factor[l] = groups[g].factor;
        }
        set.groups.extend(groups);
    }
    for l in 0..kw.len() {
        set.final_weights[l] = set.post_factor[l] * kw[l];
    }
    Ok(set)
}

pub fn poststratify(
    kw: &[f64],
    cohort: &Sample,
    registry: &RegistrySummary,
    variant: WeightVariant,
    collapse: bool,
    bandwidth: Bandwidth,
) -> Result<WeightSet> {
    let keys: Vec<String> = cohort.units().iter().map(|u| u.cell_key()).collect();
    poststratify_arrays(kw, &keys, &cohort.events(), registry, variant, collapse, bandwidth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub covariate: String,
    pub survey_mean: f64,
    pub cohort_mean: f64,
    pub unweighted_cohort_mean: f64,
    pub std_diff: f64,
    pub unweighted_std_diff: f64,
    pub flagged: bool,
}

fn weighted_moments(x: &[f64], w: &[f64]) -> (f64, f64) {
    let tw: f64 = w.iter().sum();
    let m = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / tw;
    let v = x.iter().zip(w).map(|(a, b)| b * (a - m).powi(2)).sum::<f64>() / tw;
    (m, v)
}

fn std_diff(a: (f64, f64), b: (f64, f64)) -> f64 {
    let pooled = ((a.1 + b.1) / 2.0).sqrt();
    if a.0 == b.0 {
        0.0
    } else if pooled == 0.0 {
        f64::INFINITY.copysign(a.0 - b.0)
    } else {
        (a.0 - b.0) / pooled
    }
}

/// Weighted means and standardized differences (pooled weighted SD) of the
/// named covariates; differences beyond 0.1 in magnitude are flagged.
pub fn balance_diagnostics(
    cohort: &Sample,
    cohort_w: &[f64],
    survey: &Sample,
    covariates: &[&str],
) -> Result<Vec<BalanceRow>> {
    let ones = vec![1.0; cohort.len()];
    let sw = survey.weights();
    covariates
        .iter()
        .map(|&name| {
            let missing = |which: &str| Error::InvalidArgument(format!("covariate `{name}` is absent from the {which}"));
            let xc = cohort.covariate(name).ok_or_else(|| missing("cohort"))?;
            let xs = survey.covariate(name).ok_or_else(|| missing("survey"))?;
            let s = weighted_moments(&xs, &sw);
            let c = weighted_moments(&xc, cohort_w);
            let u = weighted_moments(&xc, &ones);
            let d = std_diff(c, s);
            Ok(BalanceRow {
                covariate: name.to_string(),
                survey_mean: s.0,
                cohort_mean: c.0,
                unweighted_cohort_mean: u.0,
                std_diff: d,
                unweighted_std_diff: std_diff(u, s),
                flagged: d.abs() > 0.1,
            })
        })
        .collect()
}
