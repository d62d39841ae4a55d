//! Influence deviates `w_i * d(theta)/d(w_i)` for every base weight in the
//! cohort and the survey, and the stratified Taylor linearization variance
//! built from them.
//!
//! The chain is differentiated analytically: Cox score and baselines, then
//! poststratification factors, then the kernel shares (including the
//! bandwidth's dependence on the propensity coefficients), then the
//! propensity estimating equation. The scale factor `a` is treated as fixed.
//! [`fd_deviates`] recomputes the same quantities by re-fitting.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RegistrySummary;
use crate::error::{Error, Result};
use crate::linalg::{dot, from_rows, inverse_spd, matvec};
use crate::pipeline::{fit_estimator, weigh, Arm, Estimator, EstimatorFit, PipelineConfig, StudyData, Target, Weighting};
use crate::survival::{par_segments, BaselineMethod, RiskModelFit};

/// Deviates for one target, one value per cohort and per survey unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviateSet {
    pub target: Target,
    pub value: f64,
    pub cohort: Vec<f64>,
    pub survey: Vec<f64>,
}

/// Per-unit pieces of the Cox linearization shared by all targets.
struct CoxPieces {
    /// `I^{-1} U_m` for every unit of the fitted arm (normalized scale).
    dbeta: Vec<Vec<f64>>,
    rr: Vec<f64>,
}

/// Breslow cumulative sums at event times: `Lambda`, `sum dN/S0^2`,
/// `sum dN S1/S0^2`.
struct BreslowSums {
    times: Vec<f64>,
    lambda: Vec<f64>,
    inv_sq: Vec<f64>,
    c: Vec<Vec<f64>>,
}

impl BreslowSums {
    fn new(fit: &RiskModelFit) -> BreslowSums {
        let p = fit.beta.len();
        let (mut l, mut q) = (0.0, 0.0);
        let mut c = vec![0.0; p];
        let mut out = BreslowSums {
            times: fit.event_times.clone(),
            lambda: Vec::new(),
            inv_sq: Vec::new(),
            c: Vec::new(),
        };
        for k in 0..fit.event_times.len() {
            let (dn, s0) = (fit.dn_hat[k], fit.s0[k]);
            l += dn / s0;
            q += dn / (s0 * s0);
            for (a, s1) in c.iter_mut().zip(&fit.s1[k]) {
                *a += dn * s1 / (s0 * s0);
            }
            out.lambda.push(l);
            out.inv_sq.push(q);
            out.c.push(c.clone());
        }
        out
    }

    /// Number of event times `<= t`.
    fn upto(&self, t: f64) -> usize {
        self.times.partition_point(|&x| x <= t)
    }
}

fn cox_pieces(arm: &Arm, fit: &RiskModelFit, sums: &BreslowSums) -> Result<CoxPieces> {
    let p = fit.beta.len();
    let info_inv = if p == 0 {
        nalgebra::DMatrix::zeros(0, 0)
    } else {
        inverse_spd(&from_rows(&fit.information)).ok_or(Error::Singular("Cox information"))?
    };
    let rr: Vec<f64> = arm.z.rows().map(|z| dot(z, &fit.beta).exp()).collect();
    let dbeta = (0..arm.len())
        .into_par_iter()
        .map(|m| {
            let z = arm.z.row(m);
            let k = sums.upto(arm.x[m]);
            let mut u = vec![0.0; p];
            if k > 0 {
                let (lam, c) = (sums.lambda[k - 1], &sums.c[k - 1]);
                for a in 0..p {
                    u[a] -= rr[m] * (z[a] * lam - c[a]);
                }
            }
            if arm.d[m] {
                let e = k - 1;
                for a in 0..p {
                    u[a] += z[a] - fit.s1[e][a] / fit.s0[e];
                }
            }
            matvec(&info_inv, &u)
        })
        .collect();
    Ok(CoxPieces { dbeta, rr })
}

/// Cumulative PAR integrals at segment ends: `G = int lambda*/S0`,
/// `H = int R lambda*/S0`, `B = int R E lambda*` and the baseline itself.
struct ParSums {
    ends: Vec<f64>,
    g: Vec<f64>,
    h: Vec<f64>,
    b: Vec<Vec<f64>>,
    lambda: Vec<f64>,
    support_end: f64,
}

impl ParSums {
    fn new(fit: &RiskModelFit, registry: &RegistrySummary) -> ParSums {
        let p = fit.beta.len();
        let (segments, support_end) = par_segments(fit, registry);
        let mut out = ParSums {
            ends: vec![0.0],
            g: vec![0.0],
            h: vec![0.0],
            b: vec![vec![0.0; p]],
            lambda: vec![0.0],
            support_end,
        };
        let (mut g, mut h, mut l) = (0.0, 0.0, 0.0);
        let mut b = vec![0.0; p];
        for s in segments {
            if s.rate > 0.0 {
                let len = s.rate * (s.t1 - s.t0);
                let s0 = fit.knot_s0[s.knot];
                let r = fit.ratio(s.knot);
                g += len / s0;
                h += r * len / s0;
                l += r * len;
                for (a, s1) in b.iter_mut().zip(&fit.knot_s1[s.knot]) {
                    *a += r * len * s1 / s0;
                }
            }
            out.ends.push(s.t1);
            out.g.push(g);
            out.h.push(h);
            out.lambda.push(l);
            out.b.push(b.clone());
        }
        out
    }

    /// Linear interpolation of a cumulative series at `t`.
    fn at(&self, series: &[f64], t: f64) -> f64 {
        let k = self.ends.partition_point(|&x| x <= t);
        if k == 0 {
            return 0.0;
        }
        if k == self.ends.len() {
            return series[k - 1];
        }
        let (t0, t1) = (self.ends[k - 1], self.ends[k]);
        series[k - 1] + (series[k] - series[k - 1]) * (t - t0) / (t1 - t0)
    }

    fn at_vec(&self, t: f64, p: usize) -> Vec<f64> {
        (0..p)
            .map(|a| {
                let col: Vec<f64> = self.b.iter().map(|v| v[a]).collect();
                self.at(&col, t)
            })
            .collect()
    }
}

/// Derivative of one target with respect to each fitted weight, as
/// `alpha_m + c' dbeta_m` divided by the weight total.
fn weight_gradient(
    target: &Target,
    arm: &Arm,
    fit: &RiskModelFit,
    pieces: &CoxPieces,
    breslow: &BreslowSums,
    par: Option<&ParSums>,
) -> Result<Vec<f64>> {
    let p = fit.beta.len();
    let n = arm.len();
    // (alpha, c) for the cumulative hazard part.
    let hazard = |t: f64, method: BaselineMethod| -> Result<(Vec<f64>, Vec<f64>, f64)> {
        match method {
            BaselineMethod::Breslow => {
                let k = breslow.upto(t);
                let lam = if k == 0 { 0.0 } else { breslow.lambda[k - 1] };
                let b: Vec<f64> = if k == 0 { vec![0.0; p] } else { breslow.c[k - 1].iter().map(|v| -v).collect() };
                let alpha = (0..n)
                    .map(|m| {
                        let x = arm.x[m];
                        let km = breslow.upto(t.min(x));
                        let mut a = 0.0;
                        if arm.d[m] && x <= t {
                            a += 1.0 / fit.s0[breslow.upto(x) - 1];
                        }
                        if km > 0 {
                            a -= pieces.rr[m] * breslow.inv_sq[km - 1];
                        }
                        a
                    })
                    .collect();
                Ok((alpha, b, lam))
            }
            BaselineMethod::Par => {
                let ps = par.ok_or_else(|| Error::Registry("PAR baseline needs a registry summary".into()))?;
                if t > ps.support_end {
                    return Err(Error::ParSupport {
                        t,
                        reason: format!("deviates are available up to {}", ps.support_end),
                    });
                }
                let lam = ps.at(&ps.lambda, t);
                let b: Vec<f64> = ps.at_vec(t, p).iter().map(|v| -v).collect();
                let alpha = (0..n)
                    .map(|m| {
                        let s = t.min(arm.x[m]);
                        ps.at(&ps.g, s) - pieces.rr[m] * ps.at(&ps.h, s)
                    })
                    .collect();
                Ok((alpha, b, lam))
            }
        }
    };
    let (alpha, c) = match target {
        Target::Beta { index } => {
            let mut c = vec![0.0; p];
            *c.get_mut(*index).ok_or_else(|| Error::InvalidArgument(format!("no coefficient {index}")))? = 1.0;
            (vec![0.0; n], c)
        }
        Target::CumHazard { t, method } => {
            let (a, b, _) = hazard(*t, *method)?;
            (a, b)
        }
        Target::Risk { z, t, method } => {
            if z.len() != p {
                return Err(Error::InvalidArgument("risk profile has the wrong length".into()));
            }
            let (a, b, lam) = hazard(*t, *method)?;
            let rr = dot(z, &fit.beta).exp();
            let k = (-lam * rr).exp() * rr;
            let c = b.iter().zip(z).map(|(bv, zv)| k * (bv + lam * zv)).collect();
            (a.iter().map(|v| k * v).collect(), c)
        }
    };
    let total = fit.weight_total;
    Ok((0..n)
        .map(|m| (alpha[m] + dot(&c, &pieces.dbeta[m])) / total)
        .collect())
}

/// Back-propagates gradients on final weights through poststratification to
/// gradients on KW weights.
fn through_poststrat(g: &[f64], ws: &crate::pseudoweight::WeightSet) -> Vec<f64> {
    let mut gbar = vec![0.0; ws.groups.len()];
    for (l, grp) in ws.unit_group.iter().enumerate() {
        if let Some(k) = grp {
            gbar[*k] += g[l] * ws.final_weights[l];
        }
    }
    for (k, grp) in ws.groups.iter().enumerate() {
        gbar[k] /= grp.registry_count;
    }
    g.iter()
        .enumerate()
        .map(|(l, &gl)| match ws.unit_group[l] {
            Some(k) => ws.post_factor[l] * (gl - gbar[k]),
            None => gl,
        })
        .collect()
}

/// Closed-form deviates for each target.
pub fn influence_deviates(
    data: &StudyData,
    weighting: Option<&Weighting>,
    fit: &EstimatorFit,
    targets: &[Target],
) -> Result<Vec<DeviateSet>> {
    let arm = match fit.estimator {
        Estimator::Survey => &data.survey,
        _ => &data.cohort,
    };
    let sums = BreslowSums::new(&fit.fit);
    let pieces = cox_pieces(arm, &fit.fit, &sums)?;
    let par = data.registry.as_ref().map(|r| ParSums::new(&fit.fit, r));
    let grads: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| weight_gradient(t, arm, &fit.fit, &pieces, &sums, par.as_ref()))
        .collect::<Result<_>>()?;
    let values: Vec<f64> = targets.iter().map(|t| fit.value(t)).collect::<Result<_>>()?;
    let (n_c, n_s) = (data.cohort.len(), data.survey.len());
    let (cohort, survey): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match fit.estimator {
        Estimator::Survey => (
            vec![vec![0.0; n_c]; targets.len()],
            grads.iter().map(|g| g.iter().zip(&data.survey.w).map(|(a, w)| a * w).collect()).collect(),
        ),
        Estimator::Naive => (
            grads.iter().map(|g| g.iter().zip(&data.cohort.w).map(|(a, w)| a * w).collect()).collect(),
            vec![vec![0.0; n_s]; targets.len()],
        ),
        _ => {
            let wt = weighting.ok_or_else(|| Error::InvalidArgument("kernel deviates need the weighting state".into()))?;
            let ws = fit.weight_set.as_ref().expect("kernel estimators carry a weight set");
            let h: Vec<Vec<f64>> = grads.iter().map(|g| through_poststrat(g, ws)).collect();
            kernel_chain(data, wt, &h)?
        }
    };
    Ok(targets
        .iter()
        .zip(values)
        .zip(cohort.into_iter().zip(survey))
        .map(|((t, value), (c, s))| DeviateSet {
            target: t.clone(),
            value,
            cohort: c,
            survey: s,
        })
        .collect())
}

/// Deviates of cohort and survey base weights given gradients `h` on the KW
/// weights, one row per target.
fn kernel_chain(data: &StudyData, wt: &Weighting, h: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let ws = &data.survey.w;
    let wc = &data.cohort.w;
    let shares = &wt.shares;
    let h_refs: Vec<&[f64]> = h.iter().map(Vec::as_slice).collect();
    let big_h = shares.project(&h_refs);
    let weighted: Vec<Vec<f64>> = big_h.iter().map(|hj| hj.iter().zip(ws).map(|(a, b)| a * b).collect()).collect();
    let w_refs: Vec<&[f64]> = weighted.iter().map(Vec::as_slice).collect();
    let back = shares.back_project(&w_refs);

    let sens = wt.sensitivity(ws);
    let j_inv = inverse_spd(&from_rows(&wt.propensity.information)).ok_or(Error::Singular("propensity information"))?;
    let a = wt.propensity.scale;
    let p = wt.x_cohort.p();

    let mut cohort = Vec::with_capacity(h.len());
    let mut survey = Vec::with_capacity(h.len());
    for t in 0..h.len() {
        let mut g_gamma = vec![0.0; p];
        for (l, &hl) in h[t].iter().enumerate() {
            for k in 0..p {
                g_gamma[k] += hl * sens.cohort[l][k];
            }
        }
        for j in 0..ws.len() {
            for k in 0..p {
                g_gamma[k] -= weighted[t][j] * sens.survey[j][k];
            }
        }
        let v = matvec(&j_inv, &g_gamma);
        let c: Vec<f64> = (0..wc.len())
            .map(|l| {
                let pl = crate::propensity::PropensityFit::probability(wt.propensity.q_cohort[l]);
                h[t][l] * wt.kw[l] - back[t][l] + wc[l] * (1.0 - pl) * dot(wt.x_cohort.row(l), &v)
            })
            .collect();
        let s: Vec<f64> = (0..ws.len())
            .map(|j| {
                let pj = crate::propensity::PropensityFit::probability(wt.propensity.q_survey[j]);
                weighted[t][j] - a * ws[j] * pj * dot(wt.x_survey.row(j), &v)
            })
            .collect();
        cohort.push(c);
        survey.push(s);
    }
    Ok((cohort, survey))
}

/// Deviates by central finite differences: each base weight is scaled by
/// `1 +/- eps` and the whole pipeline refit (scale factor held fixed).
pub fn fd_deviates(
    data: &StudyData,
    cfg: &PipelineConfig,
    estimator: Estimator,
    targets: &[Target],
    eps: f64,
) -> Result<Vec<DeviateSet>> {
    let evaluate = |d: &StudyData| -> Result<Vec<f64>> {
        let fit = fit_estimator(d, cfg, estimator, None)?;
        targets.iter().map(|t| fit.value(t)).collect()
    };
    let base = evaluate(data)?;
    let perturb = |cohort_side: bool, i: usize| -> Result<Vec<f64>> {
        let mut vals = Vec::with_capacity(2);
        for sign in [1.0, -1.0] {
            let mut d = data.clone();
            let w = if cohort_side { &mut d.cohort.w } else { &mut d.survey.w };
            w[i] *= 1.0 + sign * eps;
            vals.push(evaluate(&d)?);
        }
        Ok(vals[0].iter().zip(&vals[1]).map(|(a, b)| (a - b) / (2.0 * eps)).collect())
    };
    let side = |cohort_side: bool, n: usize, active: bool| -> Result<Vec<Vec<f64>>> {
        if !active {
            return Ok(vec![vec![0.0; targets.len()]; n]);
        }
        (0..n).into_par_iter().map(|i| perturb(cohort_side, i)).collect()
    };
    let cohort = side(true, data.cohort.len(), estimator != Estimator::Survey)?;
    let survey = side(false, data.survey.len(), estimator != Estimator::Naive)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(t, target)| DeviateSet {
            target: target.clone(),
            value: base[t],
            cohort: cohort.iter().map(|r| r[t]).collect(),
            survey: survey.iter().map(|r| r[t]).collect(),
        })
        .collect())
}

/// Convenience: weighting (when needed), fit and closed-form deviates.
pub fn fit_with_deviates(
    data: &StudyData,
    cfg: &PipelineConfig,
    estimator: Estimator,
    targets: &[Target],
) -> Result<(EstimatorFit, Vec<DeviateSet>)> {
    let wt = if estimator.uses_kernel() { Some(weigh(data, cfg)?) } else { None };
    let fit = fit_estimator(data, cfg, estimator, wt.as_ref())?;
    let dev = influence_deviates(data, wt.as_ref(), &fit, targets)?;
    Ok((fit, dev))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinglePsu {
    #[default]
    Error,
    /// Single-PSU strata contribute their squared deviation from the mean
    /// PSU total of their sample.
    Centered,
}

/// PSU membership of every cohort and survey unit. The cohort is one extra
/// stratum in which each unit is its own PSU.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedDesign {
    survey_psu: Vec<usize>,
    /// Stratum label and PSU count of each survey stratum, in order.
    strata: Vec<(i64, usize)>,
    /// Stratum index of each survey PSU.
    psu_stratum: Vec<usize>,
    n_cohort: usize,
}

impl CombinedDesign {
    pub fn new(survey_design: &[(i64, i64)], n_cohort: usize) -> CombinedDesign {
        let mut psus: BTreeMap<(i64, i64), usize> = BTreeMap::new();
        for &key in survey_design {
            let next = psus.len();
            psus.entry(key).or_insert(next);
        }
        // Renumber PSUs in (stratum, psu) order so the fold order is fixed.
        let mut remap = vec![0; psus.len()];
        let mut strata: Vec<(i64, usize)> = Vec::new();
        let mut psu_stratum = Vec::with_capacity(psus.len());
        for (new, (&(h, _), &old)) in psus.iter().enumerate() {
            remap[old] = new;
            if strata.last().map(|s| s.0) != Some(h) {
                strata.push((h, 0));
            }
            strata.last_mut().unwrap().1 += 1;
            psu_stratum.push(strata.len() - 1);
        }
        let survey_psu = survey_design.iter().map(|k| remap[psus[k]]).collect();
        CombinedDesign {
            survey_psu,
            strata,
            psu_stratum,
            n_cohort,
        }
    }

    pub fn from_data(data: &StudyData) -> CombinedDesign {
        CombinedDesign::new(&data.survey.design, data.cohort.len())
    }
}

/// `sum_h u_h/(u_h-1) sum_i (v_hi - vbar_h)^2` over strata given as lists of
/// PSU totals.
pub fn tl_from_psu_totals(strata: &[Vec<f64>], mode: SinglePsu) -> Result<f64> {
    let all: Vec<f64> = strata.iter().flatten().copied().collect();
    let grand = if all.is_empty() { 0.0 } else { all.iter().sum::<f64>() / all.len() as f64 };
    let mut var = 0.0;
    for (h, v) in strata.iter().enumerate() {
        let u = v.len();
        match u {
            0 => {}
            1 => match mode {
                SinglePsu::Error => return Err(Error::SinglePsu { stratum: h.to_string() }),
                SinglePsu::Centered => var += (v[0] - grand).powi(2),
            },
            _ => {
                let mean = v.iter().sum::<f64>() / u as f64;
                let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
                var += u as f64 / (u as f64 - 1.0) * ss;
            }
        }
    }
    Ok(var)
}

/// Taylor linearization variance of one target.
pub fn tl_variance(dev: &DeviateSet, design: &CombinedDesign, mode: SinglePsu) -> Result<f64> {
    if dev.cohort.len() != design.n_cohort || dev.survey.len() != design.survey_psu.len() {
        return Err(Error::InvalidArgument("deviates do not match the design".into()));
    }
    let mut totals = vec![0.0; design.psu_stratum.len()];
    for (&k, &v) in design.survey_psu.iter().zip(&dev.survey) {
        totals[k] += v;
    }
    let mut strata: Vec<Vec<f64>> = vec![Vec::new(); design.strata.len()];
    for (k, &h) in design.psu_stratum.iter().enumerate() {
        strata[h].push(totals[k]);
    }
    let survey = tl_from_psu_totals(&strata, mode).map_err(|e| match e {
        Error::SinglePsu { stratum } => Error::SinglePsu {
            stratum: format!("survey {}", design.strata[stratum.parse::<usize>().unwrap()].0),
        },
        other => other,
    })?;
    let cohort = if dev.cohort.is_empty() {
        0.0
    } else {
        tl_from_psu_totals(std::slice::from_ref(&dev.cohort), mode)?
    };
    Ok(survey + cohort)
}

/// Wald interval on the complementary log-log scale.
pub fn cloglog_ci(r: f64, se: f64, z: f64) -> (f64, f64) {
    if r <= 0.0 {
        return (0.0, 0.0);
    }
    if r >= 1.0 {
        return (1.0, 1.0);
    }
    let eta = (-(-r).ln_1p()).ln();
    let deta = se / ((1.0 - r) * -(-r).ln_1p());
    let back = |e: f64| -(-e.exp()).exp_m1();
    (back(eta - z * deta), back(eta + z * deta))
}
