//! Weighted Cox regression (Breslow ties), Breslow and PAR baseline
//! cumulative hazards, and absolute risk.
//!
//! Risk-set sums are normalized by the total weight; every quantity reported
//! here is a ratio, so the normalizer cancels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{HazardInterval, RegistrySummary, Sample};
use crate::error::{Error, Result};
use crate::linalg::{dot, to_rows, Covariates};
use crate::optim::{maximize, Evaluation, NewtonOptions};

pub fn default_options() -> NewtonOptions {
    NewtonOptions::new(1e-8, 50)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskModelFit {
    pub beta: Vec<f64>,
    pub information: Vec<Vec<f64>>,
    pub iterations: usize,
    pub score_norm: f64,
    pub weight_total: f64,
    /// Distinct event times, increasing.
    pub event_times: Vec<f64>,
    pub s0: Vec<f64>,
    pub s1: Vec<Vec<f64>>,
    pub s0_free: Vec<f64>,
    pub dn_hat: Vec<f64>,
    /// Distinct observed times (events and censorings), increasing, with
    /// risk-set sums over `{x >= knot}`.
    pub knot_times: Vec<f64>,
    pub knot_s0: Vec<f64>,
    pub knot_s0_free: Vec<f64>,
    pub knot_s1: Vec<Vec<f64>>,
}

/// Indices sorted by time, grouped by distinct time.
struct TimeGroups {
    order: Vec<usize>,
    /// `(time, start, end)` into `order`, increasing in time.
    groups: Vec<(f64, usize, usize)>,
}

impl TimeGroups {
    fn new(x: &[f64]) -> TimeGroups {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let mut groups = Vec::new();
        let mut start = 0;
        for k in 1..=order.len() {
            if k == order.len() || x[order[k]] != x[order[start]] {
                groups.push((x[order[start]], start, k));
                start = k;
            }
        }
        TimeGroups { order, groups }
    }
}

struct Sweep {
    value: f64,
    score: Vec<f64>,
    info: DMatrix<f64>,
}

/// One reverse-time pass at `beta`; `knots` receives risk-set sums at each
/// distinct time when requested.
fn sweep(
    z: &Covariates,
    d: &[bool],
    v: &[f64],
    tg: &TimeGroups,
    beta: &[f64],
    mut knots: Option<&mut Vec<(f64, f64, Vec<f64>, f64)>>,
) -> Sweep {
    let p = z.p();
    let eta = z.linear_predictor(beta);
    let c = eta.iter().fold(f64::NEG_INFINITY, |m, &e| m.max(e));
    let c = if c.is_finite() { c } else { 0.0 };
    let mut s0 = 0.0;
    let mut s0_free = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; p * p];
    let mut value = 0.0;
    let mut score = vec![0.0; p];
    let mut info = vec![0.0; p * p];
    for &(_, a, b) in tg.groups.iter().rev() {
        let mut dn = 0.0;
        for &i in &tg.order[a..b] {
            let r = v[i] * (eta[i] - c).exp();
            let zi = z.row(i);
            s0 += r;
            s0_free += v[i];
            for k in 0..p {
                s1[k] += r * zi[k];
                for m in 0..=k {
                    s2[k * p + m] += r * zi[k] * zi[m];
                }
            }
            if d[i] {
                dn += v[i];
                value += v[i] * eta[i];
                for k in 0..p {
                    score[k] += v[i] * zi[k];
                }
            }
        }
        if dn > 0.0 {
            value -= dn * (s0.ln() + c);
            for k in 0..p {
                let ek = s1[k] / s0;
                score[k] -= dn * ek;
                for m in 0..=k {
                    info[k * p + m] += dn * (s2[k * p + m] / s0 - ek * s1[m] / s0);
                }
            }
        }
        if let Some(out) = knots.as_deref_mut() {
            let scale = c.exp();
            out.push((s0 * scale, s0_free, s1.iter().map(|s| s * scale).collect(), dn));
        }
    }
    let info = DMatrix::from_fn(p, p, |k, m| if m <= k { info[k * p + m] } else { info[m * p + k] });
    Sweep { value, score, info }
}

fn check_inputs(z: &Covariates, x: &[f64], d: &[bool], w: &[f64]) -> Result<()> {
    if z.n() != x.len() || x.len() != d.len() || d.len() != w.len() {
        return Err(Error::InvalidArgument("Cox inputs have different lengths".into()));
    }
    if w.iter().any(|&wi| !(wi.is_finite() && wi > 0.0)) {
        return Err(Error::InvalidArgument("Cox weights must be positive".into()));
    }
    if !d.iter().any(|&e| e) {
        return Err(Error::NoEvents);
    }
    Ok(())
}

fn assemble(
    z: &Covariates,
    x: &[f64],
    d: &[bool],
    w: &[f64],
    beta: Vec<f64>,
    iterations: usize,
) -> RiskModelFit {
    let total: f64 = w.iter().sum();
    let v: Vec<f64> = w.iter().map(|wi| wi / total).collect();
    let tg = TimeGroups::new(x);
    let mut knots = Vec::with_capacity(tg.groups.len());
    let s = sweep(z, d, &v, &tg, &beta, Some(&mut knots));
    knots.reverse();
    let mut fit = RiskModelFit {
        score_norm: crate::linalg::norm_inf(&s.score),
        information: to_rows(&s.info),
        beta,
        iterations,
        weight_total: total,
        event_times: Vec::new(),
        s0: Vec::new(),
        s1: Vec::new(),
        s0_free: Vec::new(),
        dn_hat: Vec::new(),
        knot_times: tg.groups.iter().map(|g| g.0).collect(),
        knot_s0: Vec::with_capacity(knots.len()),
        knot_s0_free: Vec::with_capacity(knots.len()),
        knot_s1: Vec::with_capacity(knots.len()),
    };
    for (k, (s0, s0f, s1, dn)) in knots.into_iter().enumerate() {
        if dn > 0.0 {
            fit.event_times.push(fit.knot_times[k]);
            fit.s0.push(s0);
            fit.s0_free.push(s0f);
            fit.s1.push(s1.clone());
            fit.dn_hat.push(dn);
        }
        fit.knot_s0.push(s0);
        fit.knot_s0_free.push(s0f);
        fit.knot_s1.push(s1);
    }
    fit
}

/// Risk-set summaries at a fixed coefficient vector, without fitting.
pub fn cox_at_beta(z: &Covariates, x: &[f64], d: &[bool], w: &[f64], beta: &[f64]) -> Result<RiskModelFit> {
    check_inputs(z, x, d, w)?;
    Ok(assemble(z, x, d, w, beta.to_vec(), 0))
}

/// Solves the weighted Cox score equation by damped Newton from zero.
pub fn fit_weighted_cox_arrays(
    z: &Covariates,
    x: &[f64],
    d: &[bool],
    w: &[f64],
    opts: &NewtonOptions,
) -> Result<RiskModelFit> {
    check_inputs(z, x, d, w)?;
    let total: f64 = w.iter().sum();
    let v: Vec<f64> = w.iter().map(|wi| wi / total).collect();
    let tg = TimeGroups::new(x);
    let out = maximize("Cox model", vec![0.0; z.p()], opts, |beta| {
        let s = sweep(z, d, &v, &tg, beta, None);
        Ok(Evaluation {
            value: s.value,
            score: s.score,
            information: s.info,
        })
    })?;
    Ok(assemble(z, x, d, w, out.x, out.iterations))
}

pub fn fit_weighted_cox(sample: &Sample, weights: &[f64], opts: &NewtonOptions) -> Result<RiskModelFit> {
    fit_weighted_cox_arrays(&sample.z_matrix(), &sample.times(), &sample.events(), weights, opts)
}

impl RiskModelFit {
    /// Index of the first knot at or after `t`.
    pub(crate) fn knot_at_or_after(&self, t: f64) -> usize {
        self.knot_times.partition_point(|&k| k < t)
    }

    /// `S0_free / S0_beta` on the risk set of knot `k`.
    pub(crate) fn ratio(&self, k: usize) -> f64 {
        self.knot_s0_free[k] / self.knot_s0[k]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Breslow,
    Par,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<BaselineMethod> {
        match s {
            "breslow" => Ok(BaselineMethod::Breslow),
            "par" => Ok(BaselineMethod::Par),
            _ => Err(Error::InvalidArgument(format!("baseline must be breslow or par, got `{s}`"))),
        }
    }
}

/// Baseline cumulative hazard. Breslow is a right-continuous step function
/// over `knots`; PAR is piecewise linear between `knots`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCumHazard {
    pub method: BaselineMethod,
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    /// PAR only: attributable risk on the risk set of each observed time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ar: Option<Vec<f64>>,
    /// PAR only: last time at which the cohort risk set and the registry
    /// table both exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_end: Option<f64>,
    /// PAR only: registry rates, used to extend past `support_end` when the
    /// rate there is zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composite: Option<Vec<HazardInterval>>,
}

impl BaselineCumHazard {
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
        }
        match self.method {
            BaselineMethod::Breslow => {
                let k = self.knots.partition_point(|&x| x <= t);
                Ok(if k == 0 { 0.0 } else { self.values[k - 1] })
            }
            BaselineMethod::Par => {
                let end = self.support_end.unwrap_or(0.0);
                if t > end {
                    let composite = self.composite.as_deref().unwrap_or(&[]);
                    let hazard_end = composite.last().map_or(0.0, |h| h.t1);
                    if t > hazard_end {
                        return Err(Error::ParSupport {
                            t,
                            reason: format!("registry hazard table ends at {hazard_end}"),
                        });
                    }
                    let extra: f64 = composite
                        .iter()
                        .map(|h| h.rate * (t.min(h.t1) - end.max(h.t0)).max(0.0))
                        .sum();
                    if extra > 0.0 {
                        return Err(Error::ParSupport {
                            t,
                            reason: format!("the cohort risk set is empty after {end} while the registry rate is positive"),
                        });
                    }
                    return Ok(*self.values.last().unwrap_or(&0.0));
                }
                let k = self.knots.partition_point(|&x| x <= t);
                if k == 0 {
                    return Ok(0.0);
                }
                if k == self.knots.len() {
                    return Ok(self.values[k - 1]);
                }
                let (t0, t1) = (self.knots[k - 1], self.knots[k]);
                let (v0, v1) = (self.values[k - 1], self.values[k]);
                Ok(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
            }
        }
    }
}

pub fn breslow_baseline(fit: &RiskModelFit) -> BaselineCumHazard {
    let mut acc = 0.0;
    let values = fit
        .dn_hat
        .iter()
        .zip(&fit.s0)
        .map(|(dn, s0)| {
            acc += dn / s0;
            acc
        })
        .collect();
    BaselineCumHazard {
        method: BaselineMethod::Breslow,
        knots: fit.event_times.clone(),
        values,
        ar: None,
        support_end: None,
        composite: None,
    }
}

/// Interval `(t0, t1]` on which both the registry rate and the cohort risk
/// set (that of knot `knot`) are constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParSegment {
    pub t0: f64,
    pub t1: f64,
    pub rate: f64,
    pub knot: usize,
}

/// Segments covering `[0, support_end]`.
pub fn par_segments(fit: &RiskModelFit, registry: &RegistrySummary) -> (Vec<ParSegment>, f64) {
    let max_x = fit.knot_times.last().copied().unwrap_or(0.0);
    let end = max_x.min(registry.hazard_end());
    let mut points: Vec<f64> = std::iter::once(0.0)
        .chain(fit.knot_times.iter().copied())
        .chain(registry.composite_hazard.iter().flat_map(|h| [h.t0, h.t1]))
        .filter(|&t| t >= 0.0 && t <= end)
        .chain(std::iter::once(end))
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let segments = points
        .windows(2)
        .map(|w| ParSegment {
            t0: w[0],
            t1: w[1],
            rate: registry.rate_on(w[0], w[1]),
            knot: fit.knot_at_or_after(w[1]),
        })
        .collect();
    (segments, end)
}

/// PAR baseline: the registry composite hazard deflated by one minus the
/// attributable risk on each risk set, integrated exactly.
pub fn par_baseline(fit: &RiskModelFit, registry: &RegistrySummary) -> Result<BaselineCumHazard> {
    let (segments, end) = par_segments(fit, registry);
    let mut knots = vec![0.0];
    let mut values = vec![0.0];
    let mut acc = 0.0;
    for s in &segments {
        if s.rate > 0.0 && !(fit.knot_s0[s.knot] > 0.0) {
            return Err(Error::ParSupport {
                t: s.t1,
                reason: "weighted risk-set sum is zero where the registry rate is positive".into(),
            });
        }
        if s.rate > 0.0 {
            acc += fit.ratio(s.knot) * s.rate * (s.t1 - s.t0);
        }
        knots.push(s.t1);
        values.push(acc);
    }
    let ar = (0..fit.knot_times.len()).map(|k| 1.0 - fit.ratio(k)).collect();
    Ok(BaselineCumHazard {
        method: BaselineMethod::Par,
        knots,
        values,
        ar: Some(ar),
        support_end: Some(end),
        composite: Some(registry.composite_hazard.clone()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub z: Vec<f64>,
    pub t: f64,
    pub r_hat: f64,
    pub rr_hat: f64,
    pub cum_hazard: f64,
    pub se: f64,
    pub ci: (f64, f64),
}

/// `1 - exp(-Lambda0(t) * exp(beta' z))`; standard error left at zero.
pub fn absolute_risk(beta: &[f64], baseline: &BaselineCumHazard, z: &[f64], t: f64) -> Result<RiskEstimate> {
    if beta.len() != z.len() {
        return Err(Error::InvalidArgument(format!(
            "profile has {} covariates, model has {}",
            z.len(),
            beta.len()
        )));
    }
    let lambda = baseline.eval(t)?;
    let rr = dot(beta, z).exp();
    let r = -(-lambda * rr).exp_m1();
    Ok(RiskEstimate {
        z: z.to_vec(),
        t,
        r_hat: r,
        rr_hat: rr,
        cum_hazard: lambda,
        se: 0.0,
        ci: (r, r),
    })
}

/// Finite-population targets: unit-weight Cox fit and Breslow baseline.
pub fn compute_fp_truth(fp: &Sample, opts: &NewtonOptions) -> Result<(Vec<f64>, BaselineCumHazard)> {
    let fit = fit_weighted_cox(fp, &vec![1.0; fp.len()], opts)?;
    let base = breslow_baseline(&fit);
    Ok((fit.beta, base))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Covariates, Vec<f64>, Vec<bool>) {
        let z = Covariates::new(4, 1, vec![1.0, 0.0, 1.0, 0.0]);
        (z, vec![1.0, 2.0, 3.0, 4.0], vec![true, true, false, false])
    }

    fn registry(rate: f64, end: f64) -> RegistrySummary {
        RegistrySummary::new(
            1000,
            [("a".to_string(), 10)].into_iter().collect(),
            None,
            vec![HazardInterval { t0: 0.0, t1: end, rate }],
        )
        .unwrap()
    }

    #[test]
    fn four_unit_closed_form() {
        let (z, x, d) = toy();
        let fit = fit_weighted_cox_arrays(&z, &x, &d, &[1.0; 4], &NewtonOptions::new(1e-12, 50)).unwrap();
        assert!((fit.beta[0] - 2f64.sqrt().ln()).abs() < 1e-10, "{fit:?}");
        assert!(fit.score_norm < 1e-8);
    }

    #[test]
    fn constant_weights_do_not_matter() {
        let (z, x, d) = toy();
        let a = fit_weighted_cox_arrays(&z, &x, &d, &[1.0; 4], &default_options()).unwrap();
        let b = fit_weighted_cox_arrays(&z, &x, &d, &[7.5; 4], &default_options()).unwrap();
        assert!((a.beta[0] - b.beta[0]).abs() < 1e-12);
        let (ba, bb) = (breslow_baseline(&a), breslow_baseline(&b));
        for (u, v) in ba.values.iter().zip(&bb.values) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn null_model_breslow_is_nelson_aalen() {
        let z = Covariates::new(3, 0, vec![]);
        let fit = fit_weighted_cox_arrays(&z, &[1.0, 2.0, 3.0], &[true, true, false], &[1.0; 3], &default_options())
            .unwrap();
        let base = breslow_baseline(&fit);
        assert_eq!(base.eval(0.5).unwrap(), 0.0);
        assert!((base.eval(2.0).unwrap() - (1.0 / 3.0 + 0.5)).abs() < 1e-12);
        assert!((base.eval(2.5).unwrap() - (1.0 / 3.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn weighted_breslow_hand_evaluation() {
        let z = Covariates::new(5, 1, vec![0.5, -1.0, 2.0, 0.0, 1.0]);
        let x = [1.0, 2.0, 2.0, 3.0, 4.0];
        let d = [true, true, false, true, false];
        let w = [1.0, 2.0, 0.5, 3.0, 1.5];
        let beta = 0.3;
        let fit = cox_at_beta(&z, &x, &d, &w, &[beta]).unwrap();
        let base = breslow_baseline(&fit);
        let r = |i: usize| w[i] * (beta * z.row(i)[0]).exp();
        let l1 = w[0] / (r(0) + r(1) + r(2) + r(3) + r(4));
        let l2 = l1 + w[1] / (r(1) + r(2) + r(3) + r(4));
        let l3 = l2 + w[3] / (r(3) + r(4));
        assert!((base.eval(1.0).unwrap() - l1).abs() < 1e-12);
        assert!((base.eval(2.0).unwrap() - l2).abs() < 1e-12);
        assert!((base.eval(3.5).unwrap() - l3).abs() < 1e-12);
    }

    #[test]
    fn par_with_null_effect_integrates_the_registry_rate() {
        let z = Covariates::new(3, 0, vec![]);
        let fit = fit_weighted_cox_arrays(&z, &[2.0, 6.0, 8.0], &[true, false, true], &[1.0; 3], &default_options())
            .unwrap();
        let base = par_baseline(&fit, &registry(0.02, 10.0)).unwrap();
        assert!((base.eval(5.0).unwrap() - 0.10).abs() < 1e-14);
        assert_eq!(base.eval(0.0).unwrap(), 0.0);
        // Past the last observed time the risk set is empty.
        assert!(matches!(base.eval(9.0), Err(Error::ParSupport { .. })));
    }

    #[test]
    fn par_single_unit_ratio() {
        let z = Covariates::new(1, 1, vec![1.5]);
        let beta = 0.4;
        let fit = cox_at_beta(&z, &[6.0], &[true], &[1.0], &[beta]).unwrap();
        let base = par_baseline(&fit, &registry(0.03, 10.0)).unwrap();
        let expect = 0.03 * 4.0 * (-beta * 1.5f64).exp();
        assert!((base.eval(4.0).unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn absolute_risk_identities() {
        let (z, x, d) = toy();
        let fit = fit_weighted_cox_arrays(&z, &x, &d, &[1.0; 4], &default_options()).unwrap();
        let base = breslow_baseline(&fit);
        assert_eq!(absolute_risk(&fit.beta, &base, &[1.0], 0.0).unwrap().r_hat, 0.0);
        let flat = BaselineCumHazard {
            method: BaselineMethod::Breslow,
            knots: vec![1.0],
            values: vec![2f64.ln()],
            ar: None,
            support_end: None,
            composite: None,
        };
        assert!((absolute_risk(&[0.0], &flat, &[3.0], 2.0).unwrap().r_hat - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let (z, x, _) = toy();
        assert!(matches!(
            fit_weighted_cox_arrays(&z, &x, &[false; 4], &[1.0; 4], &default_options()),
            Err(Error::NoEvents)
        ));
        // Events always at the larger covariate: the likelihood is monotone.
        let z = Covariates::new(4, 1, vec![1.0, 1.0, 0.0, 0.0]);
        let err = fit_weighted_cox_arrays(&z, &x, &[true, true, false, false], &[1.0; 4], &default_options())
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::NoConvergence { .. }), "{err:?}");
    }

    #[test]
    fn fp_truth_on_toy_population() {
        let (z, x, d) = toy();
        let units = (0..4)
            .map(|i| crate::data::Unit {
                id: i.to_string(),
                z: z.row(i).to_vec(),
                z_star: vec![],
                z0_star: vec![],
                x: x[i],
                d: d[i],
                w: 1.0,
                stratum: 0,
                psu: i as i64,
            })
            .collect();
        let names = crate::data::ColumnNames {
            z: vec!["z".into()],
            ..Default::default()
        };
        let fp = Sample::new(crate::data::SampleKind::FinitePopulation, names, units).unwrap();
        let (beta, base) = compute_fp_truth(&fp, &NewtonOptions::new(1e-12, 50)).unwrap();
        assert!((beta[0] - 2f64.sqrt().ln()).abs() < 1e-10);
        assert_eq!(base.eval(0.0).unwrap(), 0.0);
    }
}
