#![allow(dead_code)]
//! Randomized input generators and the invariant checks run on them.

use indexmap::IndexMap;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use riskcal::linalg::Covariates;
use riskcal::pseudoweight::{poststratify_arrays, KernelShares};
use riskcal::survival::{absolute_risk, breslow_baseline, fit_weighted_cox_arrays, par_baseline};
use riskcal::{Bandwidth, HazardInterval, NewtonOptions, RegistrySummary, WeightVariant};

type Check = Result<(), TestCaseError>;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone)]
pub struct KwCase {
    pub q_c: Vec<f64>,
    pub q_s: Vec<f64>,
    pub w_s: Vec<f64>,
    pub h: f64,
}

/// Linear predictors on a 1/8 grid so that shifts by multiples of 1/8 and
/// scaling by powers of two are exact.
pub fn kw_case() -> impl Strategy<Value = KwCase> {
    (1usize..25, 1usize..20).prop_flat_map(|(nc, ns)| {
        (
            prop::collection::vec(-40i32..40, nc),
            prop::collection::vec(-40i32..40, ns),
            prop::collection::vec(0.5f64..200.0, ns),
            -3i32..3,
        )
            .prop_map(|(qc, qs, w_s, hexp)| KwCase {
                q_c: qc.into_iter().map(|v| f64::from(v) / 8.0).collect(),
                q_s: qs.into_iter().map(|v| f64::from(v) / 8.0).collect(),
                w_s,
                h: 2f64.powi(hexp),
            })
    })
}

fn kw(q_c: &[f64], q_s: &[f64], w_s: &[f64], h: f64) -> Vec<f64> {
    KernelShares::new(q_c, q_s, &vec![1.0; q_c.len()], Bandwidth::Positive(h)).kw_weights(w_s)
}

pub fn check_mass_conservation(c: &KwCase) -> Check {
    let w = kw(&c.q_c, &c.q_s, &c.w_s, c.h);
    let (a, b) = (w.iter().sum::<f64>(), c.w_s.iter().sum::<f64>());
    prop_assert!(close(a, b, 1e-10), "{a} vs {b}");
    prop_assert!(w.iter().all(|v| *v >= 0.0));
    Ok(())
}

pub fn check_monotone_transfer(c: &KwCase, j: usize, delta: f64) -> Check {
    let j = j % c.w_s.len();
    let before = kw(&c.q_c, &c.q_s, &c.w_s, c.h);
    let mut w2 = c.w_s.clone();
    w2[j] += delta;
    let after = kw(&c.q_c, &c.q_s, &w2, c.h);
    let gain = after.iter().sum::<f64>() - before.iter().sum::<f64>();
    prop_assert!((gain - delta).abs() <= 1e-9 * c.w_s.iter().sum::<f64>().max(delta), "{gain} vs {delta}");
    // Shares of survey unit j are unchanged: the increments are delta times them.
    let shares = KernelShares::new(&c.q_c, &c.q_s, &vec![1.0; c.q_c.len()], Bandwidth::Positive(c.h)).column(j);
    for (l, s) in shares.iter().enumerate() {
        prop_assert!((after[l] - before[l] - delta * s).abs() <= 1e-9 * (after[l].abs() + 1.0));
    }
    Ok(())
}

pub fn check_translation(c: &KwCase, shift: i32) -> Check {
    let s = f64::from(shift) / 8.0;
    let base = kw(&c.q_c, &c.q_s, &c.w_s, c.h);
    let qc: Vec<f64> = c.q_c.iter().map(|q| q + s).collect();
    let qs: Vec<f64> = c.q_s.iter().map(|q| q + s).collect();
    prop_assert_eq!(base, kw(&qc, &qs, &c.w_s, c.h));
    Ok(())
}

pub fn check_scale_coupling(c: &KwCase, k: i32) -> Check {
    let f = 2f64.powi(k);
    let base = kw(&c.q_c, &c.q_s, &c.w_s, c.h);
    let qc: Vec<f64> = c.q_c.iter().map(|q| q * f).collect();
    let qs: Vec<f64> = c.q_s.iter().map(|q| q * f).collect();
    prop_assert_eq!(base, kw(&qc, &qs, &c.w_s, c.h * f));
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PostCase {
    pub kw: Vec<f64>,
    pub keys: Vec<String>,
    pub events: Vec<bool>,
    pub registry: RegistrySummary,
}

/// Units spread over up to three cells, each cell holding at least one event
/// and one non-event.
pub fn post_case() -> impl Strategy<Value = PostCase> {
    (1usize..4).prop_flat_map(|cells| {
        (
            prop::collection::vec((0usize..cells, any::<bool>(), 0.01f64..500.0), 0..40),
            prop::collection::vec((1u64..100_000, 1u64..1_000_000), cells),
            prop::collection::vec(0.01f64..500.0, 2 * cells),
        )
            .prop_map(move |(extra, counts, base_w)| {
                let mut kw = Vec::new();
                let mut keys = Vec::new();
                let mut events = Vec::new();
                for g in 0..cells {
                    for (k, ev) in [(0, true), (1, false)] {
                        kw.push(base_w[2 * g + k]);
                        keys.push(format!("c{g}"));
                        events.push(ev);
                    }
                }
                for (g, ev, w) in extra {
                    kw.push(w);
                    keys.push(format!("c{g}"));
                    events.push(ev);
                }
                let ev: IndexMap<String, u64> = (0..cells).map(|g| (format!("c{g}"), counts[g].0)).collect();
                let non: IndexMap<String, u64> = (0..cells).map(|g| (format!("c{g}"), counts[g].1)).collect();
                let m = ev.values().sum::<u64>() + non.values().sum::<u64>();
                let registry = RegistrySummary::new(
                    m,
                    ev,
                    Some(non),
                    vec![HazardInterval { t0: 0.0, t1: 100.0, rate: 0.01 }],
                )
                .unwrap();
                PostCase { kw, keys, events, registry }
            })
    })
}

pub fn check_post_rg(c: &PostCase) -> Check {
    let ws = poststratify_arrays(&c.kw, &c.keys, &c.events, &c.registry, WeightVariant::PostRg, false, Bandwidth::Degenerate)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    for (key, &count) in &c.registry.event_cells {
        let sum: f64 = (0..c.kw.len())
            .filter(|&l| c.events[l] && &c.keys[l] == key)
            .map(|l| ws.final_weights[l])
            .sum();
        prop_assert!(close(sum, count as f64, 1e-12), "cell {key}: {sum} vs {count}");
    }
    // Non-events keep their KW weights.
    for l in 0..c.kw.len() {
        if !c.events[l] {
            prop_assert_eq!(ws.final_weights[l], c.kw[l]);
        }
    }
    Ok(())
}

pub fn check_post_pop(c: &PostCase) -> Check {
    let ws = poststratify_arrays(&c.kw, &c.keys, &c.events, &c.registry, WeightVariant::PostPop, false, Bandwidth::Degenerate)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    let total: f64 = ws.final_weights.iter().sum();
    let m = c.registry.population_size as f64;
    prop_assert!(close(total, m, 1e-12), "{total} vs {m}");
    let non = c.registry.nonevent_cells.as_ref().unwrap();
    for (key, &count) in non {
        let sum: f64 = (0..c.kw.len())
            .filter(|&l| !c.events[l] && &c.keys[l] == key)
            .map(|l| ws.final_weights[l])
            .sum();
        prop_assert!(close(sum, count as f64, 1e-12));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SurvCase {
    pub z: Covariates,
    pub x: Vec<f64>,
    pub d: Vec<bool>,
    pub w: Vec<f64>,
    pub registry: RegistrySummary,
    pub profile: Vec<f64>,
}

/// Small weighted survival samples with a piecewise-constant registry hazard
/// covering all follow-up.
pub fn surv_case() -> impl Strategy<Value = SurvCase> {
    (3usize..40, 1usize..3).prop_flat_map(|(n, p)| {
        (
            prop::collection::vec(-2.0f64..2.0, n * p),
            prop::collection::vec(0.01f64..10.0, n),
            prop::collection::vec(prop::bool::weighted(0.5), n),
            prop::collection::vec(0.2f64..20.0, n),
            prop::collection::vec(0.0f64..0.3, 1..6),
            prop::collection::vec(-2.0f64..2.0, p),
        )
            .prop_map(move |(z, x, mut d, w, rates, profile)| {
                d[0] = true;
                let width = 11.0 / rates.len() as f64;
                let hazard = rates
                    .iter()
                    .enumerate()
                    .map(|(k, &rate)| HazardInterval {
                        t0: k as f64 * width,
                        t1: (k + 1) as f64 * width,
                        rate,
                    })
                    .collect();
                let registry = RegistrySummary::new(1000, [("a".to_string(), 10)].into_iter().collect(), None, hazard).unwrap();
                SurvCase {
                    z: Covariates::new(n, p, z),
                    x,
                    d,
                    w,
                    registry,
                    profile,
                }
            })
    })
}

/// Monotone baselines starting at zero and risks in [0, 1] nondecreasing in t.
/// Fits that do not converge (monotone likelihoods on tiny samples) are
/// rejected as inputs.
pub fn check_baselines_and_risk(c: &SurvCase) -> Check {
    let fit = match fit_weighted_cox_arrays(&c.z, &c.x, &c.d, &c.w, &NewtonOptions::new(1e-9, 100)) {
        Ok(f) => f,
        Err(_) => return Err(TestCaseError::reject("Cox fit did not converge")),
    };
    let breslow = breslow_baseline(&fit);
    let par = par_baseline(&fit, &c.registry).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let end = par.support_end.unwrap();
    let grid: Vec<f64> = (0..60).map(|k| end * f64::from(k) / 60.0).chain([end]).collect();
    for base in [&breslow, &par] {
        prop_assert_eq!(base.eval(0.0).unwrap(), 0.0);
        let mut prev_l = 0.0;
        let mut prev_r = 0.0;
        for &t in &grid {
            let l = base.eval(t).unwrap();
            prop_assert!(l >= prev_l - 1e-15 * l.abs(), "baseline decreased at {t}: {prev_l} -> {l}");
            let r = absolute_risk(&fit.beta, base, &c.profile, t).unwrap().r_hat;
            prop_assert!((0.0..=1.0).contains(&r), "risk {r} out of range");
            prop_assert!(r >= prev_r - 1e-15, "risk decreased at {t}");
            prev_l = l;
            prev_r = r;
        }
    }
    Ok(())
}

/// Scaling all weights by a power of two leaves coefficients and both
/// baselines unchanged.
pub fn check_weight_rescaling(c: &SurvCase, k: i32) -> Check {
    let opts = NewtonOptions::new(1e-10, 100);
    let Ok(a) = fit_weighted_cox_arrays(&c.z, &c.x, &c.d, &c.w, &opts) else {
        return Err(TestCaseError::reject("Cox fit did not converge"));
    };
    let f = 2f64.powi(k);
    let w2: Vec<f64> = c.w.iter().map(|w| w * f).collect();
    let b = fit_weighted_cox_arrays(&c.z, &c.x, &c.d, &w2, &opts).map_err(|e| TestCaseError::fail(e.to_string()))?;
    for (u, v) in a.beta.iter().zip(&b.beta) {
        prop_assert!((u - v).abs() < 1e-7 * (1.0 + u.abs()), "{u} vs {v}");
    }
    // At a common coefficient the baselines agree to rounding.
    let b_at = riskcal::survival::cox_at_beta(&c.z, &c.x, &c.d, &w2, &a.beta).unwrap();
    let end = par_baseline(&a, &c.registry).unwrap().support_end.unwrap();
    for t in [0.25 * end, 0.5 * end, end] {
        prop_assert!(close(breslow_baseline(&a).eval(t).unwrap(), breslow_baseline(&b_at).eval(t).unwrap(), 1e-12));
        prop_assert!(close(
            par_baseline(&a, &c.registry).unwrap().eval(t).unwrap(),
            par_baseline(&b_at, &c.registry).unwrap().eval(t).unwrap(),
            1e-12
        ));
    }
    Ok(())
}
