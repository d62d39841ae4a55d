#![allow(dead_code)]
//! Closed-form influence deviates compared against finite-difference re-fits.

use riskcal::optim::NewtonOptions;
use riskcal::pipeline::{Estimator, PipelineConfig, Target};
use riskcal::propensity::resolve_scale_weights;
use riskcal::variance::{fd_deviates, fit_with_deviates};
use riskcal::{BaselineMethod, ScaleMode};

pub const ESTIMATORS: [Estimator; 5] =
    [Estimator::Survey, Estimator::Naive, Estimator::Kws, Estimator::PostKws, Estimator::PostKwsPop];

pub fn tight(scale: f64) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(scale);
    cfg.propensity = NewtonOptions::new(1e-11, 100);
    cfg.cox = NewtonOptions::new(1e-13, 100);
    cfg
}

/// Coefficients, plus cumulative hazard and risks at t = 4 and t = 0 for
/// both baselines.
pub fn targets(p: usize) -> Vec<Target> {
    let mut t: Vec<Target> = (0..p).map(|index| Target::Beta { index }).collect();
    let z: Vec<f64> = [0.5, -0.3, 0.8][..p].to_vec();
    for method in [BaselineMethod::Breslow, BaselineMethod::Par] {
        t.push(Target::CumHazard { t: 4.0, method });
        t.push(Target::Risk { z: z.clone(), t: 4.0, method });
        t.push(Target::Risk { z: z.clone(), t: 0.0, method });
    }
    t
}

/// Largest relative discrepancy, with a floor at 1e-3 of the largest deviate.
pub fn discrepancy(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0_f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()).max(1e-3 * scale).max(1e-300)))
        .fold(0.0, f64::max)
}

/// Per estimator and target, the worst cohort and survey discrepancy on
/// `small_study(seed, n_c, n_s)`.
pub fn fd_discrepancies(seed: u64, n_c: usize, n_s: usize) -> Vec<(Estimator, Target, f64, f64)> {
    let data = super::small_study(seed, n_c, n_s);
    let a = resolve_scale_weights(&data.survey.w, ScaleMode::Auto).unwrap();
    let cfg = tight(a);
    let mut out = Vec::new();
    for est in ESTIMATORS {
        let p = if est == Estimator::Survey { 2 } else { 3 };
        let tg = targets(p);
        let (_, closed) = fit_with_deviates(&data, &cfg, est, &tg).unwrap();
        let fd = fd_deviates(&data, &cfg, est, &tg, 1e-5).unwrap();
        for (c, f) in closed.iter().zip(&fd) {
            out.push((est, c.target.clone(), discrepancy(&c.cohort, &f.cohort), discrepancy(&c.survey, &f.survey)));
        }
    }
    out
}
