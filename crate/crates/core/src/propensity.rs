//! Scaled-weight logistic propensity model on the stacked cohort + survey
//! sample. Cohort units are the "cases" (R = 1) with their base weights;
//! survey units enter with R = 0 and weight `a * w`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::linalg::{dot, to_rows, Covariates};
use crate::optim::{maximize, Evaluation, NewtonOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `n_s / sum(w_s)`.
    Auto,
    Explicit(f64),
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<ScaleMode> {
        if s == "auto" {
            return Ok(ScaleMode::Auto);
        }
        s.parse::<f64>()
            .map(ScaleMode::Explicit)
            .map_err(|_| Error::InvalidArgument(format!("scale must be `auto` or a number, got `{s}`")))
    }
}

/// Resolves the survey scale factor from survey base weights.
pub fn resolve_scale_weights(survey_w: &[f64], mode: ScaleMode) -> Result<f64> {
    let a = match mode {
        ScaleMode::Auto => survey_w.len() as f64 / survey_w.iter().sum::<f64>(),
        ScaleMode::Explicit(a) => a,
    };
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::ScaleOutOfRange(a));
    }
    Ok(a)
}

pub fn resolve_scale(_cohort: &Sample, survey: &Sample, mode: ScaleMode) -> Result<f64> {
    resolve_scale_weights(&survey.weights(), mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    /// Coefficients, intercept first.
    pub gamma: Vec<f64>,
    pub scale: f64,
    pub q_cohort: Vec<f64>,
    pub q_survey: Vec<f64>,
    pub iterations: usize,
    pub score_norm: f64,
    /// Weighted log-likelihood at the start and after each Newton step.
    pub loglik_trace: Vec<f64>,
    /// Negative Hessian of the weighted log-likelihood at the solution.
    pub information: Vec<Vec<f64>>,
}

impl PropensityFit {
    /// Fitted participation probability for a linear predictor.
    pub fn probability(q: f64) -> f64 {
        logistic(q)
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Fits the propensity model. `x_cohort` and `x_survey` must already carry
/// the intercept column; `cohort_w` are cohort base weights (1 in practice).
pub fn fit_propensity_arrays(
    x_cohort: &Covariates,
    cohort_w: &[f64],
    x_survey: &Covariates,
    survey_w: &[f64],
    a: f64,
    opts: &NewtonOptions,
) -> Result<PropensityFit> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::ScaleOutOfRange(a));
    }
    let p = x_cohort.p();
    assert_eq!(p, x_survey.p(), "propensity design widths differ");
    let blocks = [(x_cohort, cohort_w, 1.0, true), (x_survey, survey_w, a, false)];
    let out = maximize("propensity model", vec![0.0; p], opts, |g| {
        let mut value = 0.0;
        let mut score = vec![0.0; p];
        let mut info = DMatrix::zeros(p, p);
        for &(x, w, scale, case) in &blocks {
            for (row, &wi) in x.rows().zip(w) {
                let ws = scale * wi;
                let eta = dot(row, g);
                let pr = logistic(eta);
                let r = if case { 1.0 } else { 0.0 };
                value += ws * (r * eta - softplus(eta));
                let resid = ws * (r - pr);
                let v = ws * pr * (1.0 - pr);
                for a in 0..p {
                    score[a] += resid * row[a];
                    for b in 0..=a {
                        info[(a, b)] += v * row[a] * row[b];
                    }
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        Ok(Evaluation {
            value,
            score,
            information: info,
        })
    })?;
    Ok(PropensityFit {
        q_cohort: x_cohort.linear_predictor(&out.x),
        q_survey: x_survey.linear_predictor(&out.x),
        gamma: out.x,
        scale: a,
        iterations: out.iterations,
        score_norm: out.score_norm,
        loglik_trace: out.trace,
        information: to_rows(&out.information),
    })
}

/// Fits the propensity model on the `z_star` covariates of two samples.
pub fn fit_propensity(cohort: &Sample, survey: &Sample, a: f64, opts: &NewtonOptions) -> Result<PropensityFit> {
    if cohort.names().z_star != survey.names().z_star {
        return Err(Error::InvalidArgument(
            "cohort and survey propensity covariates differ".into(),
        ));
    }
    fit_propensity_arrays(
        &cohort.z_star_matrix().with_intercept(),
        &cohort.weights(),
        &survey.z_star_matrix().with_intercept(),
        &survey.weights(),
        a,
        opts,
    )
}

pub fn default_options() -> NewtonOptions {
    NewtonOptions::new(1e-8, 100)
}
