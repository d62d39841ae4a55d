//! Damped Newton–Raphson for concave objectives (weighted logistic and Cox
//! partial log-likelihoods).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, norm_inf, reciprocal_condition, solve_spd};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Convergence threshold on the sup-norm of the score.
    pub tol: f64,
    pub max_iter: usize,
    /// Coefficient norm beyond which a still-improving fit is declared divergent.
    pub divergence_norm: f64,
}

impl NewtonOptions {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        NewtonOptions {
            tol,
            max_iter,
            divergence_norm: 30.0,
        }
    }
}

/// Objective value, score and information (negative Hessian) at a point.
pub struct Evaluation {
    pub value: f64,
    pub score: Vec<f64>,
    pub information: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub score_norm: f64,
    pub information: DMatrix<f64>,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<f64>,
}

const MAX_HALVINGS: usize = 60;
const RCOND_FLOOR: f64 = 1e-13;
const COLLAPSE_RATIO: f64 = 1e-6;

fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone().symmetric_eigen().eigenvalues.min()
}

/// Maximizes a concave objective from `x0` by Newton steps with step halving.
///
/// A step is accepted when the objective does not decrease. Near the optimum
/// objective differences drop below rounding, so a step that leaves the value
/// unchanged to 1e-12 relative but reduces the score is also accepted.
pub fn maximize<F>(what: &'static str, x0: Vec<f64>, opts: &NewtonOptions, mut eval: F) -> Result<NewtonOutcome>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    let mut x = x0;
    let mut cur = eval(&x)?;
    if !x.is_empty() && reciprocal_condition(&cur.information) < RCOND_FLOOR {
        return Err(Error::RankDeficient(what));
    }
    let initial_curvature = min_eigenvalue(&cur.information);
    let mut trace = vec![cur.value];
    let mut iterations = 0;
    loop {
        let score_norm = norm_inf(&cur.score);
        if score_norm < opts.tol {
            // A score that vanishes only because the curvature collapsed is a
            // monotone likelihood, not an optimum.
            if !x.is_empty() && min_eigenvalue(&cur.information) < COLLAPSE_RATIO * initial_curvature {
                return Err(Error::Divergence { what, norm: norm2(&x) });
            }
            return Ok(NewtonOutcome {
                x,
                iterations,
                score_norm,
                information: cur.information,
                trace,
            });
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                what,
                iterations,
                score_norm,
            });
        }
        let step = solve_spd(&cur.information, &cur.score).ok_or(Error::RankDeficient(what))?;
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + scale * s).collect();
            if let Ok(next) = eval(&cand) {
                let flat = (next.value - cur.value).abs() <= 1e-12 * (1.0 + cur.value.abs());
                if next.value.is_finite()
                    && (next.value >= cur.value || (flat && norm_inf(&next.score) < score_norm))
                {
                    accepted = Some((cand, next));
                    break;
                }
            }
            scale *= 0.5;
        }
        iterations += 1;
        let Some((cand, next)) = accepted else {
            return Err(Error::NoConvergence {
                what,
                iterations,
                score_norm,
            });
        };
        let improving = next.value > cur.value;
        x = cand;
        cur = next;
        trace.push(cur.value);
        if improving && norm2(&x) > opts.divergence_norm {
            return Err(Error::Divergence {
                what,
                norm: norm2(&x),
            });
        }
    }
}
