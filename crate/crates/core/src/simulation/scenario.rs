//! Replicated cohort and survey draws from a fixed population, with every
//! estimator fit per replicate and summarized against population values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{summarize_paired, LambdaBiasRow, Metric, MetricsTable, Table1Row, Table2Row};
use super::population::{generate_population, Population, PopulationConfig, CELL_LABELS};
use super::pps::draw_pps;
use crate::error::{Error, Result};
use crate::linalg::{quantile_sorted, Covariates};
use crate::optim::NewtonOptions;
use crate::pipeline::{fit_estimator, weigh, Arm, Estimator, PipelineConfig, StudyData, Target};
use crate::propensity::{resolve_scale_weights, ScaleMode};
use crate::survival::{breslow_baseline, fit_weighted_cox_arrays, BaselineMethod};
use crate::variance::{influence_deviates, tl_variance, CombinedDesign, SinglePsu};

pub const METHODS: [BaselineMethod; 2] = [BaselineMethod::Breslow, BaselineMethod::Par];
const PROFILE_LEVELS: [f64; 3] = [0.25, 0.5, 0.75];
/// Memory allowed for kernel shares of replicates running at once.
const SHARE_BUDGET_BYTES: usize = 2 << 30;

/// Size measure `exp(z1 c1 + z2 c2 + d D + z2_d z2 D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeCoefficients {
    pub z1: f64,
    pub z2: f64,
    #[serde(default)]
    pub d: f64,
    #[serde(default)]
    pub z2_d: f64,
}

impl SizeCoefficients {
    pub fn size(&self, z1: f64, z2: f64, d: bool) -> f64 {
        let dv = f64::from(u8::from(d));
        (self.z1 * z1 + self.z2 * z2 + self.d * dv + self.z2_d * z2 * dv).exp()
    }

    /// Terms with a nonzero coefficient: the correctly specified
    /// participation model for this size measure.
    pub fn active_terms(&self) -> Vec<PropensityTerm> {
        [
            (self.z1, PropensityTerm::Z1),
            (self.z2, PropensityTerm::Z2),
            (self.d, PropensityTerm::D),
            (self.z2_d, PropensityTerm::Z2D),
        ]
        .into_iter()
        .filter(|(c, _)| *c != 0.0)
        .map(|(_, t)| t)
        .collect()
    }
}

/// Covariate of the simulation propensity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityTerm {
    Z1,
    Z2,
    D,
    Z2D,
}

impl PropensityTerm {
    fn value(self, z: &[f64], d: bool) -> f64 {
        let dv = f64::from(u8::from(d));
        match self {
            PropensityTerm::Z1 => z[0],
            PropensityTerm::Z2 => z[1],
            PropensityTerm::D => dv,
            PropensityTerm::Z2D => z[1] * dv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub cohort_size: SizeCoefficients,
    pub survey_size: SizeCoefficients,
    pub n_cohort: usize,
    pub n_survey: usize,
    pub reps: usize,
    pub seed: u64,
    /// Horizon of the absolute risks.
    pub risk_time: f64,
    /// Times at which baseline cumulative hazards are summarized.
    pub lambda_grid: Vec<f64>,
    pub estimators: Vec<Estimator>,
    /// Propensity covariates; empty means the active terms of the cohort
    /// size measure.
    #[serde(default)]
    pub propensity_terms: Vec<PropensityTerm>,
    /// Draw a fresh population for every replicate.
    pub regenerate_fp: bool,
    /// Fraction of failed replicates above which the run aborts.
    pub max_failure_fraction: f64,
}

impl ScenarioConfig {
    /// One of the four reference scenarios.
    pub fn reference(id: u8) -> Result<ScenarioConfig> {
        let (d, z2_d) = match id {
            1 => (0.0, 0.0),
            2 => (0.3, 0.0),
            3 => (0.0, -0.1),
            4 => (0.3, -0.1),
            _ => return Err(Error::InvalidArgument(format!("scenario must be 1-4, got {id}"))),
        };
        Ok(ScenarioConfig {
            name: id.to_string(),
            cohort_size: SizeCoefficients { z1: 0.1, z2: 0.05, d, z2_d },
            survey_size: SizeCoefficients { z1: 0.07, z2: 0.1, d: 0.0, z2_d: 0.0 },
            n_cohort: 5000,
            n_survey: 3000,
            reps: 500,
            seed: 42,
            risk_time: 3.0,
            lambda_grid: (1..=14).map(f64::from).collect(),
            estimators: vec![Estimator::Survey, Estimator::Naive, Estimator::Kws, Estimator::PostKws],
            propensity_terms: Vec::new(),
            regenerate_fp: false,
            max_failure_fraction: 0.01,
        })
    }

    pub fn validate(&self, population_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_cohort >= population_size || self.n_survey >= population_size {
            return bad("sample sizes must be below the population size".into());
        }
        if self.n_cohort == 0 || self.n_survey == 0 {
            return bad("sample sizes must be positive".into());
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.estimators.is_empty() {
            return bad("estimator list is empty".into());
        }
        if !(self.risk_time > 0.0) || self.lambda_grid.iter().any(|t| !(*t >= 0.0)) {
            return bad("risk time and grid must be nonnegative".into());
        }
        Ok(())
    }

    pub fn resolved_propensity_terms(&self) -> Vec<PropensityTerm> {
        if self.propensity_terms.is_empty() {
            self.cohort_size.active_terms()
        } else {
            self.propensity_terms.clone()
        }
    }
}

/// Population parameters that all estimates are compared with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: Vec<f64>,
    /// Breslow cumulative hazard at each grid time.
    pub lambda: Vec<f64>,
    /// Low, medium and high covariate profiles.
    pub profiles: [Vec<f64>; 3],
    pub risk: [f64; 3],
}

/// Unit-weight Cox fit on the whole population; profiles are componentwise
/// 25/50/75% quantiles.
pub fn population_truth(pop: &Population, grid: &[f64], risk_time: f64) -> Result<Truth> {
    let fit = fit_weighted_cox_arrays(&pop.z, &pop.x, &pop.d, &vec![1.0; pop.len()], &NewtonOptions::new(1e-10, 50))?;
    let base = breslow_baseline(&fit);
    let lambda = grid.iter().map(|&t| base.eval(t)).collect::<Result<Vec<_>>>()?;
    let sorted: Vec<Vec<f64>> = (0..pop.z.p())
        .map(|k| {
            let mut c = pop.z.column(k);
            c.sort_by(f64::total_cmp);
            c
        })
        .collect();
    let profiles = PROFILE_LEVELS.map(|p| sorted.iter().map(|c| quantile_sorted(c, p)).collect::<Vec<f64>>());
    let cum = base.eval(risk_time)?;
    let risk = std::array::from_fn(|k| {
        let eta: f64 = fit.beta.iter().zip(&profiles[k]).map(|(b, z)| b * z).sum();
        -(-cum * eta.exp()).exp_m1()
    });
    Ok(Truth {
        beta: fit.beta,
        lambda,
        profiles,
        risk,
    })
}

/// Per-replicate results of one estimator. Arrays indexed by method follow
/// [`METHODS`]; missing coefficients are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRecord {
    pub estimator: Estimator,
    pub beta: [f64; 3],
    pub lambda: [Vec<f64>; 2],
    pub risk: [[f64; 3]; 2],
    pub tl: [[f64; 3]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub cohort_event_rate: f64,
    /// Horvitz-Thompson totals of z1 and z2 from the survey draw.
    pub survey_ht_total: [f64; 2],
    pub truth: Option<Truth>,
    pub outcome: std::result::Result<Vec<EstimatorRecord>, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub config: ScenarioConfig,
    pub population_event_rate: f64,
    pub truth: Truth,
    pub records: Vec<ReplicateRecord>,
    pub failures: usize,
    pub table: MetricsTable,
}

impl ScenarioOutcome {
    pub fn mean_cohort_event_rate(&self) -> f64 {
        self.records.iter().map(|r| r.cohort_event_rate).sum::<f64>() / self.records.len() as f64
    }

    /// Successful records of one estimator, in replicate order.
    pub fn estimator_records(&self, est: Estimator) -> Vec<&EstimatorRecord> {
        self.records
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok())
            .filter_map(|v| v.iter().find(|e| e.estimator == est))
            .collect()
    }
}

/// Master RNG of a run on the given stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates the population on stream 0 of its seed and runs the scenario.
pub fn run_scenario(pop_cfg: &PopulationConfig, scen: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let pop = generate_population(pop_cfg, &mut stream_rng(pop_cfg.seed, 0))?;
    let truth = population_truth(&pop, &scen.lambda_grid, scen.risk_time)?;
    run_scenario_on(&pop, &truth, pop_cfg, scen)
}

/// Runs a scenario against an existing population and its truth.
pub fn run_scenario_on(
    pop: &Population,
    truth: &Truth,
    pop_cfg: &PopulationConfig,
    scen: &ScenarioConfig,
) -> Result<ScenarioOutcome> {
    scen.validate(pop.len())?;
    let bytes = scen.n_cohort * scen.n_survey * 8 * 2;
    let parallel = rayon::current_num_threads().min((SHARE_BUDGET_BYTES / bytes.max(1)).max(1));
    let mut records = Vec::with_capacity(scen.reps);
    for start in (0..scen.reps).step_by(parallel) {
        let end = (start + parallel).min(scen.reps);
        let batch: Vec<ReplicateRecord> = (start..end)
            .into_par_iter()
            .map(|b| run_replicate(pop, truth, pop_cfg, scen, b))
            .collect();
        for r in &batch {
            match &r.outcome {
                Ok(_) => log::info!("scenario {} replicate {} done", scen.name, r.index),
                Err(e) => log::warn!("scenario {} replicate {} failed: {e}", scen.name, r.index),
            }
        }
        records.extend(batch);
    }
    let failed: Vec<&ReplicateRecord> = records.iter().filter(|r| r.outcome.is_err()).collect();
    if failed.len() as f64 > scen.max_failure_fraction * scen.reps as f64 {
        return Err(Error::TooManyFailures {
            failed: failed.len(),
            total: scen.reps,
            first: failed[0].outcome.clone().unwrap_err(),
        });
    }
    let failures = failed.len();
    let table = tabulate(&scen.name, &scen.estimators, &scen.lambda_grid, truth, &records);
    Ok(ScenarioOutcome {
        config: scen.clone(),
        population_event_rate: pop.event_rate(),
        truth: truth.clone(),
        records,
        failures,
        table,
    })
}

fn arm_from(pop: &Population, idx: &[usize], w: Vec<f64>, p: usize, terms: &[PropensityTerm]) -> Arm {
    let n = idx.len();
    let mut z = Vec::with_capacity(n * p);
    let mut zs = Vec::with_capacity(n * terms.len());
    for &i in idx {
        let row = pop.z.row(i);
        z.extend_from_slice(&row[..p]);
        zs.extend(terms.iter().map(|t| t.value(row, pop.d[i])));
    }
    Arm {
        ids: idx.iter().map(|i| i.to_string()).collect(),
        z: Covariates::new(n, p, z),
        z_star: Covariates::new(n, terms.len(), zs),
        x: idx.iter().map(|&i| pop.x[i]).collect(),
        d: idx.iter().map(|&i| pop.d[i]).collect(),
        w,
        keys: idx.iter().map(|&i| CELL_LABELS[pop.cell[i] as usize].to_string()).collect(),
        design: (0..n).map(|k| (0, k as i64)).collect(),
    }
}

/// Draws one cohort and one survey and fits every estimator.
pub fn run_replicate(
    pop: &Population,
    truth: &Truth,
    pop_cfg: &PopulationConfig,
    scen: &ScenarioConfig,
    index: usize,
) -> ReplicateRecord {
    let mut rng = stream_rng(scen.seed, index as u64 + 1);
    let fresh;
    let mut own_truth = None;
    let pop = if scen.regenerate_fp {
        let built = generate_population(pop_cfg, &mut rng).and_then(|p| {
            let t = population_truth(&p, &scen.lambda_grid, scen.risk_time)?;
            Ok((p, t))
        });
        match built {
            Ok((p, t)) => {
                fresh = p;
                own_truth = Some(t);
                &fresh
            }
            Err(e) => {
                return ReplicateRecord {
                    index,
                    cohort_event_rate: f64::NAN,
                    survey_ht_total: [f64::NAN; 2],
                    truth: None,
                    outcome: Err(e.to_string()),
                }
            }
        }
    } else {
        pop
    };
    let size = |c: &SizeCoefficients| -> Vec<f64> {
        (0..pop.len())
            .map(|i| {
                let r = pop.z.row(i);
                c.size(r[0], r[1], pop.d[i])
            })
            .collect()
    };
    let draws = draw_pps(&size(&scen.cohort_size), scen.n_cohort, &mut rng)
        .and_then(|c| Ok((c, draw_pps(&size(&scen.survey_size), scen.n_survey, &mut rng)?)));
    let ((c_idx, _), (s_idx, s_pi)) = match draws {
        Ok(v) => v,
        Err(e) => {
            return ReplicateRecord {
                index,
                cohort_event_rate: f64::NAN,
                survey_ht_total: [f64::NAN; 2],
                truth: own_truth,
                outcome: Err(e.to_string()),
            }
        }
    };
    let terms = scen.resolved_propensity_terms();
    let cohort = arm_from(pop, &c_idx, vec![1.0; c_idx.len()], 3, &terms);
    let survey = arm_from(pop, &s_idx, s_pi.iter().map(|p| 1.0 / p).collect(), 2, &terms);
    let cohort_event_rate = cohort.d.iter().filter(|&&d| d).count() as f64 / cohort.len() as f64;
    let survey_ht_total = std::array::from_fn(|k| survey.z.column(k).iter().zip(&survey.w).map(|(z, w)| z * w).sum());
    let data = StudyData {
        cohort,
        survey,
        registry: Some(pop.registry.clone()),
    };
    let profiles = &own_truth.as_ref().unwrap_or(truth).profiles;
    let outcome = fit_all(&data, scen, profiles).map_err(|e| e.to_string());
    ReplicateRecord {
        index,
        cohort_event_rate,
        survey_ht_total,
        truth: own_truth,
        outcome,
    }
}

/// Fits every estimator of the scenario; risks are taken at `profiles`,
/// truncated to the covariates each model has.
pub fn fit_all(data: &StudyData, scen: &ScenarioConfig, profiles: &[Vec<f64>; 3]) -> Result<Vec<EstimatorRecord>> {
    let a = resolve_scale_weights(&data.survey.w, ScaleMode::Auto)?;
    let cfg = PipelineConfig::new(a);
    let weighting = if scen.estimators.iter().any(|e| e.uses_kernel()) {
        Some(weigh(data, &cfg)?)
    } else {
        None
    };
    let design = CombinedDesign::from_data(data);
    scen.estimators
        .iter()
        .map(|&est| {
            let fit = fit_estimator(data, &cfg, est, weighting.as_ref())?;
            let p = fit.fit.beta.len();
            let beta = std::array::from_fn(|k| fit.fit.beta.get(k).copied().unwrap_or(f64::NAN));
            let mut lambda: [Vec<f64>; 2] = Default::default();
            let mut targets = Vec::with_capacity(6);
            for (m, &method) in METHODS.iter().enumerate() {
                let base = fit.baseline(method)?;
                lambda[m] = scen.lambda_grid.iter().map(|&t| base.eval(t)).collect::<Result<_>>()?;
                for z in profiles {
                    targets.push(Target::Risk {
                        z: z[..p].to_vec(),
                        t: scen.risk_time,
                        method,
                    });
                }
            }
            let dev = influence_deviates(data, weighting.as_ref(), &fit, &targets)?;
            let mut risk = [[0.0; 3]; 2];
            let mut tl = [[0.0; 3]; 2];
            for (k, d) in dev.iter().enumerate() {
                risk[k / 3][k % 3] = d.value;
                tl[k / 3][k % 3] = tl_variance(d, &design, SinglePsu::Error)?;
            }
            Ok(EstimatorRecord {
                estimator: est,
                beta,
                lambda,
                risk,
                tl,
            })
        })
        .collect()
}

fn tabulate<'a>(
    name: &str,
    estimators: &[Estimator],
    grid: &[f64],
    truth: &'a Truth,
    records: &'a [ReplicateRecord],
) -> MetricsTable {
    let ok: Vec<(&ReplicateRecord, &Vec<EstimatorRecord>)> =
        records.iter().filter_map(|r| r.outcome.as_ref().ok().map(|v| (r, v))).collect();
    let truth_of = |r: &'a ReplicateRecord| -> &'a Truth { r.truth.as_ref().unwrap_or(truth) };
    let mut table = MetricsTable::default();
    for &est in estimators {
        let rec = |v: &Vec<EstimatorRecord>| -> EstimatorRecord {
            v.iter().find(|e| e.estimator == est).expect("every estimator recorded").clone()
        };
        let rows: Vec<(&Truth, EstimatorRecord)> = ok.iter().map(|(r, v)| (truth_of(r), rec(v))).collect();
        let series = |f: &dyn Fn(&EstimatorRecord) -> f64, t: &dyn Fn(&Truth) -> f64| -> (Vec<f64>, Vec<f64>) {
            rows.iter().map(|(tr, e)| (f(e), t(tr))).unzip()
        };
        let beta = std::array::from_fn(|k| {
            let (e, t) = series(&|e| e.beta[k], &|tr| tr.beta[k]);
            summarize_paired(&e, &t, None)
        });
        table.table1.push(Table1Row {
            scenario: name.to_string(),
            estimator: est.label().to_string(),
            beta,
        });
        for (m, method) in METHODS.iter().enumerate() {
            let label = format!("{} ({})", est.label(), method_letter(*method));
            let risk: [Metric; 3] = std::array::from_fn(|k| {
                let (e, t) = series(&|e| e.risk[m][k], &|tr| tr.risk[k]);
                let (tl, _) = series(&|e| e.tl[m][k], &|_| 0.0);
                summarize_paired(&e, &t, Some(&tl))
            });
            table.table2.push(Table2Row {
                scenario: name.to_string(),
                method: label.clone(),
                risk,
            });
            for (g, &t) in grid.iter().enumerate() {
                let (e, tr) = series(&|e| e.lambda[m][g], &|tr| tr.lambda[g]);
                table.lambda0.push(LambdaBiasRow {
                    scenario: name.to_string(),
                    method: label.clone(),
                    t,
                    metric: summarize_paired(&e, &tr, None),
                });
            }
        }
    }
    table
}

pub fn method_letter(m: BaselineMethod) -> &'static str {
    match m {
        BaselineMethod::Breslow => "B",
        BaselineMethod::Par => "P",
    }
}
