//! End-to-end estimation from base weights: propensity fit, kernel shares,
//! poststratification, weighted Cox fit and both baselines.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::data::{RegistrySummary, Sample};
use crate::error::{Error, Result};
use crate::linalg::Covariates;
use crate::optim::NewtonOptions;
use crate::propensity::{fit_propensity_arrays, PropensityFit};
use crate::pseudoweight::{
    poststratify_arrays, silverman, silverman_gradient, GammaSensitivity, KernelShares, Silverman, WeightSet,
    WeightVariant,
};
use crate::survival::{
    absolute_risk, breslow_baseline, fit_weighted_cox_arrays, par_baseline, BaselineCumHazard, BaselineMethod,
    RiskModelFit,
};

/// Column-oriented view of one sample with explicit base weights, so that
/// cohort weights can be perturbed away from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub ids: Vec<String>,
    pub z: Covariates,
    pub z_star: Covariates,
    pub x: Vec<f64>,
    pub d: Vec<bool>,
    pub w: Vec<f64>,
    pub keys: Vec<String>,
    /// `(stratum, psu)` per unit.
    pub design: Vec<(i64, i64)>,
}

impl Arm {
    pub fn from_sample(sample: &Sample) -> Arm {
        let u = sample.units();
        Arm {
            ids: u.iter().map(|u| u.id.clone()).collect(),
            z: sample.z_matrix(),
            z_star: sample.z_star_matrix(),
            x: sample.times(),
            d: sample.events(),
            w: sample.weights(),
            keys: u.iter().map(|u| u.cell_key()).collect(),
            design: u.iter().map(|u| (u.stratum, u.psu)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyData {
    pub cohort: Arm,
    pub survey: Arm,
    pub registry: Option<RegistrySummary>,
}

impl StudyData {
    pub fn from_samples(cohort: &Sample, survey: &Sample, registry: Option<RegistrySummary>) -> StudyData {
        StudyData {
            cohort: Arm::from_sample(cohort),
            survey: Arm::from_sample(survey),
            registry,
        }
    }

    pub fn with_weights(&self, cohort_w: Vec<f64>, survey_w: Vec<f64>) -> StudyData {
        let mut out = self.clone();
        out.cohort.w = cohort_w;
        out.survey.w = survey_w;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Survey sample with its sampling weights.
    Survey,
    /// Unweighted cohort.
    Naive,
    Kws,
    /// KW weights poststratified on events.
    PostKws,
    /// KW weights poststratified on events and non-events.
    PostKwsPop,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::Survey,
        Estimator::Naive,
        Estimator::Kws,
        Estimator::PostKws,
        Estimator::PostKwsPop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Survey => "survey",
            Estimator::Naive => "naive",
            Estimator::Kws => "kws",
            Estimator::PostKws => "post_kws",
            Estimator::PostKwsPop => "post_kws_pop",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Estimator::Survey => "Survey",
            Estimator::Naive => "Naive",
            Estimator::Kws => "KW.S",
            Estimator::PostKws => "Post-KW.S",
            Estimator::PostKwsPop => "Post-KW.S (POP)",
        }
    }

    pub fn uses_kernel(self) -> bool {
        matches!(self, Estimator::Kws | Estimator::PostKws | Estimator::PostKwsPop)
    }

    pub fn variant(self) -> Option<WeightVariant> {
        match self {
            Estimator::Kws => Some(WeightVariant::KwOnly),
            Estimator::PostKws => Some(WeightVariant::PostRg),
            Estimator::PostKwsPop => Some(WeightVariant::PostPop),
            _ => None,
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Estimator> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Survey scale factor, already resolved.
    pub scale: f64,
    pub propensity: NewtonOptions,
    pub cox: NewtonOptions,
    pub collapse_cells: bool,
}

impl PipelineConfig {
    pub fn new(scale: f64) -> PipelineConfig {
        PipelineConfig {
            scale,
            propensity: crate::propensity::default_options(),
            cox: crate::survival::default_options(),
            collapse_cells: false,
        }
    }
}

/// Propensity fit and kernel shares; shared by all kernel-based estimators.
#[derive(Debug, Clone)]
pub struct Weighting {
    pub propensity: PropensityFit,
    pub silverman: Silverman,
    pub shares: KernelShares,
    pub x_cohort: Covariates,
    pub x_survey: Covariates,
    pub kw: Vec<f64>,
    sensitivity: OnceLock<GammaSensitivity>,
}

impl Weighting {
    /// Share sensitivity to the propensity coefficients, computed once.
    pub fn sensitivity(&self, survey_w: &[f64]) -> &GammaSensitivity {
        self.sensitivity.get_or_init(|| {
            let dh = silverman_gradient(&self.propensity.q_cohort, &self.x_cohort, &self.silverman);
            self.shares.gamma_sensitivity(&self.x_cohort, &self.x_survey, survey_w, &dh)
        })
    }
}

pub fn weigh(data: &StudyData, cfg: &PipelineConfig) -> Result<Weighting> {
    if data.cohort.z_star.p() != data.survey.z_star.p() {
        return Err(Error::InvalidArgument("cohort and survey propensity covariates differ".into()));
    }
    let x_cohort = data.cohort.z_star.with_intercept();
    let x_survey = data.survey.z_star.with_intercept();
    let propensity = fit_propensity_arrays(&x_cohort, &data.cohort.w, &x_survey, &data.survey.w, cfg.scale, &cfg.propensity)?;
    let silverman = silverman(&propensity.q_cohort)?;
    let shares = KernelShares::new(&propensity.q_cohort, &propensity.q_survey, &data.cohort.w, silverman.bandwidth);
    let kw = shares.kw_weights(&data.survey.w);
    Ok(Weighting {
        propensity,
        silverman,
        shares,
        x_cohort,
        x_survey,
        kw,
        sensitivity: OnceLock::new(),
    })
}

/// Final weights for a kernel-based estimator.
pub fn weight_set(data: &StudyData, weighting: &Weighting, variant: WeightVariant, collapse: bool) -> Result<WeightSet> {
    let bw = weighting.silverman.bandwidth;
    match variant {
        WeightVariant::KwOnly => Ok(WeightSet::kw_only(weighting.kw.clone(), bw)),
        _ => {
            let registry = data
                .registry
                .as_ref()
                .ok_or_else(|| Error::Registry("poststratification needs a registry summary".into()))?;
            poststratify_arrays(&weighting.kw, &data.cohort.keys, &data.cohort.d, registry, variant, collapse, bw)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Beta { index: usize },
    CumHazard { t: f64, method: BaselineMethod },
    Risk { z: Vec<f64>, t: f64, method: BaselineMethod },
}

impl Target {
    pub fn method(&self) -> Option<BaselineMethod> {
        match self {
            Target::Beta { .. } => None,
            Target::CumHazard { method, .. } | Target::Risk { method, .. } => Some(*method),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimatorFit {
    pub estimator: Estimator,
    /// Weights the Cox model was fit with (cohort or survey units).
    pub weights: Vec<f64>,
    pub weight_set: Option<WeightSet>,
    pub fit: RiskModelFit,
    pub breslow: BaselineCumHazard,
    pub par: Option<BaselineCumHazard>,
}

impl EstimatorFit {
    pub fn baseline(&self, method: BaselineMethod) -> Result<&BaselineCumHazard> {
        match method {
            BaselineMethod::Breslow => Ok(&self.breslow),
            BaselineMethod::Par => self
                .par
                .as_ref()
                .ok_or_else(|| Error::Registry("PAR baseline needs a registry summary".into())),
        }
    }

    pub fn value(&self, target: &Target) -> Result<f64> {
        match target {
            Target::Beta { index } => self
                .fit
                .beta
                .get(*index)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no coefficient {index}"))),
            Target::CumHazard { t, method } => self.baseline(*method)?.eval(*t),
            Target::Risk { z, t, method } => Ok(absolute_risk(&self.fit.beta, self.baseline(*method)?, z, *t)?.r_hat),
        }
    }
}

/// Fits one estimator. Kernel-based estimators reuse `weighting` when given.
pub fn fit_estimator(
    data: &StudyData,
    cfg: &PipelineConfig,
    estimator: Estimator,
    weighting: Option<&Weighting>,
) -> Result<EstimatorFit> {
    let (arm, weights, weight_set) = match estimator {
        Estimator::Survey => (&data.survey, data.survey.w.clone(), None),
        Estimator::Naive => (&data.cohort, data.cohort.w.clone(), None),
        _ => {
            let owned;
            let wt = match weighting {
                Some(w) => w,
                None => {
                    owned = weigh(data, cfg)?;
                    &owned
                }
            };
            let ws = weight_set(data, wt, estimator.variant().unwrap(), cfg.collapse_cells)?;
            (&data.cohort, ws.final_weights.clone(), Some(ws))
        }
    };
    let fit = fit_weighted_cox_arrays(&arm.z, &arm.x, &arm.d, &weights, &cfg.cox)?;
    let breslow = breslow_baseline(&fit);
    let par = data.registry.as_ref().map(|r| par_baseline(&fit, r)).transpose()?;
    Ok(EstimatorFit {
        estimator,
        weights,
        weight_set,
        fit,
        breslow,
        par,
    })
}
