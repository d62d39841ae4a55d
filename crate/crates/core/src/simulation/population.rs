//! Finite population with Weibull event times, staggered entry,
//! administrative censoring and other-cause censoring.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnNames, HazardInterval, RegistrySummary, Sample, SampleKind, Unit};
use crate::error::{Error, Result};
use crate::linalg::Covariates;

/// Labels of the two post-strata, split at `z2 < 0`.
pub const CELL_LABELS: [&str; 2] = ["1", "2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub size: usize,
    /// Standard deviations of z1, z2, z3.
    pub sd: [f64; 3],
    /// Common correlation of z3 with z1 and with z2.
    pub rho: Option<f64>,
    pub beta0: f64,
    pub beta: [f64; 3],
    /// Weibull shape.
    pub alpha: f64,
    /// Entry times are uniform on `[0, entry_max]`.
    pub entry_max: f64,
    pub horizon: f64,
    /// Exponential other-cause censoring rate; `None` disables it.
    pub other_cause_rate: Option<f64>,
    /// Number of equal-width intervals in the registry composite hazard.
    pub hazard_bins: usize,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            size: 200_000,
            sd: [4.0, 1.5, 1.0],
            rho: None,
            beta0: (-(0.95f64.ln()) / 15.0).ln(),
            beta: [0.25, 0.4, 0.15],
            alpha: 1.0,
            entry_max: 1.0,
            horizon: 15.0,
            other_cause_rate: Some(-(0.9f64.ln()) / 15.0),
            hazard_bins: 500,
            seed: 42,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.size == 0 {
            return bad("population size must be positive");
        }
        if !self.sd.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad("covariate standard deviations must be positive");
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad("Weibull shape must be positive");
        }
        if !(self.entry_max >= 0.0 && self.entry_max < self.horizon) {
            return bad("entry window must lie inside the horizon");
        }
        if let Some(r) = self.other_cause_rate {
            if !(r.is_finite() && r > 0.0) {
                return bad("other-cause rate must be positive");
            }
        }
        if let Some(rho) = self.rho {
            if !(rho.abs() < std::f64::consts::FRAC_1_SQRT_2) {
                return bad("rho must satisfy |rho| < 1/sqrt(2) for a valid correlation matrix");
            }
        }
        if self.hazard_bins == 0 {
            return bad("hazard_bins must be positive");
        }
        Ok(())
    }
}

/// Generated population in column form.
#[derive(Debug, Clone)]
pub struct Population {
    pub z: Covariates,
    pub x: Vec<f64>,
    pub d: Vec<bool>,
    /// Post-stratum index into [`CELL_LABELS`].
    pub cell: Vec<u8>,
    pub registry: RegistrySummary,
}

impl Population {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn event_rate(&self) -> f64 {
        self.d.iter().filter(|&&d| d).count() as f64 / self.len() as f64
    }

    /// The population as a sample of kind `FinitePopulation`.
    pub fn to_sample(&self) -> Sample {
        let units = (0..self.len())
            .map(|i| {
                let z = self.z.row(i).to_vec();
                Unit {
                    id: i.to_string(),
                    z_star: z[..2].to_vec(),
                    z,
                    z0_star: vec![CELL_LABELS[self.cell[i] as usize].to_string()],
                    x: self.x[i],
                    d: self.d[i],
                    w: 1.0,
                    stratum: 0,
                    psu: i as i64,
                }
            })
            .collect();
        Sample::new(SampleKind::FinitePopulation, column_names(3), units).expect("generated units are valid")
    }
}

pub(crate) fn column_names(p: usize) -> ColumnNames {
    ColumnNames {
        z: ["z1", "z2", "z3"][..p].iter().map(|s| s.to_string()).collect(),
        z_star: vec!["z1".into(), "z2".into()],
        cells: vec!["z2_star".into()],
    }
}

pub fn generate_population(cfg: &PopulationConfig, rng: &mut ChaCha8Rng) -> Result<Population> {
    cfg.validate()?;
    let m = cfg.size;
    // Lower Cholesky factor of the correlation matrix [[1,0,r],[0,1,r],[r,r,1]].
    let r = cfg.rho.unwrap_or(0.0);
    let l33 = (1.0 - 2.0 * r * r).sqrt();
    let mut z = Vec::with_capacity(3 * m);
    let mut x = Vec::with_capacity(m);
    let mut d = Vec::with_capacity(m);
    let mut cell = Vec::with_capacity(m);
    for _ in 0..m {
        let e: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let zi = [
            cfg.sd[0] * e[0],
            cfg.sd[1] * e[1],
            cfg.sd[2] * (r * e[0] + r * e[1] + l33 * e[2]),
        ];
        let eta = cfg.beta0 + cfg.beta.iter().zip(&zi).map(|(b, v)| b * v).sum::<f64>();
        // S(t) = exp{-(theta t)^alpha} with theta^alpha = exp(eta).
        let e1: f64 = Exp1.sample(rng);
        let t = (e1 / eta.exp()).powf(1.0 / cfg.alpha);
        let t0 = if cfg.entry_max > 0.0 { rng.random_range(0.0..cfg.entry_max) } else { 0.0 };
        let c1 = cfg.horizon - t0;
        let c2 = match cfg.other_cause_rate {
            Some(rate) => Distribution::<f64>::sample(&Exp1, rng) / rate,
            None => f64::INFINITY,
        };
        let c: f64 = c1.min(c2);
        x.push(t.min(c));
        d.push(t <= c);
        cell.push(u8::from(zi[1] >= 0.0));
        z.extend(zi);
    }
    let z = Covariates::new(m, 3, z);
    let registry = build_registry(&x, &d, &cell, cfg.horizon, cfg.hazard_bins)?;
    Ok(Population { z, x, d, cell, registry })
}

/// Registry counts by post-stratum and the population Nelson-Aalen hazard
/// compressed to `bins` equal-width intervals on `[0, horizon]`. Each bin's
/// rate is its Nelson-Aalen mass over its width, so the cumulative hazard
/// is exact at every bin edge.
pub fn build_registry(x: &[f64], d: &[bool], cell: &[u8], horizon: f64, bins: usize) -> Result<RegistrySummary> {
    let mut events = IndexMap::new();
    let mut nonevents = IndexMap::new();
    for label in CELL_LABELS {
        events.insert(label.to_string(), 0u64);
        nonevents.insert(label.to_string(), 0u64);
    }
    for (&di, &g) in d.iter().zip(cell) {
        let target = if di { &mut events } else { &mut nonevents };
        target[g as usize] += 1;
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let width = horizon / bins as f64;
    let mut mass = vec![0.0; bins];
    let mut k = 0;
    while k < order.len() {
        let t = x[order[k]];
        let at_risk = (order.len() - k) as f64;
        let mut deaths = 0.0;
        while k < order.len() && x[order[k]] == t {
            deaths += f64::from(u8::from(d[order[k]]));
            k += 1;
        }
        if deaths > 0.0 && t <= horizon {
            let bin = ((t / width) as usize).min(bins - 1);
            mass[bin] += deaths / at_risk;
        }
    }
    let hazard = mass
        .iter()
        .enumerate()
        .map(|(b, m)| HazardInterval {
            t0: b as f64 * width,
            t1: if b + 1 == bins { horizon } else { (b + 1) as f64 * width },
            rate: m / width,
        })
        .collect();
    RegistrySummary::new(x.len() as u64, events, Some(nonevents), hazard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small(size: usize) -> PopulationConfig {
        PopulationConfig { size, ..PopulationConfig::default() }
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = small(500);
        let a = generate_population(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = generate_population(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.registry, b.registry);
    }

    #[test]
    fn referent_survival_without_censoring() {
        // beta = 0, no entry delay, no other-cause deaths: P(event by 15) = 5%.
        let cfg = PopulationConfig {
            size: 100_000,
            beta: [0.0; 3],
            entry_max: 0.0,
            other_cause_rate: None,
            ..PopulationConfig::default()
        };
        let pop = generate_population(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let se = (0.05 * 0.95 / 1e5f64).sqrt();
        assert!((pop.event_rate() - 0.05).abs() < 4.0 * se, "{}", pop.event_rate());
    }

    #[test]
    fn registry_matches_population() {
        let pop = generate_population(&small(2000), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let reg = &pop.registry;
        assert_eq!(reg.population_size, 2000);
        assert_eq!(reg.events_total() as usize, pop.d.iter().filter(|&&d| d).count());
        let nonevents: u64 = reg.nonevent_cells.as_ref().unwrap().values().sum();
        assert_eq!(reg.events_total() + nonevents, 2000);
        assert_eq!(reg.composite_hazard.len(), 500);
        // Cumulative hazard at the horizon equals the full Nelson-Aalen sum.
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| pop.x[a].total_cmp(&pop.x[b]));
        let na: f64 = order
            .iter()
            .enumerate()
            .filter(|(_, &i)| pop.d[i])
            .map(|(k, _)| 1.0 / (pop.len() - k) as f64)
            .sum();
        assert!((reg.cumulative_hazard(15.0).unwrap() - na).abs() < 1e-10);
    }

    #[test]
    fn correlated_covariates() {
        let cfg = PopulationConfig {
            size: 50_000,
            rho: Some(0.6),
            ..PopulationConfig::default()
        };
        let pop = generate_population(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (a, b) = (pop.z.column(0), pop.z.column(2));
        let cov = a.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>() / a.len() as f64;
        let corr = cov / (crate::linalg::sample_sd(&a) * crate::linalg::sample_sd(&b));
        assert!((corr - 0.6).abs() < 0.02, "{corr}");
    }

    #[test]
    fn invalid_config() {
        assert!(small(0).validate().is_err());
        let cfg = PopulationConfig { sd: [1.0, 0.0, 1.0], ..PopulationConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
