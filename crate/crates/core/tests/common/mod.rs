#![allow(dead_code)]

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use riskcal::linalg::Covariates;
use riskcal::pipeline::{Arm, StudyData};
use riskcal::{HazardInterval, RegistrySummary};

/// Small synthetic cohort + survey + registry. Cohort participation leans
/// on z1 and events; the survey carries unequal weights.
pub fn small_study(seed: u64, n_c: usize, n_s: usize) -> StudyData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arm = |n: usize, survey: bool, rng: &mut ChaCha8Rng| {
        let (mut z, mut zs, mut x, mut d, mut w, mut keys) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let shift = if survey { 0.0 } else { 0.4 };
            let z1: f64 = shift + Distribution::<f64>::sample(&StandardNormal, rng);
            let z2: f64 = Distribution::<f64>::sample(&StandardNormal, rng);
            let z3: f64 = Distribution::<f64>::sample(&StandardNormal, rng);
            let rate = 0.08 * (0.4 * z1 + 0.3 * z2 + 0.2 * z3).exp();
            let t = Exp::new(rate).unwrap().sample(rng);
            let c = rng.random_range(2.0..10.0);
            x.push(if t < c { t } else { c });
            d.push(t < c);
            if survey {
                z.extend([z1, z2]);
            } else {
                z.extend([z1, z2, z3]);
            }
            zs.extend([z1, z2]);
            w.push(if survey { rng.random_range(5.0..40.0) } else { 1.0 });
            keys.push(if z2 < 0.0 { "1".to_string() } else { "2".to_string() });
        }
        let p = if survey { 2 } else { 3 };
        Arm {
            ids: (0..n).map(|i| i.to_string()).collect(),
            z: Covariates::new(n, p, z),
            z_star: Covariates::new(n, 2, zs),
            x,
            d,
            w,
            keys,
            design: (0..n).map(|i| (0, i as i64)).collect(),
        }
    };
    let cohort = arm(n_c, false, &mut rng);
    let survey = arm(n_s, true, &mut rng);
    let mut cells = IndexMap::new();
    let mut non = IndexMap::new();
    for k in ["1", "2"] {
        let ev = cohort.keys.iter().zip(&cohort.d).filter(|(g, &e)| g.as_str() == k && e).count() as u64;
        let ne = cohort.keys.iter().zip(&cohort.d).filter(|(g, &e)| g.as_str() == k && !e).count() as u64;
        cells.insert(k.to_string(), 17 * ev + 3);
        non.insert(k.to_string(), 15 * ne + 11);
    }
    let m = cells.values().sum::<u64>() + non.values().sum::<u64>();
    let registry = RegistrySummary::new(
        m,
        cells,
        Some(non),
        vec![
            HazardInterval { t0: 0.0, t1: 3.0, rate: 0.05 },
            HazardInterval { t0: 3.0, t1: 20.0, rate: 0.09 },
        ],
    )
    .unwrap();
    StudyData { cohort, survey, registry: Some(registry) }
}
pub mod fd;
pub mod props;
