//! Synthetic inputs for the pipeline benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use riskcal::linalg::Covariates;
use riskcal::pipeline::{Arm, StudyData};

/// Cohort and survey of the given sizes with three risk covariates. Cohort
/// membership leans on z1; the survey has unequal weights and one stratum
/// of single-unit PSUs. No registry is attached.
pub fn study(seed: u64, n_cohort: usize, n_survey: usize) -> StudyData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cohort = arm(&mut rng, n_cohort, false);
    let survey = arm(&mut rng, n_survey, true);
    StudyData {
        cohort,
        survey,
        registry: None,
    }
}

fn arm(rng: &mut ChaCha8Rng, n: usize, survey: bool) -> Arm {
    let shift = if survey { 0.0 } else { 0.4 };
    let (mut z, mut zs, mut x, mut d, mut w) = (vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let z1: f64 = shift + Distribution::<f64>::sample(&StandardNormal, rng);
        let z2: f64 = StandardNormal.sample(rng);
        let z3: f64 = StandardNormal.sample(rng);
        let rate = 0.08 * (0.4 * z1 + 0.3 * z2 + 0.2 * z3).exp();
        let t = Exp::new(rate).expect("positive rate").sample(rng);
        let c = rng.random_range(2.0..14.0);
        x.push(t.min(c));
        d.push(t < c);
        z.extend([z1, z2, z3]);
        zs.extend([z1, z2]);
        w.push(if survey { rng.random_range(5.0..40.0) } else { 1.0 });
    }
    Arm {
        ids: (0..n).map(|i| i.to_string()).collect(),
        z: Covariates::new(n, 3, z),
        z_star: Covariates::new(n, 2, zs),
        x,
        d,
        w,
        keys: vec![String::new(); n],
        design: (0..n).map(|i| (0, i as i64)).collect(),
    }
}
