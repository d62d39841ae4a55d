//! Fixed-size probability-proportional-to-size sampling by randomized
//! systematic selection.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Sample, SampleKind, Unit};
use crate::error::{Error, Result};

/// Inclusion probabilities `n * s_i / sum(s)`, with units whose value reaches
/// 1 taken with certainty and the rest rescaled over the remaining units.
pub fn pps_probabilities(size: &[f64], n: usize) -> Result<Vec<f64>> {
    if size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidArgument("size measures must be finite and positive".into()));
    }
    if n == 0 || n >= size.len() {
        return Err(Error::InvalidArgument(format!(
            "sample size {n} must be in 1..{}",
            size.len()
        )));
    }
    let mut pi = vec![0.0; size.len()];
    let mut certain = vec![false; size.len()];
    let mut remaining = n;
    loop {
        let total: f64 = size.iter().zip(&certain).filter(|(_, &c)| !c).map(|(s, _)| s).sum();
        let mut changed = false;
        for i in 0..size.len() {
            if !certain[i] {
                pi[i] = remaining as f64 * size[i] / total;
                if pi[i] >= 1.0 {
                    certain[i] = true;
                    pi[i] = 1.0;
                    remaining -= 1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        log::info!("PPS: {} certainty units", certain.iter().filter(|&&c| c).count());
    }
    Ok(pi)
}

/// Draws exactly `n` distinct units. Returns the selected indices in
/// ascending order and their inclusion probabilities.
pub fn draw_pps(size: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<f64>)> {
    let pi = pps_probabilities(size, n)?;
    let mut chosen: Vec<usize> = (0..size.len()).filter(|&i| pi[i] >= 1.0).collect();
    let mut order: Vec<usize> = (0..size.len()).filter(|&i| pi[i] < 1.0).collect();
    let need = n - chosen.len();
    order.shuffle(rng);
    // Systematic points on the cumulated sizes, so exactly `need` land.
    let total: f64 = order.iter().map(|&i| size[i]).sum();
    let step = total / need as f64;
    let u: f64 = rng.random();
    let mut next = u * step;
    let mut taken = 0;
    let mut cum = 0.0;
    for &i in &order {
        cum += size[i];
        if taken < need && next < cum {
            chosen.push(i);
            taken += 1;
            next = (u + taken as f64) * step;
        }
    }
    // Rounding can leave the last point a hair past the final cumulant.
    if taken < need {
        let last = *order.last().expect("nonempty frame");
        if !chosen.contains(&last) {
            chosen.push(last);
        }
    }
    chosen.sort_unstable();
    let probs = chosen.iter().map(|&i| pi[i]).collect();
    Ok((chosen, probs))
}

/// PPS draw from a population sample. Survey draws carry `w = 1/pi` with each
/// unit its own PSU; cohort draws carry `w = 1`.
pub fn draw_pps_sample(fp: &Sample, size: &[f64], n: usize, kind: SampleKind, rng: &mut ChaCha8Rng) -> Result<Sample> {
    if size.len() != fp.len() {
        return Err(Error::InvalidArgument("one size measure per population unit".into()));
    }
    let (idx, pi) = draw_pps(size, n, rng)?;
    let units = idx
        .iter()
        .zip(&pi)
        .enumerate()
        .map(|(k, (&i, &p))| Unit {
            w: if kind == SampleKind::Survey { 1.0 / p } else { 1.0 },
            stratum: 0,
            psu: k as i64,
            ..fp.units()[i].clone()
        })
        .collect();
    Sample::new(kind, fp.names().clone(), units)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn constant_sizes_are_equal_probability() {
        let pi = pps_probabilities(&[2.0; 10], 4).unwrap();
        assert!(pi.iter().all(|p| (p - 0.4).abs() < 1e-15));
    }

    #[test]
    fn certainty_units() {
        let pi = pps_probabilities(&[10.0, 1.0, 1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(pi[0], 1.0);
        assert!(pi[1..].iter().all(|p| (p - 0.25).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (idx, _) = draw_pps(&[10.0, 1.0, 1.0, 1.0, 1.0], 2, &mut rng).unwrap();
            assert_eq!(idx.len(), 2);
            assert_eq!(idx[0], 0);
        }
    }

    #[test]
    fn exact_size_and_distinct() {
        let size: Vec<f64> = (1..=1000).map(|i| (i as f64).sqrt()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [1, 17, 250, 999] {
            let (idx, pi) = draw_pps(&size, n, &mut rng).unwrap();
            assert_eq!(idx.len(), n);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(pi.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(pps_probabilities(&[1.0, 0.0], 1).is_err());
        assert!(pps_probabilities(&[1.0, 2.0], 2).is_err());
    }
}
