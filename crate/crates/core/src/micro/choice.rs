use rand::Rng;

use crate::error::{invalid, Result};

/// Multinomial logit probabilities for utilities `α_a - β τ_a`.
pub fn logit_probabilities(fees: &[f64], attractions: &[f64], beta: f64) -> Result<Vec<f64>> {
    if fees.is_empty() {
        return Err(invalid("choice set is empty"));
    }
    if fees.len() != attractions.len() {
        return Err(invalid("fees and attractions must have the same length"));
    }
    if !(beta >= 0.0) {
        return Err(invalid(format!("fee coefficient must be >= 0, got {beta}")));
    }
    let utils: Vec<f64> = fees.iter().zip(attractions).map(|(t, a)| a - beta * t).collect();
    let top = utils.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = utils.iter().map(|u| (u - top).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Index of the alternative selected by the uniform draw `u` in `[0, 1)`.
pub fn pick(probabilities: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.len() - 1
}

/// Samples a parking alternative; returns the chosen index and the probabilities.
pub fn choose_parking_alternative<R: Rng + ?Sized>(
    fees: &[f64],
    attractions: &[f64],
    beta: f64,
    rng: &mut R,
) -> Result<(usize, Vec<f64>)> {
    let p = logit_probabilities(fees, attractions, beta)?;
    let i = pick(&p, rng.gen());
    Ok((i, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_choice() {
        let p = logit_probabilities(&[1.0, 1.0], &[0.5, 0.5], 0.3).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn fee_and_attraction() {
        let p = logit_probabilities(&[2.0, 5.0], &[0.0, 1.0], 0.3).unwrap();
        let expect = (-0.6f64).exp() / ((-0.6f64).exp() + (-0.5f64).exp());
        assert_abs_diff_eq!(p[0], expect, epsilon = 1e-12);
        assert_abs_diff_eq!(p[0], 0.475, epsilon = 1e-3);
    }

    #[test]
    fn uniform_without_fee_effect() {
        let p = logit_probabilities(&[0.0, 3.0, 7.0, 9.0], &[0.0; 4], 0.0).unwrap();
        for x in p {
            assert_abs_diff_eq!(x, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn empty_set_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(choose_parking_alternative(&[], &[], 0.3, &mut rng).is_err());
    }

    #[test]
    fn sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let hits = (0..n)
            .filter(|_| {
                choose_parking_alternative(&[2.0, 5.0], &[0.0, 1.0], 0.3, &mut rng)
                    .unwrap()
                    .0
                    == 0
            })
            .count();
        assert_abs_diff_eq!(hits as f64 / n as f64, 0.475, epsilon = 0.015);
    }

    #[test]
    fn pick_boundaries() {
        assert_eq!(pick(&[0.25, 0.75], 0.0), 0);
        assert_eq!(pick(&[0.25, 0.75], 0.25), 1);
        assert_eq!(pick(&[0.25, 0.75], 0.999_999_9), 1);
    }
}
