//! Exponential mechanism over an explicit candidate list with
//! quality = −distance, evaluated in log space.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EmDistribution {
    log_weights: Vec<f64>,
    probabilities: Vec<f64>,
    cumulative: Vec<f64>,
    epsilon: f64,
}

/// `p_i ∝ exp(−ε·d_i / 2Δ)`, normalised after subtracting the largest log weight.
pub fn em_distribution(distances: &[f64], epsilon: f64, sensitivity: f64) -> Result<EmDistribution> {
    if distances.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !(epsilon > 0.0) || !(sensitivity > 0.0) || !epsilon.is_finite() || !sensitivity.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "epsilon ({epsilon}) and sensitivity ({sensitivity}) must be positive and finite"
        )));
    }
    if let Some(i) = distances.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFiniteDistance(i));
    }
    let scale = epsilon / (2.0 * sensitivity);
    let log_weights: Vec<f64> = distances.iter().map(|d| -scale * d).collect();
    Ok(EmDistribution::from_log_weights(log_weights, epsilon))
}

impl EmDistribution {
    fn from_log_weights(log_weights: Vec<f64>, epsilon: f64) -> Self {
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probabilities: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
        let total: f64 = probabilities.iter().sum();
        probabilities.iter_mut().for_each(|p| *p /= total);
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = probabilities
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        *cumulative.last_mut().unwrap() = 1.0;
        Self {
            log_weights,
            probabilities,
            cumulative,
            epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Inverse-CDF draw; candidate `i` owns `[cum_{i-1}, cum_i)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        self.cumulative
            .partition_point(|c| *c <= u)
            .min(self.cumulative.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailEstimate {
    pub empirical: f64,
    /// Tail mass computed from the closed-form distribution.
    pub exact: f64,
    /// e^{−ζ}.
    pub bound: f64,
    /// Binomial standard deviation of the empirical estimate at the bound.
    pub sigma: f64,
    /// Distance at or beyond which a draw counts as a tail event.
    pub distance_threshold: f64,
}

impl TailEstimate {
    pub fn within_bound(&self) -> bool {
        self.empirical <= self.bound + 3.0 * self.sigma
    }
}

/// Empirical probability that the sampled quality falls at or below
/// `OPT − (2Δ/ε)(ln(|Y|/|Y_OPT|) + ζ)`.
pub fn utility_tail<R: Rng + ?Sized>(
    distances: &[f64],
    epsilon: f64,
    sensitivity: f64,
    zeta: f64,
    trials: usize,
    rng: &mut R,
) -> Result<TailEstimate> {
    if !(zeta > 0.0) || trials == 0 {
        return Err(Error::InvalidParameter("zeta must be positive and trials non-zero".into()));
    }
    let dist = em_distribution(distances, epsilon, sensitivity)?;
    let best = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let optimal = distances.iter().filter(|d| **d == best).count() as f64;
    let slack = 2.0 * sensitivity / epsilon * ((distances.len() as f64 / optimal).ln() + zeta);
    let threshold = best + slack;
    let is_tail = |d: f64| -d <= -threshold;
    let exact = distances
        .iter()
        .zip(dist.probabilities())
        .filter(|(d, _)| is_tail(**d))
        .map(|(_, p)| p)
        .sum();
    let hits = (0..trials).filter(|_| is_tail(distances[dist.sample(rng)])).count();
    let bound = (-zeta).exp();
    Ok(TailEstimate {
        empirical: hits as f64 / trials as f64,
        exact,
        bound,
        sigma: (bound * (1.0 - bound) / trials as f64).sqrt(),
        distance_threshold: threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    #[test]
    fn uniform_when_equal() {
        let d = em_distribution(&[3.0; 4], 1.0, 1.0).unwrap();
        assert!(d.probabilities().iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn logistic_pair() {
        let d = em_distribution(&[0.0, 2.5], 2.0, 2.5).unwrap();
        let p = d.probabilities();
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn three_candidates_against_direct_evaluation() {
        // exp(0), exp(-1/2), exp(-1) normalised.
        let w = [1.0f64, (-0.5f64).exp(), (-1.0f64).exp()];
        let z: f64 = w.iter().sum();
        let d = em_distribution(&[0.0, 1.0, 2.0], 2.0, 2.0).unwrap();
        for (p, wi) in d.probabilities().iter().zip(w) {
            assert!((p - wi / z).abs() < 1e-12);
        }
        let expected = [0.5064, 0.3071, 0.1863];
        for (p, e) in d.probabilities().iter().zip(expected) {
            assert!((p - e).abs() < 1e-3);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(em_distribution(&[], 1.0, 1.0), Err(Error::EmptyCandidates)));
        assert!(matches!(
            em_distribution(&[0.0, f64::NAN], 1.0, 1.0),
            Err(Error::NonFiniteDistance(1))
        ));
        assert!(em_distribution(&[0.0], 0.0, 1.0).is_err());
        assert!(em_distribution(&[0.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn single_candidate_always_drawn() {
        let d = em_distribution(&[7.0], 1.0, 1.0).unwrap();
        let mut rng = substream(1, "x");
        assert!((0..100).all(|_| d.sample(&mut rng) == 0));
    }

    #[test]
    fn reproducible_draws() {
        let d = em_distribution(&[0.0; 4], 1.0, 1.0).unwrap();
        let draw = |seed| {
            let mut rng = substream(seed, "u");
            (0..32).map(|_| d.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn empirical_frequency() {
        let d = em_distribution(&[0.0, 1.0], 2.0, 1.0).unwrap();
        let mut rng = substream(42, "freq");
        let n = 100_000;
        let hits = (0..n).filter(|_| d.sample(&mut rng) == 0).count();
        assert!((hits as f64 / n as f64 - 0.7311).abs() < 0.01);
    }

    #[test]
    fn tail_examples() {
        let mut rng = substream(3, "tail");
        let distances: Vec<f64> = (0..10).map(f64::from).collect();
        let t = utility_tail(&distances, 3.0, 9.0, 1.0, 10_000, &mut rng).unwrap();
        assert!(t.empirical <= (-1.0f64).exp() + 0.015);
        assert!(t.exact <= t.bound);
        let t = utility_tail(&distances, 3.0, 9.0, 1e6, 100, &mut rng).unwrap();
        assert_eq!(t.empirical, 0.0);
        let t = utility_tail(&[2.0; 5], 1.0, 1.0, 0.1, 1000, &mut rng).unwrap();
        assert_eq!(t.empirical, 0.0);
        assert_eq!(t.exact, 0.0);
    }

    #[test]
    fn extreme_exponents_stay_finite() {
        let d = em_distribution(&[0.0, 1e4, 5e3], 2.0, 1.0).unwrap();
        assert!(d.probabilities().iter().all(|p| p.is_finite()));
        assert!((d.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ratio_bounded_for_any_two_inputs(
            a in proptest::collection::vec(0.0f64..=1.0, 1..20),
            b_seed in proptest::collection::vec(0.0f64..=1.0, 20),
            eps in 0.01f64..10.0,
            delta in 0.1f64..50.0,
        ) {
            // Two distance vectors over the same candidates, entries in [0, Δ].
            let da: Vec<f64> = a.iter().map(|x| x * delta).collect();
            let db: Vec<f64> = b_seed[..a.len()].iter().map(|x| x * delta).collect();
            let pa = em_distribution(&da, eps, delta).unwrap();
            let pb = em_distribution(&db, eps, delta).unwrap();
            let sum: f64 = pa.probabilities().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            for (x, y) in pa.probabilities().iter().zip(pb.probabilities()) {
                prop_assert!(*x > 0.0);
                prop_assert!(x / y <= eps.exp() * (1.0 + 1e-9));
            }
            let max = pa.probabilities().iter().copied().fold(0.0, f64::max);
            let min = pa.probabilities().iter().copied().fold(1.0, f64::min);
            prop_assert!(max / min <= (eps / 2.0).exp() * (1.0 + 1e-9));
        }

        #[test]
        fn scale_consistent(
            d in proptest::collection::vec(0.0f64..10.0, 1..12),
            k in 0.01f64..100.0,
        ) {
            let p1 = em_distribution(&d, 1.5, 10.0).unwrap();
            let scaled: Vec<f64> = d.iter().map(|x| x * k).collect();
            let p2 = em_distribution(&scaled, 1.5, 10.0 * k).unwrap();
            for (x, y) in p1.probabilities().iter().zip(p2.probabilities()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
