//! Overlapping n-gram perturbation with a split budget and symmetric
//! prefix/suffix grams at the trajectory ends.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distance::ElementMetric;
use crate::em::{em_distribution, EmDistribution};
use crate::error::{Error, Result};
use crate::ngram::{GramFamily, NGramSet, NodeId};

/// One perturbed gram covering trajectory indices `a..=b` (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "Id: NodeId")]
pub struct PerturbEntry<Id: NodeId> {
    pub a: usize,
    pub b: usize,
    pub gram: Vec<Id>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "Id: NodeId")]
pub struct PerturbRecord<Id: NodeId> {
    pub entries: Vec<PerturbEntry<Id>>,
    pub trajectory_len: usize,
    /// Effective gram length after clamping to the trajectory length.
    pub n: usize,
    pub epsilon: f64,
    pub epsilon_prime: f64,
}

impl<Id: NodeId> PerturbRecord<Id> {
    pub fn calls(&self) -> usize {
        self.entries.len()
    }

    /// Entries covering index `i`, with the gram element at that index.
    pub fn covering(&self, i: usize) -> impl Iterator<Item = Id> + '_ {
        self.entries
            .iter()
            .filter(move |e| e.a <= i && i <= e.b)
            .map(move |e| e.gram[i - e.a])
    }
}

/// ε / (|τ| + n − 1).
pub fn split_budget(epsilon: f64, len: usize, n: usize) -> Result<f64> {
    check_budget(epsilon, len, n)?;
    Ok(epsilon / (len + n - 1) as f64)
}

/// ε / (2|τ| + n − 1): separate POI-gram and timestep passes.
pub fn split_budget_separate(epsilon: f64, len: usize, n: usize) -> Result<f64> {
    check_budget(epsilon, len, n)?;
    Ok(epsilon / (2 * len + n - 1) as f64)
}

fn check_budget(epsilon: f64, len: usize, n: usize) -> Result<()> {
    if !(epsilon > 0.0) || !epsilon.is_finite() || len == 0 || n == 0 {
        return Err(Error::InvalidParameter(format!(
            "need epsilon > 0, |τ| >= 1 and n >= 1 (got {epsilon}, {len}, {n})"
        )));
    }
    Ok(())
}

/// Spans queried for a trajectory of length `len`: the sliding n-grams,
/// then prefixes `0..=k-1` and suffixes `len-k..=len-1` for k = 1..n−1.
pub fn gram_spans(len: usize, n: usize) -> Vec<(usize, usize)> {
    let n = n.min(len);
    if n == 0 {
        return Vec::new();
    }
    let mut spans: Vec<(usize, usize)> = (0..=len - n).map(|a| (a, a + n - 1)).collect();
    for k in 1..n {
        spans.push((0, k - 1));
        spans.push((len - k, len - 1));
    }
    spans
}

pub fn coverage_histogram<Id: NodeId>(record: &PerturbRecord<Id>) -> Vec<usize> {
    let mut counts = vec![0; record.trajectory_len];
    for e in &record.entries {
        counts[e.a..=e.b].iter_mut().for_each(|c| *c += 1);
    }
    counts
}

/// EM distribution over `set` for the true gram `truth`, scored by −d_w.
pub fn gram_distribution<Id: NodeId, M: ElementMetric<Id>>(
    truth: &[Id],
    set: &NGramSet<Id>,
    metric: &M,
    epsilon_prime: f64,
) -> Result<EmDistribution> {
    if set.is_empty() {
        return Err(Error::EmptyGramSet(truth.len()));
    }
    let distances: Vec<f64> = set
        .iter()
        .map(|w| truth.iter().zip(w).map(|(a, b)| metric.d(*a, *b)).sum())
        .collect();
    let sensitivity = truth.len() as f64 * metric.element_bound();
    em_distribution(&distances, epsilon_prime, sensitivity.max(f64::MIN_POSITIVE))
}

/// Perturbs every span of `gram_spans` with budget ε / (|τ| + n − 1) each.
pub fn perturb_trajectory<Id: NodeId, M: ElementMetric<Id>, R: Rng + ?Sized>(
    trajectory: &[Id],
    family: &GramFamily<Id>,
    n: usize,
    metric: &M,
    epsilon: f64,
    rng: &mut R,
) -> Result<PerturbRecord<Id>> {
    let len = trajectory.len();
    let epsilon_prime = split_budget(epsilon, len, n.min(len).max(1))?;
    perturb_spans(trajectory, family, n, metric, epsilon, epsilon_prime, rng)
}

/// As `perturb_trajectory` but with a caller-chosen per-call budget.
pub fn perturb_spans<Id: NodeId, M: ElementMetric<Id>, R: Rng + ?Sized>(
    trajectory: &[Id],
    family: &GramFamily<Id>,
    n: usize,
    metric: &M,
    epsilon: f64,
    epsilon_prime: f64,
    rng: &mut R,
) -> Result<PerturbRecord<Id>> {
    let len = trajectory.len();
    let n = n.min(len);
    if n > family.max_n() {
        return Err(Error::EmptyGramSet(n));
    }
    let entries = gram_spans(len, n)
        .into_iter()
        .map(|(a, b)| {
            let k = b - a + 1;
            let set = family.get(k).ok_or(Error::EmptyGramSet(k))?;
            let dist = gram_distribution(&trajectory[a..=b], set, metric, epsilon_prime)?;
            Ok(PerturbEntry {
                a,
                b,
                gram: set.gram(dist.sample(rng)).to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbRecord {
        entries,
        trajectory_len: len,
        n,
        epsilon,
        epsilon_prime,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::stc::RegionId;

    struct LineMetric(f64);

    impl ElementMetric<RegionId> for LineMetric {
        fn d(&self, a: RegionId, b: RegionId) -> f64 {
            (a.0 as f64 - b.0 as f64).abs()
        }
        fn element_bound(&self) -> f64 {
            self.0
        }
    }

    fn full_family(regions: usize, n: usize) -> GramFamily<RegionId> {
        let succ: Vec<Vec<RegionId>> = (0..regions)
            .map(|_| (0..regions as u32).map(RegionId).collect())
            .collect();
        let sets = (1..=n)
            .map(|k| NGramSet::enumerate(k, &succ, |_| Some(0), |s, _| Some(s), 1e9).unwrap())
            .collect();
        GramFamily::new(sets).unwrap()
    }

    #[test]
    fn budget_examples() {
        assert_eq!(split_budget(5.0, 4, 2).unwrap(), 1.0);
        assert_eq!(split_budget(5.0, 1, 1).unwrap(), 5.0);
        assert!((split_budget_separate(5.0, 4, 2).unwrap() - 5.0 / 9.0).abs() < 1e-15);
        assert!(split_budget(0.0, 4, 2).is_err());
        assert!(split_budget(1.0, 0, 2).is_err());
    }

    #[test]
    fn bigram_spans_of_four() {
        assert_eq!(gram_spans(4, 2), vec![(0, 1), (1, 2), (2, 3), (0, 0), (3, 3)]);
        assert_eq!(gram_spans(3, 1), vec![(0, 0), (1, 1), (2, 2)]);
        // Clamped to the trajectory length.
        assert_eq!(gram_spans(1, 3), vec![(0, 0)]);
    }

    #[test]
    fn coverage_is_uniform() {
        for n in 1..=4 {
            for len in n..=10 {
                let spans = gram_spans(len, n);
                assert_eq!(spans.len(), len + n - 1);
                let mut counts = vec![0; len];
                for (a, b) in spans {
                    (a..=b).for_each(|i| counts[i] += 1);
                }
                assert!(counts.iter().all(|c| *c == n), "n={n} len={len} {counts:?}");
            }
        }
    }

    #[test]
    fn record_shape() {
        let fam = full_family(5, 2);
        let mut rng = substream(1, "t");
        let traj: Vec<RegionId> = [0, 1, 2, 3].map(RegionId).to_vec();
        let rec = perturb_trajectory(&traj, &fam, 2, &LineMetric(4.0), 5.0, &mut rng).unwrap();
        assert_eq!(rec.calls(), 5);
        assert_eq!(coverage_histogram(&rec), vec![2; 4]);
        assert!((rec.calls() as f64 * rec.epsilon_prime - 5.0).abs() < 1e-12);
        assert_eq!(rec.covering(0).count(), 2);
    }

    #[test]
    fn huge_budget_returns_truth() {
        let fam = full_family(5, 2);
        let traj: Vec<RegionId> = [4, 0, 2].map(RegionId).to_vec();
        let mut hits = 0;
        for run in 0..1000 {
            let mut rng = substream(run, "big");
            let rec = perturb_trajectory(&traj, &fam, 2, &LineMetric(4.0), 1e6, &mut rng).unwrap();
            if rec.entries.iter().all(|e| e.gram == traj[e.a..=e.b]) {
                hits += 1;
            }
        }
        assert!(hits >= 999);
    }

    #[test]
    fn unigram_mode() {
        let fam = full_family(3, 1);
        let mut rng = substream(2, "u");
        let traj: Vec<RegionId> = [0, 1, 2].map(RegionId).to_vec();
        let rec = perturb_trajectory(&traj, &fam, 1, &LineMetric(2.0), 3.0, &mut rng).unwrap();
        assert_eq!(rec.calls(), 3);
        assert_eq!(coverage_histogram(&rec), vec![1; 3]);
        assert_eq!(rec.epsilon_prime, 1.0);
    }

    #[test]
    fn empty_gram_set_is_an_error() {
        let fam = GramFamily::new(vec![NGramSet::enumerate(1, &[], |_| Some(0), |s, _| Some(s), 1e9).unwrap()]).unwrap();
        let mut rng = substream(2, "u");
        let err = perturb_trajectory(&[RegionId(0)], &fam, 1, &LineMetric(2.0), 3.0, &mut rng).unwrap_err();
        assert!(matches!(err, Error::EmptyGramSet(1)));
    }
}
