//! Comparison mechanisms: POI grams without the region hierarchy and
//! point-independent perturbation with and without reachability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{PoiCatalog, PoiIdx, SpeedProfile};
use crate::distance::{DistanceParams, PoiMetric};
use crate::em::em_distribution;
use crate::error::{Error, Result};
use crate::ngram::{build_poi_family, GramFamily};
use crate::perturb::{perturb_spans, split_budget_separate};
use crate::reconstruct::{smooth_or_repair, solve_region_path, ReconstructionInstance};
use crate::time::TimeAxis;
use crate::trajectory::Visit;

/// What a mechanism returns for one trajectory, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismOutput {
    pub visits: Vec<Visit>,
    /// Exponential-mechanism invocations.
    pub calls: usize,
    pub epsilon_prime: f64,
    pub smoothed: bool,
    /// Reconstruction found no continuous path, or an independent draw had
    /// no reachable candidate.
    pub fallback: bool,
    pub rescued: usize,
    pub attempts: usize,
}

/// Every open (POI, timestep) pair with precomputed distance components.
#[derive(Debug, Clone)]
pub struct VisitSpace {
    states: Vec<Visit>,
    pois: usize,
    steps: usize,
    ds: Vec<f64>,
    dc: Vec<f64>,
    dt: Vec<f64>,
    params: DistanceParams,
    sensitivity: f64,
}

impl VisitSpace {
    pub fn new(catalog: &PoiCatalog, axis: &TimeAxis, params: &DistanceParams) -> Self {
        let pois = catalog.len();
        let steps = axis.num_steps() as usize;
        let states = catalog
            .indices()
            .flat_map(|p| (0..steps as u32).map(move |t| Visit::new(p, t)))
            .filter(|v| catalog.open_at(v.poi, v.t, axis))
            .collect();
        let h = catalog.hierarchy();
        let mut ds = vec![0.0; pois * pois];
        let mut dc = vec![0.0; pois * pois];
        for a in catalog.indices() {
            for b in catalog.indices() {
                ds[a.index() * pois + b.index()] = catalog.physical_distance(a, b);
                dc[a.index() * pois + b.index()] =
                    params.category(h, catalog.poi(a).leaf_category(), catalog.poi(b).leaf_category());
            }
        }
        let mut dt = vec![0.0; steps * steps];
        for a in 0..steps {
            for b in 0..steps {
                dt[a * steps + b] = params.time(axis.minute_of(a as u32) as f64, axis.minute_of(b as u32) as f64);
            }
        }
        let ds_max = catalog.bounding_box().map_or(0.0, |bb| bb.diagonal_km());
        Self {
            states,
            pois,
            steps,
            ds,
            dc,
            dt,
            params: params.clone(),
            sensitivity: params.element_bound(ds_max),
        }
    }

    pub fn states(&self) -> &[Visit] {
        &self.states
    }

    #[inline]
    pub fn d(&self, a: Visit, b: Visit) -> f64 {
        let pp = a.poi.index() * self.pois + b.poi.index();
        let tt = a.t as usize * self.steps + b.t as usize;
        self.params.combine(self.ds[pp], self.dt[tt], self.dc[pp])
    }

    /// Time-only distance between two timesteps.
    #[inline]
    pub fn d_time(&self, a: u32, b: u32) -> f64 {
        self.params.combine(0.0, self.dt[a as usize * self.steps + b as usize], 0.0)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn params(&self) -> &DistanceParams {
        &self.params
    }
}

fn link_ok(catalog: &PoiCatalog, axis: &TimeAxis, speed: &SpeedProfile, a: Visit, b: Visit) -> bool {
    b.t > a.t && catalog.reachable(a.poi, b.poi, axis.minute_of(a.t), axis.gap_minutes(a.t, b.t), speed)
}

fn em_pick<R: Rng + ?Sized>(
    truth: Visit,
    candidates: &[Visit],
    space: &VisitSpace,
    epsilon: f64,
    rng: &mut R,
) -> Result<Visit> {
    let distances: Vec<f64> = candidates.iter().map(|c| space.d(truth, *c)).collect();
    let dist = em_distribution(&distances, epsilon, space.sensitivity().max(f64::MIN_POSITIVE))?;
    Ok(candidates[dist.sample(rng)])
}

/// Smooths `draft` and reports whether anything moved.
fn smooth(draft: Vec<Visit>, catalog: &PoiCatalog, axis: &TimeAxis, speed: &SpeedProfile) -> Result<(Vec<Visit>, bool)> {
    let out = smooth_or_repair(&draft, catalog, axis, speed)?;
    let moved = out != draft;
    Ok((out, moved))
}

/// Perturbs each point on its own with budget ε/|τ| over all open states.
/// With `reach`, each draw is limited to states after and reachable from the
/// previous output; an empty restriction falls back to all states and the
/// result is smoothed. Without it, times are sorted and smoothed.
pub fn independent_perturb<R: Rng + ?Sized>(
    trajectory: &[Visit],
    space: &VisitSpace,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    speed: &SpeedProfile,
    epsilon: f64,
    reach: bool,
    rng: &mut R,
) -> Result<MechanismOutput> {
    if trajectory.is_empty() {
        return Err(Error::InvalidParameter("empty trajectory".into()));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!("epsilon must be positive (got {epsilon})")));
    }
    let epsilon_prime = epsilon / trajectory.len() as f64;
    let mut out: Vec<Visit> = Vec::with_capacity(trajectory.len());
    let mut fallback = false;
    for truth in trajectory {
        let pick = match out.last() {
            Some(prev) if reach => {
                let allowed: Vec<Visit> = space
                    .states()
                    .iter()
                    .copied()
                    .filter(|s| link_ok(catalog, axis, speed, *prev, *s))
                    .collect();
                if allowed.is_empty() {
                    fallback = true;
                    em_pick(*truth, space.states(), space, epsilon_prime, rng)?
                } else {
                    em_pick(*truth, &allowed, space, epsilon_prime, rng)?
                }
            }
            _ => em_pick(*truth, space.states(), space, epsilon_prime, rng)?,
        };
        out.push(pick);
    }
    let (visits, smoothed) = if reach && !fallback {
        (out, false)
    } else {
        if !reach {
            let mut times: Vec<u32> = out.iter().map(|v| v.t).collect();
            times.sort_unstable();
            out.iter_mut().zip(times).for_each(|(v, t)| v.t = t);
        }
        smooth(out, catalog, axis, speed)?
    };
    Ok(MechanismOutput {
        visits,
        calls: trajectory.len(),
        epsilon_prime,
        smoothed,
        fallback,
        rescued: 0,
        attempts: 0,
    })
}

/// POI grams and POI bigrams for the hierarchy-free n-gram mechanism.
#[derive(Debug, Clone)]
pub struct PoiGrams {
    pub metric: PoiMetric,
    pub family: GramFamily<PoiIdx>,
}

impl PoiGrams {
    pub fn new(catalog: &PoiCatalog, params: &DistanceParams, speed: &SpeedProfile, gap_minutes: u32, n: usize, cap: f64) -> Result<Self> {
        Ok(Self {
            metric: PoiMetric::new(catalog, params),
            family: build_poi_family(catalog, speed, gap_minutes, n.max(2), cap)?,
        })
    }
}

/// N-gram perturbation over raw POIs with a separate per-point timestep
/// pass; the budget is split over |τ| + n − 1 gram calls and |τ| time calls.
pub fn ngram_without_hierarchy<R: Rng + ?Sized>(
    trajectory: &[Visit],
    grams: &PoiGrams,
    space: &VisitSpace,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    speed: &SpeedProfile,
    n: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<MechanismOutput> {
    let len = trajectory.len();
    let n = n.min(len).max(1);
    let epsilon_prime = split_budget_separate(epsilon, len, n)?;
    let pois: Vec<PoiIdx> = trajectory.iter().map(|v| v.poi).collect();
    let record = perturb_spans(&pois, &grams.family, n, &grams.metric, epsilon, epsilon_prime, rng)?;
    let time_bound = space.params().combine(0.0, space.params().time_cap, 0.0).max(f64::MIN_POSITIVE);
    let mut times = Vec::with_capacity(len);
    for v in trajectory {
        let distances: Vec<f64> = (0..space.steps() as u32).map(|t| space.d_time(v.t, t)).collect();
        let dist = em_distribution(&distances, epsilon_prime, time_bound)?;
        times.push(dist.sample(rng) as u32);
    }
    times.sort_unstable();
    let inst = ReconstructionInstance::build(&record, &grams.metric, catalog.indices().collect(), grams.family.get(2))?;
    let open: Vec<Vec<u32>> = inst
        .candidates()
        .iter()
        .map(|p| (0..space.steps() as u32).filter(|t| catalog.open_at(PoiIdx(*p), *t, axis)).collect())
        .collect();
    let inst = inst.with_times(open)?;
    let sol = solve_region_path(&inst)?;
    let draft: Vec<Visit> = sol.path.iter().zip(&times).map(|(p, t)| Visit::new(PoiIdx(*p), *t)).collect();
    let (visits, smoothed) = smooth(draft, catalog, axis, speed)?;
    Ok(MechanismOutput {
        visits,
        calls: record.calls() + len,
        epsilon_prime,
        smoothed,
        fallback: sol.fallback,
        rescued: 0,
        attempts: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CategoryHierarchy, Poi};
    use crate::trajectory::check_feasible;
    use rand::SeedableRng;

    fn catalog() -> PoiCatalog {
        let hierarchy =
            CategoryHierarchy::from_triples([("food", 1, None), ("cafe", 2, Some("food")), ("bar", 2, Some("food"))]).unwrap();
        let leaf = |id: &str| vec![hierarchy.lookup("food").unwrap(), hierarchy.lookup(id).unwrap()];
        let pois = (0..6)
            .map(|i| Poi {
                id: format!("p{i}"),
                lat: 49.26 + 0.002 * i as f64,
                lon: -123.25,
                category_path: leaf(if i % 2 == 0 { "cafe" } else { "bar" }),
                open: 0,
                close: 1440,
                popularity: 0.5,
            })
            .collect::<Vec<_>>();
        PoiCatalog::new(pois, hierarchy).unwrap()
    }

    fn truth() -> Vec<Visit> {
        vec![Visit::new(PoiIdx(0), 3), Visit::new(PoiIdx(2), 5), Visit::new(PoiIdx(4), 9)]
    }

    #[test]
    fn independent_outputs_are_feasible() {
        let c = catalog();
        let axis = TimeAxis::new(60).unwrap();
        let speed = SpeedProfile::constant(4.0);
        let space = VisitSpace::new(&c, &axis, &DistanceParams::default());
        assert_eq!(space.states().len(), 6 * 24);
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        for reach in [true, false] {
            for _ in 0..50 {
                let out = independent_perturb(&truth(), &space, &c, &axis, &speed, 1.0, reach, &mut rng).unwrap();
                assert_eq!(out.calls, 3);
                assert!((out.epsilon_prime * 3.0 - 1.0).abs() < 1e-12);
                check_feasible(&out.visits, &c, &axis, &speed).unwrap();
            }
        }
    }

    #[test]
    fn large_budget_returns_truth() {
        let c = catalog();
        let axis = TimeAxis::new(60).unwrap();
        let speed = SpeedProfile::constant(4.0);
        let params = DistanceParams::default();
        let space = VisitSpace::new(&c, &axis, &params);
        let grams = PoiGrams::new(&c, &params, &speed, 60, 2, 1e6).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        let out = ngram_without_hierarchy(&truth(), &grams, &space, &c, &axis, &speed, 2, 1e6, &mut rng).unwrap();
        assert_eq!(out.visits, truth());
        assert_eq!(out.calls, 2 * 3 + 1);
        let out = independent_perturb(&truth(), &space, &c, &axis, &speed, 1e6, true, &mut rng).unwrap();
        assert_eq!(out.visits, truth());
    }
}
