//! The global mechanism over every feasible trajectory, usable only at toy
//! scale, plus exhaustive reference solvers.


use rand::Rng;

use crate::catalog::{PoiCatalog, SpeedProfile};
use crate::distance::{visit_distance, DistanceParams};
use crate::em::{em_distribution, EmDistribution};
use crate::error::{Error, Result};
use crate::reconstruct::{PathSolution, ReconstructionInstance};
use crate::time::TimeAxis;
use crate::trajectory::Visit;

pub const DEFAULT_GUARD: f64 = 1e6;

fn ln_choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

/// |P|^|τ| · C(|T|, |τ|) · μ^(|τ|−1), evaluated in log space.
pub fn cardinality_s(pois: u64, len: u64, step_minutes: u32, mu: f64) -> Result<f64> {
    let axis = TimeAxis::new(step_minutes)?;
    let steps = axis.num_steps() as u64;
    if len == 0 || len > steps {
        return Err(Error::InvalidParameter(format!("|τ| = {len} must lie in 1..={steps}")));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidParameter(format!("reachable fraction {mu} outside [0, 1]")));
    }
    if pois == 0 || (mu == 0.0 && len > 1) {
        return Ok(0.0);
    }
    let reach = if len > 1 { (len - 1) as f64 * mu.ln() } else { 0.0 };
    Ok((len as f64 * (pois as f64).ln() + ln_choose(steps, len) + reach).exp())
}

/// Open (POI, timestep) states in `(poi, t)` order.
fn open_states(catalog: &PoiCatalog, axis: &TimeAxis) -> Vec<Visit> {
    catalog
        .indices()
        .flat_map(|p| (0..axis.num_steps()).map(move |t| Visit::new(p, t)))
        .filter(|v| catalog.open_at(v.poi, v.t, axis))
        .collect()
}

fn link(catalog: &PoiCatalog, axis: &TimeAxis, speed: &SpeedProfile, a: Visit, b: Visit) -> bool {
    b.t > a.t && catalog.reachable(a.poi, b.poi, axis.minute_of(a.t), axis.gap_minutes(a.t, b.t), speed)
}

/// Exact number of feasible trajectories of length `len` (dynamic programming
/// over open states).
pub fn count_s(catalog: &PoiCatalog, len: usize, axis: &TimeAxis, speed: &SpeedProfile) -> f64 {
    let states = open_states(catalog, axis);
    if len == 0 {
        return 0.0;
    }
    let mut counts = vec![1.0f64; states.len()];
    for _ in 1..len {
        counts = states
            .iter()
            .map(|b| {
                states
                    .iter()
                    .zip(&counts)
                    .filter(|(a, _)| link(catalog, axis, speed, **a, *b))
                    .map(|(_, c)| c)
                    .sum()
            })
            .collect();
    }
    counts.iter().sum()
}

/// Every strictly monotone, open-hours-valid, link-reachable trajectory of
/// length `len`, in lexicographic order. Refuses when the count exceeds `guard`.
pub fn enumerate_s(
    catalog: &PoiCatalog,
    len: usize,
    axis: &TimeAxis,
    speed: &SpeedProfile,
    guard: f64,
) -> Result<Vec<Vec<Visit>>> {
    if len == 0 || catalog.is_empty() {
        return Ok(Vec::new());
    }
    let steps = axis.num_steps() as u64;
    if len as u64 > steps {
        return Ok(Vec::new());
    }
    let upper = cardinality_s(catalog.len() as u64, len as u64, axis.step_minutes(), 1.0)?;
    if upper > guard {
        let states = open_states(catalog, axis).len() as f64;
        // The exact count costs |states|² per layer.
        let size = if states * states * len as f64 <= 1e8 {
            count_s(catalog, len, axis, speed)
        } else {
            upper
        };
        if size > guard {
            return Err(Error::GuardExceeded { size, guard });
        }
    }
    let states = open_states(catalog, axis);
    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(len);
    fn walk(
        states: &[Visit],
        len: usize,
        catalog: &PoiCatalog,
        axis: &TimeAxis,
        speed: &SpeedProfile,
        prefix: &mut Vec<Visit>,
        out: &mut Vec<Vec<Visit>>,
    ) {
        if prefix.len() == len {
            out.push(prefix.clone());
            return;
        }
        for s in states {
            if prefix.last().is_none_or(|p| link(catalog, axis, speed, *p, *s)) {
                prefix.push(*s);
                walk(states, len, catalog, axis, speed, prefix, out);
                prefix.pop();
            }
        }
    }
    walk(&states, len, catalog, axis, speed, &mut prefix, &mut out);
    Ok(out)
}

/// Elementwise sum of visit distances between equal-length trajectories.
pub fn trajectory_distance(
    params: &DistanceParams,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    a: &[Visit],
    b: &[Visit],
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| visit_distance(params, catalog, axis, *x, *y)).sum())
}

/// Sensitivity of the trajectory distance: |τ| times the element bound.
pub fn trajectory_sensitivity(params: &DistanceParams, catalog: &PoiCatalog, len: usize) -> f64 {
    let ds_max = catalog.bounding_box().map_or(0.0, |bb| bb.diagonal_km());
    len as f64 * params.element_bound(ds_max)
}

/// Distance of every member of `s` from `truth`, and the EM over them.
pub fn global_distribution(
    truth: &[Visit],
    s: &[Vec<Visit>],
    params: &DistanceParams,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    epsilon: f64,
) -> Result<(Vec<f64>, EmDistribution)> {
    let distances = s
        .iter()
        .map(|c| trajectory_distance(params, catalog, axis, truth, c))
        .collect::<Result<Vec<_>>>()?;
    let sensitivity = trajectory_sensitivity(params, catalog, truth.len()).max(f64::MIN_POSITIVE);
    let dist = em_distribution(&distances, epsilon, sensitivity)?;
    Ok((distances, dist))
}

/// One draw of the global mechanism; returns an index into `s`.
pub fn global_perturb<R: Rng + ?Sized>(
    truth: &[Visit],
    s: &[Vec<Visit>],
    params: &DistanceParams,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    let (_, dist) = global_distribution(truth, s, params, catalog, axis, epsilon)?;
    Ok(dist.sample(rng))
}

/// Exhaustive minimisation of the total bigram error; the first minimum in
/// lexicographic order wins, matching the dynamic-programming tie rule.
pub fn brute_force_reconstruct(inst: &ReconstructionInstance, guard: f64) -> Result<PathSolution> {
    let c = inst.candidates().len();
    let len = inst.len();
    if c == 0 {
        return Err(Error::EmptyCandidates);
    }
    let size = (c as f64).powi(len as i32);
    if size > guard {
        return Err(Error::GuardExceeded { size, guard });
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut path = vec![0usize; len];
    for code in 0..size as usize {
        let mut x = code;
        for slot in path.iter_mut().rev() {
            *slot = x % c;
            x /= c;
        }
        if len > 1 && !inst.is_feasible(&path) {
            continue;
        }
        let cost = inst.objective(&path);
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, path.clone()));
        }
    }
    let to_ids = |p: &[usize]| p.iter().map(|x| inst.candidates()[*x]).collect();
    match best {
        Some((objective, p)) => Ok(PathSolution {
            path: to_ids(&p),
            objective,
            fallback: false,
        }),
        None => {
            let p: Vec<usize> = (0..len)
                .map(|i| (0..c).fold(0, |b, x| if inst.region_error(x, i) < inst.region_error(b, i) { x } else { b }))
                .collect();
            Ok(PathSolution {
                objective: inst.objective(&p),
                path: to_ids(&p),
                fallback: true,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CategoryHierarchy, CategoryId, Poi};
    use crate::em::utility_tail;
    use crate::reconstruct::solve_region_path;
    use crate::rng::substream;
    use rand::SeedableRng;

    fn catalog(coords: &[(f64, f64)]) -> PoiCatalog {
        let h = CategoryHierarchy::from_triples([("a", 1, None::<&str>), ("b", 1, None)]).unwrap();
        let pois = coords
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon))| Poi {
                id: format!("p{i}"),
                lat,
                lon,
                category_path: vec![CategoryId((i % 2) as u32)],
                open: 0,
                close: 1440,
                popularity: 1.0,
            })
            .collect();
        PoiCatalog::new(pois, h).unwrap()
    }

    #[test]
    fn cardinality_examples() {
        let s = cardinality_s(1000, 5, 15, 0.2).unwrap();
        assert!((s / 9.78e19 - 1.0).abs() < 0.005, "{s:e}");
        assert!((cardinality_s(1, 1, 1440, 1.0).unwrap() - 1.0).abs() < 1e-12);
        // μ = 1 is the plain product |P|^|τ| · C(|T|, |τ|).
        let plain = cardinality_s(7, 3, 240, 1.0).unwrap();
        assert!((plain - 343.0 * 20.0).abs() < 1e-6);
        assert!(cardinality_s(5, 7, 240, 1.0).is_err());
    }

    #[test]
    fn enumeration_examples() {
        let axis = TimeAxis::new(480).unwrap();
        let near = catalog(&[(0.0, 0.0), (0.0, 0.001)]);
        let s = enumerate_s(&near, 2, &axis, &SpeedProfile::constant(4.0), DEFAULT_GUARD).unwrap();
        assert_eq!(s.len(), 12);
        let far = catalog(&[(0.0, 0.0), (0.0, 90.0)]);
        let s = enumerate_s(&far, 2, &axis, &SpeedProfile::constant(4.0), DEFAULT_GUARD).unwrap();
        assert_eq!(s.len(), 6);
        assert!(s.iter().all(|t| t[0].poi == t[1].poi));
        // Reachable fraction 2/4 reproduces the count.
        let predicted = cardinality_s(2, 2, 480, 0.5).unwrap();
        assert!((predicted - 6.0).abs() < 1e-9);
        assert_eq!(count_s(&far, 2, &axis, &SpeedProfile::constant(4.0)), 6.0);
        let empty = PoiCatalog::new(vec![], CategoryHierarchy::from_triples([("a", 1, None::<&str>)]).unwrap()).unwrap();
        assert!(enumerate_s(&empty, 2, &axis, &SpeedProfile::constant(4.0), DEFAULT_GUARD).unwrap().is_empty());
    }

    #[test]
    fn guard_refuses_large_sets() {
        let coords: Vec<(f64, f64)> = (0..40).map(|i| (0.0, 0.0001 * i as f64)).collect();
        let cat = catalog(&coords);
        let err = enumerate_s(&cat, 4, &TimeAxis::new(10).unwrap(), &SpeedProfile::constant(4.0), DEFAULT_GUARD).unwrap_err();
        assert!(matches!(err, Error::GuardExceeded { size, .. } if size > 1e6));
    }

    #[test]
    fn global_examples() {
        let axis = TimeAxis::new(480).unwrap();
        let cat = catalog(&[(0.0, 0.0), (0.0, 0.001)]);
        let params = DistanceParams::default();
        let s = enumerate_s(&cat, 2, &axis, &SpeedProfile::constant(4.0), DEFAULT_GUARD).unwrap();
        let truth = s[5].clone();
        let single = vec![truth.clone()];
        let mut rng = substream(1, "g");
        assert_eq!(global_perturb(&truth, &single, &params, &cat, &axis, 1.0, &mut rng).unwrap(), 0);
        let (distances, dist) = global_distribution(&truth, &s, &params, &cat, &axis, 5.0).unwrap();
        assert_eq!(distances[5], 0.0);
        assert_eq!(dist.len(), 12);
        let delta = trajectory_sensitivity(&params, &cat, 2);
        for zeta in [1.0, 2.0] {
            let tail = utility_tail(&distances, 5.0, delta, zeta, 10_000, &mut rng).unwrap();
            assert!(tail.within_bound(), "{tail:?}");
        }
    }

    #[test]
    fn brute_force_agrees_with_dynamic_programming() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let c = rng.gen_range(1..6);
            let len = rng.gen_range(1..5);
            // Small integer errors create many ties.
            let errors: Vec<f64> = (0..c * len).map(|_| rng.gen_range(0..4) as f64).collect();
            let bigrams: Vec<(u32, u32)> = (0..c as u32)
                .flat_map(|a| (0..c as u32).map(move |b| (a, b)))
                .filter(|_| rng.gen_bool(0.6))
                .collect::<Vec<_>>();
            let ids: Vec<u32> = (0..c as u32).map(|x| x * 3 + 1).collect();
            let mut inst = ReconstructionInstance::new(len, ids, errors, bigrams).unwrap();
            if rng.gen_bool(0.5) {
                let times = (0..c).map(|_| (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..6)).collect()).collect();
                inst = inst.with_times(times).unwrap();
            }
            let dp = solve_region_path(&inst).unwrap();
            let bf = brute_force_reconstruct(&inst, DEFAULT_GUARD).unwrap();
            assert_eq!(dp, bf);
        }
    }
}
