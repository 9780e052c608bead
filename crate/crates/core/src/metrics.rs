//! Utility measures over paired real/perturbed trajectory sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::PoiCatalog;
use crate::distance::{visit_components, DistanceParams};
use crate::error::{Error, Result};
use crate::time::TimeAxis;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    Space,
    Time,
    Category,
    Combined,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Space, Component::Time, Component::Category, Component::Combined];

    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Space => "s",
            Component::Time => "t",
            Component::Category => "c",
            Component::Combined => "d",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pointwise errors `[d_s, d_t, d_c, d]` for one trajectory pair.
pub fn point_errors(
    real: &Trajectory,
    pert: &Trajectory,
    params: &DistanceParams,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
) -> Result<Vec<[f64; 4]>> {
    if real.len() != pert.len() {
        return Err(Error::LengthMismatch {
            left: real.len(),
            right: pert.len(),
        });
    }
    Ok(real
        .visits
        .iter()
        .zip(&pert.visits)
        .map(|(a, b)| {
            let (ds, dt, dc) = visit_components(params, catalog, axis, *a, *b);
            [ds, dt, dc, params.combine(ds, dt, dc)]
        })
        .collect())
}

fn index(c: Component) -> usize {
    match c {
        Component::Space => 0,
        Component::Time => 1,
        Component::Category => 2,
        Component::Combined => 3,
    }
}

fn pair_errors(
    real: &[Trajectory],
    pert: &[Trajectory],
    params: &DistanceParams,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
) -> Result<Vec<Vec<[f64; 4]>>> {
    if real.len() != pert.len() {
        return Err(Error::LengthMismatch {
            left: real.len(),
            right: pert.len(),
        });
    }
    real.iter()
        .zip(pert)
        .map(|(a, b)| point_errors(a, b, params, catalog, axis))
        .collect()
}

/// Per-trajectory mean error `(1/|τ|) Σ_i d_χ` for every component.
pub fn per_trajectory_ne(
    real: &[Trajectory],
    pert: &[Trajectory],
    params: &DistanceParams,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
) -> Result<Vec<[f64; 4]>> {
    Ok(pair_errors(real, pert, params, catalog, axis)?
        .iter()
        .map(|points| {
            let mut acc = [0.0; 4];
            for p in points {
                (0..4).for_each(|k| acc[k] += p[k]);
            }
            acc.map(|x| if points.is_empty() { 0.0 } else { x / points.len() as f64 })
        })
        .collect())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Mean normalised error over the set for one component.
pub fn normalized_error(
    real: &[Trajectory],
    pert: &[Trajectory],
    component: Component,
    params: &DistanceParams,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
) -> Result<f64> {
    let per = per_trajectory_ne(real, pert, params, catalog, axis)?;
    Ok(mean(&per.iter().map(|v| v[index(component)]).collect::<Vec<_>>()))
}

/// Percentage of points whose error in `component` is at most `delta`,
/// averaged per trajectory then over trajectories.
pub fn prq(
    real: &[Trajectory],
    pert: &[Trajectory],
    component: Component,
    delta: f64,
    params: &DistanceParams,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
) -> Result<f64> {
    let k = index(component);
    let per: Vec<f64> = pair_errors(real, pert, params, catalog, axis)?
        .iter()
        .map(|points| {
            let hits = points.iter().filter(|p| p[k] <= delta).count();
            if points.is_empty() {
                1.0
            } else {
                hits as f64 / points.len() as f64
            }
        })
        .collect();
    Ok(if per.is_empty() { 100.0 } else { 100.0 * mean(&per) })
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci<R: Rng + ?Sized>(values: &[f64], resamples: usize, level: f64, rng: &mut R) -> (f64, f64) {
    if values.is_empty() || resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..values.len()).map(|_| values[rng.gen_range(0..values.len())]).sum::<f64>() / values.len() as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    (at(alpha), at(1.0 - alpha))
}

/// What a hotspot is counted over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Granularity {
    Poi,
    /// Cell of a g × g grid over the catalog bounding box.
    Grid(u32),
    /// Category ancestor at the given level.
    Category(u8),
}

impl Granularity {
    pub const STANDARD: [Granularity; 6] = [
        Granularity::Poi,
        Granularity::Grid(4),
        Granularity::Grid(2),
        Granularity::Category(1),
        Granularity::Category(2),
        Granularity::Category(3),
    ];

    /// Default unique-visitor threshold.
    pub fn default_eta(&self) -> u32 {
        match self {
            Granularity::Poi => 20,
            Granularity::Grid(2) => 50,
            Granularity::Grid(_) => 20,
            Granularity::Category(1) => 50,
            Granularity::Category(2) => 30,
            Granularity::Category(_) => 20,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Poi => f.write_str("poi"),
            Granularity::Grid(g) => write!(f, "grid{g}"),
            Granularity::Category(l) => write!(f, "cat-level-{l}"),
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter(format!("unknown granularity `{s}`"));
        if s == "poi" {
            Ok(Granularity::Poi)
        } else if let Some(g) = s.strip_prefix("grid") {
            g.parse().ok().filter(|g| *g > 0).map(Granularity::Grid).ok_or_else(bad)
        } else if let Some(l) = s.strip_prefix("cat-level-") {
            l.parse().ok().filter(|l| (1..=3).contains(l)).map(Granularity::Category).ok_or_else(bad)
        } else {
            Err(bad())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Hotspot {
    pub entity: u32,
    /// Inclusive timestep bounds.
    pub t_s: u32,
    pub t_e: u32,
    /// Peak unique-visitor count inside the interval.
    pub c: u32,
}

fn entity_of(catalog: &PoiCatalog, g: Granularity, p: crate::catalog::PoiIdx) -> Option<u32> {
    let poi = catalog.poi(p);
    match g {
        Granularity::Poi => Some(p.0),
        Granularity::Grid(n) => catalog.bounding_box().map(|bb| bb.cell_of(poi.lat, poi.lon, n)),
        Granularity::Category(level) => poi.category_path.get(level as usize - 1).map(|c| c.0),
    }
}

/// Unique visitors per entity and timestep. A trajectory is present at its
/// i-th POI from `t_i` up to (not including) `t_{i+1}`, and at its last POI
/// for that single timestep.
pub fn presence_counts(
    trajectories: &[Trajectory],
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    granularity: Granularity,
) -> BTreeMap<u32, Vec<u32>> {
    let steps = axis.num_steps() as usize;
    let mut counts: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for traj in trajectories {
        let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
        for (i, v) in traj.visits.iter().enumerate() {
            let Some(entity) = entity_of(catalog, granularity, v.poi) else { continue };
            let end = traj.visits.get(i + 1).map_or(v.t + 1, |next| next.t.max(v.t + 1));
            for t in v.t..end.min(steps as u32) {
                seen.insert((entity, t));
            }
        }
        for (entity, t) in seen {
            counts.entry(entity).or_insert_with(|| vec![0; steps])[t as usize] += 1;
        }
    }
    counts
}

/// Maximal runs of timesteps where an entity's count reaches `eta`.
pub fn hotspots_from_counts(counts: &BTreeMap<u32, Vec<u32>>, eta: u32) -> Vec<Hotspot> {
    let mut out = Vec::new();
    for (entity, series) in counts {
        let mut t = 0;
        while t < series.len() {
            if series[t] >= eta.max(1) {
                let start = t;
                let mut peak = 0;
                while t < series.len() && series[t] >= eta.max(1) {
                    peak = peak.max(series[t]);
                    t += 1;
                }
                out.push(Hotspot {
                    entity: *entity,
                    t_s: start as u32,
                    t_e: (t - 1) as u32,
                    c: peak,
                });
            } else {
                t += 1;
            }
        }
    }
    out
}

pub fn detect_hotspots(
    trajectories: &[Trajectory],
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    granularity: Granularity,
    eta: u32,
) -> Vec<Hotspot> {
    hotspots_from_counts(&presence_counts(trajectories, catalog, axis, granularity), eta)
}

/// Each perturbed hotspot paired with its nearest real hotspot of the same
/// entity (ties to the earliest start); perturbed hotspots without a real
/// counterpart are skipped. Distances are in hours.
pub fn pair_hotspots(real: &[Hotspot], pert: &[Hotspot], axis: &TimeAxis) -> Vec<(Hotspot, Hotspot, f64)> {
    let hours = axis.step_minutes() as f64 / 60.0;
    pert.iter()
        .filter_map(|h| {
            real.iter()
                .filter(|r| r.entity == h.entity)
                .map(|r| {
                    let d = (r.t_s.abs_diff(h.t_s) + r.t_e.abs_diff(h.t_e)) as f64 * hours;
                    (*r, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.t_s.cmp(&b.0.t_s)))
                .map(|(r, d)| (r, *h, d))
        })
        .collect()
}

/// Average hotspot distance in hours; `None` when no perturbed hotspot has a
/// real counterpart.
pub fn ahd(real: &[Hotspot], pert: &[Hotspot], axis: &TimeAxis) -> Option<f64> {
    let pairs = pair_hotspots(real, pert, axis);
    (!pairs.is_empty()).then(|| pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64)
}

/// Average absolute peak-count difference over the same pairing as `ahd`.
pub fn acd(real: &[Hotspot], pert: &[Hotspot], axis: &TimeAxis) -> Option<f64> {
    let pairs = pair_hotspots(real, pert, axis);
    (!pairs.is_empty()).then(|| pairs.iter().map(|(r, h, _)| r.c.abs_diff(h.c) as f64).sum::<f64>() / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CategoryHierarchy, CategoryId, Poi, PoiIdx};
    use crate::rng::substream;
    use crate::trajectory::Visit;
    use proptest::prelude::*;

    fn catalog() -> PoiCatalog {
        let h = CategoryHierarchy::from_triples([
            ("food", 1, None),
            ("cafe", 2, Some("food")),
            ("sport", 1, None),
        ])
        .unwrap();
        let pois = [(0.0, 0.0, vec![0, 1]), (0.0, 0.01, vec![0]), (0.01, 0.0, vec![2])]
            .into_iter()
            .enumerate()
            .map(|(i, (lat, lon, path))| Poi {
                id: format!("p{i}"),
                lat,
                lon,
                category_path: path.into_iter().map(CategoryId).collect(),
                open: 0,
                close: 1440,
                popularity: 1.0,
            })
            .collect();
        PoiCatalog::new(pois, h).unwrap()
    }

    fn traj(points: &[(u32, u32)]) -> Trajectory {
        Trajectory::new("u", points.iter().map(|(p, t)| Visit::new(PoiIdx(*p), *t)).collect())
    }

    #[test]
    fn ne_examples() {
        let cat = catalog();
        let axis = TimeAxis::new(60).unwrap();
        let params = DistanceParams::default();
        let a = vec![traj(&[(0, 1), (1, 3)])];
        for c in Component::ALL {
            assert_eq!(normalized_error(&a, &a, c, &params, &cat, &axis).unwrap(), 0.0);
        }
        // Food vs sport: unrelated roots.
        let real = vec![traj(&[(1, 5)])];
        let pert = vec![traj(&[(2, 5)])];
        assert_eq!(normalized_error(&real, &pert, Component::Category, &params, &cat, &axis).unwrap(), 10.0);
        assert!(normalized_error(&a, &real, Component::Space, &params, &cat, &axis).is_err());
    }

    #[test]
    fn ne_double_average() {
        let cat = catalog();
        let axis = TimeAxis::new(60).unwrap();
        let params = DistanceParams::default();
        let real = vec![traj(&[(0, 1), (0, 2)]), traj(&[(0, 4)])];
        let pert = vec![traj(&[(0, 3), (0, 2)]), traj(&[(0, 8)])];
        // Trajectory 1: (2 + 0) / 2 = 1 hour; trajectory 2: 4 hours.
        let ne = normalized_error(&real, &pert, Component::Time, &params, &cat, &axis).unwrap();
        assert!((ne - 2.5).abs() < 1e-12);
    }

    #[test]
    fn prq_examples() {
        let cat = catalog();
        let axis = TimeAxis::new(60).unwrap();
        let params = DistanceParams::default();
        let real = vec![traj(&[(0, 1), (0, 2)])];
        assert_eq!(prq(&real, &real, Component::Combined, 0.0, &params, &cat, &axis).unwrap(), 100.0);
        let pert = vec![traj(&[(0, 1), (0, 9)])];
        assert_eq!(prq(&real, &pert, Component::Time, 1.0, &params, &cat, &axis).unwrap(), 50.0);
        assert_eq!(prq(&real, &pert, Component::Time, f64::INFINITY, &params, &cat, &axis).unwrap(), 100.0);
    }

    #[test]
    fn hotspot_interval() {
        let mut counts = BTreeMap::new();
        counts.insert(7, vec![0, 1, 5, 6, 5, 1, 0]);
        assert_eq!(
            hotspots_from_counts(&counts, 5),
            vec![Hotspot {
                entity: 7,
                t_s: 2,
                t_e: 4,
                c: 6
            }]
        );
        assert!(hotspots_from_counts(&counts, 10).is_empty());
        counts.insert(7, vec![5, 5, 0, 0, 9, 9, 0]);
        assert_eq!(hotspots_from_counts(&counts, 5).len(), 2);
    }

    #[test]
    fn presence_spans_until_next_visit() {
        let cat = catalog();
        let axis = TimeAxis::new(60).unwrap();
        let t = vec![traj(&[(0, 8), (1, 10)]), traj(&[(0, 9)])];
        let counts = presence_counts(&t, &cat, &axis, Granularity::Poi);
        assert_eq!(&counts[&0][7..11], &[0, 1, 2, 0]);
        assert_eq!(counts[&1][10], 1);
        // Category level 2 only exists for POI 0.
        let counts = presence_counts(&t, &cat, &axis, Granularity::Category(2));
        assert_eq!(counts.len(), 1);
        // Both POIs share the food root, so the first user counts once per hour.
        let counts = presence_counts(&t, &cat, &axis, Granularity::Category(1));
        assert_eq!(&counts[&0][8..11], &[1, 2, 1]);
    }

    #[test]
    fn ahd_and_acd() {
        let axis = TimeAxis::new(60).unwrap();
        let h = |entity, t_s, t_e, c| Hotspot { entity, t_s, t_e, c };
        let real = vec![h(1, 8, 10, 100)];
        assert_eq!(ahd(&real, &real, &axis), Some(0.0));
        assert_eq!(acd(&real, &real, &axis), Some(0.0));
        let pert = vec![h(1, 9, 10, 87)];
        assert_eq!(ahd(&real, &pert, &axis), Some(1.0));
        assert_eq!(acd(&real, &pert, &axis), Some(13.0));
        // The nearer of two candidates is used.
        let real = vec![h(1, 2, 4, 50), h(1, 12, 14, 60)];
        let pert = vec![h(1, 13, 14, 70)];
        assert_eq!(ahd(&real, &pert, &axis), Some(1.0));
        assert_eq!(acd(&real, &pert, &axis), Some(10.0));
        // Multi-pair mean; the unmatched entity is ignored.
        let pert = vec![h(1, 3, 4, 40), h(1, 12, 16, 60), h(9, 0, 1, 5)];
        assert_eq!(ahd(&real, &pert, &axis), Some((1.0 + 2.0) / 2.0));
        assert_eq!(acd(&real, &pert, &axis), Some(5.0));
        assert_eq!(ahd(&real, &[h(9, 0, 1, 5)], &axis), None);
    }

    #[test]
    fn granularity_names_round_trip() {
        for g in Granularity::STANDARD {
            assert_eq!(g.to_string().parse::<Granularity>().unwrap(), g);
        }
        assert!("grid0".parse::<Granularity>().is_err());
    }

    #[test]
    fn bootstrap_brackets_mean() {
        let values: Vec<f64> = (0..200).map(|i| (i % 10) as f64).collect();
        let mut rng = substream(4, "boot");
        let (lo, hi) = bootstrap_ci(&values, 2000, 0.95, &mut rng);
        assert!(lo < 4.5 && 4.5 < hi && hi - lo < 1.5);
    }

    proptest! {
        #[test]
        fn prq_monotone_in_delta(ts in proptest::collection::vec((0u32..3, 0u32..24, 0u32..3, 0u32..24), 1..8), d1 in 0.0f64..20.0, d2 in 0.0f64..20.0) {
            let cat = catalog();
            let axis = TimeAxis::new(60).unwrap();
            let params = DistanceParams::default();
            let real: Vec<Trajectory> = ts.iter().map(|(p, t, _, _)| traj(&[(*p, *t)])).collect();
            let pert: Vec<Trajectory> = ts.iter().map(|(_, _, p, t)| traj(&[(*p, *t)])).collect();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            for c in Component::ALL {
                let a = prq(&real, &pert, c, lo, &params, &cat, &axis).unwrap();
                let b = prq(&real, &pert, c, hi, &params, &cat, &axis).unwrap();
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn hotspots_disjoint_and_maximal(series in proptest::collection::vec(0u32..10, 1..40), eta in 1u32..10) {
            let mut counts = BTreeMap::new();
            counts.insert(0, series.clone());
            let hs = hotspots_from_counts(&counts, eta);
            for w in hs.windows(2) {
                prop_assert!(w[0].t_e + 1 < w[1].t_s);
            }
            for h in &hs {
                prop_assert!(h.t_s == 0 || series[h.t_s as usize - 1] < eta);
                prop_assert!(h.t_e as usize + 1 == series.len() || series[h.t_e as usize + 1] < eta);
                prop_assert!(h.c >= eta);
            }
            let covered: usize = hs.iter().map(|h| (h.t_e - h.t_s + 1) as usize).sum();
            prop_assert_eq!(covered, series.iter().filter(|c| **c >= eta).count());
        }
    }
}
