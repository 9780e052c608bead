//! Synthetic campus catalog and trajectories with injected hotspot events,
//! plus the feasibility filter applied to any input set.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{CategoryHierarchy, CategoryId, Poi, PoiCatalog, PoiIdx, SpeedProfile};
use crate::error::{Error, Result};
use crate::rng::{substream, StreamRng};
use crate::time::TimeAxis;
use crate::trajectory::{check_feasible, Infeasibility, Trajectory, Visit};

/// Leaf categories of the campus: (level-1, level-2, leaf, buildings, open, close).
const CAMPUS_LEAVES: [(&str, &str, &str, usize, u32, u32); 9] = [
    ("academic", "teaching", "lecture-hall", 12, 480, 1260),
    ("academic", "teaching", "lab", 40, 420, 1380),
    ("academic", "administration", "office", 45, 480, 1080),
    ("academic", "study", "library", 8, 420, 1440),
    ("residential", "housing", "residence", 55, 0, 1440),
    ("recreation", "athletics", "stadium", 3, 540, 1380),
    ("recreation", "athletics", "gym", 9, 360, 1380),
    ("amenity", "food", "cafe", 40, 420, 1200),
    ("amenity", "retail", "shop", 50, 540, 1260),
];

pub const CAMPUS_CENTER: (f64, f64) = (49.2606, -123.2460);

/// Campus of 262 buildings scattered over a `side_km` square, three-level
/// categories with nine leaves, and one fixed opening-hours template per leaf.
/// The first building of each leaf is named `<leaf>-a` (e.g. `residence-a`).
pub fn campus_catalog(seed: u64, side_km: f64) -> Result<PoiCatalog> {
    let mut triples: Vec<(String, u8, Option<String>)> = Vec::new();
    for (l1, l2, leaf, ..) in CAMPUS_LEAVES {
        if !triples.iter().any(|t| t.0 == l1) {
            triples.push((l1.into(), 1, None));
        }
        if !triples.iter().any(|t| t.0 == l2) {
            triples.push((l2.into(), 2, Some(l1.into())));
        }
        triples.push((leaf.into(), 3, Some(l2.into())));
    }
    let hierarchy = CategoryHierarchy::from_triples(triples)?;
    let mut rng = substream(seed, "campus-catalog");
    let dlat = side_km / 111.195;
    let dlon = dlat / CAMPUS_CENTER.0.to_radians().cos();
    let mut pois = Vec::new();
    for (l1, l2, leaf, count, open, close) in CAMPUS_LEAVES {
        let path: Vec<CategoryId> = [l1, l2, leaf].iter().map(|c| hierarchy.lookup(c).unwrap()).collect();
        for k in 0..count {
            let suffix = if k < 26 { ((b'a' + k as u8) as char).to_string() } else { format!("{k}") };
            pois.push(Poi {
                id: format!("{leaf}-{suffix}"),
                lat: CAMPUS_CENTER.0 + (rng.gen::<f64>() - 0.5) * dlat,
                lon: CAMPUS_CENTER.1 + (rng.gen::<f64>() - 0.5) * dlon,
                category_path: path.clone(),
                open,
                close,
                popularity: rng.gen_range(0.0..1.0),
            });
        }
    }
    PoiCatalog::new(pois, hierarchy)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventTarget {
    Poi(String),
    /// Any POI whose category path contains this node.
    Category(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSpec {
    pub target: EventTarget,
    pub start_minute: u32,
    pub end_minute: u32,
    pub users: usize,
}

impl std::str::FromStr for EventSpec {
    type Err = Error;

    /// `poi:<id>,HH:MM,HH:MM,<users>` or `category:<id>,HH:MM,HH:MM,<users>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::Config(format!("event `{s}`: {m}"));
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [target, start, end, users] = parts.as_slice() else {
            return Err(bad("expected target,start,end,users"));
        };
        let target = if let Some(id) = target.strip_prefix("poi:") {
            EventTarget::Poi(id.into())
        } else if let Some(id) = target.strip_prefix("category:") {
            EventTarget::Category(id.into())
        } else {
            return Err(bad("target must start with poi: or category:"));
        };
        let minute = |x: &str| -> Result<u32> {
            let (h, m) = x.split_once(':').ok_or_else(|| bad("times must be HH:MM"))?;
            let (h, m): (u32, u32) = (h.parse().map_err(|_| bad("bad hour"))?, m.parse().map_err(|_| bad("bad minute"))?);
            if h > 24 || m > 59 || h * 60 + m > 1440 {
                return Err(bad("time out of range"));
            }
            Ok(h * 60 + m)
        };
        Ok(EventSpec {
            target,
            start_minute: minute(start)?,
            end_minute: minute(end)?,
            users: users.parse().map_err(|_| bad("bad user count"))?,
        })
    }
}

/// The three campus events: a residence evening, a stadium afternoon and a
/// lecture-hall morning.
pub fn campus_events() -> Vec<EventSpec> {
    vec![
        EventSpec {
            target: EventTarget::Poi("residence-a".into()),
            start_minute: 20 * 60,
            end_minute: 22 * 60,
            users: 500,
        },
        EventSpec {
            target: EventTarget::Poi("stadium-a".into()),
            start_minute: 14 * 60,
            end_minute: 16 * 60,
            users: 1000,
        },
        EventSpec {
            target: EventTarget::Category("lecture-hall".into()),
            start_minute: 9 * 60,
            end_minute: 11 * 60,
            users: 2000,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub earliest_start_minute: u32,
    pub latest_start_minute: u32,
    pub max_gap_minutes: u32,
    pub events: Vec<EventSpec>,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            count: 1000,
            min_len: 3,
            max_len: 8,
            earliest_start_minute: 6 * 60,
            latest_start_minute: 22 * 60,
            max_gap_minutes: 120,
            events: Vec::new(),
        }
    }
}

/// A resolved event: candidate POIs and timestep window.
struct Pinned {
    pois: Vec<PoiIdx>,
    start: u32,
    end: u32,
}

fn resolve_event(e: &EventSpec, catalog: &PoiCatalog, axis: &TimeAxis, max_gap: u32) -> Result<Pinned> {
    let step = axis.step_minutes();
    if e.start_minute % step != 0 || e.end_minute % step != 0 || e.end_minute <= e.start_minute {
        return Err(Error::Config(format!("event window must be a positive multiple of {step} minutes")));
    }
    if e.end_minute - e.start_minute > max_gap || e.end_minute >= 1440 {
        return Err(Error::Config(format!("event window longer than {max_gap} minutes or past midnight")));
    }
    let (start, end) = (e.start_minute / step, e.end_minute / step);
    let pois: Vec<PoiIdx> = match &e.target {
        EventTarget::Poi(id) => vec![catalog.lookup(id).ok_or_else(|| Error::UnknownPoi(id.clone()))?],
        EventTarget::Category(id) => {
            let c = catalog.hierarchy().lookup(id).ok_or_else(|| Error::UnknownCategory(id.clone()))?;
            catalog.indices().filter(|p| catalog.poi(*p).category_path.contains(&c)).collect()
        }
    };
    let pois: Vec<PoiIdx> = pois.into_iter().filter(|p| catalog.open_at(*p, start, axis)).collect();
    if pois.is_empty() {
        return Err(Error::Config(format!("no event POI open at the start of {:?}", e.target)));
    }
    Ok(Pinned { pois, start, end })
}

struct Generator<'a> {
    catalog: &'a PoiCatalog,
    axis: &'a TimeAxis,
    speed: &'a SpeedProfile,
    params: &'a GeneratorParams,
    leaves: Vec<(CategoryId, Vec<PoiIdx>)>,
}

impl Generator<'_> {
    fn gap_steps(&self, rng: &mut StreamRng) -> u32 {
        let step = self.axis.step_minutes();
        rng.gen_range(1..=(self.params.max_gap_minutes / step).max(1))
    }

    fn step_after(&self, from: Visit, rng: &mut StreamRng) -> Option<Visit> {
        let t = from.t + self.gap_steps(rng);
        if t >= self.axis.num_steps() {
            return None;
        }
        let gap = self.axis.gap_minutes(from.t, t);
        let depart = self.axis.minute_of(from.t);
        let options: Vec<PoiIdx> = self
            .catalog
            .indices()
            .filter(|p| self.catalog.open_at(*p, t, self.axis) && self.catalog.reachable(from.poi, *p, depart, gap, self.speed))
            .collect();
        options.choose(rng).map(|p| Visit::new(*p, t))
    }

    fn step_before(&self, to: Visit, rng: &mut StreamRng) -> Option<Visit> {
        let t = to.t.checked_sub(self.gap_steps(rng))?;
        let gap = self.axis.gap_minutes(t, to.t);
        let depart = self.axis.minute_of(t);
        let options: Vec<PoiIdx> = self
            .catalog
            .indices()
            .filter(|p| self.catalog.open_at(*p, t, self.axis) && self.catalog.reachable(*p, to.poi, depart, gap, self.speed))
            .collect();
        options.choose(rng).map(|p| Visit::new(*p, t))
    }

    fn free(&self, rng: &mut StreamRng) -> Vec<Visit> {
        let step = self.axis.step_minutes();
        loop {
            let len = rng.gen_range(self.params.min_len..=self.params.max_len);
            let t = rng.gen_range(self.params.earliest_start_minute / step..=self.params.latest_start_minute / step);
            let (_, members) = &self.leaves[rng.gen_range(0..self.leaves.len())];
            let open: Vec<PoiIdx> = members.iter().copied().filter(|p| self.catalog.open_at(*p, t, self.axis)).collect();
            let Some(first) = open.choose(rng) else { continue };
            let mut visits = vec![Visit::new(*first, t)];
            while visits.len() < len {
                match self.step_after(*visits.last().unwrap(), rng) {
                    Some(v) => visits.push(v),
                    None => break,
                }
            }
            if visits.len() == len {
                return visits;
            }
        }
    }

    fn pinned(&self, event: &Pinned, rng: &mut StreamRng) -> Vec<Visit> {
        loop {
            let len = rng.gen_range(self.params.min_len..=self.params.max_len);
            let k = rng.gen_range(0..len - 1);
            let anchor = Visit::new(*event.pois.choose(rng).unwrap(), event.start);
            let mut before = vec![anchor];
            while before.len() <= k {
                match self.step_before(*before.last().unwrap(), rng) {
                    Some(v) => before.push(v),
                    None => break,
                }
            }
            if before.len() <= k {
                continue;
            }
            before.reverse();
            // The visit after the anchor starts exactly at the window end.
            let next: Vec<PoiIdx> = self
                .catalog
                .indices()
                .filter(|p| {
                    self.catalog.open_at(*p, event.end, self.axis)
                        && self.catalog.reachable(
                            anchor.poi,
                            *p,
                            self.axis.minute_of(anchor.t),
                            self.axis.gap_minutes(anchor.t, event.end),
                            self.speed,
                        )
                })
                .collect();
            let Some(p) = next.choose(rng) else { continue };
            let mut visits = before;
            visits.push(Visit::new(*p, event.end));
            while visits.len() < len {
                match self.step_after(*visits.last().unwrap(), rng) {
                    Some(v) => visits.push(v),
                    None => break,
                }
            }
            if visits.len() == len {
                return visits;
            }
        }
    }
}

/// Generates `params.count` feasible trajectories. Event participants are
/// spread over a seeded permutation of the indices; every other trajectory
/// starts at a random time in a random category and walks to random
/// reachable open POIs.
pub fn generate_campus(
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    speed: &SpeedProfile,
    params: &GeneratorParams,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if params.min_len == 0 || params.min_len > params.max_len {
        return Err(Error::InvalidParameter("need 1 <= min_len <= max_len".into()));
    }
    if params.max_gap_minutes < axis.step_minutes() {
        return Err(Error::InvalidParameter("max gap shorter than one timestep".into()));
    }
    let demanded: usize = params.events.iter().map(|e| e.users).sum();
    if demanded > params.count {
        return Err(Error::InvalidParameter(format!(
            "events need {demanded} trajectories but only {} requested",
            params.count
        )));
    }
    if params.count == 0 {
        return Ok(Vec::new());
    }
    if params.events.iter().any(|_| params.min_len < 2) {
        return Err(Error::InvalidParameter("events need trajectories of length >= 2".into()));
    }
    let pinned = params
        .events
        .iter()
        .map(|e| resolve_event(e, catalog, axis, params.max_gap_minutes))
        .collect::<Result<Vec<_>>>()?;
    let mut leaves: BTreeMap<CategoryId, Vec<PoiIdx>> = BTreeMap::new();
    for p in catalog.indices() {
        leaves.entry(catalog.poi(p).leaf_category()).or_default().push(p);
    }
    let generator = Generator {
        catalog,
        axis,
        speed,
        params,
        leaves: leaves.into_iter().collect(),
    };
    if generator.leaves.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut order: Vec<usize> = (0..params.count).collect();
    order.shuffle(&mut substream(seed, "event-assignment"));
    let mut assignment: Vec<Option<usize>> = vec![None; params.count];
    let mut slots = order.into_iter();
    for (e, spec) in params.events.iter().enumerate() {
        for i in slots.by_ref().take(spec.users) {
            assignment[i] = Some(e);
        }
    }
    let width = params.count.to_string().len().max(5);
    Ok((0..params.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, &format!("trajectory-{i}"));
            let visits = match assignment[i] {
                Some(e) => generator.pinned(&pinned[e], &mut rng),
                None => generator.free(&mut rng),
            };
            Trajectory::new(format!("u{i:0width$}"), visits)
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Trajectory>,
    pub dropped: Vec<(String, Infeasibility)>,
}

impl FilterOutcome {
    pub fn reason_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for (_, r) in &self.dropped {
            *out.entry(r.as_str()).or_insert(0) += 1;
        }
        out
    }
}

/// Keeps exactly the strictly monotone, open-hours-valid, link-reachable trajectories.
pub fn filter_trajectories(
    trajectories: Vec<Trajectory>,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    speed: &SpeedProfile,
) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for t in trajectories {
        match check_feasible(&t.visits, catalog, axis, speed) {
            Ok(()) => out.kept.push(t),
            Err(reason) => out.dropped.push((t.user, reason)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (PoiCatalog, TimeAxis, SpeedProfile) {
        (campus_catalog(7, 2.0).unwrap(), TimeAxis::new(10).unwrap(), SpeedProfile::constant(4.0))
    }

    #[test]
    fn campus_shape() {
        let (cat, ..) = setup();
        assert_eq!(cat.len(), 262);
        assert_eq!(cat.hierarchy().depth(), 3);
        let leaves: std::collections::BTreeSet<_> = cat.pois().iter().map(Poi::leaf_category).collect();
        assert_eq!(leaves.len(), 9);
        assert!(cat.lookup("residence-a").is_some() && cat.lookup("stadium-a").is_some());
        let diag = cat.bounding_box().unwrap().diagonal_km();
        assert!(diag < 2.0 * 2f64.sqrt() + 0.01, "{diag}");
    }

    #[test]
    fn csv_round_trip() {
        let (cat, ..) = setup();
        let dir = tempfile::tempdir().unwrap();
        let (pp, hp) = (dir.path().join("pois.csv"), dir.path().join("h.csv"));
        cat.write_csv(std::fs::File::create(&pp).unwrap()).unwrap();
        cat.hierarchy().write_csv(std::fs::File::create(&hp).unwrap()).unwrap();
        let back = PoiCatalog::load(&pp, &hp, &Default::default()).unwrap();
        assert_eq!(back.len(), cat.len());
        for (a, b) in back.pois().iter().zip(cat.pois()) {
            assert_eq!((a.open, a.close, &a.id), (b.open, b.close, &b.id));
            assert!((a.lat - b.lat).abs() < 1e-6 && (a.lon - b.lon).abs() < 1e-6);
        }
    }

    #[test]
    fn generated_sets_are_feasible_and_deterministic() {
        let (cat, axis, speed) = setup();
        let params = GeneratorParams {
            count: 200,
            events: vec![EventSpec {
                target: EventTarget::Poi("residence-a".into()),
                start_minute: 1200,
                end_minute: 1320,
                users: 50,
            }],
            ..Default::default()
        };
        let a = generate_campus(&cat, &axis, &speed, &params, 3).unwrap();
        let b = generate_campus(&cat, &axis, &speed, &params, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|t| (3..=8).contains(&t.len())));
        let res = cat.lookup("residence-a").unwrap();
        let visitors = a
            .iter()
            .filter(|t| t.visits.windows(2).any(|w| w[0].poi == res && w[0].t == 120 && w[1].t == 132))
            .count();
        assert!(visitors >= 50);
        let out = filter_trajectories(a.clone(), &cat, &axis, &speed);
        assert_eq!(out.kept, a);
        let c = generate_campus(&cat, &axis, &speed, &params, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generator_edge_cases() {
        let (cat, axis, speed) = setup();
        let none = GeneratorParams {
            count: 0,
            ..Default::default()
        };
        assert!(generate_campus(&cat, &axis, &speed, &none, 1).unwrap().is_empty());
        let too_many = GeneratorParams {
            count: 10,
            events: campus_events(),
            ..Default::default()
        };
        assert!(generate_campus(&cat, &axis, &speed, &too_many, 1).is_err());
    }

    #[test]
    fn filter_reasons() {
        let (cat, axis, speed) = setup();
        let office = cat.lookup("office-a").unwrap();
        let closed = Trajectory::new("c", vec![Visit::new(office, 2), Visit::new(office, 3)]);
        let far = {
            let h = CategoryHierarchy::from_triples([("x", 1, None::<&str>)]).unwrap();
            let mk = |id: &str, lat| Poi {
                id: id.into(),
                lat,
                lon: 0.0,
                category_path: vec![CategoryId(0)],
                open: 0,
                close: 1440,
                popularity: 0.0,
            };
            PoiCatalog::new(vec![mk("a", 0.0), mk("b", 0.09)], h).unwrap()
        };
        let out = filter_trajectories(vec![closed], &cat, &axis, &speed);
        assert_eq!(out.dropped[0].1, Infeasibility::Closed);
        let link = Trajectory::new("l", vec![Visit::new(PoiIdx(0), 10), Visit::new(PoiIdx(1), 11)]);
        let out = filter_trajectories(vec![link], &far, &axis, &SpeedProfile::constant(8.0));
        assert_eq!(out.dropped[0].1, Infeasibility::Unreachable);
        assert_eq!(out.reason_counts()["unreachable"], 1);
    }

    #[test]
    fn event_spec_parsing() {
        let e: EventSpec = "poi:residence-a, 20:00, 22:00, 500".parse().unwrap();
        assert_eq!(e, campus_events()[0]);
        let e: EventSpec = "category:lecture-hall,09:00,11:00,2000".parse().unwrap();
        assert_eq!(e, campus_events()[2]);
        assert!("building:x,1:00,2:00,3".parse::<EventSpec>().is_err());
        assert!("poi:x,25:00,2:00,3".parse::<EventSpec>().is_err());
    }
}
