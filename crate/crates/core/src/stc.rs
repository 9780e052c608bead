//! Space-time-category regions: construction from the catalog, κ-driven
//! merging along each dimension, and projection of POI trajectories onto
//! the merged partition.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::{haversine_km, BoundingBox, CategoryId, PoiCatalog, PoiIdx};
use crate::error::{Error, Result};
use crate::time::{circular_hours, TimeAxis, MINUTES_PER_DAY};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RegionId(pub u32);

impl RegionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub type RegionTrajectory = Vec<RegionId>;

/// Smallest partition element: one grid cell, one base time interval, one leaf category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Atom {
    pub cell: u32,
    pub interval: u32,
    pub leaf: CategoryId,
}

/// Contiguous run of base intervals on the circular day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: u32,
    pub len: u32,
}

impl TimeWindow {
    pub fn intervals(&self, count: u32) -> impl Iterator<Item = u32> + '_ {
        let start = self.start;
        (0..self.len).map(move |k| (start + k) % count)
    }

    /// Merged window if `other` directly follows or precedes `self`.
    fn join(&self, other: &TimeWindow, count: u32) -> Option<TimeWindow> {
        if self.len + other.len > count {
            return None;
        }
        if (self.start + self.len) % count == other.start {
            Some(TimeWindow {
                start: self.start,
                len: self.len + other.len,
            })
        } else if (other.start + other.len) % count == self.start {
            Some(TimeWindow {
                start: other.start,
                len: self.len + other.len,
            })
        } else {
            None
        }
    }

    /// Union of two windows when it is a single contiguous run (equal,
    /// overlapping or adjacent windows).
    fn union(&self, other: &TimeWindow, count: u32) -> Option<TimeWindow> {
        let mut marked = vec![false; count as usize];
        for iv in self.intervals(count).chain(other.intervals(count)) {
            marked[iv as usize] = true;
        }
        let total = marked.iter().filter(|m| **m).count() as u32;
        if total == count {
            return Some(TimeWindow { start: 0, len: count });
        }
        // A single run has exactly one start: marked with an unmarked predecessor.
        let starts: Vec<u32> = (0..count)
            .filter(|&i| marked[i as usize] && !marked[((i + count - 1) % count) as usize])
            .collect();
        match starts.as_slice() {
            [start] => Some(TimeWindow { start: *start, len: total }),
            _ => None,
        }
    }

    /// Midpoint in minutes of day.
    pub fn centroid_minute(&self, interval_minutes: u32) -> f64 {
        let mid = self.start as f64 * interval_minutes as f64 + self.len as f64 * interval_minutes as f64 / 2.0;
        mid.rem_euclid(MINUTES_PER_DAY as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimension {
    Space,
    Time,
    Category,
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "space" => Ok(Dimension::Space),
            "time" => Ok(Dimension::Time),
            "category" => Ok(Dimension::Category),
            other => Err(Error::InvalidParameter(format!("unknown dimension `{other}`"))),
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Space => "space",
            Dimension::Time => "time",
            Dimension::Category => "category",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StcRegion {
    pub id: RegionId,
    /// Fine grid cells, sorted.
    pub cells: Vec<u32>,
    pub window: TimeWindow,
    pub category: CategoryId,
    /// Sorted, non-empty.
    pub members: Vec<PoiIdx>,
    pub centroid: (f64, f64),
    /// Minutes of day.
    pub time_centroid: f64,
    /// Timesteps covered by the window, ascending.
    pub timesteps: Vec<u32>,
    pub atoms: Vec<Atom>,
}

impl StcRegion {
    pub fn earliest(&self) -> u32 {
        self.timesteps[0]
    }

    pub fn latest(&self) -> u32 {
        *self.timesteps.last().unwrap()
    }

    pub fn contains_step(&self, t: u32) -> bool {
        self.timesteps.binary_search(&t).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionParams {
    pub grid: u32,
    pub interval_minutes: u32,
    pub axis: TimeAxis,
}

impl RegionParams {
    pub fn interval_count(&self) -> u32 {
        MINUTES_PER_DAY / self.interval_minutes
    }
}

/// Immutable collection of STC regions plus the atom → region index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSet {
    params: RegionParams,
    bbox: Option<BoundingBox>,
    regions: Vec<StcRegion>,
    #[serde(skip)]
    atom_index: HashMap<Atom, RegionId>,
}

impl PartialEq for RegionSet {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params && self.bbox == other.bbox && self.regions == other.regions
    }
}

struct Draft {
    cells: BTreeSet<u32>,
    window: TimeWindow,
    category: CategoryId,
    atoms: BTreeSet<Atom>,
    members: BTreeSet<PoiIdx>,
}

impl Draft {
    fn centroid(&self, catalog: &PoiCatalog) -> (f64, f64) {
        let n = self.members.len() as f64;
        let (lat, lon) = self.members.iter().fold((0.0, 0.0), |(a, b), p| {
            let poi = catalog.poi(*p);
            (a + poi.lat, b + poi.lon)
        });
        (lat / n, lon / n)
    }

    fn absorb(&mut self, other: Draft) {
        self.cells.extend(other.cells);
        self.atoms.extend(other.atoms);
        self.members.extend(other.members);
    }
}

impl RegionSet {
    /// One region per (grid cell, base interval, leaf category) holding at
    /// least one POI that is open at some timestep of the interval.
    pub fn build(catalog: &PoiCatalog, axis: TimeAxis, grid: u32, interval_minutes: u32) -> Result<Self> {
        if grid == 0 {
            return Err(Error::InvalidParameter("g_s must be >= 1".into()));
        }
        if interval_minutes == 0
            || MINUTES_PER_DAY % interval_minutes != 0
            || interval_minutes % axis.step_minutes() != 0
        {
            return Err(Error::InvalidParameter(format!(
                "time interval {interval_minutes} must divide 1440 and be a multiple of g_t"
            )));
        }
        let params = RegionParams {
            grid,
            interval_minutes,
            axis,
        };
        let bbox = catalog.bounding_box();
        let mut atoms: BTreeMap<Atom, BTreeSet<PoiIdx>> = BTreeMap::new();
        if let Some(bb) = bbox {
            for p in catalog.indices() {
                let poi = catalog.poi(p);
                let cell = bb.cell_of(poi.lat, poi.lon, grid);
                for interval in 0..params.interval_count() {
                    let start = interval * interval_minutes;
                    let open = axis
                        .steps_in(start, start + interval_minutes)
                        .any(|t| catalog.open_at(p, t, &axis));
                    if open {
                        let atom = Atom {
                            cell,
                            interval,
                            leaf: poi.leaf_category(),
                        };
                        atoms.entry(atom).or_default().insert(p);
                    }
                }
            }
        }
        let drafts = atoms
            .into_iter()
            .map(|(atom, members)| Draft {
                cells: BTreeSet::from([atom.cell]),
                window: TimeWindow {
                    start: atom.interval,
                    len: 1,
                },
                category: atom.leaf,
                atoms: BTreeSet::from([atom]),
                members,
            })
            .collect();
        Ok(Self::finish(params, bbox, drafts, catalog))
    }

    fn finish(params: RegionParams, bbox: Option<BoundingBox>, drafts: Vec<Draft>, catalog: &PoiCatalog) -> Self {
        let mut drafts: Vec<Draft> = drafts.into_iter().filter(|d| !d.members.is_empty()).collect();
        drafts.sort_by_key(|d| *d.atoms.first().expect("non-empty atoms"));
        let count = params.interval_count();
        let regions = drafts
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                let centroid = d.centroid(catalog);
                let mut timesteps: Vec<u32> = d
                    .window
                    .intervals(count)
                    .flat_map(|iv| {
                        let start = iv * params.interval_minutes;
                        params.axis.steps_in(start, start + params.interval_minutes)
                    })
                    .collect();
                timesteps.sort_unstable();
                StcRegion {
                    id: RegionId(i as u32),
                    cells: d.cells.into_iter().collect(),
                    window: d.window,
                    category: d.category,
                    members: d.members.into_iter().collect(),
                    centroid,
                    time_centroid: d.window.centroid_minute(params.interval_minutes),
                    timesteps,
                    atoms: d.atoms.into_iter().collect(),
                }
            })
            .collect();
        let mut set = Self {
            params,
            bbox,
            regions,
            atom_index: HashMap::new(),
        };
        set.reindex();
        set
    }

    pub fn reindex(&mut self) {
        self.atom_index = self
            .regions
            .iter()
            .flat_map(|r| r.atoms.iter().map(move |a| (*a, r.id)))
            .collect();
    }

    /// Greedy κ-merging, one dimension at a time in `order`.
    pub fn merge(&self, catalog: &PoiCatalog, kappa: usize, order: &[Dimension]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        if order.len() != 3 || !order.iter().all(|d| seen.insert(*d as u8)) {
            return Err(Error::InvalidParameter(
                "merge order must be a permutation of space, time, category".into(),
            ));
        }
        let mut drafts: Vec<Option<Draft>> = self
            .regions
            .iter()
            .map(|r| {
                Some(Draft {
                    cells: r.cells.iter().copied().collect(),
                    window: r.window,
                    category: r.category,
                    atoms: r.atoms.iter().copied().collect(),
                    members: r.members.iter().copied().collect(),
                })
            })
            .collect();
        let grid = self.params.grid;
        let count = self.params.interval_count();
        let hierarchy = catalog.hierarchy();
        for dim in order {
            match dim {
                Dimension::Space => {
                    for coarse in coarse_grids(grid) {
                        let parent = |cell: u32| {
                            let (x, y) = (cell % grid, cell / grid);
                            (y * coarse / grid) * coarse + x * coarse / grid
                        };
                        let parent_of = |d: &Draft| {
                            let first = parent(*d.cells.first().unwrap());
                            d.cells.iter().all(|c| parent(*c) == first).then_some(first)
                        };
                        merge_pass(&mut drafts, kappa, catalog, |r, s| {
                            if r.window != s.window || r.category != s.category {
                                return None;
                            }
                            match (parent_of(r), parent_of(s)) {
                                (Some(a), Some(b)) if a == b => {
                                    let (ca, cb) = (r.centroid(catalog), s.centroid(catalog));
                                    Some((haversine_km(ca.0, ca.1, cb.0, cb.1), None))
                                }
                                _ => None,
                            }
                        });
                    }
                }
                Dimension::Time => {
                    let iv = self.params.interval_minutes;
                    merge_pass(&mut drafts, kappa, catalog, |r, s| {
                        if r.cells != s.cells || r.category != s.category {
                            return None;
                        }
                        let joined = r.window.join(&s.window, count)?;
                        let d = circular_hours(r.window.centroid_minute(iv), s.window.centroid_minute(iv));
                        Some((d, Some(Merged::Window(joined))))
                    });
                }
                Dimension::Category => {
                    for level in (1..hierarchy.depth()).rev() {
                        let iv = self.params.interval_minutes;
                        merge_pass(&mut drafts, kappa, catalog, |r, s| {
                            if r.cells != s.cells {
                                return None;
                            }
                            let window = r.window.union(&s.window, count)?;
                            let a = hierarchy.ancestor_at(r.category, level)?;
                            let b = hierarchy.ancestor_at(s.category, level)?;
                            if a != b {
                                return None;
                            }
                            // Closest category first, then closest time.
                            let lca = hierarchy.lca_level(r.category, s.category).unwrap_or(0);
                            let dt = circular_hours(r.window.centroid_minute(iv), s.window.centroid_minute(iv));
                            Some((dt - 100.0 * lca as f64, Some(Merged::Both(window, a))))
                        });
                    }
                }
            }
        }
        let drafts = drafts.into_iter().flatten().collect();
        Ok(Self::finish(self.params, self.bbox, drafts, catalog))
    }

    pub fn params(&self) -> &RegionParams {
        &self.params
    }

    pub fn axis(&self) -> &TimeAxis {
        &self.params.axis
    }

    pub fn bbox(&self) -> Option<BoundingBox> {
        self.bbox
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn regions(&self) -> &[StcRegion] {
        &self.regions
    }

    pub fn region(&self, id: RegionId) -> &StcRegion {
        &self.regions[id.index()]
    }

    pub fn ids(&self) -> impl Iterator<Item = RegionId> {
        (0..self.regions.len() as u32).map(RegionId)
    }

    pub fn interval_of(&self, t: u32) -> u32 {
        self.params.axis.minute_of(t) / self.params.interval_minutes
    }

    /// Region holding POI `p` at timestep `t`, if `p` is open then.
    pub fn locate(&self, catalog: &PoiCatalog, p: PoiIdx, t: u32) -> Option<RegionId> {
        if !self.params.axis.contains(t) || !catalog.open_at(p, t, &self.params.axis) {
            return None;
        }
        let bb = self.bbox?;
        let poi = catalog.poi(p);
        let atom = Atom {
            cell: bb.cell_of(poi.lat, poi.lon, self.params.grid),
            interval: self.interval_of(t),
            leaf: poi.leaf_category(),
        };
        self.atom_index.get(&atom).copied()
    }

    pub fn project(&self, catalog: &PoiCatalog, traj: &Trajectory) -> Result<RegionTrajectory> {
        traj.visits
            .iter()
            .map(|v| {
                self.locate(catalog, v.poi, v.t).ok_or_else(|| Error::Unmappable {
                    poi: catalog.poi(v.poi).id.clone(),
                    timestep: v.t,
                })
            })
            .collect()
    }

    /// Bounding box of all member POIs.
    pub fn member_bbox(&self, catalog: &PoiCatalog) -> Option<BoundingBox> {
        BoundingBox::of_points(self.regions.iter().flat_map(|r| {
            r.members.iter().map(|p| {
                let poi = catalog.poi(*p);
                (poi.lat, poi.lon)
            })
        }))
    }
}

enum Merged {
    Window(TimeWindow),
    Both(TimeWindow, CategoryId),
}

/// Repeatedly merges every under-populated region into its nearest candidate
/// (ties to the smallest id) until no such merge remains.
fn merge_pass<F>(drafts: &mut [Option<Draft>], kappa: usize, _catalog: &PoiCatalog, candidate: F)
where
    F: Fn(&Draft, &Draft) -> Option<(f64, Option<Merged>)>,
{
    loop {
        let mut changed = false;
        for i in 0..drafts.len() {
            let Some(r) = drafts[i].as_ref() else { continue };
            if r.members.len() >= kappa {
                continue;
            }
            let mut best: Option<(f64, usize, Option<Merged>)> = None;
            for (j, s) in drafts.iter().enumerate() {
                let Some(s) = s.as_ref() else { continue };
                if j == i {
                    continue;
                }
                if let Some((d, merged)) = candidate(r, s) {
                    if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
                        best = Some((d, j, merged));
                    }
                }
            }
            if let Some((_, j, merged)) = best {
                let (keep, gone) = (i.min(j), i.max(j));
                let other = drafts[gone].take().unwrap();
                let target = drafts[keep].as_mut().unwrap();
                target.absorb(other);
                match merged {
                    Some(Merged::Window(w)) => target.window = w,
                    Some(Merged::Both(w, c)) => {
                        target.window = w;
                        target.category = c;
                    }
                    None => {}
                }
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Coarser grid sides used for spatial merging: successive halvings down to 1.
fn coarse_grids(grid: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut g = grid;
    while g > 1 {
        g /= 2;
        out.push(g.max(1));
    }
    out.dedup();
    out
}
