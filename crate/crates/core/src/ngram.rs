//! Reachability-filtered n-gram sets: the output domains of every
//! exponential-mechanism call.

use std::collections::BTreeMap;
use std::hash::Hash;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::catalog::{PoiCatalog, PoiIdx, SpeedProfile};
use crate::error::{Error, Result};
use crate::stc::{RegionId, RegionSet, StcRegion};

/// Default cap on `|nodes|^n` before materialisation is refused for n ≥ 3.
pub const DEFAULT_GRAM_CAP: f64 = 5e7;

pub trait NodeId: Copy + Ord + Hash + std::fmt::Debug + Serialize + DeserializeOwned {
    fn index(self) -> usize;
    fn from_index(i: usize) -> Self;
}

impl NodeId for RegionId {
    fn index(self) -> usize {
        self.0 as usize
    }
    fn from_index(i: usize) -> Self {
        RegionId(i as u32)
    }
}

impl NodeId for PoiIdx {
    fn index(self) -> usize {
        self.0 as usize
    }
    fn from_index(i: usize) -> Self {
        PoiIdx(i as u32)
    }
}

/// All length-`n` sequences that pass the adjacency filter, in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "Id: NodeId")]
pub struct NGramSet<Id: NodeId> {
    n: usize,
    nodes: usize,
    grams: Vec<Id>,
    #[serde(skip)]
    by_node: Vec<Vec<u32>>,
}

impl<Id: NodeId> NGramSet<Id> {
    /// Depth-first enumeration. `step` threads a per-gram state (for region
    /// grams: the earliest feasible timestep of the last element) and returns
    /// `None` when appending a node is infeasible.
    pub fn enumerate<S, F>(n: usize, successors: &[Vec<Id>], start: S, step: F, cap: f64) -> Result<Self>
    where
        S: Fn(Id) -> Option<u32>,
        F: Fn(u32, Id) -> Option<u32>,
    {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        let nodes = successors.len();
        let size = (nodes as f64).powi(n as i32);
        if n >= 3 && size > cap {
            return Err(Error::MemoryGuard { size, cap });
        }
        let mut grams = Vec::new();
        let mut prefix = Vec::with_capacity(n);
        for i in 0..nodes {
            let id = Id::from_index(i);
            if let Some(state) = start(id) {
                prefix.push(id);
                extend(n, successors, &step, state, &mut prefix, &mut grams);
                prefix.pop();
            }
        }
        let mut set = Self {
            n,
            nodes,
            grams,
            by_node: Vec::new(),
        };
        set.reindex();
        Ok(set)
    }

    pub fn reindex(&mut self) {
        let mut by_node = vec![Vec::new(); self.nodes];
        for (g, gram) in self.grams.chunks(self.n.max(1)).enumerate() {
            for id in gram {
                let list: &mut Vec<u32> = &mut by_node[id.index()];
                if list.last() != Some(&(g as u32)) {
                    list.push(g as u32);
                }
            }
        }
        self.by_node = by_node;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        if self.n == 0 {
            0
        } else {
            self.grams.len() / self.n
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn gram(&self, i: usize) -> &[Id] {
        &self.grams[i * self.n..(i + 1) * self.n]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Id]> {
        self.grams.chunks(self.n)
    }

    /// Indices of grams containing `id`.
    pub fn containing(&self, id: Id) -> &[u32] {
        &self.by_node[id.index()]
    }

    pub fn contains(&self, gram: &[Id]) -> bool {
        gram.len() == self.n && self.iter().any(|g| g == gram)
    }
}

fn extend<Id: NodeId, F>(n: usize, successors: &[Vec<Id>], step: &F, state: u32, prefix: &mut Vec<Id>, out: &mut Vec<Id>)
where
    F: Fn(u32, Id) -> Option<u32>,
{
    if prefix.len() == n {
        out.extend_from_slice(prefix);
        return;
    }
    let last = *prefix.last().unwrap();
    for &next in &successors[last.index()] {
        if let Some(s) = step(state, next) {
            prefix.push(next);
            extend(n, successors, step, s, prefix, out);
            prefix.pop();
        }
    }
}

/// POI-to-POI reachability at a fixed gap, using the slowest configured speed.
#[derive(Debug, Clone)]
pub struct PoiReach {
    size: usize,
    bits: Vec<bool>,
}

impl PoiReach {
    pub fn new(catalog: &PoiCatalog, speed: &SpeedProfile, gap_minutes: u32) -> Self {
        let size = catalog.len();
        let theta = speed.min_theta(gap_minutes);
        let mut bits = vec![false; size * size];
        for a in catalog.indices() {
            for b in catalog.indices() {
                bits[a.index() * size + b.index()] = a == b || catalog.physical_distance(a, b) <= theta;
            }
        }
        Self { size, bits }
    }

    #[inline]
    pub fn get(&self, a: PoiIdx, b: PoiIdx) -> bool {
        self.bits[a.index() * self.size + b.index()]
    }

    /// Successor lists over POIs.
    pub fn successors(&self) -> Vec<Vec<PoiIdx>> {
        (0..self.size)
            .map(|a| {
                (0..self.size)
                    .filter(|b| self.bits[a * self.size + b])
                    .map(PoiIdx::from_index)
                    .collect()
            })
            .collect()
    }
}

/// True iff some member of `a` reaches some member of `b`.
pub fn region_reachable(reach: &PoiReach, a: &StcRegion, b: &StcRegion) -> bool {
    a.members.iter().any(|p| b.members.iter().any(|q| reach.get(*p, *q)))
}

/// Region-to-region reachability and time-order successor lists.
#[derive(Debug, Clone)]
pub struct RegionGraph {
    successors: Vec<Vec<RegionId>>,
}

impl RegionGraph {
    pub fn new(regions: &RegionSet, catalog: &PoiCatalog, speed: &SpeedProfile, min_gap: u32) -> Self {
        let reach = PoiReach::new(catalog, speed, min_gap);
        // Regions spanning several hours often share a member list.
        let mut groups: BTreeMap<&[PoiIdx], usize> = BTreeMap::new();
        let group_of: Vec<usize> = regions
            .regions()
            .iter()
            .map(|r| {
                let next = groups.len();
                *groups.entry(r.members.as_slice()).or_insert(next)
            })
            .collect();
        let mut keys: Vec<&[PoiIdx]> = vec![&[]; groups.len()];
        for (k, g) in &groups {
            keys[*g] = k;
        }
        let g = keys.len();
        let mut group_reach = vec![false; g * g];
        for i in 0..g {
            for j in 0..g {
                group_reach[i * g + j] = keys[i].iter().any(|p| keys[j].iter().any(|q| reach.get(*p, *q)));
            }
        }
        let rs = regions.regions();
        let successors = rs
            .iter()
            .map(|a| {
                rs.iter()
                    .filter(|b| {
                        group_reach[group_of[a.id.index()] * g + group_of[b.id.index()]]
                            && a.earliest() < b.latest()
                    })
                    .map(|b| b.id)
                    .collect()
            })
            .collect();
        Self { successors }
    }

    pub fn successors(&self) -> &[Vec<RegionId>] {
        &self.successors
    }
}

/// Region n-grams: adjacent pairs reachable at `min_gap` and a strictly
/// increasing timestep chain exists through the windows.
pub fn build_ngram_set(regions: &RegionSet, graph: &RegionGraph, n: usize, cap: f64) -> Result<NGramSet<RegionId>> {
    let rs = regions.regions();
    NGramSet::enumerate(
        n,
        graph.successors(),
        |r| Some(rs[r.index()].earliest()),
        |t, r| {
            let steps = &rs[r.index()].timesteps;
            let i = steps.partition_point(|s| *s <= t);
            steps.get(i).copied()
        },
        cap,
    )
}

/// W^1 … W^n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "Id: NodeId")]
pub struct GramFamily<Id: NodeId> {
    sets: Vec<NGramSet<Id>>,
}

impl<Id: NodeId> GramFamily<Id> {
    pub fn new(sets: Vec<NGramSet<Id>>) -> Result<Self> {
        if sets.iter().enumerate().any(|(i, s)| s.n() != i + 1) {
            return Err(Error::InvalidParameter("gram family must hold lengths 1..=n in order".into()));
        }
        Ok(Self { sets })
    }

    pub fn max_n(&self) -> usize {
        self.sets.len()
    }

    pub fn get(&self, k: usize) -> Option<&NGramSet<Id>> {
        k.checked_sub(1).and_then(|i| self.sets.get(i))
    }

    pub fn reindex(&mut self) {
        self.sets.iter_mut().for_each(NGramSet::reindex);
    }
}

pub fn build_region_family(
    regions: &RegionSet,
    graph: &RegionGraph,
    n: usize,
    cap: f64,
) -> Result<GramFamily<RegionId>> {
    let sets = (1..=n)
        .map(|k| build_ngram_set(regions, graph, k, cap))
        .collect::<Result<Vec<_>>>()?;
    GramFamily::new(sets)
}

/// POI n-grams filtered by reachability at `gap_minutes` only.
pub fn build_poi_family(
    catalog: &PoiCatalog,
    speed: &SpeedProfile,
    gap_minutes: u32,
    n: usize,
    cap: f64,
) -> Result<GramFamily<PoiIdx>> {
    let size = (catalog.len() as f64).powi(n as i32);
    if size > cap {
        return Err(Error::MemoryGuard { size, cap });
    }
    let successors = PoiReach::new(catalog, speed, gap_minutes).successors();
    let sets = (1..=n)
        .map(|k| NGramSet::enumerate(k, &successors, |_| Some(0), |s, _| Some(s), cap))
        .collect::<Result<Vec<_>>>()?;
    GramFamily::new(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{haversine_km, CategoryHierarchy, CategoryId, Poi};
    use crate::stc::Dimension;
    use crate::time::TimeAxis;
    use rand::{Rng, SeedableRng};

    fn catalog(points: &[(f64, f64, u32, u32)]) -> PoiCatalog {
        let h = CategoryHierarchy::from_triples([("a", 1, None::<&str>), ("b", 1, None)]).unwrap();
        let pois = points
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon, open, close))| Poi {
                id: format!("p{i}"),
                lat,
                lon,
                category_path: vec![CategoryId((i % 2) as u32)],
                open,
                close,
                popularity: 1.0,
            })
            .collect();
        PoiCatalog::new(pois, h).unwrap()
    }

    fn setup(points: &[(f64, f64, u32, u32)], speed: f64) -> (PoiCatalog, RegionSet, RegionGraph) {
        let cat = catalog(points);
        let axis = TimeAxis::new(10).unwrap();
        let set = RegionSet::build(&cat, axis, 1, 60).unwrap();
        let graph = RegionGraph::new(&set, &cat, &SpeedProfile::constant(speed), 10);
        (cat, set, graph)
    }

    #[test]
    fn unigrams_are_all_regions() {
        let (_, set, graph) = setup(&[(0.0, 0.0, 600, 720), (0.0, 0.001, 600, 660)], 4.0);
        let w1 = build_ngram_set(&set, &graph, 1, DEFAULT_GRAM_CAP).unwrap();
        assert_eq!(w1.len(), set.len());
    }

    #[test]
    fn full_product_when_everything_reachable() {
        // One daily interval and three leaf categories: three regions with no
        // ordering constraint, all mutually reachable.
        let pts = [(0.0, 0.0), (0.0, 0.001), (0.0, 0.0005)];
        let h = CategoryHierarchy::from_triples([("a", 1, None::<&str>), ("b", 1, None), ("c", 1, None)]).unwrap();
        let pois = pts
            .iter()
            .enumerate()
            .map(|(i, &(lat, lon))| Poi {
                id: format!("p{i}"),
                lat,
                lon,
                category_path: vec![CategoryId(i as u32)],
                open: 600,
                close: 780,
                popularity: 1.0,
            })
            .collect();
        let cat = PoiCatalog::new(pois, h).unwrap();
        let set = RegionSet::build(&cat, TimeAxis::new(10).unwrap(), 1, 1440).unwrap();
        assert_eq!(set.len(), 3);
        let graph = RegionGraph::new(&set, &cat, &SpeedProfile::constant(8.0), 10);
        let w2 = build_ngram_set(&set, &graph, 2, DEFAULT_GRAM_CAP).unwrap();
        assert_eq!(w2.len(), 9);
        assert_eq!(w2.containing(RegionId(1)).len(), 5);
    }

    #[test]
    fn far_singletons_unreachable() {
        // ~10 km apart, θ = 1.33 km.
        let (_, set, graph) = setup(&[(0.0, 0.0, 600, 660), (0.09, 0.0, 600, 660)], 8.0);
        let rs = set.regions();
        let reach = PoiReach::new(&catalog(&[(0.0, 0.0, 600, 660), (0.09, 0.0, 600, 660)]), &SpeedProfile::constant(8.0), 10);
        assert!(!region_reachable(&reach, &rs[0], &rs[1]));
        assert!(region_reachable(&reach, &rs[0], &rs[0]));
        let w2 = build_ngram_set(&set, &graph, 2, DEFAULT_GRAM_CAP).unwrap();
        assert!(w2.iter().all(|g| g[0] == g[1]));
    }

    #[test]
    fn single_close_pair_makes_regions_reachable() {
        // Two 5-member regions, all pairs far apart except one.
        let mut pts = Vec::new();
        for i in 0..5 {
            pts.push((0.0 + 0.05 * i as f64, 0.0, 600, 660));
            pts.push((0.0 + 0.05 * i as f64, 1.0, 600, 660));
        }
        pts[9] = (0.2, 0.005, 600, 660); // close to pts[8] = (0.2, 0.0)
        let cat = catalog(&pts);
        let reach = PoiReach::new(&cat, &SpeedProfile::constant(8.0), 10);
        let set = RegionSet::build(&cat, TimeAxis::new(10).unwrap(), 1, 60).unwrap();
        let rs = set.regions();
        let brute = rs[0].members.iter().any(|p| {
            rs[1].members.iter().any(|q| {
                let (a, b) = (cat.poi(*p), cat.poi(*q));
                haversine_km(a.lat, a.lon, b.lat, b.lon) <= 8.0 * 10.0 / 60.0
            })
        });
        let pairs = rs[0].members.len() * rs[1].members.len();
        assert_eq!(pairs, 25);
        assert!(brute);
        assert!(region_reachable(&reach, &rs[0], &rs[1]));
    }

    #[test]
    fn memory_guard() {
        let pts: Vec<_> = (0..30).map(|i| (0.0, 0.0001 * i as f64, 0, 1440)).collect();
        let (_, set, graph) = setup(&pts, 4.0);
        let err = build_ngram_set(&set, &graph, 3, 1000.0).unwrap_err();
        assert!(matches!(err, Error::MemoryGuard { .. }));
        assert!(build_ngram_set(&set, &graph, 2, 1000.0).is_ok());
    }

    /// Independent oracle: full product filtered by brute-force member pair
    /// distances and an exhaustive strictly-increasing timestep check.
    fn brute_force(cat: &PoiCatalog, set: &RegionSet, n: usize, theta: f64) -> Vec<Vec<RegionId>> {
        let rs = set.regions();
        let reach = |a: &StcRegion, b: &StcRegion| {
            a.members.iter().any(|p| {
                b.members.iter().any(|q| {
                    let (x, y) = (cat.poi(*p), cat.poi(*q));
                    p == q || haversine_km(x.lat, x.lon, y.lat, y.lon) <= theta
                })
            })
        };
        fn chain(rs: &[StcRegion], gram: &[RegionId], after: Option<u32>) -> bool {
            match gram.split_first() {
                None => true,
                Some((r, rest)) => rs[r.index()]
                    .timesteps
                    .iter()
                    .any(|t| after.is_none_or(|a| *t > a) && chain(rs, rest, Some(*t))),
            }
        }
        let mut out = Vec::new();
        let total = rs.len().pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let mut gram = vec![RegionId(0); n];
            for slot in gram.iter_mut().rev() {
                *slot = RegionId((c % rs.len()) as u32);
                c /= rs.len();
            }
            let ok = gram.windows(2).all(|w| reach(&rs[w[0].index()], &rs[w[1].index()])) && chain(rs, &gram, None);
            if ok {
                out.push(gram);
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let pts: Vec<_> = (0..rng.gen_range(4..9))
                .map(|_| {
                    let open = rng.gen_range(0..4) * 60 + 540;
                    (rng.gen_range(0.0..0.03), rng.gen_range(0.0..0.03), open, open + rng.gen_range(1..3) * 60)
                })
                .collect();
            let cat = catalog(&pts);
            let axis = TimeAxis::new(20).unwrap();
            let set = RegionSet::build(&cat, axis, 2, 60)
                .unwrap()
                .merge(&cat, 2, &[Dimension::Space, Dimension::Time, Dimension::Category])
                .unwrap();
            assert!(set.len() <= 15, "{}", set.len());
            let speed = rng.gen_range(1.0..6.0);
            let graph = RegionGraph::new(&set, &cat, &SpeedProfile::constant(speed), 20);
            for n in 1..=3 {
                let fast = build_ngram_set(&set, &graph, n, DEFAULT_GRAM_CAP).unwrap();
                let slow = brute_force(&cat, &set, n, speed * 20.0 / 60.0);
                let fast: Vec<Vec<RegionId>> = fast.iter().map(|g| g.to_vec()).collect();
                assert_eq!(fast, slow);
            }
        }
    }

    #[test]
    fn monotone_in_theta() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<_> = (0..10)
            .map(|_| (rng.gen_range(0.0..0.05), rng.gen_range(0.0..0.05), 540, 780))
            .collect();
        let cat = catalog(&pts);
        let set = RegionSet::build(&cat, TimeAxis::new(10).unwrap(), 4, 60).unwrap();
        let mut prev: Option<Vec<Vec<RegionId>>> = None;
        for speed in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let graph = RegionGraph::new(&set, &cat, &SpeedProfile::constant(speed), 10);
            let w: Vec<Vec<RegionId>> = build_ngram_set(&set, &graph, 2, DEFAULT_GRAM_CAP)
                .unwrap()
                .iter()
                .map(|g| g.to_vec())
                .collect();
            if let Some(p) = &prev {
                assert!(p.iter().all(|g| w.contains(g)));
            }
            prev = Some(w);
        }
    }

    #[test]
    fn poi_family_lengths() {
        let cat = catalog(&[(0.0, 0.0, 0, 1440), (0.0, 0.001, 0, 1440), (0.0, 1.0, 0, 1440)]);
        let fam = build_poi_family(&cat, &SpeedProfile::constant(4.0), 10, 2, DEFAULT_GRAM_CAP).unwrap();
        assert_eq!(fam.get(1).unwrap().len(), 3);
        // 0<->1 reachable both ways plus three self-loops.
        assert_eq!(fam.get(2).unwrap().len(), 5);
        assert!(build_poi_family(&cat, &SpeedProfile::constant(4.0), 10, 2, 5.0).is_err());
    }
}
