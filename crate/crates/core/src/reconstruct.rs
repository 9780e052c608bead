//! Reassembles one output trajectory from the perturbed grams: an exact
//! shortest path over the layered bigram graph, then POI/time sampling with
//! feasibility checks and time smoothing as a last resort.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{PoiCatalog, SpeedProfile};
use crate::distance::ElementMetric;
use crate::error::{Error, Result};
use crate::ngram::{NGramSet, NodeId};
use crate::perturb::PerturbRecord;
use crate::stc::{RegionId, RegionSet};
use crate::time::TimeAxis;
use crate::trajectory::Visit;

pub const DEFAULT_GAMMA: usize = 50_000;
pub const DEFAULT_ENUMERATION_LIMIT: usize = 10_000;

/// Σ of `d(node, element at i)` over every entry covering index `i`.
pub fn region_error<Id: NodeId, M: ElementMetric<Id>>(metric: &M, record: &PerturbRecord<Id>, node: Id, i: usize) -> f64 {
    record.covering(i).map(|z| metric.d(node, z)).sum()
}

pub fn bigram_error<Id: NodeId, M: ElementMetric<Id>>(
    metric: &M,
    record: &PerturbRecord<Id>,
    i: usize,
    w: (Id, Id),
) -> f64 {
    region_error(metric, record, w.0, i) + region_error(metric, record, w.1, i + 1)
}

/// Candidate nodes, their per-index errors, the allowed bigrams and, when
/// set, the timesteps each candidate can occupy. Timed instances only admit
/// paths with a strictly increasing timestep chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionInstance {
    len: usize,
    candidates: Vec<u32>,
    errors: Vec<f64>,
    bigrams: Vec<(u32, u32)>,
    times: Option<Vec<Vec<u32>>>,
}

impl ReconstructionInstance {
    /// `errors[c * len + i]` is the error of candidate `c` at index `i`;
    /// bigrams use local candidate positions.
    pub fn new(len: usize, candidates: Vec<u32>, errors: Vec<f64>, mut bigrams: Vec<(u32, u32)>) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidParameter("trajectory length must be >= 1".into()));
        }
        if errors.len() != candidates.len() * len {
            return Err(Error::LengthMismatch {
                left: errors.len(),
                right: candidates.len() * len,
            });
        }
        if bigrams.iter().any(|(a, b)| *a as usize >= candidates.len() || *b as usize >= candidates.len()) {
            return Err(Error::InvalidParameter("bigram refers to a missing candidate".into()));
        }
        bigrams.sort_unstable();
        bigrams.dedup();
        Ok(Self {
            len,
            candidates,
            errors,
            bigrams,
            times: None,
        })
    }

    /// Attaches the timesteps of each candidate, in candidate order.
    pub fn with_times(mut self, mut times: Vec<Vec<u32>>) -> Result<Self> {
        if times.len() != self.candidates.len() {
            return Err(Error::LengthMismatch {
                left: times.len(),
                right: self.candidates.len(),
            });
        }
        for t in &mut times {
            t.sort_unstable();
            t.dedup();
            if t.is_empty() {
                return Err(Error::InvalidParameter("candidate without timesteps".into()));
            }
        }
        self.times = Some(times);
        Ok(self)
    }

    pub fn times(&self) -> Option<&[Vec<u32>]> {
        self.times.as_deref()
    }

    /// Whether a path of local positions uses only allowed bigrams and, for
    /// timed instances, admits a strictly increasing timestep chain.
    pub fn is_feasible(&self, path: &[usize]) -> bool {
        let edges_ok = path
            .windows(2)
            .all(|w| self.bigrams.binary_search(&(w[0] as u32, w[1] as u32)).is_ok());
        if !edges_ok {
            return false;
        }
        let Some(times) = &self.times else {
            return true;
        };
        let mut prev: Option<u32> = None;
        for c in path {
            let steps = &times[*c];
            let next = match prev {
                None => steps.first().copied(),
                Some(t) => steps.get(steps.partition_point(|s| *s <= t)).copied(),
            };
            match next {
                Some(t) => prev = Some(t),
                None => return false,
            }
        }
        true
    }

    /// Errors from `record`; bigrams are the members of `w2` whose both ends are candidates.
    pub fn build<Id: NodeId, M: ElementMetric<Id>>(
        record: &PerturbRecord<Id>,
        metric: &M,
        mut candidates: Vec<Id>,
        w2: Option<&NGramSet<Id>>,
    ) -> Result<Self> {
        candidates.sort_unstable();
        candidates.dedup();
        let len = record.trajectory_len;
        let errors = candidates
            .iter()
            .flat_map(|c| (0..len).map(move |i| region_error(metric, record, *c, i)))
            .collect();
        let local = |id: Id| candidates.binary_search(&id).ok().map(|x| x as u32);
        let bigrams = w2
            .into_iter()
            .flat_map(|set| set.iter())
            .filter_map(|g| Some((local(g[0])?, local(g[1])?)))
            .collect();
        let ids = candidates.iter().map(|c| c.index() as u32).collect();
        Self::new(len, ids, errors, bigrams)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[u32] {
        &self.candidates
    }

    pub fn bigrams(&self) -> &[(u32, u32)] {
        &self.bigrams
    }

    #[inline]
    pub fn region_error(&self, c: usize, i: usize) -> f64 {
        self.errors[c * self.len + i]
    }

    #[inline]
    pub fn bigram_error(&self, i: usize, w: (usize, usize)) -> f64 {
        self.region_error(w.0, i) + self.region_error(w.1, i + 1)
    }

    /// Total bigram error of a path of local positions, summed left to right.
    pub fn objective(&self, path: &[usize]) -> f64 {
        if path.len() == 1 {
            return self.region_error(path[0], 0);
        }
        path.windows(2)
            .enumerate()
            .fold(0.0, |acc, (i, w)| acc + self.bigram_error(i, (w[0], w[1])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSolution {
    /// Node ids (not local positions).
    pub path: Vec<u32>,
    pub objective: f64,
    /// No path exists in the bigram graph; `path` is the per-index argmin.
    pub fallback: bool,
}

/// Exact minimum of the total bigram error over feasible paths; equal-cost
/// paths resolve to the lexicographically smallest.
pub fn solve_region_path(inst: &ReconstructionInstance) -> Result<PathSolution> {
    let c = inst.candidates.len();
    if c == 0 {
        return Err(Error::EmptyCandidates);
    }
    let len = inst.len;
    let argmin = |i: usize| {
        (0..c).fold(0, |best, x| if inst.region_error(x, i) < inst.region_error(best, i) { x } else { best })
    };
    let finish = |local: Vec<usize>, fallback: bool| PathSolution {
        objective: inst.objective(&local),
        path: local.iter().map(|x| inst.candidates[*x]).collect(),
        fallback,
    };
    if len == 1 {
        return Ok(finish(vec![argmin(0)], false));
    }
    // One state per (candidate, timestep); untimed candidates get one state.
    let mut first = Vec::with_capacity(c + 1);
    let mut state_node = Vec::new();
    let mut state_time = Vec::new();
    for x in 0..c {
        first.push(state_node.len());
        match &inst.times {
            Some(times) => {
                for t in &times[x] {
                    state_node.push(x);
                    state_time.push(*t);
                }
            }
            None => {
                state_node.push(x);
                state_time.push(0);
            }
        }
    }
    first.push(state_node.len());
    let states = state_node.len();
    let timed = inst.times.is_some();
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (a, b) in &inst.bigrams {
        incoming[*b as usize].push(*a as usize);
    }
    let mut cost = vec![0.0f64; states];
    // Dense position of each state's best prefix in lexicographic order.
    let mut rank: Vec<usize> = state_node.clone();
    let mut parents: Vec<Vec<usize>> = Vec::with_capacity(len - 1);
    // Timestep limit for a destination state: sources must sit strictly before it.
    let horizon = state_time.iter().copied().max().unwrap_or(0) as usize + 1;
    let limit = |s: usize| if timed { state_time[s] as usize } else { horizon };
    // best_before[x * (horizon + 1) + t]: best (cost, rank) state of node x with time < t.
    let mut best_before = vec![usize::MAX; c * (horizon + 1)];
    for i in 1..len {
        for x in 0..c {
            let row = &mut best_before[x * (horizon + 1)..(x + 1) * (horizon + 1)];
            let mut best = usize::MAX;
            let mut cursor = first[x];
            for (t, slot) in row.iter_mut().enumerate() {
                while cursor < first[x + 1] && (state_time[cursor] as usize) < t {
                    let better = cost[cursor].is_finite()
                        && (best == usize::MAX || (cost[cursor], rank[cursor]) < (cost[best], rank[best]));
                    if better {
                        best = cursor;
                    }
                    cursor += 1;
                }
                *slot = best;
            }
        }
        let mut next = vec![f64::INFINITY; states];
        let mut parent = vec![usize::MAX; states];
        for dst in 0..c {
            for &src in &incoming[dst] {
                let e = inst.bigram_error(i - 1, (src, dst));
                let row = &best_before[src * (horizon + 1)..(src + 1) * (horizon + 1)];
                for ds in first[dst]..first[dst + 1] {
                    let b = row[limit(ds)];
                    if b == usize::MAX {
                        continue;
                    }
                    let cand = cost[b] + e;
                    if cand < next[ds] || (cand == next[ds] && rank[b] < rank[parent[ds]]) {
                        next[ds] = cand;
                        parent[ds] = b;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..states).filter(|s| next[*s].is_finite()).collect();
        order.sort_by_key(|s| (rank[parent[*s]], state_node[*s]));
        let mut new_rank = vec![usize::MAX; states];
        let mut pos = 0;
        for (k, s) in order.iter().enumerate() {
            if k > 0 {
                let p = order[k - 1];
                if (rank[parent[p]], state_node[p]) != (rank[parent[*s]], state_node[*s]) {
                    pos += 1;
                }
            }
            new_rank[*s] = pos;
        }
        cost = next;
        rank = new_rank;
        parents.push(parent);
    }
    let end = (0..states)
        .filter(|s| cost[*s].is_finite())
        .min_by(|a, b| cost[*a].total_cmp(&cost[*b]).then(rank[*a].cmp(&rank[*b])));
    let Some(mut state) = end else {
        return Ok(finish((0..len).map(argmin).collect(), true));
    };
    let mut local = vec![state_node[state]];
    for parent in parents.iter().rev() {
        state = parent[state];
        local.push(state_node[state]);
    }
    local.reverse();
    Ok(finish(local, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MbrParams {
    /// Spatial slack around the perturbed regions' member POIs.
    pub slack_km: f64,
    /// Time envelope on each side of the perturbed regions' timesteps.
    pub envelope_minutes: u32,
}

impl MbrParams {
    /// Slack θ at the largest inter-point gap of a day-long trajectory is the
    /// whole day; callers pass the observed maximum gap instead.
    pub fn for_gap(speed: &SpeedProfile, max_gap_minutes: u32) -> Self {
        let fastest = speed
            .hourly_kmh
            .iter()
            .flatten()
            .copied()
            .fold(speed.base_kmh, f64::max);
        Self {
            slack_km: fastest * max_gap_minutes as f64 / 60.0,
            envelope_minutes: 60,
        }
    }

    pub fn disabled() -> Self {
        Self {
            slack_km: f64::INFINITY,
            envelope_minutes: u32::MAX,
        }
    }
}

/// Regions near the perturbed grams in space and time. Every region named in
/// the record is always kept.
pub fn mbr_regions(
    record: &PerturbRecord<RegionId>,
    regions: &RegionSet,
    catalog: &PoiCatalog,
    params: MbrParams,
) -> Vec<RegionId> {
    let z: Vec<RegionId> = {
        let mut z: Vec<RegionId> = record.entries.iter().flat_map(|e| e.gram.iter().copied()).collect();
        z.sort_unstable();
        z.dedup();
        z
    };
    if params.slack_km.is_infinite() && params.envelope_minutes == u32::MAX {
        return regions.ids().collect();
    }
    let bbox = crate::catalog::BoundingBox::of_points(z.iter().flat_map(|r| {
        regions.region(*r).members.iter().map(|p| {
            let poi = catalog.poi(*p);
            (poi.lat, poi.lon)
        })
    }));
    let Some(bbox) = bbox else {
        return z;
    };
    let bbox = bbox.expanded_km(params.slack_km);
    let inside: Vec<bool> = catalog
        .pois()
        .iter()
        .map(|p| bbox.contains(p.lat, p.lon))
        .collect();
    let step = regions.axis().step_minutes();
    let envelope = params.envelope_minutes / step;
    let lo = z.iter().map(|r| regions.region(*r).earliest()).min().unwrap_or(0);
    let hi = z.iter().map(|r| regions.region(*r).latest()).max().unwrap_or(0);
    let (lo, hi) = (lo.saturating_sub(envelope), hi.saturating_add(envelope));
    regions
        .regions()
        .iter()
        .filter(|r| {
            z.binary_search(&r.id).is_ok()
                || (r.members.iter().any(|p| inside[p.index()]) && r.timesteps.iter().any(|t| (lo..=hi).contains(t)))
        })
        .map(|r| r.id)
        .collect()
}

fn timed_instance<M: ElementMetric<RegionId>>(
    record: &PerturbRecord<RegionId>,
    regions: &RegionSet,
    metric: &M,
    candidates: Vec<RegionId>,
    w2: &NGramSet<RegionId>,
) -> Result<ReconstructionInstance> {
    let inst = ReconstructionInstance::build(record, metric, candidates, Some(w2))?;
    let times = inst
        .candidates()
        .iter()
        .map(|r| regions.region(RegionId(*r)).timesteps.clone())
        .collect();
    inst.with_times(times)
}

/// Instance restricted to the MBR candidates, without the lower-bound rescue.
pub fn mbr_prune<M: ElementMetric<RegionId>>(
    record: &PerturbRecord<RegionId>,
    regions: &RegionSet,
    catalog: &PoiCatalog,
    metric: &M,
    w2: &NGramSet<RegionId>,
    params: MbrParams,
) -> Result<ReconstructionInstance> {
    let candidates = mbr_regions(record, regions, catalog, params);
    timed_instance(record, regions, metric, candidates, w2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReconstruction {
    pub path: Vec<RegionId>,
    pub objective: f64,
    pub fallback: bool,
    /// Regions in the pruned instance before any rescue.
    pub pruned_size: usize,
    /// Regions re-admitted because their error lower bound beat the pruned optimum.
    pub rescued: usize,
}

/// Pruned solve followed by a lower-bound check: any excluded region whose
/// cheapest conceivable path is no worse than the pruned optimum is added
/// back and the instance re-solved, so the result equals the unpruned optimum.
pub fn reconstruct_regions<M: ElementMetric<RegionId>>(
    record: &PerturbRecord<RegionId>,
    regions: &RegionSet,
    catalog: &PoiCatalog,
    metric: &M,
    w2: &NGramSet<RegionId>,
    params: MbrParams,
) -> Result<RegionReconstruction> {
    let len = record.trajectory_len;
    let mut candidates = mbr_regions(record, regions, catalog, params);
    let pruned_size = candidates.len();
    let weights: Vec<f64> = (0..len)
        .map(|i| if len == 1 || i == 0 || i == len - 1 { 1.0 } else { 2.0 })
        .collect();
    let all: Vec<Vec<f64>> = regions
        .ids()
        .map(|r| (0..len).map(|i| region_error(metric, record, r, i)).collect())
        .collect();
    let floor: Vec<f64> = (0..len)
        .map(|i| all.iter().map(|e| e[i]).fold(f64::INFINITY, f64::min))
        .collect();
    let base: f64 = floor.iter().zip(&weights).map(|(f, w)| f * w).sum();
    let bound = |r: usize| {
        (0..len)
            .map(|i| base - weights[i] * floor[i] + weights[i] * all[r][i])
            .fold(f64::INFINITY, f64::min)
    };
    let mut rescued = 0;
    loop {
        let inst = timed_instance(record, regions, metric, candidates.clone(), w2)?;
        let sol = solve_region_path(&inst)?;
        let limit = if sol.fallback { f64::INFINITY } else { sol.objective * (1.0 + 1e-9) + 1e-9 };
        let extra: Vec<RegionId> = regions
            .ids()
            .filter(|r| candidates.binary_search(r).is_err() && bound(r.index()) <= limit)
            .collect();
        if extra.is_empty() {
            return Ok(RegionReconstruction {
                path: sol.path.into_iter().map(RegionId).collect(),
                objective: sol.objective,
                fallback: sol.fallback,
                pruned_size,
                rescued,
            });
        }
        rescued += extra.len();
        candidates.extend(extra);
        candidates.sort_unstable();
    }
}

/// Every (POI, timestep) pair that maps to region `r`.
pub fn region_visits(regions: &RegionSet, catalog: &PoiCatalog, r: RegionId) -> Vec<Visit> {
    let region = regions.region(r);
    region
        .timesteps
        .iter()
        .flat_map(|t| region.members.iter().map(move |p| Visit::new(*p, *t)))
        .filter(|v| regions.locate(catalog, v.poi, v.t) == Some(r))
        .collect()
}

fn link_ok(catalog: &PoiCatalog, axis: &TimeAxis, speed: &SpeedProfile, a: Visit, b: Visit) -> bool {
    b.t > a.t && catalog.reachable(a.poi, b.poi, axis.minute_of(a.t), axis.gap_minutes(a.t, b.t), speed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiSample {
    pub visits: Vec<Visit>,
    /// Rejection-sampling draws used (0 when the feasible set was enumerated).
    pub attempts: usize,
    pub smoothed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub gamma: usize,
    pub enumeration_limit: usize,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            enumeration_limit: DEFAULT_ENUMERATION_LIMIT,
        }
    }
}

/// Uniform draw over feasible (POI, timestep) sequences through the region
/// path; exhaustive on small domains, rejection sampling otherwise, and time
/// smoothing when no feasible draw is found.
pub fn sample_poi_trajectory<R: Rng + ?Sized>(
    path: &[RegionId],
    regions: &RegionSet,
    catalog: &PoiCatalog,
    speed: &SpeedProfile,
    params: SamplingParams,
    rng: &mut R,
) -> Result<PoiSample> {
    if path.is_empty() {
        return Err(Error::InvalidParameter("empty region path".into()));
    }
    let axis = regions.axis();
    let options: Vec<Vec<Visit>> = path.iter().map(|r| region_visits(regions, catalog, *r)).collect();
    if options.iter().any(Vec::is_empty) {
        return Err(Error::EmptyCandidates);
    }
    let combos = options
        .iter()
        .try_fold(1usize, |acc, o| acc.checked_mul(o.len()))
        .unwrap_or(usize::MAX);
    if combos <= params.enumeration_limit {
        let feasible = enumerate_feasible(&options, catalog, axis, speed);
        if !feasible.is_empty() {
            let pick = rng.gen_range(0..feasible.len());
            return Ok(PoiSample {
                visits: feasible[pick].clone(),
                attempts: 0,
                smoothed: false,
            });
        }
    } else if let Some(counts) = completion_counts(&options, catalog, axis, speed) {
        let mut draft = Vec::with_capacity(path.len());
        for attempt in 1..=params.gamma {
            draft.clear();
            let ok = options.iter().all(|o| {
                let v = o[rng.gen_range(0..o.len())];
                let fine = draft.last().is_none_or(|prev| link_ok(catalog, axis, speed, *prev, v));
                draft.push(v);
                fine
            });
            if ok {
                return Ok(PoiSample {
                    visits: draft,
                    attempts: attempt,
                    smoothed: false,
                });
            }
        }
        return Ok(PoiSample {
            visits: draw_counted(&options, &counts, catalog, axis, speed, rng),
            attempts: params.gamma,
            smoothed: false,
        });
    }
    // Smoothing keeps POIs and pushes times; start from the earliest
    // monotone choice of timesteps for one random POI per region.
    let mut prev: Option<u32> = None;
    let draft: Vec<Visit> = options
        .iter()
        .map(|o| {
            let later: Vec<&Visit> = o.iter().filter(|v| prev.is_none_or(|p| v.t > p)).collect();
            let v = if later.is_empty() {
                o[rng.gen_range(0..o.len())]
            } else {
                *later[rng.gen_range(0..later.len())]
            };
            prev = Some(v.t);
            v
        })
        .collect();
    let visits = smooth_or_repair(&draft, catalog, axis, speed)?;
    Ok(PoiSample {
        visits,
        attempts: 0,
        smoothed: true,
    })
}

/// `counts[i][k]`: feasible completions starting at `options[i][k]`.
/// `None` when no feasible sequence exists at all.
fn completion_counts(options: &[Vec<Visit>], catalog: &PoiCatalog, axis: &TimeAxis, speed: &SpeedProfile) -> Option<Vec<Vec<f64>>> {
    let mut counts: Vec<Vec<f64>> = vec![Vec::new(); options.len()];
    let last = options.len() - 1;
    counts[last] = vec![1.0; options[last].len()];
    for i in (0..last).rev() {
        counts[i] = options[i]
            .iter()
            .map(|v| {
                options[i + 1]
                    .iter()
                    .zip(&counts[i + 1])
                    .filter(|(w, c)| **c > 0.0 && link_ok(catalog, axis, speed, *v, **w))
                    .map(|(_, c)| c)
                    .sum()
            })
            .collect();
    }
    counts[0].iter().any(|c| *c > 0.0).then_some(counts)
}

/// Exact uniform draw over feasible sequences using completion counts.
fn draw_counted<R: Rng + ?Sized>(
    options: &[Vec<Visit>],
    counts: &[Vec<f64>],
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    speed: &SpeedProfile,
    rng: &mut R,
) -> Vec<Visit> {
    let mut out: Vec<Visit> = Vec::with_capacity(options.len());
    for (opts, cnt) in options.iter().zip(counts) {
        let weights: Vec<f64> = opts
            .iter()
            .zip(cnt)
            .map(|(v, c)| match out.last() {
                Some(prev) if !link_ok(catalog, axis, speed, *prev, *v) => 0.0,
                _ => *c,
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut x = rng.gen_range(0.0..total);
        let mut pick = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
        for (k, w) in weights.iter().enumerate() {
            if x < *w {
                pick = k;
                break;
            }
            x -= w;
        }
        out.push(opts[pick]);
    }
    out
}

/// All feasible sequences, in lexicographic order of option positions.
pub fn enumerate_feasible(options: &[Vec<Visit>], catalog: &PoiCatalog, axis: &TimeAxis, speed: &SpeedProfile) -> Vec<Vec<Visit>> {
    fn walk(
        options: &[Vec<Visit>],
        catalog: &PoiCatalog,
        axis: &TimeAxis,
        speed: &SpeedProfile,
        prefix: &mut Vec<Visit>,
        out: &mut Vec<Vec<Visit>>,
    ) {
        let i = prefix.len();
        if i == options.len() {
            out.push(prefix.clone());
            return;
        }
        for v in &options[i] {
            if prefix.last().is_none_or(|p| link_ok(catalog, axis, speed, *p, *v)) {
                prefix.push(*v);
                walk(options, catalog, axis, speed, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(options, catalog, axis, speed, &mut Vec::new(), &mut out);
    out
}

/// Keeps every POI and moves timesteps until all links are feasible: first
/// later (one step at a time), and if the day runs out, earlier from the end.
pub fn time_smooth(draft: &[Visit], catalog: &PoiCatalog, axis: &TimeAxis, speed: &SpeedProfile) -> Result<Vec<Visit>> {
    if draft.is_empty() {
        return Ok(Vec::new());
    }
    let steps = axis.num_steps();
    let open = |v: Visit| catalog.open_at(v.poi, v.t, axis);
    if let Some(out) = forward(draft, catalog, axis, speed, steps, &open) {
        return Ok(out);
    }
    for last in [draft.last().unwrap().t.min(steps - 1), steps - 1] {
        if let Some(out) = backward(draft, last, catalog, axis, speed, &open) {
            return Ok(out);
        }
    }
    Err(Error::Unsmoothable(format!("{} visits", draft.len())))
}

/// Feasible timesteps for the draft's POIs minimising the total shift
/// Σ|t_i − t̂_i|; ties go to earlier timesteps. `None` when the POI
/// sequence cannot be scheduled within one day.
pub fn repair_times(draft: &[Visit], catalog: &PoiCatalog, axis: &TimeAxis, speed: &SpeedProfile) -> Option<Vec<Visit>> {
    let steps = axis.num_steps() as usize;
    let shift = |i: usize, t: usize| (t as f64 - draft[i].t as f64).abs();
    let mut cost: Vec<f64> = (0..steps)
        .map(|t| if catalog.open_at(draft[0].poi, t as u32, axis) { shift(0, t) } else { f64::INFINITY })
        .collect();
    let mut parents: Vec<Vec<usize>> = Vec::with_capacity(draft.len());
    for i in 1..draft.len() {
        let (a, b) = (draft[i - 1].poi, draft[i].poi);
        let mut next = vec![f64::INFINITY; steps];
        let mut parent = vec![usize::MAX; steps];
        for t in 0..steps {
            if !catalog.open_at(b, t as u32, axis) {
                continue;
            }
            for prev in 0..t {
                if cost[prev] < next[t]
                    && catalog.reachable(a, b, axis.minute_of(prev as u32), axis.gap_minutes(prev as u32, t as u32), speed)
                {
                    next[t] = cost[prev];
                    parent[t] = prev;
                }
            }
            next[t] += shift(i, t);
        }
        cost = next;
        parents.push(parent);
    }
    let mut t = (0..steps)
        .filter(|t| cost[*t].is_finite())
        .min_by(|x, y| cost[*x].total_cmp(&cost[*y]).then(x.cmp(y)))?;
    let mut times = vec![t];
    for parent in parents.iter().rev() {
        t = parent[t];
        times.push(t);
    }
    times.reverse();
    Some(draft.iter().zip(times).map(|(v, t)| Visit::new(v.poi, t as u32)).collect())
}

/// `time_smooth`, then the minimum-shift repair if smoothing gives up.
pub fn smooth_or_repair(draft: &[Visit], catalog: &PoiCatalog, axis: &TimeAxis, speed: &SpeedProfile) -> Result<Vec<Visit>> {
    match time_smooth(draft, catalog, axis, speed) {
        Err(Error::Unsmoothable(m)) => repair_times(draft, catalog, axis, speed).ok_or(Error::Unsmoothable(m)),
        other => other,
    }
}

fn forward(
    draft: &[Visit],
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    speed: &SpeedProfile,
    steps: u32,
    open: &dyn Fn(Visit) -> bool,
) -> Option<Vec<Visit>> {
    let mut out: Vec<Visit> = Vec::with_capacity(draft.len());
    for v in draft {
        let mut cur = *v;
        if let Some(prev) = out.last() {
            cur.t = cur.t.max(prev.t + 1);
        }
        while cur.t < steps && !(open(cur) && out.last().is_none_or(|p| link_ok(catalog, axis, speed, *p, cur))) {
            cur.t += 1;
        }
        if cur.t >= steps {
            return None;
        }
        out.push(cur);
    }
    Some(out)
}

fn backward(
    draft: &[Visit],
    last: u32,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    speed: &SpeedProfile,
    open: &dyn Fn(Visit) -> bool,
) -> Option<Vec<Visit>> {
    let mut out: Vec<Visit> = Vec::with_capacity(draft.len());
    for v in draft.iter().rev() {
        let mut cur = *v;
        let start = match out.last() {
            None => last,
            Some(next) => next.t.checked_sub(1)?.min(v.t),
        };
        cur.t = start;
        loop {
            let fine = open(cur) && out.last().is_none_or(|n| link_ok(catalog, axis, speed, cur, *n));
            if fine {
                break;
            }
            cur.t = cur.t.checked_sub(1)?;
        }
        out.push(cur);
    }
    out.reverse();
    Some(out)
}
