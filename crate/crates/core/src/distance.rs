//! Multi-attribute distances between regions, n-grams and POI visits, and
//! the analytic sensitivity bound used by the exponential mechanism.

use serde::{Deserialize, Serialize};

use crate::catalog::{haversine_km, CategoryHierarchy, CategoryId, PoiCatalog, PoiIdx};
use crate::error::{Error, Result};
use crate::stc::{RegionId, RegionSet, StcRegion};
use crate::time::{circular_hours, TimeAxis};
use crate::trajectory::Visit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceParams {
    /// Hours.
    pub time_cap: f64,
    /// Category distance between nodes with no common root.
    pub unrelated_cost: f64,
    pub hierarchy_depth: u8,
    /// Optional cost per deepest-common-ancestor level (index 0 is level 1).
    pub level_costs: Option<Vec<f64>>,
    /// Per-dimension weights (space, time, category).
    pub weights: [f64; 3],
}

impl Default for DistanceParams {
    fn default() -> Self {
        Self {
            time_cap: 12.0,
            unrelated_cost: 10.0,
            hierarchy_depth: 3,
            level_costs: None,
            weights: [1.0, 1.0, 1.0],
        }
    }
}

impl DistanceParams {
    /// Space-only variant (the physical-distance baseline).
    pub fn physical_only() -> Self {
        Self {
            weights: [1.0, 0.0, 0.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.time_cap > 0.0) || !(self.unrelated_cost > 0.0) {
            return Err(Error::InvalidParameter(
                "time_cap and unrelated_cost must be positive".into(),
            ));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Cost for two distinct nodes whose deepest common ancestor sits at `level`.
    fn level_cost(&self, level: u8) -> f64 {
        if let Some(costs) = &self.level_costs {
            if let Some(c) = costs.get(level as usize - 1) {
                return *c;
            }
        }
        let depth = self.hierarchy_depth.max(1) as f64;
        self.unrelated_cost * (depth - level as f64).max(0.0) / depth
    }

    pub fn category(&self, h: &CategoryHierarchy, a: CategoryId, b: CategoryId) -> f64 {
        if a == b {
            return 0.0;
        }
        match h.lca_level(a, b) {
            None => self.unrelated_cost,
            Some(level) => self.level_cost(level),
        }
    }

    /// Shorter-arc hour difference, capped.
    pub fn time(&self, minute_a: f64, minute_b: f64) -> f64 {
        circular_hours(minute_a, minute_b).min(self.time_cap)
    }

    pub fn combine(&self, ds: f64, dt: f64, dc: f64) -> f64 {
        let [ws, wt, wc] = self.weights;
        ((ws * ds).powi(2) + (wt * dt).powi(2) + (wc * dc).powi(2)).sqrt()
    }

    fn max_category_cost(&self) -> f64 {
        let levels = self.level_costs.iter().flatten().copied();
        levels.fold(self.unrelated_cost, f64::max)
    }

    /// Upper bound on one element distance given the largest spatial distance.
    pub fn element_bound(&self, ds_max: f64) -> f64 {
        self.combine(ds_max, self.time_cap, self.max_category_cost())
    }
}

pub fn d_s(a: &StcRegion, b: &StcRegion) -> f64 {
    haversine_km(a.centroid.0, a.centroid.1, b.centroid.0, b.centroid.1)
}

pub fn d_t(params: &DistanceParams, a: &StcRegion, b: &StcRegion) -> f64 {
    params.time(a.time_centroid, b.time_centroid)
}

pub fn d_c(params: &DistanceParams, h: &CategoryHierarchy, a: CategoryId, b: CategoryId) -> f64 {
    params.category(h, a, b)
}

pub fn region_distance(params: &DistanceParams, h: &CategoryHierarchy, a: &StcRegion, b: &StcRegion) -> f64 {
    params.combine(d_s(a, b), d_t(params, a, b), d_c(params, h, a.category, b.category))
}

/// Visit-level components `(km, hours, category units)`.
pub fn visit_components(
    params: &DistanceParams,
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    a: Visit,
    b: Visit,
) -> (f64, f64, f64) {
    let ds = catalog.physical_distance(a.poi, b.poi);
    let dt = params.time(axis.minute_of(a.t) as f64, axis.minute_of(b.t) as f64);
    let dc = params.category(
        catalog.hierarchy(),
        catalog.poi(a.poi).leaf_category(),
        catalog.poi(b.poi).leaf_category(),
    );
    (ds, dt, dc)
}

pub fn visit_distance(params: &DistanceParams, catalog: &PoiCatalog, axis: &TimeAxis, a: Visit, b: Visit) -> f64 {
    let (ds, dt, dc) = visit_components(params, catalog, axis, a, b);
    params.combine(ds, dt, dc)
}

/// Dense region-to-region distance table plus the per-element sensitivity bound.
#[derive(Debug, Clone)]
pub struct RegionMetric {
    size: usize,
    table: Vec<f64>,
    element_bound: f64,
    params: DistanceParams,
}

impl RegionMetric {
    pub fn new(regions: &RegionSet, catalog: &PoiCatalog, params: &DistanceParams) -> Self {
        let size = regions.len();
        let h = catalog.hierarchy();
        let rs = regions.regions();
        let mut table = vec![0.0; size * size];
        for i in 0..size {
            for j in (i + 1)..size {
                let d = region_distance(params, h, &rs[i], &rs[j]);
                table[i * size + j] = d;
                table[j * size + i] = d;
            }
        }
        let ds_max = regions.member_bbox(catalog).map_or(0.0, |bb| bb.diagonal_km());
        Self {
            size,
            table,
            element_bound: params.element_bound(ds_max),
            params: params.clone(),
        }
    }

    pub fn params(&self) -> &DistanceParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    #[inline]
    pub fn d(&self, a: RegionId, b: RegionId) -> f64 {
        self.table[a.index() * self.size + b.index()]
    }

    /// Elementwise sum over two equal-length grams.
    pub fn d_w(&self, w1: &[RegionId], w2: &[RegionId]) -> Result<f64> {
        if w1.len() != w2.len() {
            return Err(Error::LengthMismatch {
                left: w1.len(),
                right: w2.len(),
            });
        }
        Ok(w1.iter().zip(w2).map(|(a, b)| self.d(*a, *b)).sum())
    }

    /// Δ for grams of length `n`: n · sqrt(d_s_max² + time_cap² + unrelated²).
    pub fn sensitivity(&self, n: usize) -> f64 {
        n as f64 * self.element_bound
    }
}

/// Per-element distance used to score candidate grams.
pub trait ElementMetric<Id> {
    fn d(&self, a: Id, b: Id) -> f64;
    /// Upper bound on `d` over all element pairs.
    fn element_bound(&self) -> f64;
}

impl ElementMetric<RegionId> for RegionMetric {
    fn d(&self, a: RegionId, b: RegionId) -> f64 {
        RegionMetric::d(self, a, b)
    }
    fn element_bound(&self) -> f64 {
        self.element_bound
    }
}

/// POI-to-POI distance on space and category only (times are handled separately).
#[derive(Debug, Clone)]
pub struct PoiMetric {
    size: usize,
    table: Vec<f64>,
    element_bound: f64,
}

impl PoiMetric {
    pub fn new(catalog: &PoiCatalog, params: &DistanceParams) -> Self {
        let size = catalog.len();
        let h = catalog.hierarchy();
        let mut table = vec![0.0; size * size];
        for a in catalog.indices() {
            for b in catalog.indices() {
                let ds = catalog.physical_distance(a, b);
                let dc = params.category(h, catalog.poi(a).leaf_category(), catalog.poi(b).leaf_category());
                table[a.index() * size + b.index()] = params.combine(ds, 0.0, dc);
            }
        }
        let ds_max = catalog.bounding_box().map_or(0.0, |bb| bb.diagonal_km());
        let bound = params.combine(ds_max, 0.0, params.max_category_cost());
        // Overrides may exceed the bounding-box diagonal.
        let table_max = table.iter().copied().fold(0.0, f64::max);
        Self {
            size,
            table,
            element_bound: bound.max(table_max),
        }
    }
}

impl ElementMetric<PoiIdx> for PoiMetric {
    fn d(&self, a: PoiIdx, b: PoiIdx) -> f64 {
        self.table[a.index() * self.size + b.index()]
    }
    fn element_bound(&self) -> f64 {
        self.element_bound
    }
}
