//! POI universe: coordinates, category hierarchy, opening hours and the
//! reachability predicate built on top of them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::{TimeAxis, MINUTES_PER_DAY};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in km.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// θ = speed · gap / 60, in km.
pub fn threshold_theta(speed_kmh: f64, gap_minutes: f64) -> Result<f64> {
    if !(speed_kmh > 0.0) || !(gap_minutes > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "speed ({speed_kmh}) and gap ({gap_minutes}) must be positive"
        )));
    }
    Ok(speed_kmh * gap_minutes / 60.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CategoryId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PoiIdx(pub u32);

impl PoiIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryNode {
    pub id: String,
    pub level: u8,
    pub parent: Option<CategoryId>,
}

/// Rooted forest of category nodes; level-1 nodes are roots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryHierarchy {
    nodes: Vec<CategoryNode>,
    #[serde(skip)]
    by_id: HashMap<String, CategoryId>,
}

impl PartialEq for CategoryHierarchy {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
    }
}

impl CategoryHierarchy {
    /// Builds from `(node_id, level, parent_id)` triples in any order.
    pub fn from_triples<I, S>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, u8, Option<S>)>,
        S: Into<String>,
    {
        let raw: Vec<(String, u8, Option<String>)> = triples
            .into_iter()
            .map(|(id, level, parent)| (id.into(), level, parent.map(Into::into)))
            .collect();
        let mut by_id = HashMap::new();
        for (i, (id, level, _)) in raw.iter().enumerate() {
            if *level == 0 {
                return Err(Error::InvalidParameter(format!(
                    "category `{id}` has level 0"
                )));
            }
            if by_id.insert(id.clone(), CategoryId(i as u32)).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "duplicate category id `{id}`"
                )));
            }
        }
        let mut nodes = Vec::with_capacity(raw.len());
        for (id, level, parent) in raw.iter() {
            let parent = match (level, parent) {
                (1, None) => None,
                (1, Some(p)) => {
                    return Err(Error::InvalidParameter(format!(
                        "level-1 category `{id}` has parent `{p}`"
                    )))
                }
                (_, None) => {
                    return Err(Error::InvalidParameter(format!(
                        "category `{id}` at level {level} has no parent"
                    )))
                }
                (_, Some(p)) => {
                    let pid = *by_id
                        .get(p)
                        .ok_or_else(|| Error::UnknownCategory(p.clone()))?;
                    let plevel = raw[pid.0 as usize].1;
                    if plevel + 1 != *level {
                        return Err(Error::InvalidParameter(format!(
                            "category `{id}` (level {level}) has parent `{p}` at level {plevel}"
                        )));
                    }
                    Some(pid)
                }
            };
            nodes.push(CategoryNode {
                id: id.clone(),
                level: *level,
                parent,
            });
        }
        Ok(Self { nodes, by_id })
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["node_id", "level", "parent_id"])?;
        for n in &self.nodes {
            let parent = n.parent.map(|p| self.nodes[p.0 as usize].id.clone()).unwrap_or_default();
            w.write_record([n.id.clone(), n.level.to_string(), parent])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv_reader(path)?;
        let mut triples = Vec::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let malformed = |message: String| Error::Malformed {
                path: path.to_path_buf(),
                line,
                message,
            };
            if record.len() != 3 {
                return Err(malformed(format!("expected 3 fields, got {}", record.len())));
            }
            let id = record[0].trim().to_string();
            if id.is_empty() {
                return Err(malformed("empty node_id".into()));
            }
            let level: u8 = record[1]
                .trim()
                .parse()
                .map_err(|_| malformed(format!("bad level `{}`", &record[1])))?;
            let parent = Some(record[2].trim().to_string()).filter(|p| !p.is_empty());
            triples.push((id, level, parent));
        }
        Self::from_triples(triples)
    }

    fn reindex(&mut self) {
        self.by_id = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), CategoryId(i as u32)))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lookup(&self, id: &str) -> Option<CategoryId> {
        self.by_id.get(id).copied()
    }

    pub fn node(&self, c: CategoryId) -> &CategoryNode {
        &self.nodes[c.0 as usize]
    }

    pub fn ids(&self) -> impl Iterator<Item = CategoryId> {
        (0..self.nodes.len() as u32).map(CategoryId)
    }

    pub fn level(&self, c: CategoryId) -> u8 {
        self.node(c).level
    }

    pub fn parent(&self, c: CategoryId) -> Option<CategoryId> {
        self.node(c).parent
    }

    /// Deepest level present in the forest.
    pub fn depth(&self) -> u8 {
        self.nodes.iter().map(|n| n.level).max().unwrap_or(0)
    }

    /// Root-to-node path.
    pub fn path(&self, c: CategoryId) -> Vec<CategoryId> {
        let mut path = vec![c];
        let mut cur = c;
        while let Some(p) = self.parent(cur) {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn ancestor_at(&self, c: CategoryId, level: u8) -> Option<CategoryId> {
        let mut cur = c;
        loop {
            let l = self.level(cur);
            if l == level {
                return Some(cur);
            }
            if l < level {
                return None;
            }
            cur = self.parent(cur)?;
        }
    }

    /// Level of the deepest common ancestor, `None` for unrelated nodes.
    pub fn lca_level(&self, a: CategoryId, b: CategoryId) -> Option<u8> {
        let pa = self.path(a);
        let pb = self.path(b);
        pa.iter()
            .zip(pb.iter())
            .take_while(|(x, y)| x == y)
            .last()
            .map(|(x, _)| self.level(*x))
    }

    pub fn is_ancestor_or_self(&self, ancestor: CategoryId, c: CategoryId) -> bool {
        self.path(c).contains(&ancestor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// Level-1 root first, leaf last.
    pub category_path: Vec<CategoryId>,
    /// Minutes of day; `close < open` wraps past midnight, `close == 1440` ends at midnight.
    pub open: u32,
    pub close: u32,
    pub popularity: f64,
}

impl Poi {
    pub fn leaf_category(&self) -> CategoryId {
        *self.category_path.last().expect("validated non-empty path")
    }

    pub fn open_at_minute(&self, minute: u32) -> bool {
        let m = minute % MINUTES_PER_DAY;
        if self.open < self.close {
            self.open <= m && m < self.close
        } else {
            m >= self.open || m < self.close
        }
    }
}

/// Opening-hour templates keyed by category id, used when a POI row omits hours.
/// The deepest template along the POI's category path wins; without any
/// template the POI is open all day.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HoursTemplates(pub BTreeMap<String, (u32, u32)>);

impl HoursTemplates {
    fn resolve(&self, hierarchy: &CategoryHierarchy, path: &[CategoryId]) -> (u32, u32) {
        path.iter()
            .rev()
            .find_map(|c| self.0.get(&hierarchy.node(*c).id).copied())
            .unwrap_or((0, MINUTES_PER_DAY))
    }
}

/// Travel-speed model behind θ. Constant by default, optionally per departure hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub base_kmh: f64,
    pub hourly_kmh: Option<Vec<f64>>,
}

impl SpeedProfile {
    pub fn constant(kmh: f64) -> Self {
        Self {
            base_kmh: kmh,
            hourly_kmh: None,
        }
    }

    pub fn speed_at(&self, depart_minute: u32) -> f64 {
        match &self.hourly_kmh {
            Some(table) if table.len() == 24 => table[((depart_minute / 60) % 24) as usize],
            _ => self.base_kmh,
        }
    }

    pub fn theta(&self, depart_minute: u32, gap_minutes: u32) -> f64 {
        self.speed_at(depart_minute) * gap_minutes as f64 / 60.0
    }

    /// Smallest θ over all departure hours for the given gap.
    pub fn min_theta(&self, gap_minutes: u32) -> f64 {
        let speed = match &self.hourly_kmh {
            Some(table) if table.len() == 24 => table.iter().copied().fold(f64::INFINITY, f64::min),
            _ => self.base_kmh,
        };
        speed * gap_minutes as f64 / 60.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn of_points<I: IntoIterator<Item = (f64, f64)>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let (lat, lon) = it.next()?;
        let mut bb = Self {
            min_lat: lat,
            max_lat: lat,
            min_lon: lon,
            max_lon: lon,
        };
        for (lat, lon) in it {
            bb.min_lat = bb.min_lat.min(lat);
            bb.max_lat = bb.max_lat.max(lat);
            bb.min_lon = bb.min_lon.min(lon);
            bb.max_lon = bb.max_lon.max(lon);
        }
        Some(bb)
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.min_lat..=self.max_lat).contains(&lat) && (self.min_lon..=self.max_lon).contains(&lon)
    }

    /// Expands every side by `km` (flat-earth degree conversion at the widest latitude).
    pub fn expanded_km(&self, km: f64) -> Self {
        if km.is_infinite() {
            return Self {
                min_lat: -90.0,
                max_lat: 90.0,
                min_lon: -180.0,
                max_lon: 180.0,
            };
        }
        let km_per_deg = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        let dlat = km / km_per_deg;
        let widest = self.min_lat.abs().max(self.max_lat.abs()).min(89.0);
        let dlon = km / (km_per_deg * widest.to_radians().cos());
        Self {
            min_lat: self.min_lat - dlat,
            max_lat: self.max_lat + dlat,
            min_lon: self.min_lon - dlon,
            max_lon: self.max_lon + dlon,
        }
    }

    /// Largest corner-to-corner distance; bounds the distance between any
    /// two points in a desk-scale box.
    pub fn diagonal_km(&self) -> f64 {
        let corners = [
            (self.min_lat, self.min_lon),
            (self.min_lat, self.max_lon),
            (self.max_lat, self.min_lon),
            (self.max_lat, self.max_lon),
        ];
        let mut best: f64 = 0.0;
        for (i, a) in corners.iter().enumerate() {
            for b in &corners[i + 1..] {
                best = best.max(haversine_km(a.0, a.1, b.0, b.1));
            }
        }
        best
    }

    /// Cell of a `g × g` equal-degree grid; points on an inner boundary go to
    /// the lower-index cell.
    pub fn cell_of(&self, lat: f64, lon: f64, g: u32) -> u32 {
        fn axis(v: f64, lo: f64, hi: f64, g: u32) -> u32 {
            if hi <= lo {
                return 0;
            }
            let f = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            ((f * g as f64).ceil() as i64 - 1).clamp(0, g as i64 - 1) as u32
        }
        let x = axis(lon, self.min_lon, self.max_lon, g);
        let y = axis(lat, self.min_lat, self.max_lat, g);
        y * g + x
    }
}

/// Serialises the override map as a list, since JSON keys must be strings.
mod override_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<(u32, u32), f64>, s: S) -> Result<S::Ok, S::Error> {
        map.iter().map(|((a, b), km)| (*a, *b, *km)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(u32, u32), f64>, D::Error> {
        let list = Vec::<(u32, u32, f64)>::deserialize(d)?;
        Ok(list.into_iter().map(|(a, b, km)| ((a, b), km)).collect())
    }
}

/// Immutable POI universe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoiCatalog {
    pois: Vec<Poi>,
    hierarchy: CategoryHierarchy,
    /// Optional directed distance overrides in km (e.g. one-way streets).
    #[serde(with = "override_list")]
    overrides: BTreeMap<(u32, u32), f64>,
    #[serde(skip)]
    by_id: HashMap<String, PoiIdx>,
}

impl PartialEq for PoiCatalog {
    fn eq(&self, other: &Self) -> bool {
        self.pois == other.pois && self.hierarchy == other.hierarchy && self.overrides == other.overrides
    }
}

impl PoiCatalog {
    pub fn new(pois: Vec<Poi>, hierarchy: CategoryHierarchy) -> Result<Self> {
        let depth = hierarchy.depth().max(1) as usize;
        let mut by_id = HashMap::with_capacity(pois.len());
        for (i, p) in pois.iter().enumerate() {
            validate_poi(p, &hierarchy, depth).map_err(|m| {
                Error::InvalidParameter(format!("POI `{}`: {m}", p.id))
            })?;
            if by_id.insert(p.id.clone(), PoiIdx(i as u32)).is_some() {
                return Err(Error::DuplicatePoi(p.id.clone()));
            }
        }
        Ok(Self {
            pois,
            hierarchy,
            overrides: BTreeMap::new(),
            by_id,
        })
    }

    /// Restores lookup tables after deserialisation.
    pub fn reindex(&mut self) {
        self.hierarchy.reindex();
        self.by_id = self
            .pois
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), PoiIdx(i as u32)))
            .collect();
    }

    pub fn with_override(mut self, from: PoiIdx, to: PoiIdx, km: f64) -> Self {
        self.overrides.insert((from.0, to.0), km);
        self
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    pub fn poi(&self, p: PoiIdx) -> &Poi {
        &self.pois[p.index()]
    }

    pub fn indices(&self) -> impl Iterator<Item = PoiIdx> {
        (0..self.pois.len() as u32).map(PoiIdx)
    }

    pub fn lookup(&self, id: &str) -> Option<PoiIdx> {
        self.by_id.get(id).copied()
    }

    pub fn hierarchy(&self) -> &CategoryHierarchy {
        &self.hierarchy
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        BoundingBox::of_points(self.pois.iter().map(|p| (p.lat, p.lon)))
    }

    /// Haversine distance in km, unless an override is registered for the pair.
    pub fn physical_distance(&self, a: PoiIdx, b: PoiIdx) -> f64 {
        if let Some(km) = self.overrides.get(&(a.0, b.0)) {
            return *km;
        }
        let (pa, pb) = (self.poi(a), self.poi(b));
        haversine_km(pa.lat, pa.lon, pb.lat, pb.lon)
    }

    pub fn reachable(
        &self,
        a: PoiIdx,
        b: PoiIdx,
        depart_minute: u32,
        gap_minutes: u32,
        speed: &SpeedProfile,
    ) -> bool {
        a == b || self.physical_distance(a, b) <= speed.theta(depart_minute, gap_minutes)
    }

    pub fn open_at(&self, p: PoiIdx, t: u32, axis: &TimeAxis) -> bool {
        self.poi(p).open_at_minute(axis.minute_of(t))
    }

    /// Writes the POI table in the CSV layout accepted by `load`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "lat", "lon", "cat_l1", "cat_l2", "cat_l3", "open_min", "close_min", "popularity"])?;
        for p in &self.pois {
            let mut cats: Vec<String> = p.category_path.iter().map(|c| self.hierarchy.node(*c).id.clone()).collect();
            cats.resize(3, String::new());
            w.write_record([
                p.id.clone(),
                format!("{:.6}", p.lat),
                format!("{:.6}", p.lon),
                cats[0].clone(),
                cats[1].clone(),
                cats[2].clone(),
                p.open.to_string(),
                p.close.to_string(),
                format!("{:.3}", p.popularity),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(poi_path: &Path, hierarchy_path: &Path, templates: &HoursTemplates) -> Result<Self> {
        let hierarchy = CategoryHierarchy::load(hierarchy_path)?;
        let depth = hierarchy.depth().max(1) as usize;
        let mut reader = csv_reader(poi_path)?;
        let mut pois = Vec::new();
        let mut seen = HashMap::new();
        for record in reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let malformed = |message: String| Error::Malformed {
                path: poi_path.to_path_buf(),
                line,
                message,
            };
            if record.len() != 9 {
                return Err(malformed(format!("expected 9 fields, got {}", record.len())));
            }
            let field = |i: usize| record[i].trim();
            let id = field(0).to_string();
            if id.is_empty() {
                return Err(malformed("empty id".into()));
            }
            let num = |i: usize, name: &str| -> Result<f64> {
                field(i)
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| malformed(format!("bad {name} `{}`", field(i))))
            };
            let lat = num(1, "lat")?;
            let lon = num(2, "lon")?;
            let mut path = Vec::new();
            for (k, col) in (3..6).enumerate() {
                let name = field(col);
                if name.is_empty() {
                    continue;
                }
                if path.len() != k {
                    return Err(malformed(format!("cat_l{} given without cat_l{}", k + 1, k)));
                }
                let c = hierarchy
                    .lookup(name)
                    .ok_or_else(|| Error::UnknownCategory(format!("{name} (line {line})")))?;
                path.push(c);
            }
            let (open, close) = match (field(6), field(7)) {
                ("", "") => templates.resolve(&hierarchy, &path),
                (o, c) => {
                    let parse = |s: &str, name: &str| {
                        s.parse::<u32>()
                            .map_err(|_| malformed(format!("bad {name} `{s}`")))
                    };
                    (parse(o, "open_min")?, parse(c, "close_min")?)
                }
            };
            let popularity = if field(8).is_empty() { 0.0 } else { num(8, "popularity")? };
            let poi = Poi {
                id: id.clone(),
                lat,
                lon,
                category_path: path,
                open,
                close,
                popularity,
            };
            validate_poi(&poi, &hierarchy, depth).map_err(malformed)?;
            if seen.insert(id.clone(), ()).is_some() {
                return Err(Error::DuplicatePoi(id));
            }
            pois.push(poi);
        }
        Self::new(pois, hierarchy)
    }
}

fn validate_poi(
    p: &Poi,
    hierarchy: &CategoryHierarchy,
    depth: usize,
) -> std::result::Result<(), String> {
    if !(-90.0..=90.0).contains(&p.lat) {
        return Err(format!("lat {} out of range", p.lat));
    }
    if !(-180.0..=180.0).contains(&p.lon) {
        return Err(format!("lon {} out of range", p.lon));
    }
    if p.category_path.is_empty() || p.category_path.len() > depth {
        return Err(format!(
            "category path length {} not in 1..={depth}",
            p.category_path.len()
        ));
    }
    if hierarchy.path(p.leaf_category()) != p.category_path {
        return Err("category path is not a root-to-node path".into());
    }
    if p.open >= MINUTES_PER_DAY || p.close > MINUTES_PER_DAY {
        return Err(format!("opening hours {}..{} out of range", p.open, p.close));
    }
    if p.open == p.close {
        return Err("open equals close".into());
    }
    if !(p.popularity >= 0.0) {
        return Err(format!("negative popularity {}", p.popularity));
    }
    Ok(())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path)?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}
