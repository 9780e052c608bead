use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::catalog::{PoiCatalog, PoiIdx, SpeedProfile};
use crate::error::{Error, Result};
use crate::time::TimeAxis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Visit {
    pub poi: PoiIdx,
    pub t: u32,
}

impl Visit {
    pub fn new(poi: PoiIdx, t: u32) -> Self {
        Self { poi, t }
    }
}

/// POI-level trajectory: one user, strictly increasing timesteps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub user: String,
    pub visits: Vec<Visit>,
}

impl Trajectory {
    pub fn new(user: impl Into<String>, visits: Vec<Visit>) -> Self {
        Self {
            user: user.into(),
            visits,
        }
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Infeasibility {
    Empty,
    OutOfDay,
    NotMonotone,
    Closed,
    Unreachable,
}

impl Infeasibility {
    pub fn as_str(&self) -> &'static str {
        match self {
            Infeasibility::Empty => "empty",
            Infeasibility::OutOfDay => "out-of-day",
            Infeasibility::NotMonotone => "not-monotone",
            Infeasibility::Closed => "closed",
            Infeasibility::Unreachable => "unreachable",
        }
    }
}

/// Checks strict monotonicity, opening hours and link reachability at the
/// actual gaps. Returns the first violation found.
pub fn check_feasible(
    visits: &[Visit],
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    speed: &SpeedProfile,
) -> std::result::Result<(), Infeasibility> {
    if visits.is_empty() {
        return Err(Infeasibility::Empty);
    }
    if visits.iter().any(|v| !axis.contains(v.t)) {
        return Err(Infeasibility::OutOfDay);
    }
    if visits.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(Infeasibility::NotMonotone);
    }
    if visits.iter().any(|v| !catalog.open_at(v.poi, v.t, axis)) {
        return Err(Infeasibility::Closed);
    }
    let unreachable = visits.windows(2).any(|w| {
        !catalog.reachable(
            w[0].poi,
            w[1].poi,
            axis.minute_of(w[0].t),
            axis.gap_minutes(w[0].t, w[1].t),
            speed,
        )
    });
    if unreachable {
        return Err(Infeasibility::Unreachable);
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawPoint {
    poi: String,
    t: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTrajectory {
    user: String,
    points: Vec<RawPoint>,
}

/// Reads the JSON Lines trajectory format, resolving POI ids against the catalog.
pub fn read_jsonl<R: BufRead>(reader: R, catalog: &PoiCatalog) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawTrajectory = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: "<trajectories>".into(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        let visits = raw
            .points
            .iter()
            .map(|p| {
                catalog
                    .lookup(&p.poi)
                    .map(|poi| Visit::new(poi, p.t))
                    .ok_or_else(|| Error::UnknownPoi(p.poi.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Trajectory::new(raw.user, visits));
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, trajectories: &[Trajectory], catalog: &PoiCatalog) -> Result<()> {
    for traj in trajectories {
        let raw = RawTrajectory {
            user: traj.user.clone(),
            points: traj
                .visits
                .iter()
                .map(|v| RawPoint {
                    poi: catalog.poi(v.poi).id.clone(),
                    t: v.t,
                })
                .collect(),
        };
        serde_json::to_writer(&mut writer, &raw)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{CategoryHierarchy, CategoryId, Poi};

    fn catalog() -> PoiCatalog {
        let h = CategoryHierarchy::from_triples([("x", 1, None::<&str>)]).unwrap();
        let mk = |id: &str, lat: f64, open, close| Poi {
            id: id.into(),
            lat,
            lon: 0.0,
            category_path: vec![CategoryId(0)],
            open,
            close,
            popularity: 0.0,
        };
        PoiCatalog::new(
            vec![mk("a", 0.0, 0, 1440), mk("b", 0.005, 0, 1440), mk("far", 0.09, 0, 1440), mk("day", 0.0, 540, 1020)],
            h,
        )
        .unwrap()
    }

    #[test]
    fn feasibility_reasons() {
        let cat = catalog();
        let axis = TimeAxis::new(10).unwrap();
        let speed = SpeedProfile::constant(8.0);
        let ok = [Visit::new(PoiIdx(0), 10), Visit::new(PoiIdx(1), 11)];
        assert_eq!(check_feasible(&ok, &cat, &axis, &speed), Ok(()));
        let back = [Visit::new(PoiIdx(0), 10), Visit::new(PoiIdx(1), 10)];
        assert_eq!(check_feasible(&back, &cat, &axis, &speed), Err(Infeasibility::NotMonotone));
        let closed = [Visit::new(PoiIdx(3), 0)];
        assert_eq!(check_feasible(&closed, &cat, &axis, &speed), Err(Infeasibility::Closed));
        // ~10 km apart, 10 minutes at 8 km/h.
        let far = [Visit::new(PoiIdx(0), 10), Visit::new(PoiIdx(2), 11)];
        assert_eq!(check_feasible(&far, &cat, &axis, &speed), Err(Infeasibility::Unreachable));
        assert_eq!(check_feasible(&[], &cat, &axis, &speed), Err(Infeasibility::Empty));
    }

    #[test]
    fn jsonl_round_trip() {
        let cat = catalog();
        let trajs = vec![
            Trajectory::new("u1", vec![Visit::new(PoiIdx(0), 3), Visit::new(PoiIdx(1), 5)]),
            Trajectory::new("u2", vec![Visit::new(PoiIdx(3), 60)]),
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &trajs, &cat).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"user":"u1","points":[{"poi":"a","t":3}"#));
        let back = read_jsonl(buf.as_slice(), &cat).unwrap();
        assert_eq!(back, trajs);
        assert!(matches!(
            read_jsonl(r#"{"user":"u","points":[{"poi":"zz","t":1}]}"#.as_bytes(), &cat),
            Err(Error::UnknownPoi(_))
        ));
    }
}
