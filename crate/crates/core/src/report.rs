//! Utility report for a real/perturbed trajectory pair set.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::catalog::PoiCatalog;
use crate::distance::DistanceParams;
use crate::error::Result;
use crate::metrics::{acd, ahd, bootstrap_ci, detect_hotspots, mean, per_trajectory_ne, prq, Component, Granularity};
use crate::rng::substream;
use crate::time::TimeAxis;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// PRQ thresholds per component (km, hours, category units, combined).
    pub deltas: Vec<(Component, Vec<f64>)>,
    pub granularities: Vec<(Granularity, u32)>,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            deltas: vec![
                (Component::Space, vec![0.1, 0.25, 0.5]),
                (Component::Time, vec![0.5, 1.0, 2.0]),
                (Component::Category, vec![0.0, 5.0]),
                (Component::Combined, vec![1.0, 2.0, 5.0]),
            ],
            granularities: Granularity::STANDARD.iter().map(|g| (*g, g.default_eta())).collect(),
            bootstrap_resamples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HotspotRow {
    pub granularity: String,
    pub eta: u32,
    pub real: usize,
    pub perturbed: usize,
    pub ahd: Option<f64>,
    pub acd: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub pairs: usize,
    /// Real trajectories with no perturbed counterpart (dropped or missing).
    pub unmatched_real: usize,
    /// Perturbed trajectories whose user is absent from the real set.
    pub unmatched_perturbed: usize,
    /// Mean normalised error per component (s, t, c, d).
    pub ne: [f64; 4],
    pub ne_ci: [(f64, f64); 4],
    pub prq: Vec<(Component, f64, f64)>,
    pub hotspots: Vec<HotspotRow>,
}

/// Pairs perturbed trajectories with real ones by user id.
pub fn pair_by_user(real: &[Trajectory], perturbed: &[Trajectory]) -> (Vec<Trajectory>, Vec<Trajectory>, usize, usize) {
    let mut by_user: HashMap<&str, &Trajectory> = HashMap::with_capacity(real.len());
    for t in real {
        by_user.entry(t.user.as_str()).or_insert(t);
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut unmatched_perturbed = 0;
    for p in perturbed {
        match by_user.get(p.user.as_str()) {
            Some(r) if r.len() == p.len() => {
                a.push((*r).clone());
                b.push(p.clone());
            }
            _ => unmatched_perturbed += 1,
        }
    }
    let unmatched_real = real.len() - a.len();
    (a, b, unmatched_real, unmatched_perturbed)
}

pub fn evaluate(
    real: &[Trajectory],
    perturbed: &[Trajectory],
    catalog: &PoiCatalog,
    axis: &TimeAxis,
    params: &DistanceParams,
    options: &EvalOptions,
) -> Result<Report> {
    let (a, b, unmatched_real, unmatched_perturbed) = pair_by_user(real, perturbed);
    let per = per_trajectory_ne(&a, &b, params, catalog, axis)?;
    let mut ne = [0.0; 4];
    let mut ne_ci = [(f64::NAN, f64::NAN); 4];
    for (k, c) in Component::ALL.iter().enumerate() {
        let values: Vec<f64> = per.iter().map(|v| v[k]).collect();
        ne[k] = mean(&values);
        let mut rng = substream(options.seed, &format!("bootstrap-{c}"));
        ne_ci[k] = bootstrap_ci(&values, options.bootstrap_resamples, 0.95, &mut rng);
    }
    let mut prq_rows = Vec::new();
    for (c, deltas) in &options.deltas {
        for d in deltas {
            prq_rows.push((*c, *d, prq(&a, &b, *c, *d, params, catalog, axis)?));
        }
    }
    let hotspots = options
        .granularities
        .iter()
        .map(|(g, eta)| {
            let hr = detect_hotspots(real, catalog, axis, *g, *eta);
            let hp = detect_hotspots(perturbed, catalog, axis, *g, *eta);
            HotspotRow {
                granularity: g.to_string(),
                eta: *eta,
                real: hr.len(),
                perturbed: hp.len(),
                ahd: ahd(&hr, &hp, axis),
                acd: acd(&hr, &hp, axis),
            }
        })
        .collect();
    Ok(Report {
        pairs: a.len(),
        unmatched_real,
        unmatched_perturbed,
        ne,
        ne_ci,
        prq: prq_rows,
        hotspots,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "pairs {}  unmatched real {}  unmatched perturbed {}",
            self.pairs, self.unmatched_real, self.unmatched_perturbed
        );
        let _ = writeln!(s, "\n{:<10}{:>12}{:>26}", "NE", "mean", "95% bootstrap CI");
        for (k, c) in Component::ALL.iter().enumerate() {
            let (lo, hi) = self.ne_ci[k];
            let _ = writeln!(s, "{:<10}{:>12.4}{:>13.4} {:>12.4}", format!("NE_{c}"), self.ne[k], lo, hi);
        }
        let _ = writeln!(s, "\n{:<10}{:>12}{:>12}", "PRQ", "delta", "percent");
        for (c, d, v) in &self.prq {
            let _ = writeln!(s, "{:<10}{:>12}{:>12.2}", format!("PRQ_{c}"), d, v);
        }
        let _ = writeln!(
            s,
            "\n{:<14}{:>6}{:>8}{:>8}{:>10}{:>10}",
            "granularity", "eta", "real", "pert", "AHD", "ACD"
        );
        for h in &self.hotspots {
            let _ = writeln!(
                s,
                "{:<14}{:>6}{:>8}{:>8}{:>10}{:>10}",
                h.granularity,
                h.eta,
                h.real,
                h.perturbed,
                opt(h.ahd),
                opt(h.acd)
            );
        }
        s
    }

    /// `metric,granularity,value` rows; trajectory-level metrics use `all`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,granularity,value\n");
        let _ = writeln!(s, "pairs,all,{}", self.pairs);
        for (k, c) in Component::ALL.iter().enumerate() {
            let _ = writeln!(s, "ne_{c},all,{}", self.ne[k]);
            let _ = writeln!(s, "ne_{c}_ci_low,all,{}", self.ne_ci[k].0);
            let _ = writeln!(s, "ne_{c}_ci_high,all,{}", self.ne_ci[k].1);
        }
        for (c, d, v) in &self.prq {
            let _ = writeln!(s, "prq_{c}@{d},all,{v}");
        }
        for h in &self.hotspots {
            let g = &h.granularity;
            let _ = writeln!(s, "hotspots_real,{g},{}", h.real);
            let _ = writeln!(s, "hotspots_perturbed,{g},{}", h.perturbed);
            let _ = writeln!(s, "ahd,{g},{}", h.ahd.map_or(String::new(), |x| x.to_string()));
            let _ = writeln!(s, "acd,{g},{}", h.acd.map_or(String::new(), |x| x.to_string()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::campus_catalog;
    use crate::trajectory::Visit;
    use crate::catalog::PoiIdx;

    #[test]
    fn identical_sets_have_zero_error() {
        let catalog = campus_catalog(1, 2.0).unwrap();
        let axis = TimeAxis::new(10).unwrap();
        let real: Vec<Trajectory> = (0..30)
            .map(|u| Trajectory::new(format!("u{u}"), vec![Visit::new(PoiIdx(110), 60), Visit::new(PoiIdx(110), 66)]))
            .collect();
        let options = EvalOptions {
            bootstrap_resamples: 50,
            ..EvalOptions::default()
        };
        let r = evaluate(&real, &real, &catalog, &axis, &DistanceParams::default(), &options).unwrap();
        assert_eq!(r.pairs, 30);
        assert_eq!(r.ne, [0.0; 4]);
        assert!(r.prq.iter().all(|(_, _, v)| *v == 100.0));
        let poi = r.hotspots.iter().find(|h| h.granularity == "poi").unwrap();
        assert_eq!(poi.real, 1);
        assert_eq!(poi.ahd, Some(0.0));
        assert_eq!(poi.acd, Some(0.0));
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,granularity,value\n"));
        assert!(csv.contains("ahd,poi,0\n"));
        assert!(r.to_text().contains("NE_d"));
    }

    #[test]
    fn pairing_skips_unknown_and_dropped_users() {
        let a = Trajectory::new("a", vec![Visit::new(PoiIdx(0), 1)]);
        let b = Trajectory::new("b", vec![Visit::new(PoiIdx(0), 1)]);
        let z = Trajectory::new("z", vec![Visit::new(PoiIdx(0), 1)]);
        let (x, y, ur, up) = pair_by_user(&[a.clone(), b], &[z, a.clone()]);
        assert_eq!((x.len(), y.len(), ur, up), (1, 1, 1, 1));
        assert_eq!(x[0], a);
    }
}
