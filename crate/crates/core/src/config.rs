//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{HoursTemplates, SpeedProfile};
use crate::datagen::{EventSpec, EventTarget, GeneratorParams};
use crate::distance::DistanceParams;
use crate::error::{Error, Result};
use crate::ngram::DEFAULT_GRAM_CAP;
use crate::reconstruct::{MbrParams, SamplingParams, DEFAULT_ENUMERATION_LIMIT, DEFAULT_GAMMA};
use crate::stc::Dimension;
use crate::time::TimeAxis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub step_minutes: u32,
    pub grid: u32,
    pub interval_minutes: u32,
    pub kappa: usize,
    pub merge_order: Vec<Dimension>,
    pub n: usize,
    pub epsilon: f64,
    pub speed_kmh: f64,
    pub hourly_speed_kmh: Option<Vec<f64>>,
    pub gamma: usize,
    pub enumeration_limit: usize,
    pub distance: DistanceParams,
    pub gram_cap: f64,
    /// Defaults to the distance coverable in `max_gap_minutes`.
    pub mbr_slack_km: Option<f64>,
    pub mbr_envelope_minutes: u32,
    pub max_gap_minutes: u32,
    pub seed: Option<u64>,
    pub hours: BTreeMap<String, (u32, u32)>,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub events: BTreeMap<String, EventSpec>,
    pub campus_seed: u64,
    pub campus_side_km: f64,
    pub bootstrap_resamples: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            step_minutes: 10,
            grid: 4,
            interval_minutes: 60,
            kappa: 10,
            merge_order: vec![Dimension::Space, Dimension::Time, Dimension::Category],
            n: 2,
            epsilon: 5.0,
            speed_kmh: 4.0,
            hourly_speed_kmh: None,
            gamma: DEFAULT_GAMMA,
            enumeration_limit: DEFAULT_ENUMERATION_LIMIT,
            distance: DistanceParams::default(),
            gram_cap: DEFAULT_GRAM_CAP,
            mbr_slack_km: None,
            mbr_envelope_minutes: 60,
            max_gap_minutes: 120,
            seed: None,
            hours: BTreeMap::new(),
            count: 1000,
            min_len: 3,
            max_len: 8,
            events: BTreeMap::new(),
            campus_seed: 1,
            campus_side_km: 2.0,
            bootstrap_resamples: 1000,
        }
    }
}

fn clock(minute: u32) -> String {
    format!("{:02}:{:02}", minute / 60, minute % 60)
}

fn parse_clock(s: &str) -> Option<u32> {
    let (h, m) = s.trim().split_once(':')?;
    let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
    (m < 60 && h * 60 + m <= 1440).then_some(h * 60 + m)
}

fn list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|x| x.trim().parse().ok()).collect()
}

impl std::fmt::Display for EventSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let target = match &self.target {
            EventTarget::Poi(id) => format!("poi:{id}"),
            EventTarget::Category(id) => format!("category:{id}"),
        };
        write!(f, "{target},{},{},{}", clock(self.start_minute), clock(self.end_minute), self.users)
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            c.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let bad = || format!("bad value `{v}` for `{key}`");
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn() -> String) -> std::result::Result<T, String> {
            v.parse().map_err(|_| bad())
        }
        match key {
            "step_minutes" => self.step_minutes = num(v, bad)?,
            "grid" => self.grid = num(v, bad)?,
            "interval_minutes" => self.interval_minutes = num(v, bad)?,
            "kappa" => self.kappa = num(v, bad)?,
            "merge_order" => {
                self.merge_order = v
                    .split(',')
                    .map(|d| d.trim().parse::<Dimension>().map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "n" => self.n = num(v, bad)?,
            "epsilon" => self.epsilon = num(v, bad)?,
            "speed_kmh" => self.speed_kmh = num(v, bad)?,
            "hourly_speed_kmh" => self.hourly_speed_kmh = Some(list(v).ok_or_else(bad)?),
            "gamma" => self.gamma = num(v, bad)?,
            "enumeration_limit" => self.enumeration_limit = num(v, bad)?,
            "time_cap" => self.distance.time_cap = num(v, bad)?,
            "unrelated_cost" => self.distance.unrelated_cost = num(v, bad)?,
            "hierarchy_depth" => self.distance.hierarchy_depth = num(v, bad)?,
            "level_costs" => self.distance.level_costs = Some(list(v).ok_or_else(bad)?),
            "weights" => {
                let w: Vec<f64> = list(v).ok_or_else(bad)?;
                self.distance.weights = w.try_into().map_err(|_| bad())?;
            }
            "gram_cap" => self.gram_cap = num(v, bad)?,
            "mbr_slack_km" => self.mbr_slack_km = Some(num(v, bad)?),
            "mbr_envelope_minutes" => self.mbr_envelope_minutes = num(v, bad)?,
            "max_gap_minutes" => self.max_gap_minutes = num(v, bad)?,
            "seed" => self.seed = Some(num(v, bad)?),
            "count" => self.count = num(v, bad)?,
            "min_len" => self.min_len = num(v, bad)?,
            "max_len" => self.max_len = num(v, bad)?,
            "campus_seed" => self.campus_seed = num(v, bad)?,
            "campus_side_km" => self.campus_side_km = num(v, bad)?,
            "bootstrap_resamples" => self.bootstrap_resamples = num(v, bad)?,
            _ => {
                if let Some(cat) = key.strip_prefix("hours.") {
                    let (o, c) = v.split_once('-').ok_or_else(bad)?;
                    let (o, c) = (parse_clock(o).ok_or_else(bad)?, parse_clock(c).ok_or_else(bad)?);
                    self.hours.insert(cat.to_string(), (o, c));
                } else if let Some(name) = key.strip_prefix("event.") {
                    let spec: EventSpec = v.parse().map_err(|e: Error| e.to_string())?;
                    self.events.insert(name.to_string(), spec);
                } else {
                    return Err(format!("unknown key `{key}`"));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        TimeAxis::new(self.step_minutes)?;
        if self.grid == 0 {
            return fail("grid must be >= 1");
        }
        if self.interval_minutes == 0 || 1440 % self.interval_minutes != 0 || self.interval_minutes % self.step_minutes != 0 {
            return fail("interval_minutes must divide 1440 and be a multiple of step_minutes");
        }
        let all = [Dimension::Space, Dimension::Time, Dimension::Category];
        if self.merge_order.len() != 3 || !all.iter().all(|d| self.merge_order.contains(d)) {
            return fail("merge_order must list space, time and category once each");
        }
        if self.n == 0 {
            return fail("n must be >= 1");
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return fail("epsilon must be positive");
        }
        if !(self.speed_kmh > 0.0) {
            return fail("speed_kmh must be positive");
        }
        if let Some(h) = &self.hourly_speed_kmh {
            if h.len() != 24 || h.iter().any(|s| !(*s > 0.0)) {
                return fail("hourly_speed_kmh needs 24 positive values");
            }
        }
        if self.gamma == 0 {
            return fail("gamma must be >= 1");
        }
        if self.max_gap_minutes < self.step_minutes {
            return fail("max_gap_minutes must be at least one timestep");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail("need 1 <= min_len <= max_len");
        }
        if self.mbr_slack_km.is_some_and(|s| !(s >= 0.0)) {
            return fail("mbr_slack_km must be non-negative");
        }
        self.distance.validate()
    }

    pub fn axis(&self) -> TimeAxis {
        TimeAxis::new(self.step_minutes).expect("validated")
    }

    pub fn speed(&self) -> SpeedProfile {
        SpeedProfile {
            base_kmh: self.speed_kmh,
            hourly_kmh: self.hourly_speed_kmh.clone(),
        }
    }

    pub fn hours_templates(&self) -> HoursTemplates {
        HoursTemplates(self.hours.clone())
    }

    pub fn sampling(&self) -> SamplingParams {
        SamplingParams {
            gamma: self.gamma,
            enumeration_limit: self.enumeration_limit,
        }
    }

    pub fn mbr(&self) -> MbrParams {
        let mut p = MbrParams::for_gap(&self.speed(), self.max_gap_minutes);
        if let Some(s) = self.mbr_slack_km {
            p.slack_km = s;
        }
        p.envelope_minutes = self.mbr_envelope_minutes;
        p
    }

    pub fn generator(&self) -> GeneratorParams {
        GeneratorParams {
            count: self.count,
            min_len: self.min_len,
            max_len: self.max_len,
            max_gap_minutes: self.max_gap_minutes,
            events: self.events.values().cloned().collect(),
            ..GeneratorParams::default()
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let order: Vec<String> = self.merge_order.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "step_minutes = {}", self.step_minutes);
        let _ = writeln!(s, "grid = {}", self.grid);
        let _ = writeln!(s, "interval_minutes = {}", self.interval_minutes);
        let _ = writeln!(s, "kappa = {}", self.kappa);
        let _ = writeln!(s, "merge_order = {}", order.join(","));
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "epsilon = {}", self.epsilon);
        let _ = writeln!(s, "speed_kmh = {}", self.speed_kmh);
        if let Some(h) = &self.hourly_speed_kmh {
            let _ = writeln!(s, "hourly_speed_kmh = {}", join(h));
        }
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "enumeration_limit = {}", self.enumeration_limit);
        let _ = writeln!(s, "time_cap = {}", self.distance.time_cap);
        let _ = writeln!(s, "unrelated_cost = {}", self.distance.unrelated_cost);
        let _ = writeln!(s, "hierarchy_depth = {}", self.distance.hierarchy_depth);
        if let Some(l) = &self.distance.level_costs {
            let _ = writeln!(s, "level_costs = {}", join(l));
        }
        let _ = writeln!(s, "weights = {}", join(&self.distance.weights));
        let _ = writeln!(s, "gram_cap = {}", self.gram_cap);
        if let Some(x) = self.mbr_slack_km {
            let _ = writeln!(s, "mbr_slack_km = {x}");
        }
        let _ = writeln!(s, "mbr_envelope_minutes = {}", self.mbr_envelope_minutes);
        let _ = writeln!(s, "max_gap_minutes = {}", self.max_gap_minutes);
        if let Some(x) = self.seed {
            let _ = writeln!(s, "seed = {x}");
        }
        for (cat, (o, c)) in &self.hours {
            let _ = writeln!(s, "hours.{cat} = {}-{}", clock(*o), clock(*c));
        }
        let _ = writeln!(s, "count = {}", self.count);
        let _ = writeln!(s, "min_len = {}", self.min_len);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        for (name, e) in &self.events {
            let _ = writeln!(s, "event.{name} = {e}");
        }
        let _ = writeln!(s, "campus_seed = {}", self.campus_seed);
        let _ = writeln!(s, "campus_side_km = {}", self.campus_side_km);
        let _ = writeln!(s, "bootstrap_resamples = {}", self.bootstrap_resamples);
        s
    }
}
