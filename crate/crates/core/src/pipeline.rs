//! Mechanism selection and batch perturbation with per-trajectory diagnostics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{independent_perturb, ngram_without_hierarchy, MechanismOutput, PoiGrams, VisitSpace};
use crate::catalog::SpeedProfile;
use crate::distance::{DistanceParams, RegionMetric};
use crate::error::{Error, Result};
use crate::index::RegionIndex;
use crate::perturb::perturb_trajectory;
use crate::reconstruct::{reconstruct_regions, sample_poi_trajectory, MbrParams, SamplingParams};
use crate::rng::substream;
use crate::time::TimeAxis;
use crate::trajectory::{check_feasible, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MechanismKind {
    #[serde(rename = "ngram")]
    NGram,
    #[serde(rename = "ngram-noh")]
    NGramNoH,
    #[serde(rename = "phys-dist")]
    PhysDist,
    #[serde(rename = "ind-reach")]
    IndReach,
    #[serde(rename = "ind-noreach")]
    IndNoReach,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 5] = [
        MechanismKind::NGram,
        MechanismKind::NGramNoH,
        MechanismKind::PhysDist,
        MechanismKind::IndReach,
        MechanismKind::IndNoReach,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MechanismKind::NGram => "ngram",
            MechanismKind::NGramNoH => "ngram-noh",
            MechanismKind::PhysDist => "phys-dist",
            MechanismKind::IndReach => "ind-reach",
            MechanismKind::IndNoReach => "ind-noreach",
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.as_str()).collect();
                Error::InvalidParameter(format!("unknown mechanism `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Precomputed state for one mechanism over one index.
pub struct Engine<'a> {
    index: &'a RegionIndex,
    kind: MechanismKind,
    n: usize,
    epsilon: f64,
    axis: TimeAxis,
    speed: SpeedProfile,
    sampling: SamplingParams,
    mbr: MbrParams,
    region_metric: Option<RegionMetric>,
    space: Option<VisitSpace>,
    poi_grams: Option<PoiGrams>,
}

impl<'a> Engine<'a> {
    pub fn new(index: &'a RegionIndex, kind: MechanismKind, n: usize, epsilon: f64) -> Result<Self> {
        let config = &index.config;
        if n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidParameter(format!("epsilon must be positive (got {epsilon})")));
        }
        let axis = config.axis();
        let speed = config.speed();
        let params = &config.distance;
        let mut engine = Self {
            index,
            kind,
            n,
            epsilon,
            axis,
            speed: speed.clone(),
            sampling: config.sampling(),
            mbr: config.mbr(),
            region_metric: None,
            space: None,
            poi_grams: None,
        };
        match kind {
            MechanismKind::NGram | MechanismKind::PhysDist => {
                if n > index.family.max_n() {
                    return Err(Error::InvalidParameter(format!(
                        "index holds grams up to length {}; rebuild it with n = {n}",
                        index.family.max_n()
                    )));
                }
                let params = if kind == MechanismKind::PhysDist {
                    DistanceParams {
                        weights: DistanceParams::physical_only().weights,
                        ..params.clone()
                    }
                } else {
                    params.clone()
                };
                engine.region_metric = Some(RegionMetric::new(&index.regions, &index.catalog, &params));
            }
            MechanismKind::NGramNoH => {
                engine.space = Some(VisitSpace::new(&index.catalog, &axis, params));
                engine.poi_grams = Some(PoiGrams::new(
                    &index.catalog,
                    params,
                    &speed,
                    config.step_minutes,
                    n,
                    config.gram_cap,
                )?);
            }
            MechanismKind::IndReach | MechanismKind::IndNoReach => {
                engine.space = Some(VisitSpace::new(&index.catalog, &axis, params));
            }
        }
        Ok(engine)
    }

    pub fn kind(&self) -> MechanismKind {
        self.kind
    }

    /// Runs the mechanism on one trajectory without validating the output.
    pub fn perturb_one<R: Rng + ?Sized>(&self, trajectory: &Trajectory, rng: &mut R) -> Result<MechanismOutput> {
        let index = self.index;
        let catalog = &index.catalog;
        match self.kind {
            MechanismKind::NGram | MechanismKind::PhysDist => {
                let metric = self.region_metric.as_ref().expect("built in new");
                let regions = index.regions.project(catalog, trajectory)?;
                let record = perturb_trajectory(&regions, &index.family, self.n, metric, self.epsilon, rng)?;
                let w2 = index.family.get(2).ok_or(Error::EmptyGramSet(2))?;
                let rec = reconstruct_regions(&record, &index.regions, catalog, metric, w2, self.mbr)?;
                let sample = sample_poi_trajectory(&rec.path, &index.regions, catalog, &self.speed, self.sampling, rng)?;
                Ok(MechanismOutput {
                    visits: sample.visits,
                    calls: record.calls(),
                    epsilon_prime: record.epsilon_prime,
                    smoothed: sample.smoothed,
                    fallback: rec.fallback,
                    rescued: rec.rescued,
                    attempts: sample.attempts,
                })
            }
            MechanismKind::NGramNoH => ngram_without_hierarchy(
                &trajectory.visits,
                self.poi_grams.as_ref().expect("built in new"),
                self.space.as_ref().expect("built in new"),
                catalog,
                &self.axis,
                &self.speed,
                self.n,
                self.epsilon,
                rng,
            ),
            MechanismKind::IndReach | MechanismKind::IndNoReach => independent_perturb(
                &trajectory.visits,
                self.space.as_ref().expect("built in new"),
                catalog,
                &self.axis,
                &self.speed,
                self.epsilon,
                self.kind == MechanismKind::IndReach,
                rng,
            ),
        }
    }

    /// Filters, perturbs and validates every trajectory in parallel. Results
    /// keep the input order and each trajectory draws from its own substream.
    pub fn run(&self, trajectories: &[Trajectory], seed: u64) -> RunResult {
        let results: Vec<(Option<Trajectory>, TrajectoryReport)> = trajectories
            .par_iter()
            .enumerate()
            .map(|(i, traj)| self.run_one(i, traj, seed))
            .collect();
        let mut outputs = Vec::with_capacity(results.len());
        let mut reports = Vec::with_capacity(results.len());
        for (out, report) in results {
            outputs.extend(out);
            reports.push(report);
        }
        let manifest = RunManifest::new(self, seed, trajectories.len(), reports);
        RunResult { outputs, manifest }
    }

    fn run_one(&self, i: usize, traj: &Trajectory, seed: u64) -> (Option<Trajectory>, TrajectoryReport) {
        let mut rng = substream(seed, &format!("{}#{i}", traj.user));
        let mut report = TrajectoryReport {
            user: traj.user.clone(),
            len: traj.len(),
            ok: false,
            reason: None,
            calls: 0,
            epsilon_prime: 0.0,
            smoothed: false,
            fallback: false,
            rescued: 0,
            attempts: 0,
        };
        if let Err(r) = check_feasible(&traj.visits, &self.index.catalog, &self.axis, &self.speed) {
            report.reason = Some(format!("input-{}", r.as_str()));
            return (None, report);
        }
        match self.perturb_one(traj, &mut rng) {
            Err(e) => {
                report.reason = Some(error_reason(&e).to_string());
                (None, report)
            }
            Ok(out) => {
                report.calls = out.calls;
                report.epsilon_prime = out.epsilon_prime;
                report.smoothed = out.smoothed;
                report.fallback = out.fallback;
                report.rescued = out.rescued;
                report.attempts = out.attempts;
                let valid = if out.visits.len() != traj.len() {
                    Err("length-mismatch")
                } else {
                    check_feasible(&out.visits, &self.index.catalog, &self.axis, &self.speed).map_err(|r| r.as_str())
                };
                match valid {
                    Ok(()) => {
                        report.ok = true;
                        (Some(Trajectory::new(traj.user.clone(), out.visits)), report)
                    }
                    Err(r) => {
                        report.reason = Some(format!("invalid-{r}"));
                        (None, report)
                    }
                }
            }
        }
    }
}

fn error_reason(e: &Error) -> &'static str {
    match e {
        Error::Unmappable { .. } => "unmappable",
        Error::Unsmoothable(_) => "unsmoothable",
        Error::EmptyGramSet(_) => "empty-gram-set",
        Error::EmptyCandidates => "empty-candidates",
        Error::MemoryGuard { .. } => "memory-guard",
        _ => "error",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub user: String,
    pub len: usize,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub calls: usize,
    pub epsilon_prime: f64,
    pub smoothed: bool,
    pub fallback: bool,
    pub rescued: usize,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mechanism: MechanismKind,
    pub seed: u64,
    pub epsilon: f64,
    pub n: usize,
    pub input: usize,
    pub output: usize,
    pub dropped: BTreeMap<String, usize>,
    pub smoothed: usize,
    pub smoothing_rate: f64,
    pub fallbacks: usize,
    pub rescued_regions: usize,
    pub trajectories: Vec<TrajectoryReport>,
}

impl RunManifest {
    fn new(engine: &Engine<'_>, seed: u64, input: usize, trajectories: Vec<TrajectoryReport>) -> Self {
        let mut dropped = BTreeMap::new();
        for r in &trajectories {
            if let Some(reason) = &r.reason {
                *dropped.entry(reason.clone()).or_insert(0) += 1;
            }
        }
        let output = trajectories.iter().filter(|r| r.ok).count();
        let smoothed = trajectories.iter().filter(|r| r.ok && r.smoothed).count();
        Self {
            mechanism: engine.kind,
            seed,
            epsilon: engine.epsilon,
            n: engine.n,
            input,
            output,
            dropped,
            smoothed,
            smoothing_rate: if output == 0 { 0.0 } else { smoothed as f64 / output as f64 },
            fallbacks: trajectories.iter().filter(|r| r.fallback).count(),
            rescued_regions: trajectories.iter().map(|r| r.rescued).sum(),
            trajectories,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Valid perturbed trajectories in input order; dropped ones are omitted.
    pub outputs: Vec<Trajectory>,
    pub manifest: RunManifest,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mechanism_names_round_trip() {
        for k in MechanismKind::ALL {
            assert_eq!(k.as_str().parse::<MechanismKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("ngram-h".parse::<MechanismKind>().is_err());
    }
}
