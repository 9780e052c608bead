//! Persisted region index: catalog, merged STC regions and region n-grams.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::catalog::PoiCatalog;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::ngram::{build_region_family, GramFamily, RegionGraph};
use crate::stc::{RegionId, RegionSet};

pub const INDEX_FORMAT: &str = "gramshield-index";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionIndex {
    pub format: String,
    pub version: u32,
    pub config: Config,
    pub catalog: PoiCatalog,
    pub regions: RegionSet,
    pub family: GramFamily<RegionId>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildStats {
    pub pois: usize,
    pub base_regions: usize,
    pub regions: usize,
    pub gram_counts: Vec<usize>,
    pub wall_seconds: f64,
}

impl RegionIndex {
    /// Decomposes, merges and enumerates grams up to `max(n, 2)` so the
    /// reconstruction bigrams are always available.
    pub fn build(catalog: PoiCatalog, config: &Config) -> Result<(Self, BuildStats)> {
        config.validate()?;
        let started = Instant::now();
        let base = RegionSet::build(&catalog, config.axis(), config.grid, config.interval_minutes)?;
        let regions = base.merge(&catalog, config.kappa, &config.merge_order)?;
        let graph = RegionGraph::new(&regions, &catalog, &config.speed(), config.step_minutes);
        let family = build_region_family(&regions, &graph, config.n.max(2), config.gram_cap)?;
        let stats = BuildStats {
            pois: catalog.len(),
            base_regions: base.len(),
            regions: regions.len(),
            gram_counts: (1..=family.max_n()).map(|k| family.get(k).map_or(0, |s| s.len())).collect(),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let index = Self {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            config: config.clone(),
            catalog,
            regions,
            family,
        };
        Ok((index, stats))
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::fs::File::create(path)?)
    }

    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self> {
        let mut index: RegionIndex = serde_json::from_reader(BufReader::new(r))?;
        if index.format != INDEX_FORMAT {
            return Err(Error::IndexFormat(format!("unexpected format `{}`", index.format)));
        }
        if index.version != INDEX_VERSION {
            return Err(Error::IndexFormat(format!("unsupported version {}", index.version)));
        }
        index.catalog.reindex();
        index.regions.reindex();
        index.family.reindex();
        index.config.validate()?;
        Ok(index)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }
}
