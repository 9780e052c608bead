use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gramshield::catalog::PoiCatalog;
use gramshield::config::Config;
use gramshield::datagen::{campus_catalog, filter_trajectories, generate_campus};
use gramshield::index::RegionIndex;
use gramshield::oracle::{brute_force_reconstruct, cardinality_s, enumerate_s, global_perturb, DEFAULT_GUARD};
use gramshield::pipeline::{Engine, MechanismKind};
use gramshield::reconstruct::{solve_region_path, ReconstructionInstance};
use gramshield::report::{evaluate, EvalOptions};
use gramshield::rng::substream;
use gramshield::trajectory::{read_jsonl, write_jsonl, Trajectory};
use rand::Rng;
use serde::Serialize;

const INDEX_FILE: &str = "index.json";
const BUILD_FILE: &str = "build.json";

#[derive(Parser)]
#[command(name = "gramshield", version, about = "Trajectory perturbation with hierarchical n-grams under local differential privacy")]
struct Cli {
    /// Worker threads for per-trajectory work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose the POI universe into regions and enumerate region n-grams.
    Build {
        #[arg(long)]
        pois: PathBuf,
        #[arg(long)]
        hierarchy: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturb a trajectory file with one mechanism.
    Perturb {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long, default_value = "ngram")]
        mechanism: MechanismKind,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
        /// Run manifest path (default: `<out>.manifest.json`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare real and perturbed trajectory files.
    Evaluate {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        perturbed: PathBuf,
        /// Machine-readable report (`metric,granularity,value`).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Write a synthetic campus catalog and trajectory set.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exhaustive reference computations for small domains.
    #[command(subcommand)]
    Oracle(OracleCommand),
}

#[derive(Args)]
struct SeedArg {
    /// Master seed; falls back to GRAMSHIELD_SEED, then the config, then 0.
    #[arg(long, env = "GRAMSHIELD_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Closed-form |S| for a uniform domain.
    Cardinality {
        #[arg(long)]
        pois: u64,
        #[arg(long)]
        len: u64,
        #[arg(long, default_value_t = 10)]
        step_minutes: u32,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
    },
    /// Global exponential mechanism over the enumerated trajectory set.
    Global {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_GUARD)]
        guard: f64,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the reconstruction solver with brute force on random instances.
    Reconstruction {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[command(flatten)]
        seed: SeedArg,
    },
}

/// Bad invocations (exit 2) versus failures while running (exit 1).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        Some(p) => {
            require_file(p)?;
            Config::load(p).map_err(|e| Failure::Usage(e.into()))
        }
        None => Ok(Config::default()),
    }
}

fn load_index(dir: &Path) -> Result<RegionIndex, Failure> {
    let path = if dir.is_dir() { dir.join(INDEX_FILE) } else { dir.to_path_buf() };
    require_file(&path)?;
    RegionIndex::load(&path)
        .with_context(|| format!("reading index {}", path.display()))
        .map_err(Failure::Runtime)
}

fn load_trajectories(path: &Path, catalog: &PoiCatalog) -> Result<Vec<Trajectory>, Failure> {
    require_file(path)?;
    let file = File::open(path)?;
    Ok(read_jsonl(BufReader::new(file), catalog).with_context(|| format!("reading {}", path.display()))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_trajectories(path: &Path, trajectories: &[Trajectory], catalog: &PoiCatalog) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_jsonl(&mut w, trajectories, catalog)?;
    w.flush()?;
    Ok(())
}

fn resolve_seed(arg: &SeedArg, config: &Config) -> u64 {
    arg.seed.or(config.seed).unwrap_or(0)
}

#[derive(Serialize)]
struct BuildManifest<'a> {
    pois: &'a Path,
    hierarchy: &'a Path,
    config: String,
    stats: gramshield::index::BuildStats,
}

#[derive(Serialize)]
struct DatagenSummary {
    seed: u64,
    generated: usize,
    kept: usize,
    dropped: std::collections::BTreeMap<&'static str, usize>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Build {
            pois,
            hierarchy,
            config,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            require_file(&pois)?;
            require_file(&hierarchy)?;
            let catalog = PoiCatalog::load(&pois, &hierarchy, &config.hours_templates())?;
            let (index, stats) = RegionIndex::build(catalog, &config)?;
            std::fs::create_dir_all(&out)?;
            index.save(&out.join(INDEX_FILE))?;
            eprintln!(
                "{} POIs -> {} base regions -> {} regions; grams {:?}; {:.2}s",
                stats.pois, stats.base_regions, stats.regions, stats.gram_counts, stats.wall_seconds
            );
            let manifest = BuildManifest {
                pois: &pois,
                hierarchy: &hierarchy,
                config: config.to_text(),
                stats,
            };
            write_json(&out.join(BUILD_FILE), &manifest)?;
        }
        Command::Perturb {
            index,
            trajectories,
            mechanism,
            epsilon,
            n,
            seed,
            out,
            manifest,
        } => {
            let index = load_index(&index)?;
            let data = load_trajectories(&trajectories, &index.catalog)?;
            let epsilon = epsilon.unwrap_or(index.config.epsilon);
            if !(epsilon > 0.0) || !epsilon.is_finite() {
                return Err(usage(format!("epsilon must be positive (got {epsilon})")));
            }
            let n = n.unwrap_or(index.config.n);
            let seed = resolve_seed(&seed, &index.config);
            let engine = Engine::new(&index, mechanism, n, epsilon)?;
            let result = engine.run(&data, seed);
            write_trajectories(&out, &result.outputs, &index.catalog)?;
            let manifest_path = manifest.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".manifest.json");
                PathBuf::from(p)
            });
            write_json(&manifest_path, &result.manifest)?;
            let m = &result.manifest;
            eprintln!(
                "{}: {} of {} trajectories written, dropped {:?}, smoothing rate {:.3}",
                m.mechanism, m.output, m.input, m.dropped, m.smoothing_rate
            );
        }
        Command::Evaluate {
            index,
            real,
            perturbed,
            csv,
            seed,
        } => {
            let index = load_index(&index)?;
            let real = load_trajectories(&real, &index.catalog)?;
            let perturbed = load_trajectories(&perturbed, &index.catalog)?;
            let options = EvalOptions {
                bootstrap_resamples: index.config.bootstrap_resamples,
                seed: resolve_seed(&seed, &index.config),
                ..EvalOptions::default()
            };
            let report = evaluate(
                &real,
                &perturbed,
                &index.catalog,
                &index.config.axis(),
                &index.config.distance,
                &options,
            )?;
            if report.pairs == 0 && !perturbed.is_empty() {
                return Err(Failure::Runtime(anyhow::anyhow!("no perturbed trajectory matches a real user id")));
            }
            print!("{}", report.to_text());
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Datagen { config, seed, out } => {
            let config = load_config(config.as_deref())?;
            let seed = resolve_seed(&seed, &config);
            let catalog = campus_catalog(config.campus_seed, config.campus_side_km)?;
            let axis = config.axis();
            let speed = config.speed();
            let generated = generate_campus(&catalog, &axis, &speed, &config.generator(), seed)?;
            let count = generated.len();
            let filtered = filter_trajectories(generated, &catalog, &axis, &speed);
            std::fs::create_dir_all(&out)?;
            catalog.write_csv(BufWriter::new(File::create(out.join("pois.csv"))?))?;
            catalog.hierarchy().write_csv(BufWriter::new(File::create(out.join("hierarchy.csv"))?))?;
            write_trajectories(&out.join("trajectories.jsonl"), &filtered.kept, &catalog)?;
            let summary = DatagenSummary {
                seed,
                generated: count,
                kept: filtered.kept.len(),
                dropped: filtered.reason_counts(),
            };
            write_json(&out.join("datagen.json"), &summary)?;
            eprintln!("{} POIs, {} trajectories written to {}", catalog.len(), summary.kept, out.display());
        }
        Command::Oracle(cmd) => oracle(cmd)?,
    }
    Ok(())
}

fn oracle(cmd: OracleCommand) -> Result<(), Failure> {
    match cmd {
        OracleCommand::Cardinality {
            pois,
            len,
            step_minutes,
            mu,
        } => {
            let size = cardinality_s(pois, len, step_minutes, mu).map_err(|e| Failure::Usage(e.into()))?;
            println!("{size:.6e}");
        }
        OracleCommand::Global {
            index,
            trajectories,
            epsilon,
            guard,
            seed,
            out,
        } => {
            if !(epsilon > 0.0) {
                return Err(usage(format!("epsilon must be positive (got {epsilon})")));
            }
            let index = load_index(&index)?;
            let data = load_trajectories(&trajectories, &index.catalog)?;
            let seed = resolve_seed(&seed, &index.config);
            let axis = index.config.axis();
            let speed = index.config.speed();
            let mut sets: std::collections::BTreeMap<usize, Vec<Vec<gramshield::trajectory::Visit>>> = Default::default();
            let mut outputs = Vec::with_capacity(data.len());
            for (i, t) in data.iter().enumerate() {
                if !sets.contains_key(&t.len()) {
                    let s = enumerate_s(&index.catalog, t.len(), &axis, &speed, guard)?;
                    eprintln!("|S| = {} for length {}", s.len(), t.len());
                    sets.insert(t.len(), s);
                }
                let s = &sets[&t.len()];
                if s.is_empty() {
                    return Err(Failure::Runtime(anyhow::anyhow!("no feasible trajectory of length {}", t.len())));
                }
                let mut rng = substream(seed, &format!("{}#{i}", t.user));
                let pick = global_perturb(&t.visits, s, &index.config.distance, &index.catalog, &axis, epsilon, &mut rng)?;
                outputs.push(Trajectory::new(t.user.clone(), s[pick].clone()));
            }
            write_trajectories(&out, &outputs, &index.catalog)?;
        }
        OracleCommand::Reconstruction { instances, seed } => {
            let seed = seed.seed.unwrap_or(0);
            let mut rng = substream(seed, "oracle-reconstruction");
            let mut mismatches = 0;
            for _ in 0..instances {
                let c = rng.gen_range(1..=8usize);
                let len = rng.gen_range(1..=5usize);
                let errors: Vec<f64> = (0..c * len).map(|_| rng.gen_range(0..5) as f64).collect();
                let bigrams: Vec<(u32, u32)> = (0..c as u32)
                    .flat_map(|a| (0..c as u32).map(move |b| (a, b)))
                    .filter(|_| rng.gen_bool(0.5))
                    .collect();
                let inst = ReconstructionInstance::new(len, (0..c as u32).collect(), errors, bigrams)?;
                let times = (0..c).map(|_| (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..8)).collect()).collect();
                let inst = inst.with_times(times)?;
                if solve_region_path(&inst)? != brute_force_reconstruct(&inst, DEFAULT_GUARD)? {
                    mismatches += 1;
                }
            }
            println!("{instances} instances, {mismatches} mismatches");
            if mismatches > 0 {
                return Err(Failure::Runtime(anyhow::anyhow!("dynamic programming disagrees with brute force")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match cli.jobs {
        Some(0) => {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build_global(),
        None => Ok(()),
    };
    if let Err(e) = pool {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
