//! Command-line surface.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 estimation failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::{ingest_embeddings, load_dataset, save_dataset, Dataset};
use crate::dgp::desk::{DeskConfig, DeskInstance};
use crate::dgp::{build_structure, simulate_dataset, DgpConfig, OracleValue};
use crate::error::{Error, Result};
use crate::estimator::{estimate_grid, write_estimates_csv, EstimateResult, EstimatorConfig};
use crate::harness::{
    log_grid, oracle_hash, oracle_truths, run_delta_sweep, run_mc_study_unchecked, write_metrics_csv,
    write_reps_csv, write_sweep_csv, write_truths_csv, McStudy, McStudyConfig, RepRecord, SweepTarget,
};
use crate::intervention::InterventionSpec;
use crate::numerics::Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_ESTIMATION: i32 = 4;

/// Stream of the generator used by `simulate`.
const SIMULATE_STREAM: u64 = 0x5349;
/// Stream of the generator used by `estimate` and `sweep`.
const ESTIMATE_STREAM: u64 = 0x4553;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// The high-dimensional simulation design.
    #[default]
    Dgp,
    /// The small discrete instance with exact nuisances.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub source: Source,
    pub n: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { source: Source::Dgp, n: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// 1-based position to intervene on; 0 intervenes uniformly.
    pub position: usize,
    /// Explicit grid. When empty a log-spaced grid is used.
    pub grid: Vec<f64>,
    pub log_lo: f64,
    pub log_hi: f64,
    pub log_points: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { position: 0, grid: Vec::new(), log_lo: 1e-4, log_hi: 1e4, log_points: 41 }
    }
}

impl SweepConfig {
    pub fn target(&self) -> SweepTarget {
        match self.position {
            0 => SweepTarget::Uniform,
            s => SweepTarget::Position(s),
        }
    }

    pub fn resolved_grid(&self) -> Result<Vec<f64>> {
        if self.grid.is_empty() {
            log_grid(self.log_lo, self.log_hi, self.log_points).map_err(config_error)
        } else {
            Ok(self.grid.clone())
        }
    }
}

/// Contents of the TOML configuration file. Every table is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core. Never affects results.
    pub workers: usize,
    pub dgp: DgpConfig,
    pub desk: DeskConfig,
    pub estimator: EstimatorConfig,
    pub mc_study: McStudyConfig,
    pub sweep: SweepConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 0,
            dgp: DgpConfig::default(),
            desk: DeskConfig::default(),
            estimator: EstimatorConfig::default(),
            mc_study: McStudyConfig::default(),
            sweep: SweepConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the effective configuration, leaving out the worker count.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("workers");
        }
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&v).expect("config serializes"));
        format!("{:x}", h.finalize())
    }
}

#[derive(Debug, Parser)]
#[command(name = "dyngpi", version, about = "Incremental-intervention effects of sequential text features")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset in the native JSON-lines format.
    #[arg(long, conflicts_with_all = ["embeddings", "outcomes", "treatments"])]
    pub data: Option<PathBuf>,
    #[arg(long, requires_all = ["outcomes", "treatments"])]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
    #[arg(long)]
    pub treatments: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        match (&self.data, &self.embeddings, &self.outcomes, &self.treatments) {
            (Some(p), None, None, None) => load_dataset(p),
            (None, Some(e), Some(o), Some(t)) => ingest_embeddings(e, o, t),
            _ => Err(Error::Config(
                "give either --data or all of --embeddings, --outcomes, --treatments".into(),
            )),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a dataset from the simulation design.
    Simulate {
        #[arg(long, value_enum)]
        source: Option<Source>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle Ψ over the study's δ grid.
    Oracle {
        #[arg(long, value_enum)]
        source: Option<Source>,
        #[arg(long, value_delimiter = ',')]
        delta: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-fitted estimates on a dataset.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        /// Uniform δ values, comma separated.
        #[arg(long, value_delimiter = ',')]
        delta: Vec<f64>,
        /// One δ per position, comma separated. Repeatable.
        #[arg(long = "delta-vector")]
        delta_vector: Vec<String>,
        #[arg(long)]
        k_folds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo study writing mc_metrics.csv, mc_reps.csv, oracle.csv
    /// and manifest.json.
    McStudy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        reps: Option<usize>,
        /// Sample sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        delta: Option<Vec<f64>>,
    },
    /// δ sweep on a dataset, uniform or at one position.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        /// 1-based position; 0 or absent follows the config.
        #[arg(long)]
        position: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        log_points: Option<usize>,
        #[arg(long)]
        k_folds: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate ingestion inputs and print a summary.
    IngestCheck {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        outcomes: PathBuf,
        #[arg(long)]
        treatments: PathBuf,
        /// Also write the assembled dataset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_sha256: Option<String>,
    pub outputs: Vec<String>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::InvalidUnit { .. }
        | Error::Misaligned(_)
        | Error::Shape(_) => EXIT_DATA,
        _ => EXIT_ESTIMATION,
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Diagnostics go to stderr, the manifest to stdout.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    match run(&cli) {
        Ok(manifest) => {
            println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes through `f` to `out`, or to stdout when absent.
fn emit(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<Vec<String>> {
    match out {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w)?;
            finish(w, p)?;
            Ok(vec![p.display().to_string()])
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
            Ok(Vec::new())
        }
    }
}

fn manifest(command: &str, cfg: &RunConfig, oracle: Option<String>, outputs: Vec<String>) -> Manifest {
    Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config_sha256: cfg.hash(),
        oracle_sha256: oracle,
        outputs,
    }
}

fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad δ value '{t}' in '{text}': {e}")))
        })
        .collect()
}

fn desk_truths(desk: &DeskConfig, grid: &[f64]) -> Result<Vec<(f64, OracleValue)>> {
    let inst = DeskInstance::new(desk.clone()).map_err(config_error)?;
    grid.iter()
        .map(|&d| {
            let spec = InterventionSpec::uniform(d, inst.s_max()).map_err(config_error)?;
            Ok((d, OracleValue { psi: inst.psi(&spec)?, mc_se: 0.0, n: 0 }))
        })
        .collect()
}

fn run(cli: &Cli) -> Result<Manifest> {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Simulate { source, n, out } => {
            if let Some(s) = source {
                cfg.simulate.source = *s;
            }
            if let Some(n) = n {
                cfg.simulate.n = *n;
            }
            let mut rng = Rng::with_stream(cfg.seed, SIMULATE_STREAM);
            let ds = match cfg.simulate.source {
                Source::Dgp => {
                    cfg.dgp.validate()?;
                    let structure = build_structure(&cfg.dgp).map_err(config_error)?;
                    simulate_dataset(&cfg.dgp, &structure, cfg.simulate.n, &mut rng)
                        .map_err(config_error)?
                        .0
                }
                Source::Desk => DeskInstance::new(cfg.desk.clone())
                    .and_then(|d| d.simulate(cfg.simulate.n, &mut rng))
                    .map_err(config_error)?,
            };
            save_dataset(&ds, out)?;
            Ok(manifest("simulate", &cfg, None, vec![out.display().to_string()]))
        }
        Command::Oracle { source, delta, out } => {
            if let Some(d) = delta {
                cfg.mc_study.delta_grid = d.clone();
            }
            cfg.mc_study.validate()?;
            let truths = match source.unwrap_or(cfg.simulate.source) {
                Source::Dgp => {
                    cfg.dgp.validate()?;
                    oracle_truths(&cfg.dgp, &cfg.mc_study)?
                }
                Source::Desk => desk_truths(&cfg.desk, &cfg.mc_study.delta_grid)?,
            };
            let outputs = emit(out.as_deref(), |w| write_truths_csv(&truths, w))?;
            Ok(manifest("oracle", &cfg, Some(oracle_hash(&truths)), outputs))
        }
        Command::Estimate { data, delta, delta_vector, k_folds, out } => {
            if let Some(k) = k_folds {
                cfg.estimator.k_folds = *k;
            }
            cfg.estimator.validate()?;
            let ds = data.load()?;
            let mut grid = Vec::new();
            for &d in delta {
                grid.push(InterventionSpec::uniform(d, ds.s_max()).map_err(config_error)?);
            }
            for v in delta_vector {
                let spec = InterventionSpec::new(parse_vector(v)?).map_err(config_error)?;
                spec.check_len(ds.s_max()).map_err(config_error)?;
                grid.push(spec);
            }
            if grid.is_empty() {
                grid.push(InterventionSpec::uniform(1.0, ds.s_max())?);
            }
            let mut rng = Rng::with_stream(cfg.seed, ESTIMATE_STREAM);
            let results = pool(cfg.workers)?.install(|| estimate_grid(&ds, &grid, &cfg.estimator, &mut rng))?;
            let mut ok: Vec<EstimateResult> = Vec::new();
            let mut first_err = None;
            for (spec, r) in grid.iter().zip(results) {
                match r {
                    Ok(r) => ok.push(r),
                    Err(e) => {
                        eprintln!("estimate at δ = {:?} failed: {e}", spec.as_slice());
                        first_err.get_or_insert(e);
                    }
                }
            }
            let outputs = emit(out.as_deref(), |w| write_estimates_csv(&ok, ds.s_max(), w))?;
            match first_err {
                Some(e) => Err(Error::Estimation(e.to_string())),
                None => Ok(manifest("estimate", &cfg, None, outputs)),
            }
        }
        Command::McStudy { out_dir, reps, n, delta } => {
            if let Some(r) = reps {
                cfg.mc_study.reps = *r;
            }
            if let Some(n) = n {
                cfg.mc_study.sample_sizes = n.clone();
            }
            if let Some(d) = delta {
                cfg.mc_study.delta_grid = d.clone();
            }
            cfg.mc_study.validate()?;
            cfg.dgp.validate()?;
            cfg.estimator.validate()?;
            run_study(&cfg, out_dir)
        }
        Command::Sweep { data, position, grid, log_points, k_folds, out } => {
            if let Some(p) = position {
                cfg.sweep.position = *p;
            }
            if let Some(g) = grid {
                cfg.sweep.grid = g.clone();
            }
            if let Some(p) = log_points {
                cfg.sweep.log_points = *p;
            }
            if let Some(k) = k_folds {
                cfg.estimator.k_folds = *k;
            }
            cfg.estimator.validate()?;
            let values = cfg.sweep.resolved_grid()?;
            let ds = data.load()?;
            crate::harness::sweep_specs(cfg.sweep.target(), &values, ds.s_max()).map_err(config_error)?;
            let mut rng = Rng::with_stream(cfg.seed, ESTIMATE_STREAM);
            let rows = pool(cfg.workers)?
                .install(|| run_delta_sweep(&ds, cfg.sweep.target(), &values, &cfg.estimator, &mut rng))?;
            let outputs = emit(out.as_deref(), |w| write_sweep_csv(&rows, w))?;
            Ok(manifest("sweep", &cfg, None, outputs))
        }
        Command::IngestCheck { embeddings, outcomes, treatments, out } => {
            let ds = ingest_embeddings(embeddings, outcomes, treatments)?;
            eprintln!("{}", serde_json::to_string(&summarize(&ds)).expect("summary serializes"));
            let mut outputs = Vec::new();
            if let Some(p) = out {
                save_dataset(&ds, p)?;
                outputs.push(p.display().to_string());
            }
            Ok(manifest("ingest-check", &cfg, None, outputs))
        }
    }
}

#[derive(Debug, Serialize)]
struct DataSummary {
    n: usize,
    d_r: usize,
    s_max: usize,
    /// Units per length, lengths 1..=s_max.
    lengths: Vec<usize>,
    /// Share treated at each position among units that reach it.
    treated_share: Vec<f64>,
    outcome_mean: f64,
}

fn summarize(ds: &Dataset) -> DataSummary {
    let mut lengths = vec![0; ds.s_max()];
    let mut reach = vec![0usize; ds.s_max()];
    let mut treated = vec![0usize; ds.s_max()];
    for u in ds.units() {
        lengths[u.s_len() - 1] += 1;
        for (s, &w) in u.w.iter().enumerate() {
            reach[s] += 1;
            treated[s] += usize::from(w);
        }
    }
    DataSummary {
        n: ds.len(),
        d_r: ds.d_r(),
        s_max: ds.s_max(),
        lengths,
        treated_share: treated
            .iter()
            .zip(&reach)
            .map(|(&t, &r)| if r == 0 { f64::NAN } else { t as f64 / r as f64 })
            .collect(),
        outcome_mean: ds.outcome_mean(),
    }
}

fn run_study(cfg: &RunConfig, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let study = McStudy {
        study: cfg.mc_study.clone(),
        dgp: cfg.dgp.clone(),
        estimator: cfg.estimator.clone(),
        base_seed: cfg.seed,
        workers: cfg.workers,
    };
    // Records land here as they finish so an interrupted run keeps them.
    let partial_path = out_dir.join("mc_reps.partial.csv");
    let partial = Mutex::new(create(&partial_path)?);
    let done = Mutex::new(0usize);
    let total = cfg.mc_study.reps * cfg.mc_study.sample_sizes.len();
    let on_rep = |records: &[RepRecord]| {
        let mut buf = Vec::new();
        if write_reps_csv(records, &mut buf).is_ok() {
            // Drop the header after the first replication.
            let mut count = done.lock().expect("progress lock");
            let body = if *count == 0 {
                &buf[..]
            } else {
                let cut = buf.iter().position(|&b| b == b'\n').map_or(0, |i| i + 1);
                &buf[cut..]
            };
            let mut f = partial.lock().expect("partial lock");
            let _ = f.write_all(body).and_then(|_| f.flush());
            *count += 1;
            if let Some(r) = records.first() {
                eprintln!("[{}/{total}] N={} rep={}", *count, r.n, r.rep);
            }
        }
    };
    let out = run_mc_study_unchecked(&study, &on_rep)?;
    drop(partial);

    let mut outputs = Vec::new();
    let write = |name: &str, f: &dyn Fn(&mut dyn Write) -> Result<()>| -> Result<String> {
        let path = out_dir.join(name);
        let mut w = create(&path)?;
        f(&mut w)?;
        finish(w, &path)?;
        Ok(name.to_string())
    };
    outputs.push(write("mc_metrics.csv", &|w| write_metrics_csv(&out.rows, w))?);
    outputs.push(write("mc_reps.csv", &|w| write_reps_csv(&out.reps, w))?);
    outputs.push(write("oracle.csv", &|w| write_truths_csv(&out.truths, w))?);
    std::fs::remove_file(&partial_path).map_err(|e| Error::io(&partial_path, e))?;
    let m = manifest("mc-study", cfg, Some(out.oracle_hash.clone()), outputs);
    let mpath = out_dir.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n")
        .map_err(|e| Error::io(&mpath, e))?;
    out.check_failed_share(cfg.mc_study.reps)?;
    Ok(m)
}
