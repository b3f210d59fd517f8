//! Monte-Carlo study driver and δ sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::Dataset;
use crate::dgp::{build_structure, fit_oracle_p, oracle_psi, simulate_dataset, DgpConfig, OracleValue};
use crate::error::{Error, Result};
use crate::estimator::{estimate_grid, EstimateResult, EstimatorConfig};
use crate::intervention::InterventionSpec;
use crate::numerics::Rng;

const ORACLE_P_STREAM: u64 = 0x4f50;
const ORACLE_TRUTH_STREAM: u64 = 0x4f54;
/// Largest tolerated share of failed replications per `(N, δ)`.
pub const MAX_FAILED_SHARE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McStudyConfig {
    pub sample_sizes: Vec<usize>,
    /// Uniform δ values applied at every position.
    pub delta_grid: Vec<f64>,
    pub reps: usize,
    pub n_oracle: usize,
    pub n_truth: usize,
    /// Folds used by every replication; replaces the estimator's own value.
    pub k_folds: usize,
}

impl Default for McStudyConfig {
    fn default() -> Self {
        Self {
            sample_sizes: vec![2000, 3000, 4000, 5000],
            delta_grid: vec![0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
            reps: 200,
            n_oracle: 5000,
            n_truth: 5000,
            k_folds: 2,
        }
    }
}

impl McStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.sample_sizes.is_empty() || self.delta_grid.is_empty() {
            return Err(Error::Config("sample_sizes and delta_grid must be non-empty".into()));
        }
        if self.delta_grid.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Config("delta_grid values must be positive".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds must be at least 2, got {}", self.k_folds)));
        }
        if self.n_oracle == 0 || self.n_truth < 2 {
            return Err(Error::Config("n_oracle must be positive and n_truth at least 2".into()));
        }
        Ok(())
    }
}

/// Everything a study run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct McStudy {
    pub study: McStudyConfig,
    pub dgp: DgpConfig,
    pub estimator: EstimatorConfig,
    pub base_seed: u64,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McMetricsRow {
    pub n: usize,
    pub delta: f64,
    pub psi_true: f64,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub avg_ci_length: f64,
    /// Standard deviation of the estimates across completed replications.
    pub sd: f64,
    pub reps_completed: usize,
    pub reps_failed: usize,
}

/// Outcome of one replication at one δ.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub n: usize,
    pub rep: usize,
    pub delta: f64,
    pub outcome: std::result::Result<(f64, f64, f64), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McStudyOutput {
    pub rows: Vec<McMetricsRow>,
    pub reps: Vec<RepRecord>,
    pub truths: Vec<(f64, OracleValue)>,
    /// Digest of the oracle values every replication was compared to.
    pub oracle_hash: String,
}

fn rep_seed(base_seed: u64, n: usize) -> u64 {
    // SplitMix64 finalizer over the pair.
    let mut z = base_seed ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator of replication `rep` at sample size `n`.
pub fn rep_rng(base_seed: u64, n: usize, rep: usize) -> Rng {
    Rng::with_stream(rep_seed(base_seed, n), rep as u64)
}

/// Ψ for every δ of the grid from one oracle table and common truth draws.
pub fn oracle_truths(dgp: &DgpConfig, study: &McStudyConfig) -> Result<Vec<(f64, OracleValue)>> {
    let structure = build_structure(dgp)?;
    let tables = fit_oracle_p(
        dgp,
        &structure,
        study.n_oracle,
        &mut Rng::with_stream(dgp.noise_seed, ORACLE_P_STREAM),
    )?;
    study
        .delta_grid
        .iter()
        .map(|&d| {
            let spec = InterventionSpec::uniform(d, dgp.s_max)?;
            let mut rng = Rng::with_stream(dgp.noise_seed, ORACLE_TRUTH_STREAM);
            Ok((d, oracle_psi(dgp, &structure, &tables, &spec, study.n_truth, &mut rng)?))
        })
        .collect()
}

pub fn oracle_hash(truths: &[(f64, OracleValue)]) -> String {
    let mut h = Sha256::new();
    for (d, v) in truths {
        h.update(d.to_bits().to_le_bytes());
        h.update(v.psi.to_bits().to_le_bytes());
        h.update(v.mc_se.to_bits().to_le_bytes());
        h.update((v.n as u64).to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {workers} workers: {e}")))
}

/// Summary of one `(N, δ)` cell from its replication records.
pub fn summarize_cell(n: usize, delta: f64, psi_true: f64, records: &[&RepRecord]) -> McMetricsRow {
    let done: Vec<(f64, f64, f64)> = records.iter().filter_map(|r| r.outcome.clone().ok()).collect();
    let k = done.len() as f64;
    let (bias, rmse, coverage, avg_len, sd) = if done.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mean = done.iter().map(|(p, _, _)| p).sum::<f64>() / k;
        let bias = mean - psi_true;
        let mse = done.iter().map(|(p, _, _)| (p - psi_true).powi(2)).sum::<f64>() / k;
        let var = done.iter().map(|(p, _, _)| (p - mean).powi(2)).sum::<f64>() / k;
        let covered = done.iter().filter(|(_, lo, hi)| *lo <= psi_true && psi_true <= *hi).count();
        let avg_len = done.iter().map(|(_, lo, hi)| hi - lo).sum::<f64>() / k;
        (bias, mse.sqrt(), covered as f64 / k, avg_len, var.sqrt())
    };
    McMetricsRow {
        n,
        delta,
        psi_true,
        bias,
        rmse,
        coverage,
        avg_ci_length: avg_len,
        sd,
        reps_completed: done.len(),
        reps_failed: records.len() - done.len(),
    }
}

/// Runs every replication and reduces in `(N, rep, δ)` order. Fails when
/// any cell has too many failed replications.
pub fn run_mc_study(cfg: &McStudy) -> Result<McStudyOutput> {
    let out = run_mc_study_unchecked(cfg, &|_| {})?;
    out.check_failed_share(cfg.study.reps)?;
    Ok(out)
}

/// Like [`run_mc_study`] but returns the output regardless of failures.
/// `on_rep` sees the records of each replication as it finishes, in
/// scheduling order.
pub fn run_mc_study_unchecked(
    cfg: &McStudy,
    on_rep: &(dyn Fn(&[RepRecord]) + Sync),
) -> Result<McStudyOutput> {
    cfg.study.validate()?;
    cfg.dgp.validate()?;
    let mut estimator = cfg.estimator.clone();
    estimator.k_folds = cfg.study.k_folds;
    estimator.validate()?;
    let truths = oracle_truths(&cfg.dgp, &cfg.study)?;
    let structure = build_structure(&cfg.dgp)?;
    let grid: Vec<InterventionSpec> = cfg
        .study
        .delta_grid
        .iter()
        .map(|&d| InterventionSpec::uniform(d, cfg.dgp.s_max))
        .collect::<Result<_>>()?;
    let pool = thread_pool(cfg.workers)?;
    let mut reps = Vec::new();
    for &n in &cfg.study.sample_sizes {
        let per_rep: Vec<Vec<RepRecord>> = pool.install(|| {
            (0..cfg.study.reps)
                .into_par_iter()
                .map(|rep| {
                    let mut rng = rep_rng(cfg.base_seed, n, rep);
                    let results = simulate_dataset(&cfg.dgp, &structure, n, &mut rng)
                        .and_then(|(ds, _)| estimate_grid(&ds, &grid, &estimator, &mut rng));
                    let records: Vec<RepRecord> = cfg
                        .study
                        .delta_grid
                        .iter()
                        .enumerate()
                        .map(|(g, &delta)| RepRecord {
                            n,
                            rep,
                            delta,
                            outcome: match &results {
                                Ok(all) => match &all[g] {
                                    Ok(r) => Ok((r.psi_hat, r.ci_low, r.ci_high)),
                                    Err(e) => Err(e.to_string()),
                                },
                                Err(e) => Err(e.to_string()),
                            },
                        })
                        .collect();
                    on_rep(&records);
                    records
                })
                .collect()
        });
        reps.extend(per_rep.into_iter().flatten());
    }

    let mut rows = Vec::new();
    for &n in &cfg.study.sample_sizes {
        for (delta, truth) in &truths {
            let cell: Vec<&RepRecord> = reps.iter().filter(|r| r.n == n && r.delta == *delta).collect();
            rows.push(summarize_cell(n, *delta, truth.psi, &cell));
        }
    }
    let oracle_hash = oracle_hash(&truths);
    Ok(McStudyOutput { rows, reps, truths, oracle_hash })
}

impl McStudyOutput {
    pub fn check_failed_share(&self, reps: usize) -> Result<()> {
        for row in &self.rows {
            if row.reps_failed as f64 > MAX_FAILED_SHARE * reps as f64 {
                let first = self
                    .reps
                    .iter()
                    .filter(|r| r.n == row.n && r.delta == row.delta)
                    .find_map(|r| r.outcome.as_ref().err())
                    .cloned()
                    .unwrap_or_default();
                return Err(Error::Estimation(format!(
                    "{} of {reps} replications failed at N={}, delta={}; first failure: {first}",
                    row.reps_failed, row.n, row.delta
                )));
            }
        }
        Ok(())
    }
}

pub fn write_metrics_csv(rows: &[McMetricsRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))
}

pub fn write_reps_csv(reps: &[RepRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "rep", "delta", "psi_hat", "ci_low", "ci_high", "error"])
        .map_err(csv_error)?;
    for r in reps {
        let (p, lo, hi, err) = match &r.outcome {
            Ok((p, lo, hi)) => (p.to_string(), lo.to_string(), hi.to_string(), String::new()),
            Err(e) => (String::new(), String::new(), String::new(), e.clone()),
        };
        w.write_record([r.n.to_string(), r.rep.to_string(), r.delta.to_string(), p, lo, hi, err])
            .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<reps>", e))
}

/// Reads replication records written by [`write_reps_csv`].
pub fn read_reps_csv(path: &std::path::Path) -> Result<Vec<RepRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.into(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let line = k + 2;
        let bad = |m: String| Error::Parse { path: path.into(), line, message: m };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| field(i).parse::<f64>().map_err(|e| bad(format!("column {i}: {e}")));
        let outcome = if field(6).is_empty() {
            Ok((num(3)?, num(4)?, num(5)?))
        } else {
            Err(field(6).to_string())
        };
        out.push(RepRecord {
            n: field(0).parse().map_err(|e| bad(format!("n: {e}")))?,
            rep: field(1).parse().map_err(|e| bad(format!("rep: {e}")))?,
            delta: num(2)?,
            outcome,
        });
    }
    Ok(out)
}

pub fn write_truths_csv(truths: &[(f64, OracleValue)], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["delta", "psi_true", "mc_se", "n_truth"]).map_err(csv_error)?;
    for (d, v) in truths {
        w.write_record([d.to_string(), v.psi.to_string(), v.mc_se.to_string(), v.n.to_string()])
            .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<truths>", e))
}

fn csv_error(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
}

// ---------------------------------------------------------------------------
// δ sweeps

/// Which positions a sweep intervenes on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepTarget {
    Uniform,
    /// 1-based position; all other positions keep δ = 1.
    Position(usize),
}

impl SweepTarget {
    pub fn label(&self) -> String {
        match self {
            SweepTarget::Uniform => "all".into(),
            SweepTarget::Position(s) => s.to_string(),
        }
    }
}

/// `points` values log-uniformly spaced over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || points == 0 {
        return Err(Error::InvalidArgument(format!(
            "log grid needs 0 < lo <= hi and at least one point, got [{lo}, {hi}] with {points}"
        )));
    }
    if points == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..points)
        .map(|k| {
            if k == points - 1 {
                hi
            } else if k == 0 {
                lo
            } else {
                (a + (b - a) * k as f64 / (points - 1) as f64).exp()
            }
        })
        .collect())
}

/// Intervention vectors of a sweep, sorted by δ.
pub fn sweep_specs(target: SweepTarget, grid: &[f64], s_max: usize) -> Result<Vec<(f64, InterventionSpec)>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidArgument(format!("sweep grid value {bad} is not positive")));
    }
    if let SweepTarget::Position(s) = target {
        if s == 0 || s > s_max {
            return Err(Error::InvalidArgument(format!(
                "sweep position {s} outside 1..={s_max}"
            )));
        }
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|g| {
            let spec = match target {
                SweepTarget::Uniform => InterventionSpec::uniform(g, s_max)?,
                SweepTarget::Position(s) => {
                    let mut v = vec![1.0; s_max];
                    v[s - 1] = g;
                    InterventionSpec::new(v)?
                }
            };
            Ok((g, spec))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub target: SweepTarget,
    pub delta: f64,
    pub result: EstimateResult,
}

pub fn run_delta_sweep(
    ds: &Dataset,
    target: SweepTarget,
    grid: &[f64],
    cfg: &EstimatorConfig,
    rng: &mut Rng,
) -> Result<Vec<SweepRow>> {
    let specs = sweep_specs(target, grid, ds.s_max())?;
    let vectors: Vec<InterventionSpec> = specs.iter().map(|(_, s)| s.clone()).collect();
    let results = estimate_grid(ds, &vectors, cfg, rng)?;
    specs
        .into_iter()
        .zip(results)
        .map(|((delta, _), r)| Ok(SweepRow { target, delta, result: r? }))
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "delta",
        "psi_hat",
        "ci_low",
        "ci_high",
        "target_position",
        "se",
        "n",
        "missing_strata",
        "overlap_projections",
    ])
    .map_err(csv_error)?;
    for row in rows {
        let r = &row.result;
        w.write_record([
            row.delta.to_string(),
            r.psi_hat.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            row.target.label(),
            r.std_error().to_string(),
            r.n.to_string(),
            r.missing_strata.to_string(),
            r.overlap_projections.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<sweep>", e))
}
