//! Cross-fitted estimator of the incremental-intervention mean outcome.
//!
//! Each fold fits a deconfounder (segment encoder plus outcome head),
//! per-position propensity models and treatment-history tables on the
//! other folds, then runs the backward pseudo-outcome recursion once per
//! δ and evaluates uncentered influence contributions on its own units.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::intervention::{fit_p_tables, HistoryKey, InterventionSpec, PTables};
use crate::neural::{
    loss_and_delta, mlp_init, train, Adam, EarlyStopping, Loss, Mlp, MlpSpec, OutputActivation,
    TrainConfig,
};
use crate::numerics::Rng;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;

const DECONF_STREAM: u64 = 1;
const PROPENSITY_STREAM: u64 = 2;
const BACKWARD_STREAM: u64 = 3;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeconfounderArch {
    pub encoder_hidden: Vec<usize>,
    /// Width of the encoder output `f`.
    pub d_f: usize,
    pub head_hidden: Vec<usize>,
}

impl Default for DeconfounderArch {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64],
            d_f: 32,
            head_hidden: vec![128, 64],
        }
    }
}

pub fn default_deconf_train() -> TrainConfig {
    TrainConfig {
        epochs: 300,
        batch_size: 1024,
        learning_rate: 3e-5,
        patience: 0,
        dropout_rate: 0.1,
        validation_fraction: 0.0,
    }
}

pub fn default_nuisance_train() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 200,
        learning_rate: 1e-3,
        patience: 5,
        dropout_rate: 0.2,
        validation_fraction: 0.1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralConfig {
    pub arch: DeconfounderArch,
    pub deconf_train: TrainConfig,
    pub nuisance_hidden: Vec<usize>,
    pub nuisance_train: TrainConfig,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            arch: DeconfounderArch::default(),
            deconf_train: default_deconf_train(),
            nuisance_hidden: vec![128, 64],
            nuisance_train: default_nuisance_train(),
        }
    }
}

/// Learner family for every nuisance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    Neural(NeuralConfig),
    /// Cell means keyed on the exact feature vector, with the deconfounder
    /// fixed to the listed embedding coordinates. Only sensible for
    /// discrete embeddings.
    Saturated(SaturatedConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaturatedConfig {
    pub coords: Vec<usize>,
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Neural(NeuralConfig::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingStratumPolicy {
    /// Any evaluation unit in an unseen stratum fails the estimate.
    #[default]
    Error,
    /// Such units are left out and counted.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub k_folds: usize,
    pub c_overlap: f64,
    pub missing_strata: MissingStratumPolicy,
    pub backend: Backend,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            k_folds: 10,
            c_overlap: 0.01,
            missing_strata: MissingStratumPolicy::Error,
            backend: Backend::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::Config(format!("k_folds must be at least 2, got {}", self.k_folds)));
        }
        if !(self.c_overlap > 0.0 && self.c_overlap < 1.0) {
            return Err(Error::Config(format!("c_overlap must lie in (0, 1), got {}", self.c_overlap)));
        }
        match &self.backend {
            Backend::Neural(n) => {
                n.deconf_train.validate()?;
                n.nuisance_train.validate()?;
                if n.arch.d_f == 0 || n.arch.head_hidden.is_empty() || n.nuisance_hidden.is_empty() {
                    return Err(Error::Config(
                        "d_f and hidden widths of head and nuisance nets must be non-empty".into(),
                    ));
                }
            }
            Backend::Saturated(s) => {
                if s.coords.is_empty() {
                    return Err(Error::Config("saturated backend needs at least one coordinate".into()));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Per-unit algebra

/// Nuisance values of one unit, indexed by segment position `s - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitNuisance {
    pub p: Vec<f64>,
    /// Overlap-projected propensities.
    pub pi: Vec<f64>,
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
    pub tm0: Vec<f64>,
    pub tm1: Vec<f64>,
}

impl UnitNuisance {
    pub fn with_len(len: usize) -> Self {
        Self {
            p: vec![0.0; len],
            pi: vec![0.0; len],
            m0: vec![0.0; len],
            m1: vec![0.0; len],
            tm0: vec![0.0; len],
            tm1: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Clips `pi` into `[c·p, 1 − c·(1 − p)]`. Degenerate `p` pins `pi`.
pub fn project_overlap(pi: f64, p: f64, c: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    pi.clamp(c * p, 1.0 - c * (1.0 - p))
}

/// `p / π`, taken as 0 when `p = 0`.
fn ratio(p: f64, pi: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p / pi
    }
}

/// Ratio of intervened to observed assignment density at one segment.
pub fn omega_weight(w: u8, delta: f64, p: f64, pi: f64) -> f64 {
    let denom = delta * p + 1.0 - p;
    let num = if w == 1 {
        delta * ratio(p, pi)
    } else {
        ratio(1.0 - p, 1.0 - pi)
    };
    num / denom
}

pub fn omega(traj: &Trajectory, s: usize, nu: &UnitNuisance, delta_s: f64) -> f64 {
    omega_weight(traj.w[s - 1], delta_s, nu.p[s - 1], nu.pi[s - 1])
}

/// Uncentered influence contribution of one unit.
pub fn influence_contribution(traj: &Trajectory, nu: &UnitNuisance, delta: &InterventionSpec) -> Result<f64> {
    let len = traj.s_len();
    if nu.len() != len {
        return Err(Error::Shape(format!(
            "nuisances for {} segments on a unit of length {len}",
            nu.len()
        )));
    }
    if delta.len() < len {
        return Err(Error::InvalidArgument(format!(
            "intervention covers {} positions, unit has {len}",
            delta.len()
        )));
    }
    let mut cum = 1.0;
    let mut total = 0.0;
    for s in 1..=len {
        let i = s - 1;
        let d = delta.at(s);
        let (p, pi) = (nu.p[i], nu.pi[i]);
        let wf = f64::from(traj.w[i]);
        let denom = d * p + 1.0 - p;
        let treated = if p == 0.0 { 0.0 } else { d * p * nu.m1[i] * (1.0 - wf / pi) };
        let control = if p == 1.0 {
            0.0
        } else {
            (1.0 - p) * nu.m0[i] * (1.0 - (1.0 - wf) / (1.0 - pi))
        };
        let bracket = (treated + control) / denom;
        let correction = d * (wf - p) * (nu.tm1[i] - nu.tm0[i]) / (denom * denom);
        total += cum * bracket + correction;
        cum *= omega(traj, s, nu, d);
    }
    total += cum * traj.y;
    if !total.is_finite() {
        return Err(Error::Estimation(format!("non-finite influence contribution {total}")));
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub delta: Vec<f64>,
    pub psi_hat: f64,
    pub sigma_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    /// Uncentered contributions in unit order (dropped units omitted).
    pub contributions: Vec<f64>,
    pub missing_strata: usize,
    pub overlap_projections: usize,
}

impl EstimateResult {
    pub fn from_contributions(
        delta: &InterventionSpec,
        contributions: Vec<f64>,
        missing_strata: usize,
        overlap_projections: usize,
    ) -> Result<Self> {
        let n = contributions.len();
        if n == 0 {
            return Err(Error::Estimation("no units left to average".into()));
        }
        let nf = n as f64;
        let psi_hat = contributions.iter().sum::<f64>() / nf;
        let var = contributions.iter().map(|c| (c - psi_hat).powi(2)).sum::<f64>() / nf;
        let sigma_hat = var.sqrt();
        let half = Z_95 * sigma_hat / nf.sqrt();
        Ok(Self {
            delta: delta.as_slice().to_vec(),
            psi_hat,
            sigma_hat,
            ci_low: psi_hat - half,
            ci_high: psi_hat + half,
            n,
            contributions,
            missing_strata,
            overlap_projections,
        })
    }

    pub fn std_error(&self) -> f64 {
        self.sigma_hat / (self.n as f64).sqrt()
    }

    /// Mean of the estimating-equation residuals at `psi`.
    pub fn residual_mean(&self, psi: f64) -> f64 {
        self.contributions.iter().map(|c| c - psi).sum::<f64>() / self.n as f64
    }
}

pub fn estimate_csv_header(s_max: usize) -> String {
    let mut cols: Vec<String> = (1..=s_max).map(|s| format!("delta_{s}")).collect();
    cols.extend(
        ["psi_hat", "se", "ci_low", "ci_high", "n", "missing_strata", "overlap_projections"]
            .map(String::from),
    );
    cols.join(",")
}

pub fn write_estimates_csv(results: &[EstimateResult], s_max: usize, mut out: impl Write) -> Result<()> {
    let io = |e| Error::io("<estimates>", e);
    writeln!(out, "{}", estimate_csv_header(s_max)).map_err(io)?;
    for r in results {
        let mut fields: Vec<String> = r.delta.iter().map(|d| d.to_string()).collect();
        fields.extend([
            r.psi_hat.to_string(),
            r.std_error().to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.n.to_string(),
            r.missing_strata.to_string(),
            r.overlap_projections.to_string(),
        ]);
        writeln!(out, "{}", fields.join(",")).map_err(io)?;
    }
    Ok(())
}

pub fn save_estimates_csv(results: &[EstimateResult], s_max: usize, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = std::io::BufWriter::new(file);
    write_estimates_csv(results, s_max, &mut buf)?;
    buf.flush().map_err(|e| Error::io(path, e))
}

/// Plug-in estimate from externally supplied nuisances (for instance exact
/// ones on a simulated instance).
pub fn estimate_with_nuisances(
    ds: &Dataset,
    delta: &InterventionSpec,
    c_overlap: f64,
    mut nuisance: impl FnMut(usize, &Trajectory) -> Result<UnitNuisance>,
) -> Result<EstimateResult> {
    delta.check_len(ds.s_max())?;
    let mut contributions = Vec::with_capacity(ds.len());
    let mut projections = 0;
    for (i, unit) in ds.units().iter().enumerate() {
        let mut nu = nuisance(i, unit)?;
        for s in 0..nu.len() {
            let projected = project_overlap(nu.pi[s], nu.p[s], c_overlap);
            if projected != nu.pi[s] {
                projections += 1;
                nu.pi[s] = projected;
            }
        }
        contributions.push(influence_contribution(unit, &nu, delta)?);
    }
    EstimateResult::from_contributions(delta, contributions, 0, projections)
}

// ---------------------------------------------------------------------------
// Feature layout

/// Width of the outcome-head input.
pub fn head_width(s_max: usize, d_f: usize) -> usize {
    2 * s_max + s_max * d_f + 1
}

/// Appends one head row: treatments padded to `s_max`, presence mask,
/// `f` padded to `s_max·d_f`, then `S / s_max`.
fn push_head_row(out: &mut Vec<f64>, s_max: usize, d_f: usize, w: &[u8], f: &[f64]) {
    let len = w.len();
    out.extend((0..s_max).map(|s| if s < len { f64::from(w[s]) } else { 0.0 }));
    out.extend((0..s_max).map(|s| if s < len { 1.0 } else { 0.0 }));
    out.extend_from_slice(&f[..len * d_f]);
    out.extend(std::iter::repeat(0.0).take((s_max - len) * d_f));
    out.push(len as f64 / s_max as f64);
}

/// Width of the position-`s` propensity (or regression, with `with_w`) row.
pub fn position_width(s: usize, d_f: usize, with_w: bool) -> usize {
    1 + (s - 1) + s * d_f + usize::from(with_w)
}

/// Appends `[S / s_max, w_1..w_{s-1}, f_1..f_s]` and optionally `w_s`.
fn push_position_row(
    out: &mut Vec<f64>,
    s: usize,
    s_max: usize,
    s_len: usize,
    w: &[u8],
    f: &[f64],
    d_f: usize,
    w_s: Option<u8>,
) {
    out.push(s_len as f64 / s_max as f64);
    out.extend(w[..s - 1].iter().map(|&v| f64::from(v)));
    out.extend_from_slice(&f[..s * d_f]);
    if let Some(v) = w_s {
        out.push(f64::from(v));
    }
}

// ---------------------------------------------------------------------------
// Learners

/// Fitted map from feature rows to predictions.
pub trait Predictor: Send + Sync {
    fn width(&self) -> usize;
    fn predict(&self, rows: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
pub struct ConstantPredictor {
    pub width: usize,
    pub value: f64,
}

impl Predictor for ConstantPredictor {
    fn width(&self) -> usize {
        self.width
    }

    fn predict(&self, rows: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.value; rows.len() / self.width.max(1)])
    }
}

/// Network prediction mapped back through `offset + scale · out`.
#[derive(Debug, Clone)]
pub struct NetPredictor {
    pub net: Mlp,
    pub offset: f64,
    pub scale: f64,
}

impl Predictor for NetPredictor {
    fn width(&self) -> usize {
        self.net.input_width()
    }

    fn predict(&self, rows: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.predict_batch(rows)?;
        Ok(out.into_iter().map(|v| self.offset + self.scale * v).collect())
    }
}

fn row_key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

/// Exact-feature cell means. Unseen cells are a missing stratum.
#[derive(Debug, Clone)]
pub struct CellMeans {
    width: usize,
    cells: HashMap<Vec<u64>, (f64, usize)>,
}

impl CellMeans {
    pub fn fit(rows: &[f64], width: usize, targets: &[f64]) -> Self {
        let mut cells: HashMap<Vec<u64>, (f64, usize)> = HashMap::new();
        for (row, &t) in rows.chunks(width).zip(targets) {
            let cell = cells.entry(row_key(row)).or_insert((0.0, 0));
            cell.0 += t;
            cell.1 += 1;
        }
        Self { width, cells }
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }
}

impl Predictor for CellMeans {
    fn width(&self) -> usize {
        self.width
    }

    fn predict(&self, rows: &[f64]) -> Result<Vec<f64>> {
        rows.chunks(self.width)
            .map(|row| {
                self.cells
                    .get(&row_key(row))
                    .map(|(sum, n)| sum / *n as f64)
                    .ok_or_else(|| Error::MissingStratum {
                        segment: 0,
                        pattern: format!("feature cell {row:?}"),
                    })
            })
            .collect()
    }
}

fn with_segment(e: Error, s: usize) -> Error {
    match e {
        Error::MissingStratum { segment: 0, pattern } => Error::MissingStratum { segment: s, pattern },
        other => other,
    }
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn is_constant(values: &[f64]) -> bool {
    values.windows(2).all(|p| p[0] == p[1])
}

/// Logistic model of a binary target. Fewer than two classes gives the
/// constant class rate.
pub fn fit_classifier(
    backend: &Backend,
    rows: &[f64],
    width: usize,
    targets: &[f64],
    rng: &mut Rng,
) -> Result<Box<dyn Predictor>> {
    if targets.is_empty() {
        return Err(Error::Estimation("no training rows for a propensity model".into()));
    }
    if is_constant(targets) {
        return Ok(Box::new(ConstantPredictor { width, value: targets[0] }));
    }
    match backend {
        Backend::Saturated(_) => Ok(Box::new(CellMeans::fit(rows, width, targets))),
        Backend::Neural(cfg) => {
            let net = nuisance_net(width, &cfg.nuisance_hidden, OutputActivation::Logistic, cfg, rng)?;
            let (net, _) = train(net, rows, targets, Loss::Logistic, &cfg.nuisance_train, rng)?;
            Ok(Box::new(NetPredictor { net, offset: 0.0, scale: 1.0 }))
        }
    }
}

/// Squared-loss regression. Constant targets give an intercept-only model;
/// otherwise targets are standardized for training.
pub fn fit_regressor(
    backend: &Backend,
    rows: &[f64],
    width: usize,
    targets: &[f64],
    rng: &mut Rng,
) -> Result<Box<dyn Predictor>> {
    if targets.is_empty() {
        return Err(Error::Estimation("no training rows for a regression".into()));
    }
    if is_constant(targets) {
        return Ok(Box::new(ConstantPredictor { width, value: targets[0] }));
    }
    match backend {
        Backend::Saturated(_) => Ok(Box::new(CellMeans::fit(rows, width, targets))),
        Backend::Neural(cfg) => {
            let (mean, sd) = mean_and_sd(targets);
            let scaled: Vec<f64> = targets.iter().map(|t| (t - mean) / sd).collect();
            let net = nuisance_net(width, &cfg.nuisance_hidden, OutputActivation::Identity, cfg, rng)?;
            let (net, _) = train(net, rows, &scaled, Loss::Squared, &cfg.nuisance_train, rng)?;
            Ok(Box::new(NetPredictor { net, offset: mean, scale: sd }))
        }
    }
}

fn nuisance_net(
    width: usize,
    hidden: &[usize],
    output: OutputActivation,
    cfg: &NeuralConfig,
    rng: &mut Rng,
) -> Result<Mlp> {
    let mut widths = vec![width];
    widths.extend_from_slice(hidden);
    widths.push(1);
    let mut spec = MlpSpec::new(widths, output, rng.next_u64());
    spec.dropout_rate = cfg.nuisance_train.dropout_rate;
    mlp_init(spec)
}

// ---------------------------------------------------------------------------
// Deconfounder

/// Maps trajectories to deconfounder paths and predicts the outcome from
/// `(S, W̄, f̄)`.
pub trait OutcomeModel: Send + Sync {
    fn d_f(&self) -> usize;

    /// Flat `s_len × d_f` deconfounder path of every unit.
    fn encode_paths(&self, units: &[&Trajectory]) -> Result<Vec<Vec<f64>>>;

    /// Predictions for `(w, f)` pairs; the length of `w` is `S`.
    fn predict(&self, queries: &[(&[u8], &[f64])]) -> Result<Vec<f64>>;
}

pub fn encode_path(model: &dyn OutcomeModel, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    let flat = model.encode_paths(&[traj])?.pop().unwrap_or_default();
    Ok(flat.chunks(model.d_f()).map(<[f64]>::to_vec).collect())
}

/// Segment encoder and outcome head trained jointly on squared error.
#[derive(Debug, Clone)]
pub struct DeconfounderModel {
    pub encoder: Mlp,
    pub head: Mlp,
    s_max: usize,
    d_r: usize,
    d_f: usize,
    /// Head output is mapped through `y_offset + y_scale · out`; a zero
    /// scale marks an intercept-only fit on a constant outcome.
    y_offset: f64,
    y_scale: f64,
}

impl DeconfounderModel {
    pub fn new(arch: &DeconfounderArch, d_r: usize, s_max: usize, dropout: f64, rng: &mut Rng) -> Result<Self> {
        let mut enc_widths = vec![d_r + s_max];
        enc_widths.extend_from_slice(&arch.encoder_hidden);
        enc_widths.push(arch.d_f);
        let mut enc_spec = MlpSpec::new(enc_widths, OutputActivation::Identity, rng.next_u64());
        enc_spec.dropout_rate = dropout;
        let mut head_widths = vec![head_width(s_max, arch.d_f)];
        head_widths.extend_from_slice(&arch.head_hidden);
        head_widths.push(1);
        let mut head_spec = MlpSpec::new(head_widths, OutputActivation::Identity, rng.next_u64());
        head_spec.dropout_rate = dropout;
        Ok(Self {
            encoder: mlp_init(enc_spec)?,
            head: mlp_init(head_spec)?,
            s_max,
            d_r,
            d_f: arch.d_f,
            y_offset: 0.0,
            y_scale: 1.0,
        })
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    pub fn is_intercept_only(&self) -> bool {
        self.y_scale == 0.0
    }

    fn encoder_rows(&self, units: &[&Trajectory]) -> Result<Vec<f64>> {
        let width = self.d_r + self.s_max;
        let total: usize = units.iter().map(|u| u.s_len()).sum();
        let mut rows = Vec::with_capacity(total * width);
        for unit in units {
            if unit.d_r() != self.d_r {
                return Err(Error::Shape(format!(
                    "embedding width {} for an encoder of width {}",
                    unit.d_r(),
                    self.d_r
                )));
            }
            if unit.s_len() > self.s_max {
                return Err(Error::Shape(format!(
                    "unit of length {} for an encoder over {} positions",
                    unit.s_len(),
                    self.s_max
                )));
            }
            for (s, r) in unit.embeddings().enumerate() {
                rows.extend_from_slice(r);
                rows.extend((0..self.s_max).map(|k| if k == s { 1.0 } else { 0.0 }));
            }
        }
        Ok(rows)
    }

    fn head_rows(&self, queries: &[(&[u8], &[f64])]) -> Vec<f64> {
        let mut rows = Vec::with_capacity(queries.len() * head_width(self.s_max, self.d_f));
        for (w, f) in queries {
            push_head_row(&mut rows, self.s_max, self.d_f, w, f);
        }
        rows
    }
}

impl OutcomeModel for DeconfounderModel {
    fn d_f(&self) -> usize {
        self.d_f
    }

    fn encode_paths(&self, units: &[&Trajectory]) -> Result<Vec<Vec<f64>>> {
        let rows = self.encoder_rows(units)?;
        let f = self.encoder.predict_batch(&rows)?;
        let mut out = Vec::with_capacity(units.len());
        let mut at = 0;
        for unit in units {
            let len = unit.s_len() * self.d_f;
            out.push(f[at..at + len].to_vec());
            at += len;
        }
        Ok(out)
    }

    fn predict(&self, queries: &[(&[u8], &[f64])]) -> Result<Vec<f64>> {
        if self.is_intercept_only() {
            return Ok(vec![self.y_offset; queries.len()]);
        }
        let out = self.head.predict_batch(&self.head_rows(queries))?;
        Ok(out.into_iter().map(|v| self.y_offset + self.y_scale * v).collect())
    }
}

/// Minimizes mean squared error of `Y` jointly over encoder and head.
pub fn fit_deconfounder(
    train_ds: &Dataset,
    arch: &DeconfounderArch,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<DeconfounderModel> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::InvalidArgument("cannot fit a deconfounder on no units".into()));
    }
    let s_max = train_ds.s_max();
    let mut model = DeconfounderModel::new(arch, train_ds.d_r(), s_max, cfg.dropout_rate, rng)?;
    let ys: Vec<f64> = train_ds.units().iter().map(|u| u.y).collect();
    let (mean, sd) = mean_and_sd(&ys);
    model.y_offset = mean;
    if is_constant(&ys) {
        model.y_scale = 0.0;
        return Ok(model);
    }
    model.y_scale = sd;
    let targets: Vec<f64> = ys.iter().map(|y| (y - mean) / sd).collect();

    let d_f = arch.d_f;
    let hw = head_width(s_max, d_f);
    let mut adam_enc = Adam::new(&model.encoder, cfg.learning_rate);
    let mut adam_head = Adam::new(&model.head, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    let n_val = cfg.validation_len(train_ds.len());
    let mut held_out = Vec::new();
    if n_val > 0 {
        rng.shuffle(&mut order);
        held_out = order.drain(..n_val).collect();
    }
    let units = train_ds.units();
    let held_units: Vec<&Trajectory> = held_out.iter().map(|&i| &units[i]).collect();
    let held_targets: Vec<f64> = held_out.iter().map(|&i| targets[i]).collect();
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let dropout = cfg.dropout_rate;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Trajectory> = chunk.iter().map(|&i| &units[i]).collect();
            let enc_in = model.encoder_rows(&batch)?;
            let enc_cache = model
                .encoder
                .forward_cached(&enc_in, (dropout > 0.0).then_some((dropout, &mut *rng)))?;
            let f = enc_cache.output();
            let mut head_in = Vec::with_capacity(batch.len() * hw);
            let mut at = 0;
            for unit in &batch {
                let len = unit.s_len() * d_f;
                push_head_row(&mut head_in, s_max, d_f, &unit.w, &f[at..at + len]);
                at += len;
            }
            let head_cache = model
                .head
                .forward_cached(&head_in, (dropout > 0.0).then_some((dropout, &mut *rng)))?;
            let yb: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, delta) = loss_and_delta(Loss::Squared, head_cache.output(), &yb);
            if !loss.is_finite() {
                return Err(Error::Training(format!("deconfounder loss {loss} at epoch {epoch}")));
            }
            epoch_loss += loss * chunk.len() as f64;
            let (g_head, d_head_in) = model.head.backward(&head_cache, &delta);
            let mut d_f_out = Vec::with_capacity(f.len());
            for (j, unit) in batch.iter().enumerate() {
                let base = j * hw + 2 * s_max;
                d_f_out.extend_from_slice(&d_head_in[base..base + unit.s_len() * d_f]);
            }
            let (g_enc, _) = model.encoder.backward(&enc_cache, &d_f_out);
            adam_head.step(&mut model.head, &g_head);
            adam_enc.step(&mut model.encoder, &g_enc);
        }
        let monitored = if n_val > 0 {
            let f = model.encode_paths(&held_units)?;
            let queries: Vec<(&[u8], &[f64])> =
                held_units.iter().zip(&f).map(|(u, f)| (u.w.as_slice(), f.as_slice())).collect();
            let out = model.head.predict_batch(&model.head_rows(&queries))?;
            let v = loss_and_delta(Loss::Squared, &out, &held_targets).0;
            if best.as_ref().map_or(true, |(b, _, _)| v < *b) {
                best = Some((v, model.encoder.parameters(), model.head.parameters()));
            }
            v
        } else {
            epoch_loss / order.len() as f64
        };
        if stopper.observe(monitored) {
            break;
        }
    }
    if let Some((_, enc, head)) = best {
        model.encoder.set_parameters(&enc)?;
        model.head.set_parameters(&head)?;
    }
    let finite = |m: &Mlp| m.parameters().iter().all(|v| v.is_finite());
    if !finite(&model.encoder) || !finite(&model.head) {
        return Err(Error::Training("deconfounder parameters became non-finite".into()));
    }
    Ok(model)
}

/// Deconfounder fixed to a subset of embedding coordinates with a
/// cell-mean outcome head.
#[derive(Debug, Clone)]
pub struct SaturatedOutcome {
    coords: Vec<usize>,
    s_max: usize,
    head: CellMeans,
}

impl SaturatedOutcome {
    pub fn fit(train_ds: &Dataset, coords: &[usize]) -> Result<Self> {
        if let Some(c) = coords.iter().find(|&&c| c >= train_ds.d_r()) {
            return Err(Error::Config(format!(
                "saturated coordinate {c} outside embedding width {}",
                train_ds.d_r()
            )));
        }
        let mut model = Self {
            coords: coords.to_vec(),
            s_max: train_ds.s_max(),
            head: CellMeans::fit(&[], 1, &[]),
        };
        let units: Vec<&Trajectory> = train_ds.units().iter().collect();
        let f = model.encode_paths(&units)?;
        let queries: Vec<(&[u8], &[f64])> =
            units.iter().zip(&f).map(|(u, f)| (u.w.as_slice(), f.as_slice())).collect();
        let width = head_width(model.s_max, coords.len());
        let mut rows = Vec::with_capacity(units.len() * width);
        for (w, f) in &queries {
            push_head_row(&mut rows, model.s_max, coords.len(), w, f);
        }
        let ys: Vec<f64> = units.iter().map(|u| u.y).collect();
        model.head = CellMeans::fit(&rows, width, &ys);
        Ok(model)
    }
}

impl OutcomeModel for SaturatedOutcome {
    fn d_f(&self) -> usize {
        self.coords.len()
    }

    fn encode_paths(&self, units: &[&Trajectory]) -> Result<Vec<Vec<f64>>> {
        Ok(units
            .iter()
            .map(|u| {
                u.embeddings()
                    .flat_map(|r| self.coords.iter().map(move |&c| r[c]))
                    .collect()
            })
            .collect())
    }

    fn predict(&self, queries: &[(&[u8], &[f64])]) -> Result<Vec<f64>> {
        let width = head_width(self.s_max, self.coords.len());
        let mut rows = Vec::with_capacity(queries.len() * width);
        for (w, f) in queries {
            push_head_row(&mut rows, self.s_max, self.coords.len(), w, f);
        }
        self.head.predict(&rows)
    }
}

// ---------------------------------------------------------------------------
// Fold fitting

/// δ-independent nuisances of one fold together with quantities derived
/// from them for every unit of the dataset.
pub struct FoldBase {
    pub outcome: Box<dyn OutcomeModel>,
    /// `pi[s-1]`; `None` when no training unit reaches `s`.
    pub pi: Vec<Option<Box<dyn Predictor>>>,
    pub ptab: PTables,
    /// Flat deconfounder path of every unit.
    f: Vec<Vec<f64>>,
    /// Raw propensity per unit and position.
    pi_raw: Vec<Vec<f64>>,
    /// Outcome prediction with the final treatment set to 0 and 1.
    mu_cf: Vec<[f64; 2]>,
    train: Vec<usize>,
    eval: Vec<usize>,
}

/// δ-dependent nuisances: regressions per position and weighted stratum
/// means.
pub struct BackwardFit {
    /// `m[s-1]` for `s < s_max`; `None` when no training unit reaches `s+1`.
    pub m: Vec<Option<Box<dyn Predictor>>>,
    /// `tilde_m[s-1]`: history pattern → values at `w = 0, 1`.
    pub tilde_m: Vec<BTreeMap<HistoryKey, [f64; 2]>>,
}

/// All nuisances of one fold at one δ.
pub struct NuisanceSet<'a> {
    pub base: &'a FoldBase,
    pub backward: BackwardFit,
}

fn fit_outcome(backend: &Backend, train_ds: &Dataset, rng: &mut Rng) -> Result<Box<dyn OutcomeModel>> {
    match backend {
        Backend::Neural(cfg) => Ok(Box::new(fit_deconfounder(train_ds, &cfg.arch, &cfg.deconf_train, rng)?)),
        Backend::Saturated(s) => Ok(Box::new(SaturatedOutcome::fit(train_ds, &s.coords)?)),
    }
}

/// Per-position propensity models on the training units reaching each
/// position.
pub fn fit_propensities(
    ds: &Dataset,
    train_idx: &[usize],
    f: &[Vec<f64>],
    d_f: usize,
    backend: &Backend,
    rng: &mut Rng,
) -> Result<Vec<Option<Box<dyn Predictor>>>> {
    let s_max = ds.s_max();
    let units = ds.units();
    let mut models = Vec::with_capacity(s_max);
    for s in 1..=s_max {
        let width = position_width(s, d_f, false);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for &i in train_idx {
            let u = &units[i];
            if u.s_len() >= s {
                push_position_row(&mut rows, s, s_max, u.s_len(), &u.w, &f[i], d_f, None);
                targets.push(f64::from(u.w[s - 1]));
            }
        }
        if targets.is_empty() {
            models.push(None);
        } else {
            models.push(Some(fit_classifier(backend, &rows, width, &targets, rng)?));
        }
    }
    Ok(models)
}

fn fit_fold_base(
    ds: &Dataset,
    train: Vec<usize>,
    eval: Vec<usize>,
    backend: &Backend,
    fold_seed: u64,
) -> Result<FoldBase> {
    let train_ds = ds.subset(&train)?;
    let mut rng = Rng::with_stream(fold_seed, DECONF_STREAM);
    let outcome = fit_outcome(backend, &train_ds, &mut rng)?;
    let d_f = outcome.d_f();
    let all: Vec<&Trajectory> = ds.units().iter().collect();
    let f = outcome.encode_paths(&all)?;

    let mut rng = Rng::with_stream(fold_seed, PROPENSITY_STREAM);
    let pi = fit_propensities(ds, &train, &f, d_f, backend, &mut rng)?;
    let ptab = fit_p_tables(&train_ds);

    let s_max = ds.s_max();
    let mut pi_raw: Vec<Vec<f64>> = all.iter().map(|u| vec![f64::NAN; u.s_len()]).collect();
    for s in 1..=s_max {
        let Some(model) = &pi[s - 1] else { continue };
        let reach: Vec<usize> = (0..all.len()).filter(|&i| all[i].s_len() >= s).collect();
        let mut rows = Vec::with_capacity(reach.len() * model.width());
        for &i in &reach {
            let u = all[i];
            push_position_row(&mut rows, s, s_max, u.s_len(), &u.w, &f[i], d_f, None);
        }
        // Saturated propensities may not cover evaluation cells; those stay NaN.
        for (&i, v) in reach.iter().zip(predict_lenient(model.as_ref(), &rows)?) {
            pi_raw[i][s - 1] = v;
        }
    }

    let mut queries_w: Vec<Vec<u8>> = Vec::with_capacity(2 * all.len());
    for u in &all {
        for last in [0u8, 1] {
            let mut w = u.w.clone();
            *w.last_mut().expect("units have at least one segment") = last;
            queries_w.push(w);
        }
    }
    let mut mu_cf = vec![[f64::NAN; 2]; all.len()];
    let queries: Vec<(&[u8], &[f64])> = queries_w
        .iter()
        .enumerate()
        .map(|(q, w)| (w.as_slice(), f[q / 2].as_slice()))
        .collect();
    match outcome.predict(&queries) {
        Ok(values) => {
            for (q, v) in values.into_iter().enumerate() {
                mu_cf[q / 2][q % 2] = v;
            }
        }
        Err(e) if e.is_missing_stratum() => {
            for (q, query) in queries.iter().enumerate() {
                if let Ok(v) = outcome.predict(std::slice::from_ref(query)) {
                    mu_cf[q / 2][q % 2] = v[0];
                }
            }
        }
        Err(e) => return Err(e),
    }

    Ok(FoldBase { outcome, pi, ptab, f, pi_raw, mu_cf, train, eval })
}

fn lookup(v: f64, s: usize, what: &str) -> Result<f64> {
    if v.is_nan() {
        Err(Error::MissingStratum { segment: s, pattern: format!("no fitted {what}") })
    } else {
        Ok(v)
    }
}

fn mix(delta: f64, p: f64, m1: f64, m0: f64) -> f64 {
    (delta * p * m1 + (1.0 - p) * m0) / (delta * p + 1.0 - p)
}

/// Batch prediction where rows in unseen cells come back as NaN.
fn predict_lenient(model: &dyn Predictor, rows: &[f64]) -> Result<Vec<f64>> {
    match model.predict(rows) {
        Err(e) if e.is_missing_stratum() => rows
            .chunks(model.width())
            .map(|row| match model.predict(row) {
                Ok(v) => Ok(v[0]),
                Err(e) if e.is_missing_stratum() => Ok(f64::NAN),
                Err(e) => Err(e),
            })
            .collect(),
        other => other,
    }
}

/// Backward recursion over positions on the training units of a fold.
/// Under [`MissingStratumPolicy::Drop`], training units whose
/// counterfactual predictions fall in unseen cells leave the recursion.
pub fn fit_backward(
    ds: &Dataset,
    base: &FoldBase,
    delta: &InterventionSpec,
    backend: &Backend,
    c_overlap: f64,
    policy: MissingStratumPolicy,
    rng: &mut Rng,
) -> Result<BackwardFit> {
    let s_max = ds.s_max();
    let units = ds.units();
    let d_f = base.outcome.d_f();
    // m_vals[j][s-1] for training unit j.
    let mut m_vals: Vec<Vec<[f64; 2]>> = base
        .train
        .iter()
        .map(|&i| {
            let len = units[i].s_len();
            let mut v = vec![[f64::NAN; 2]; len];
            v[len - 1] = base.mu_cf[i];
            v
        })
        .collect();
    let mut usable = vec![true; base.train.len()];
    let check = |j: usize, pair: [f64; 2], s: usize, usable: &mut [bool]| -> Result<()> {
        if pair.iter().all(|v| !v.is_nan()) {
            return Ok(());
        }
        match policy {
            MissingStratumPolicy::Drop => {
                usable[j] = false;
                Ok(())
            }
            MissingStratumPolicy::Error => Err(Error::MissingStratum {
                segment: s,
                pattern: "counterfactual cell unseen in training".into(),
            }),
        }
    };
    for (j, &i) in base.train.iter().enumerate() {
        let len = units[i].s_len();
        check(j, m_vals[j][len - 1], len, &mut usable)?;
    }

    let mut m_models: Vec<Option<Box<dyn Predictor>>> = (1..s_max).map(|_| None).collect();
    for s in (1..s_max).rev() {
        let width = position_width(s, d_f, true);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut members = Vec::new();
        for (j, &i) in base.train.iter().enumerate() {
            let u = &units[i];
            if u.s_len() < s + 1 || !usable[j] {
                continue;
            }
            let p_next = base.ptab.p(s + 1, HistoryKey::before(&u.w, s + 1))?;
            let [m0, m1] = m_vals[j][s];
            targets.push(mix(delta.at(s + 1), p_next, m1, m0));
            push_position_row(&mut rows, s, s_max, u.s_len(), &u.w, &base.f[i], d_f, Some(u.w[s - 1]));
            members.push(j);
        }
        if targets.is_empty() {
            continue;
        }
        let model = fit_regressor(backend, &rows, width, &targets, rng)?;
        let mut cf_rows = Vec::with_capacity(2 * rows.len());
        for row in rows.chunks(width) {
            for w in [0.0, 1.0] {
                cf_rows.extend_from_slice(&row[..width - 1]);
                cf_rows.push(w);
            }
        }
        let preds = predict_lenient(model.as_ref(), &cf_rows)?;
        for (k, &j) in members.iter().enumerate() {
            m_vals[j][s - 1] = [preds[2 * k], preds[2 * k + 1]];
            check(j, m_vals[j][s - 1], s, &mut usable)?;
        }
        m_models[s - 1] = Some(model);
    }

    let mut sums: Vec<BTreeMap<HistoryKey, ([f64; 2], usize)>> = vec![BTreeMap::new(); s_max];
    for (j, &i) in base.train.iter().enumerate() {
        if !usable[j] {
            continue;
        }
        let u = &units[i];
        let mut cum = 1.0;
        for s in 1..=u.s_len() {
            let key = HistoryKey::before(&u.w, s);
            let cell = sums[s - 1].entry(key).or_insert(([0.0; 2], 0));
            cell.0[0] += cum * m_vals[j][s - 1][0];
            cell.0[1] += cum * m_vals[j][s - 1][1];
            cell.1 += 1;
            let p = base.ptab.p(s, key)?;
            let pi_raw = lookup(base.pi_raw[i][s - 1], s, "propensity")?;
            cum *= omega_weight(u.w[s - 1], delta.at(s), p, project_overlap(pi_raw, p, c_overlap));
        }
    }
    let tilde_m = sums
        .into_iter()
        .map(|table| {
            table
                .into_iter()
                .map(|(k, (sum, n))| (k, [sum[0] / n as f64, sum[1] / n as f64]))
                .collect()
        })
        .collect();
    Ok(BackwardFit { m: m_models, tilde_m })
}

impl NuisanceSet<'_> {
    /// Nuisance values of unit `i` and the number of overlap projections
    /// applied.
    pub fn unit(&self, ds: &Dataset, i: usize, c_overlap: f64) -> Result<(UnitNuisance, usize)> {
        let base = self.base;
        let u = &ds.units()[i];
        let len = u.s_len();
        let s_max = ds.s_max();
        let d_f = base.outcome.d_f();
        let mut nu = UnitNuisance::with_len(len);
        let mut projections = 0;
        for s in 1..=len {
            let key = HistoryKey::before(&u.w, s);
            let p = base.ptab.p(s, key)?;
            let raw = lookup(base.pi_raw[i][s - 1], s, "propensity")?;
            let pi = project_overlap(raw, p, c_overlap);
            if pi != raw {
                projections += 1;
            }
            nu.p[s - 1] = p;
            nu.pi[s - 1] = pi;
            let [t0, t1] = *self.backward.tilde_m[s - 1].get(&key).ok_or_else(|| Error::MissingStratum {
                segment: s,
                pattern: key.to_string(),
            })?;
            nu.tm0[s - 1] = t0;
            nu.tm1[s - 1] = t1;
            let [m0, m1] = if s == len {
                [
                    lookup(base.mu_cf[i][0], s, "outcome model")?,
                    lookup(base.mu_cf[i][1], s, "outcome model")?,
                ]
            } else {
                let model = self.backward.m[s - 1].as_ref().ok_or_else(|| Error::MissingStratum {
                    segment: s + 1,
                    pattern: "no training unit reaches this position".into(),
                })?;
                let mut rows = Vec::with_capacity(2 * model.width());
                for w in [0u8, 1] {
                    push_position_row(&mut rows, s, s_max, len, &u.w, &base.f[i], d_f, Some(w));
                }
                let v = model.predict(&rows).map_err(|e| with_segment(e, s))?;
                [v[0], v[1]]
            };
            nu.m0[s - 1] = m0;
            nu.m1[s - 1] = m1;
        }
        Ok((nu, projections))
    }
}

// ---------------------------------------------------------------------------
// Cross-fitting

/// Fold index of every unit; sizes differ by at most one.
pub fn assign_folds(n: usize, k: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut folds: Vec<Vec<usize>> = (0..k)
        .map(|j| {
            let lo = j * n / k;
            let hi = (j + 1) * n / k;
            order[lo..hi].to_vec()
        })
        .collect();
    for fold in &mut folds {
        fold.sort_unstable();
    }
    folds
}

fn delta_hash(delta: &InterventionSpec) -> u64 {
    // FNV-1a over the bit patterns.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for d in delta.as_slice() {
        for byte in d.to_bits().to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Contributions of one fold's evaluation units at one δ.
struct FoldOutcome {
    contributions: Vec<(usize, f64)>,
    missing: usize,
    projections: usize,
}

fn run_fold_delta(
    ds: &Dataset,
    base: &FoldBase,
    delta: &InterventionSpec,
    cfg: &EstimatorConfig,
    fold_seed: u64,
) -> Result<FoldOutcome> {
    let mut rng = Rng::with_stream(fold_seed ^ delta_hash(delta), BACKWARD_STREAM);
    let backward = fit_backward(ds, base, delta, &cfg.backend, cfg.c_overlap, cfg.missing_strata, &mut rng)?;
    let set = NuisanceSet { base, backward };
    let mut out = FoldOutcome { contributions: Vec::new(), missing: 0, projections: 0 };
    for &i in &base.eval {
        match set.unit(ds, i, cfg.c_overlap) {
            Ok((nu, proj)) => {
                out.projections += proj;
                out.contributions.push((i, influence_contribution(&ds.units()[i], &nu, delta)?));
            }
            Err(e) if e.is_missing_stratum() && cfg.missing_strata == MissingStratumPolicy::Drop => {
                out.missing += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Cross-fitted estimates for every δ in `grid`. The outer error reports a
/// failure of the δ-independent fits; inner errors are per δ.
pub fn estimate_grid(
    ds: &Dataset,
    grid: &[InterventionSpec],
    cfg: &EstimatorConfig,
    rng: &mut Rng,
) -> Result<Vec<Result<EstimateResult>>> {
    cfg.validate()?;
    for d in grid {
        d.check_len(ds.s_max())?;
    }
    let k = cfg.k_folds;
    if ds.len() < 2 * k {
        return Err(Error::Estimation(format!(
            "{} units are too few for {k}-fold cross-fitting",
            ds.len()
        )));
    }
    let folds = assign_folds(ds.len(), k, rng);
    let seeds: Vec<u64> = (0..k).map(|_| rng.next_u64()).collect();

    let per_fold: Vec<Result<Vec<Result<FoldOutcome>>>> = (0..k)
        .into_par_iter()
        .map(|j| {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(o, _)| *o != j)
                .flat_map(|(_, f)| f.iter().copied())
                .collect::<Vec<_>>();
            let mut train = train;
            train.sort_unstable();
            let base = fit_fold_base(ds, train, folds[j].clone(), &cfg.backend, seeds[j])?;
            Ok(grid.iter().map(|d| run_fold_delta(ds, &base, d, cfg, seeds[j])).collect())
        })
        .collect();

    let mut per_fold_ok = Vec::with_capacity(k);
    for r in per_fold {
        per_fold_ok.push(r?);
    }
    let mut results = Vec::with_capacity(grid.len());
    for (g, delta) in grid.iter().enumerate() {
        let mut contributions: Vec<(usize, f64)> = Vec::with_capacity(ds.len());
        let mut missing = 0;
        let mut projections = 0;
        let mut failure = None;
        for fold in per_fold_ok.iter_mut() {
            let outcome = std::mem::replace(
                &mut fold[g],
                Ok(FoldOutcome { contributions: Vec::new(), missing: 0, projections: 0 }),
            );
            match outcome {
                Ok(o) => {
                    contributions.extend(o.contributions);
                    missing += o.missing;
                    projections += o.projections;
                }
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        results.push(match failure {
            Some(e) => Err(e),
            None => {
                contributions.sort_unstable_by_key(|(i, _)| *i);
                EstimateResult::from_contributions(
                    delta,
                    contributions.into_iter().map(|(_, c)| c).collect(),
                    missing,
                    projections,
                )
            }
        });
    }
    Ok(results)
}

/// Cross-fitted estimate at a single δ.
pub fn estimate(
    ds: &Dataset,
    delta: &InterventionSpec,
    cfg: &EstimatorConfig,
    rng: &mut Rng,
) -> Result<EstimateResult> {
    estimate_grid(ds, std::slice::from_ref(delta), cfg, rng)?
        .pop()
        .expect("one result per grid entry")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::desk::{DeskConfig, DeskInstance, DESK_CONFOUNDER_COORD};

    fn unit(y: f64, w: &[u8]) -> Trajectory {
        Trajectory::new(y, w.to_vec(), w.iter().map(|_| vec![0.0]).collect()).unwrap()
    }

    #[test]
    fn overlap_band() {
        assert_eq!(project_overlap(0.3, 0.5, 0.01), 0.3);
        assert!((project_overlap(0.0001, 0.5, 0.01) - 0.005).abs() < 1e-15);
        assert!((project_overlap(0.9999, 0.5, 0.01) - 0.995).abs() < 1e-15);
        assert_eq!(project_overlap(0.4, 0.0, 0.01), 0.0);
        assert_eq!(project_overlap(0.4, 1.0, 0.01), 1.0);
    }

    #[test]
    fn omega_values() {
        for w in [0, 1] {
            assert_eq!(omega_weight(w, 1.0, 0.3, 0.3), 1.0);
        }
        assert!((omega_weight(1, 2.0, 0.5, 0.5) - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(omega_weight(0, 3.0, 0.0, project_overlap(0.2, 0.0, 0.01)), 1.0);
    }

    #[test]
    fn single_segment_observed_regime_gives_outcome() {
        let t = unit(2.5, &[1]);
        let mut nu = UnitNuisance::with_len(1);
        nu.p[0] = 0.4;
        nu.pi[0] = 0.4;
        nu.m0[0] = 7.0;
        nu.m1[0] = 7.0;
        nu.tm0[0] = 7.0;
        nu.tm1[0] = 7.0;
        let d = InterventionSpec::uniform(1.0, 1).unwrap();
        let c = influence_contribution(&t, &nu, &d).unwrap();
        assert!((c - 2.5).abs() < 1e-12);
    }

    #[test]
    fn contribution_is_linear_in_m_and_y() {
        let t = unit(1.3, &[1, 0, 1]);
        let nu = UnitNuisance {
            p: vec![0.3, 0.6, 0.5],
            pi: vec![0.2, 0.7, 0.45],
            m0: vec![0.1, -0.4, 0.9],
            m1: vec![1.1, 0.4, -0.2],
            tm0: vec![0.3, 0.2, 0.1],
            tm1: vec![0.5, -0.3, 0.6],
        };
        let d = InterventionSpec::new(vec![2.0, 0.5, 1.5]).unwrap();
        let base = influence_contribution(&t, &nu, &d).unwrap();
        let k = 3.7;
        let scale = |v: &Vec<f64>| v.iter().map(|x| x * k).collect();
        let scaled = UnitNuisance {
            m0: scale(&nu.m0),
            m1: scale(&nu.m1),
            tm0: scale(&nu.tm0),
            tm1: scale(&nu.tm1),
            ..nu.clone()
        };
        let t2 = unit(1.3 * k, &[1, 0, 1]);
        let c = influence_contribution(&t2, &scaled, &d).unwrap();
        assert!((c - k * base).abs() < 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn constant_m_telescopes_to_constant() {
        let t = unit(4.0, &[0, 1, 1]);
        let nu = UnitNuisance {
            p: vec![0.3, 0.6, 0.5],
            pi: vec![0.2, 0.7, 0.45],
            m0: vec![4.0; 3],
            m1: vec![4.0; 3],
            tm0: vec![4.0; 3],
            tm1: vec![4.0; 3],
        };
        let d = InterventionSpec::new(vec![2.0, 0.5, 1.5]).unwrap();
        assert!((influence_contribution(&t, &nu, &d).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_units() {
        let folds = assign_folds(103, 10, &mut Rng::new(1));
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn result_ci_contains_estimate() {
        let d = InterventionSpec::uniform(1.0, 1).unwrap();
        let r = EstimateResult::from_contributions(&d, vec![1.0, 2.0, 4.0], 0, 0).unwrap();
        assert!(r.ci_low <= r.psi_hat && r.psi_hat <= r.ci_high);
        assert!(r.residual_mean(r.psi_hat).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = EstimatorConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<EstimatorConfig>(&text).unwrap(), cfg);
        let sat: EstimatorConfig =
            toml::from_str("k_folds = 2\n[backend]\nkind = \"saturated\"\ncoords = [2]\n").unwrap();
        assert_eq!(sat.backend, Backend::Saturated(SaturatedConfig { coords: vec![2] }));
        assert!(toml::from_str::<EstimatorConfig>("k_fold = 2\n").is_err());
        assert!(toml::from_str::<EstimatorConfig>(
            "[backend]\nkind = \"saturated\"\ncoords = [2]\nextra = 1\n"
        )
        .is_err());
    }

    fn saturated(k: usize) -> EstimatorConfig {
        EstimatorConfig {
            k_folds: k,
            backend: Backend::Saturated(SaturatedConfig { coords: vec![DESK_CONFOUNDER_COORD] }),
            missing_strata: MissingStratumPolicy::Drop,
            ..EstimatorConfig::default()
        }
    }

    #[test]
    fn saturated_backend_on_desk_is_close_to_truth() {
        let desk = DeskInstance::new(DeskConfig::default()).unwrap();
        let ds = desk.simulate(8000, &mut Rng::new(11)).unwrap();
        for delta in [0.5, 2.0] {
            let spec = InterventionSpec::uniform(delta, 3).unwrap();
            let truth = desk.psi(&spec).unwrap();
            let r = estimate(&ds, &spec, &saturated(2), &mut Rng::new(5)).unwrap();
            assert!((r.psi_hat - truth).abs() <= 4.0 * r.std_error(), "{} vs {truth}", r.psi_hat);
        }
    }

    #[test]
    fn estimate_is_deterministic_and_grid_consistent() {
        let desk = DeskInstance::new(DeskConfig::default()).unwrap();
        let ds = desk.simulate(8000, &mut Rng::new(12)).unwrap();
        let one = InterventionSpec::uniform(1.0, 3).unwrap();
        let two = InterventionSpec::uniform(2.0, 3).unwrap();
        let a = estimate(&ds, &one, &saturated(2), &mut Rng::new(9)).unwrap();
        let b = estimate(&ds, &one, &saturated(2), &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let grid = estimate_grid(&ds, &[two, one.clone()], &saturated(2), &mut Rng::new(9)).unwrap();
        assert_eq!(grid[1].as_ref().unwrap(), &a);
        let strict = EstimatorConfig { missing_strata: MissingStratumPolicy::Error, ..saturated(2) };
        let r = estimate(&ds, &one, &strict, &mut Rng::new(9));
        if a.missing_strata > 0 {
            assert!(r.unwrap_err().is_missing_stratum());
        } else {
            assert_eq!(r.unwrap(), a);
        }
    }

    #[test]
    fn too_few_units_is_an_error() {
        let ds = Dataset::from_units(vec![unit(1.0, &[1]), unit(0.0, &[0])]).unwrap();
        let d = InterventionSpec::uniform(1.0, 1).unwrap();
        assert!(estimate(&ds, &d, &saturated(2), &mut Rng::new(1)).is_err());
    }
}
