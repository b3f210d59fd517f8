//! Incremental stochastic interventions on binary treatment paths.
//!
//! Under an incremental parameter `δ_s` the treatment probability `p` of
//! segment `s` is replaced by `q = δp / (δp + 1 − p)`, which multiplies the
//! odds of treatment by `δ_s`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::data_model::Dataset;
use crate::error::{Error, Result};

/// Per-segment incremental parameters, `delta[s - 1]` applies at segment `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionSpec {
    delta: Vec<f64>,
}

impl InterventionSpec {
    pub fn new(delta: Vec<f64>) -> Result<Self> {
        if delta.is_empty() {
            return Err(Error::InvalidArgument("empty incremental parameter vector".into()));
        }
        if let Some(d) = delta.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "incremental parameters must be positive and finite, got {d}"
            )));
        }
        Ok(Self { delta })
    }

    /// The same δ at every one of `s_max` positions.
    pub fn uniform(delta: f64, s_max: usize) -> Result<Self> {
        Self::new(vec![delta; s_max])
    }

    pub fn at(&self, s: usize) -> f64 {
        self.delta[s - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.delta
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn check_len(&self, s_max: usize) -> Result<()> {
        if self.delta.len() != s_max {
            return Err(Error::InvalidArgument(format!(
                "intervention has {} entries but the data has s_max {s_max}",
                self.delta.len()
            )));
        }
        Ok(())
    }

    pub fn is_observed_regime(&self) -> bool {
        self.delta.iter().all(|d| *d == 1.0)
    }
}

fn check_inputs(delta: f64, p: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "incremental parameter must be positive and finite, got {delta}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!(
            "probability must lie in [0, 1], got {p}"
        )));
    }
    Ok(())
}

/// `δp / (δp + 1 − p)`, exact at the endpoints and at δ = 1.
pub fn q_shift(delta: f64, p: f64) -> Result<f64> {
    check_inputs(delta, p)?;
    Ok(q_unchecked(delta, p))
}

pub(crate) fn q_unchecked(delta: f64, p: f64) -> f64 {
    if delta == 1.0 || p == 0.0 || p == 1.0 {
        return p;
    }
    delta * p / (delta * p + 1.0 - p)
}

/// Intervention mass of treatment value `w` at one segment.
pub fn dq_weight(w: u8, delta: f64, p: f64) -> Result<f64> {
    let q = q_shift(delta, p)?;
    match w {
        1 => Ok(q),
        0 => Ok(1.0 - q),
        other => Err(Error::InvalidArgument(format!(
            "treatment must be 0 or 1, got {other}"
        ))),
    }
}

/// Odds of `q_shift(δ, p)` divided by the odds of `p`.
pub fn odds_ratio(delta: f64, p: f64) -> Result<f64> {
    check_inputs(delta, p)?;
    if p == 0.0 || p == 1.0 {
        return Err(Error::InvalidArgument(format!(
            "odds are undefined at p = {p}"
        )));
    }
    let q = q_unchecked(delta, p);
    Ok(q / (1.0 - q) * ((1.0 - p) / p))
}

/// A treatment history `w̄_{s-1}` packed as bits, segment 1 most significant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HistoryKey {
    len: u8,
    bits: u32,
}

impl HistoryKey {
    pub const EMPTY: HistoryKey = HistoryKey { len: 0, bits: 0 };

    /// Key of `w` in full. Paths longer than 32 segments are not supported.
    pub fn of(w: &[u8]) -> Self {
        debug_assert!(w.len() <= 32);
        let bits = w.iter().fold(0u32, |acc, b| (acc << 1) | u32::from(*b & 1));
        Self {
            len: w.len() as u8,
            bits,
        }
    }

    /// History before segment `s` (1-based) of path `w`.
    pub fn before(w: &[u8], s: usize) -> Self {
        Self::of(&w[..s - 1])
    }

    pub fn len(&self) -> usize {
        usize::from(self.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// History extended by one more treatment.
    pub fn push(self, w: u8) -> Self {
        Self {
            len: self.len + 1,
            bits: (self.bits << 1) | u32::from(w & 1),
        }
    }

    pub fn bits(&self) -> Vec<u8> {
        (0..self.len)
            .rev()
            .map(|k| ((self.bits >> k) & 1) as u8)
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut key = Self::EMPTY;
        for c in text.chars() {
            key = match c {
                '0' => key.push(0),
                '1' => key.push(1),
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "history pattern '{text}' must contain only 0 and 1"
                    )))
                }
            };
        }
        Ok(key)
    }
}

impl fmt::Display for HistoryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.bits() {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PCell {
    pub count: u64,
    pub treated: u64,
}

impl PCell {
    pub fn p_hat(&self) -> f64 {
        self.treated as f64 / self.count as f64
    }
}

/// Saturated estimates of `P(W_s = 1 | W̄_{s-1}, S ≥ s)`, one table per
/// segment position.
#[derive(Debug, Clone, PartialEq)]
pub struct PTables {
    tables: Vec<BTreeMap<HistoryKey, PCell>>,
}

pub fn fit_p_tables(split: &Dataset) -> PTables {
    PTables::from_paths(split.s_max(), split.units().iter().map(|u| u.w.as_slice()))
}

impl PTables {
    pub fn from_paths<'a>(s_max: usize, paths: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut tables = vec![BTreeMap::<HistoryKey, PCell>::new(); s_max];
        for w in paths {
            let mut key = HistoryKey::EMPTY;
            for (idx, &wt) in w.iter().enumerate().take(s_max) {
                let cell = tables[idx].entry(key).or_default();
                cell.count += 1;
                cell.treated += u64::from(wt);
                key = key.push(wt);
            }
        }
        Self { tables }
    }

    pub fn s_max(&self) -> usize {
        self.tables.len()
    }

    pub fn cell(&self, s: usize, history: HistoryKey) -> Option<&PCell> {
        self.tables.get(s - 1)?.get(&history)
    }

    pub fn contains(&self, s: usize, history: HistoryKey) -> bool {
        self.cell(s, history).is_some()
    }

    /// `p̂_s(w̄_{s-1})`; a history never seen at `s` is a missing stratum.
    pub fn p(&self, s: usize, history: HistoryKey) -> Result<f64> {
        self.cell(s, history)
            .map(PCell::p_hat)
            .ok_or_else(|| Error::MissingStratum {
                segment: s,
                pattern: history.to_string(),
            })
    }

    /// Cells of segment `s` in pattern order.
    pub fn cells(&self, s: usize) -> impl Iterator<Item = (&HistoryKey, &PCell)> {
        self.tables[s - 1].iter()
    }

    /// Audit CSV with columns `s,pattern,count,p_hat`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Estimation(format!("writing p-tables: {e}"));
        w.write_record(["s", "pattern", "count", "p_hat"]).map_err(csv_err)?;
        for s in 1..=self.s_max() {
            for (key, cell) in self.cells(s) {
                w.write_record([
                    s.to_string(),
                    key.to_string(),
                    cell.count.to_string(),
                    cell.p_hat().to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::Estimation(format!("writing p-tables: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}
