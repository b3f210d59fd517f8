//! Dataset types, the JSON-lines dataset file, and ingestion of externally
//! produced per-segment embeddings.
//!
//! Dataset file layout (version 1):
//!
//! ```text
//! {"format":"dyngpi-dataset","version":1,"n":2,"d_r":2,"s_max":2}
//! {"y":1.0,"w":[1,0],"r":[[0.0,0.0],[1.0,1.0]]}
//! {"y":0.5,"w":[0],"r":[[0.5,0.25]]}
//! ```
//!
//! The first line is the header, then one unit per line with keys in the
//! order `y`, `w`, `r`. Writing is canonical: identical datasets produce
//! identical bytes.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "dyngpi-dataset";
pub const DATASET_VERSION: u32 = 1;

/// One unit: outcome, treatment path and embedding path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub y: f64,
    pub w: Vec<u8>,
    /// Segment embeddings, `s_len × d_r` row-major.
    r: Vec<f64>,
    d_r: usize,
}

impl Trajectory {
    pub fn new(y: f64, w: Vec<u8>, r: Vec<Vec<f64>>) -> Result<Self> {
        if w.len() != r.len() {
            return Err(Error::InvalidArgument(format!(
                "treatment path has {} segments but embedding path has {}",
                w.len(),
                r.len()
            )));
        }
        let d_r = r.first().map_or(0, Vec::len);
        if let Some(s) = r.iter().position(|v| v.len() != d_r) {
            return Err(Error::InvalidArgument(format!(
                "segment {} has embedding dimension {} (expected {d_r})",
                s + 1,
                r[s].len()
            )));
        }
        Ok(Self::from_flat(y, w, r.concat(), d_r))
    }

    pub(crate) fn from_flat(y: f64, w: Vec<u8>, r: Vec<f64>, d_r: usize) -> Self {
        Self { y, w, r, d_r }
    }

    pub fn s_len(&self) -> usize {
        self.w.len()
    }

    pub fn d_r(&self) -> usize {
        self.d_r
    }

    /// Embedding of segment `s` (1-based).
    pub fn segment(&self, s: usize) -> &[f64] {
        &self.r[(s - 1) * self.d_r..s * self.d_r]
    }

    pub fn segment_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.r[(s - 1) * self.d_r..s * self.d_r]
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &[f64]> {
        self.r.chunks_exact(self.d_r.max(1)).take(self.s_len())
    }

    fn validate(&self, d_r: usize, s_max: usize) -> std::result::Result<(), String> {
        if self.s_len() == 0 {
            return Err("has no segments".into());
        }
        if self.s_len() > s_max {
            return Err(format!("has {} segments, above s_max {s_max}", self.s_len()));
        }
        if self.d_r != d_r {
            return Err(format!("embedding dimension {} differs from {d_r}", self.d_r));
        }
        if self.r.len() != self.s_len() * d_r {
            return Err(format!(
                "treatment path has {} segments but {} embedding values were given",
                self.s_len(),
                self.r.len()
            ));
        }
        if let Some(s) = self.w.iter().position(|w| *w > 1) {
            return Err(format!("segment {} has non-binary treatment {}", s + 1, self.w[s]));
        }
        if !self.y.is_finite() {
            return Err("outcome is not finite".into());
        }
        if let Some(pos) = self.r.iter().position(|v| !v.is_finite()) {
            return Err(format!(
                "segment {} has a non-finite embedding entry",
                pos / d_r + 1
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    units: Vec<Trajectory>,
    d_r: usize,
    s_max: usize,
}

impl Dataset {
    pub fn new(units: Vec<Trajectory>, d_r: usize, s_max: usize) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::InvalidArgument("a dataset needs at least one unit".into()));
        }
        if d_r == 0 || s_max == 0 {
            return Err(Error::InvalidArgument("d_r and s_max must be positive".into()));
        }
        for (i, u) in units.iter().enumerate() {
            u.validate(d_r, s_max)
                .map_err(|message| Error::InvalidUnit { unit: i, message })?;
        }
        Ok(Self { units, d_r, s_max })
    }

    /// Builds a dataset whose `d_r` and `s_max` are read off the units.
    pub fn from_units(units: Vec<Trajectory>) -> Result<Self> {
        let d_r = units.first().map_or(0, Trajectory::d_r);
        let s_max = units.iter().map(Trajectory::s_len).max().unwrap_or(0);
        Self::new(units, d_r, s_max)
    }

    pub fn units(&self) -> &[Trajectory] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn d_r(&self) -> usize {
        self.d_r
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    /// Sub-dataset of the given unit indices, keeping `d_r` and `s_max`.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let units = indices.iter().map(|&i| self.units[i].clone()).collect();
        Dataset::new(units, self.d_r, self.s_max)
    }

    pub fn outcome_mean(&self) -> f64 {
        self.units.iter().map(|u| u.y).sum::<f64>() / self.len() as f64
    }
}

/// Simulator-only latent quantities, aligned with the dataset's units.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTruth {
    pub units: Vec<UnitLatent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitLatent {
    /// Confounder path, one `p_u`-vector per segment.
    pub u: Vec<Vec<f64>>,
    pub eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    n: usize,
    d_r: usize,
    s_max: usize,
}

#[derive(Serialize)]
struct UnitOut<'a> {
    y: f64,
    w: &'a [u8],
    r: Vec<&'a [f64]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UnitIn {
    y: f64,
    w: Vec<u8>,
    r: Vec<Vec<f64>>,
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("refusing to save an empty dataset".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_dataset(ds, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_dataset(ds: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        n: ds.len(),
        d_r: ds.d_r,
        s_max: ds.s_max,
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for u in &ds.units {
        let row = UnitOut {
            y: u.y,
            w: &u.w,
            r: u.embeddings().collect(),
        };
        serde_json::to_writer(&mut *out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| parse_err(1, format!("bad header: {e}")))?
        }
        None => return Err(parse_err(1, "empty file".into())),
    };
    if header.format != DATASET_FORMAT {
        return Err(parse_err(1, format!("unknown format '{}'", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported version {} (expected {DATASET_VERSION})", header.version),
        ));
    }
    let mut units = Vec::with_capacity(header.n);
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let unit: UnitIn =
            serde_json::from_str(&line).map_err(|e| parse_err(idx + 1, e.to_string()))?;
        let unit_index = units.len();
        if unit.w.len() != unit.r.len() {
            return Err(Error::InvalidUnit {
                unit: unit_index,
                message: format!(
                    "len(w) = {} but len(r) = {}",
                    unit.w.len(),
                    unit.r.len()
                ),
            });
        }
        if let Some(s) = unit.r.iter().position(|v| v.len() != header.d_r) {
            return Err(Error::InvalidUnit {
                unit: unit_index,
                message: format!(
                    "segment {} has embedding dimension {} (header says {})",
                    s + 1,
                    unit.r[s].len(),
                    header.d_r
                ),
            });
        }
        units.push(Trajectory::from_flat(unit.y, unit.w, unit.r.concat(), header.d_r));
    }
    if units.len() != header.n {
        return Err(parse_err(
            1,
            format!("header declares {} units, file holds {}", header.n, units.len()),
        ));
    }
    Dataset::new(units, header.d_r, header.s_max)
}

/// Assembles a dataset from an embeddings file, an outcomes CSV and a
/// treatments CSV.
///
/// * embeddings: JSON-lines, one unit per line, either a bare array of
///   segment vectors or `{"unit_id": .., "r": [[..], ..]}`. A bare array
///   takes its 0-based line index as unit id. Values may be 32-bit floats;
///   they are widened to `f64`.
/// * outcomes: CSV with header `unit_id,y`.
/// * treatments: CSV with header `unit_id,segment_index,w`, segment index
///   1-based, one row per segment.
pub fn ingest_embeddings(
    embeddings_path: &Path,
    outcomes_path: &Path,
    treatments_path: &Path,
) -> Result<Dataset> {
    let embeddings = read_embeddings(embeddings_path)?;
    let outcomes = read_outcomes(outcomes_path)?;
    let treatments = read_treatments(treatments_path)?;

    if outcomes.len() != embeddings.len() {
        return Err(Error::Misaligned(format!(
            "outcomes file has {} rows but embeddings file has {} units",
            outcomes.len(),
            embeddings.len()
        )));
    }
    if treatments.len() != embeddings.len() {
        return Err(Error::Misaligned(format!(
            "treatments file covers {} units but embeddings file has {} units",
            treatments.len(),
            embeddings.len()
        )));
    }
    let mut units = Vec::with_capacity(embeddings.len());
    for (idx, (id, r)) in embeddings.into_iter().enumerate() {
        let y = *outcomes.get(&id).ok_or_else(|| {
            Error::Misaligned(format!("unit '{id}' has embeddings but no outcome"))
        })?;
        let segs = treatments.get(&id).ok_or_else(|| {
            Error::Misaligned(format!("unit '{id}' has embeddings but no treatments"))
        })?;
        if segs.len() != r.len() {
            return Err(Error::Misaligned(format!(
                "unit '{id}' has {} embedding segments but {} treatment rows",
                r.len(),
                segs.len()
            )));
        }
        let mut w = vec![0u8; r.len()];
        let mut seen = vec![false; r.len()];
        for &(s, value) in segs {
            if s == 0 || s > r.len() || seen[s - 1] {
                return Err(Error::Misaligned(format!(
                    "unit '{id}' has an invalid or repeated segment_index {s}"
                )));
            }
            seen[s - 1] = true;
            w[s - 1] = value;
        }
        let traj = Trajectory::new(y, w, r).map_err(|e| Error::InvalidUnit {
            unit: idx,
            message: e.to_string(),
        })?;
        units.push(traj);
    }
    Dataset::from_units(units)
}

fn read_embeddings(path: &Path) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Line {
        Bare(Vec<Vec<f32>>),
        Keyed { unit_id: serde_json::Value, r: Vec<Vec<f32>> },
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let (id, r) = match parsed {
            Line::Bare(r) => (out.len().to_string(), r),
            Line::Keyed { unit_id, r } => (json_id(&unit_id), r),
        };
        let widened = r
            .into_iter()
            .map(|v| v.into_iter().map(f64::from).collect())
            .collect();
        out.push((id, widened));
    }
    Ok(out)
}

fn json_id(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn csv_err(path: &Path, line: u64, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message: message.to_string(),
    }
}

fn read_outcomes(path: &Path) -> Result<HashMap<String, f64>> {
    #[derive(Deserialize)]
    struct Row {
        unit_id: String,
        y: f64,
    }
    let mut out = HashMap::new();
    let mut reader = csv_reader(path)?;
    for rec in reader.deserialize::<Row>() {
        let row = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(path, line, e)
        })?;
        if out.insert(row.unit_id.clone(), row.y).is_some() {
            return Err(Error::Misaligned(format!(
                "unit '{}' appears twice in the outcomes file",
                row.unit_id
            )));
        }
    }
    Ok(out)
}

fn read_treatments(path: &Path) -> Result<HashMap<String, Vec<(usize, u8)>>> {
    #[derive(Deserialize)]
    struct Row {
        unit_id: String,
        segment_index: usize,
        w: f64,
    }
    let mut out: HashMap<String, Vec<(usize, u8)>> = HashMap::new();
    let mut reader = csv_reader(path)?;
    let mut records = reader.deserialize::<Row>();
    let mut line = 1u64;
    while let Some(rec) = records.next() {
        line += 1;
        let row = rec.map_err(|e| {
            let l = e.position().map_or(line, |p| p.line());
            csv_err(path, l, e)
        })?;
        let w = match row.w {
            v if v == 0.0 => 0,
            v if v == 1.0 => 1,
            v => {
                return Err(csv_err(
                    path,
                    line,
                    format!(
                        "treatment for unit '{}' segment {} must be 0 or 1, got {v}",
                        row.unit_id, row.segment_index
                    ),
                ))
            }
        };
        out.entry(row.unit_id).or_default().push((row.segment_index, w));
    }
    Ok(out)
}
