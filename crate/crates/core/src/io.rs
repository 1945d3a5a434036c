//! File formats: JSON for graphs and models, CSV for samples.
//!
//! Samples are CSV with header `v0,...,v{n-1}` and an optional trailing
//! `u` column holding the generating source, which recovery ignores.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alphabet::{AlphabetError, AlphabetSpec, DaryModel, DaryModelFile};
use crate::dag::{Dag, DagError, DagFile};
use crate::model::{MixtureModel, ModelError, ModelFile, SampleSet};
use crate::recovery::{BoundLedger, Diagnostics, RecoveredModel};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Json { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}:{line}: {message}")]
    Csv { path: PathBuf, line: u64, message: String },
    #[error("{path}: {source}")]
    Dag { path: PathBuf, source: DagError },
    #[error("{path}: {source}")]
    Model { path: PathBuf, source: ModelError },
    #[error("{path}: {source}")]
    Alphabet { path: PathBuf, source: AlphabetError },
}

fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|source| IoError::Io { path: path.into(), source })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    serde_json::from_reader(open(path)?).map_err(|e| IoError::Json {
        path: path.into(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline. Field order is fixed by the types,
/// so equal values give byte-identical files.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let io_err = |source| IoError::Io { path: path.into(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::Io { path: path.into(), source: e.into() })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err)
}

pub fn read_dag(path: &Path) -> Result<Dag, IoError> {
    let file: DagFile = read_json(path)?;
    Dag::from_file(&file).map_err(|source| IoError::Dag { path: path.into(), source })
}

pub fn write_dag(path: &Path, g: &Dag) -> Result<(), IoError> {
    write_json(path, &g.to_file())
}

/// Reads a model file; recovered-model documents are accepted too, their
/// extra sections are ignored.
pub fn read_model(path: &Path, g: &Dag) -> Result<MixtureModel, IoError> {
    let file: ModelFile = read_json(path)?;
    file.into_model(g).map_err(|source| IoError::Model { path: path.into(), source })
}

pub fn write_model(path: &Path, m: &MixtureModel) -> Result<(), IoError> {
    write_json(path, &ModelFile::from_model(m))
}

/// A model file plus the recovery diagnostics and, when an oracle error
/// level is known, the stability-bound ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredDocument {
    #[serde(flatten)]
    pub model: ModelFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundLedger>,
}

impl RecoveredDocument {
    pub fn new(rec: &RecoveredModel, eps: Option<f64>) -> Self {
        RecoveredDocument {
            model: ModelFile::from_model(&rec.model),
            diagnostics: Some(rec.diagnostics.clone()),
            bounds: eps.map(|e| rec.bound_ledger(e)),
        }
    }
}

pub fn read_recovered(path: &Path) -> Result<RecoveredDocument, IoError> {
    read_json(path)
}

/// Reduced binary graph with the block layout needed to lift back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedGraphFile {
    #[serde(flatten)]
    pub dag: DagFile,
    pub alphabet: AlphabetSpec,
}

pub fn read_dary_model(path: &Path, g: &Dag) -> Result<DaryModel, IoError> {
    let file: DaryModelFile = read_json(path)?;
    file.into_model(g).map_err(|source| IoError::Alphabet { path: path.into(), source })
}

pub fn write_dary_model(path: &Path, m: &DaryModel) -> Result<(), IoError> {
    write_json(path, &DaryModelFile::from_model(m))
}

/// Reads samples with cells in `0..d`. `n`, when given, must match the
/// header.
pub fn read_samples(path: &Path, n: Option<usize>, d: usize) -> Result<SampleSet, IoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(open(path)?);
    let csv_err = |line: u64, message: String| IoError::Csv { path: path.into(), line, message };
    let header = reader.headers().map_err(|e| csv_err(1, e.to_string()))?.clone();
    let names: Vec<&str> = header.iter().collect();
    let has_u = names.last() == Some(&"u");
    let width = names.len() - usize::from(has_u);
    if let Some((i, name)) = names[..width].iter().enumerate().find(|(i, name)| **name != format!("v{i}")) {
        return Err(csv_err(1, format!("column {i} is named {name:?}, expected \"v{i}\"")));
    }
    if let Some(n) = n.filter(|&n| n != width) {
        return Err(csv_err(1, format!("header has {width} vertices, the graph has {n}")));
    }

    let mut samples = SampleSet::new(width);
    let mut sources = has_u.then(Vec::new);
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(width);
        for (i, cell) in record.iter().take(width).enumerate() {
            match cell.parse::<u8>() {
                Ok(x) if (x as usize) < d => row.push(x),
                _ => return Err(csv_err(line, format!("v{i} = {cell:?} is not in 0..{d}"))),
            }
        }
        if let Some(src) = sources.as_mut() {
            let cell = &record[width];
            src.push(cell.parse::<usize>().map_err(|_| csv_err(line, format!("u = {cell:?} is not a source index")))?);
        }
        samples.rows.push(row);
    }
    samples.sources = sources;
    Ok(samples)
}

pub fn write_samples(path: &Path, samples: &SampleSet, with_sources: bool) -> Result<(), IoError> {
    let io_err = |e: csv::Error| IoError::Csv { path: path.into(), line: 0, message: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let with_sources = with_sources && samples.sources.is_some();
    let mut header: Vec<String> = (0..samples.n).map(|i| format!("v{i}")).collect();
    if with_sources {
        header.push("u".into());
    }
    w.write_record(&header).map_err(io_err)?;
    for (j, row) in samples.rows.iter().enumerate() {
        let mut cells: Vec<String> = row.iter().map(u8::to_string).collect();
        if with_sources {
            cells.push(samples.sources.as_ref().expect("checked")[j].to_string());
        }
        w.write_record(&cells).map_err(io_err)?;
    }
    w.flush().map_err(|source| IoError::Io { path: path.into(), source })
}
