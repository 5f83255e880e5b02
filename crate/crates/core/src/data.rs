//! Task and response-ranking records, with JSONL readers and writers.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled utterance `(x, y)` from an intent-detection dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub id: String,
    pub text: String,
    pub label: String,
}

impl LabeledUtterance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label: label.into(),
        }
    }
}

/// A `(context, response)` pair for response-ranking training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponsePair {
    pub context: String,
    pub response: String,
}

/// Checks id uniqueness and nonempty labels.
pub fn validate_dataset(data: &[LabeledUtterance]) -> Result<()> {
    let mut seen = HashSet::with_capacity(data.len());
    for u in data {
        if u.label.is_empty() {
            return Err(Error::Config(format!(
                "utterance `{}` has an empty label",
                u.id
            )));
        }
        if !seen.insert(u.id.as_str()) {
            return Err(Error::DuplicateId(u.id.clone()));
        }
    }
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_task_data(path: &Path) -> Result<Vec<LabeledUtterance>> {
    let data = read_jsonl(path)?;
    validate_dataset(&data)?;
    Ok(data)
}

pub fn write_task_data(path: &Path, data: &[LabeledUtterance]) -> Result<()> {
    write_jsonl(path, data)
}

pub fn read_response_pairs(path: &Path) -> Result<Vec<ResponsePair>> {
    let pairs: Vec<ResponsePair> = read_jsonl(path)?;
    if let Some(i) = pairs
        .iter()
        .position(|p| p.context.is_empty() || p.response.is_empty())
    {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "context and response must be nonempty".into(),
        });
    }
    Ok(pairs)
}

pub fn write_response_pairs(path: &Path, pairs: &[ResponsePair]) -> Result<()> {
    write_jsonl(path, pairs)
}

/// Distinct labels in sorted order.
pub fn label_set(data: &[LabeledUtterance]) -> Vec<String> {
    let mut labels: Vec<String> = data.iter().map(|u| u.label.clone()).collect();
    labels.sort();
    labels.dedup();
    labels
}
