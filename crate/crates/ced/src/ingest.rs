//! JSONL example files.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ced_core::corpus::Provenance;
use ced_core::{CorpusError, Example, Pool};
use serde_json::{Map, Value};

use crate::config::Lineage;
use crate::error::{Error, Result};
use crate::store::{self, Header, POOL_FORMAT};

const REQUIRED: [&str; 6] = ["id", "dataset", "task", "question", "answer", "split"];
const OPTIONAL: [&str; 2] = ["background", "choices"];

/// Examples paired with their 1-based line numbers.
pub type NumberedExamples = Vec<(usize, Example)>;

/// Reads examples from one file, skipping blank lines and an optional leading
/// header line (an object with a `format` key).
pub fn read_examples(path: &Path) -> Result<(Option<Header>, NumberedExamples)> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut header = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: "expected a JSON object".into(),
            });
        };
        if out.is_empty() && header.is_none() && obj.contains_key("format") {
            let h: Header = serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("bad header: {e}"),
            })?;
            if h.format != POOL_FORMAT {
                return Err(Error::artifact(path, format!("expected format {POOL_FORMAT}, found {}", h.format)));
            }
            header = Some(h);
            continue;
        }
        out.push((line_no, parse_example(path, line_no, obj)?));
    }
    Ok((header, out))
}

fn parse_example(path: &Path, line: usize, obj: Map<String, Value>) -> Result<Example> {
    let schema = |field: &str, reason: &str| Error::Schema {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        reason: reason.to_string(),
    };
    for field in REQUIRED {
        match obj.get(field) {
            None => return Err(schema(field, "is missing")),
            Some(Value::String(_)) => {}
            Some(_) => return Err(schema(field, "must be a string")),
        }
    }
    if let Some(key) = obj.keys().find(|k| !REQUIRED.contains(&k.as_str()) && !OPTIONAL.contains(&k.as_str())) {
        return Err(schema(key, "is not a known field"));
    }
    match obj.get("background") {
        None | Some(Value::String(_)) => {}
        Some(_) => return Err(schema("background", "must be a string")),
    }
    match obj.get("choices") {
        None => {}
        Some(Value::Array(items)) if items.iter().all(Value::is_string) => {}
        Some(_) => return Err(schema("choices", "must be a list of strings")),
    }
    for (field, allowed) in [
        ("task", &["binary", "multichoice", "extractive_qa", "abstractive_qa"][..]),
        ("split", &["candidate", "dev", "test"][..]),
    ] {
        let v = obj[field].as_str().unwrap_or_default();
        if !allowed.contains(&v) {
            return Err(schema(field, &format!("must be one of {}", allowed.join(", "))));
        }
    }
    let example: Example =
        serde_json::from_value(Value::Object(obj)).map_err(|e| schema("example", &e.to_string()))?;
    example.validate().map_err(|e| match e {
        CorpusError::Schema { field, reason, .. } => schema(field, &reason),
        other => Error::Corpus(other),
    })?;
    Ok(example)
}

/// Merges example files into one validated pool; duplicate ids are reported
/// at their second occurrence.
pub fn ingest(paths: &[&Path]) -> Result<Pool> {
    let mut seen: HashMap<String, (PathBuf, usize)> = HashMap::new();
    let mut examples = Vec::new();
    for path in paths {
        let (_, rows) = read_examples(path)?;
        for (line, ex) in rows {
            if seen.insert(ex.id.clone(), (path.to_path_buf(), line)).is_some() {
                return Err(Error::DuplicateId {
                    path: path.to_path_buf(),
                    line,
                    id: ex.id,
                });
            }
            examples.push(ex);
        }
    }
    let source = paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    Ok(Pool::new(examples, Provenance { source, seed: None })?)
}

pub fn write_pool(path: &Path, lineage: Option<&Lineage>, pool: &Pool) -> Result<()> {
    let header = lineage.map(|l| Header::new(POOL_FORMAT, l));
    store::write_jsonl(path, header.as_ref(), pool.examples())
}

/// Reads a pool written by [`write_pool`], checking its lineage.
pub fn read_pool(path: &Path, lineage: &Lineage) -> Result<Pool> {
    let (header, rows) = read_examples(path)?;
    header
        .ok_or_else(|| Error::artifact(path, "missing header line"))?
        .check(path, POOL_FORMAT, lineage)?;
    let examples = rows.into_iter().map(|(_, e)| e).collect();
    Ok(Pool::new(
        examples,
        Provenance {
            source: path.display().to_string(),
            seed: Some(lineage.seeds.sample),
        },
    )?)
}
