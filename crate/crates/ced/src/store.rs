//! On-disk artifacts of a run directory. Every artifact carries a header with
//! its format tag and the lineage it was produced under.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ced_core::ced::{Cell, ScoreMatrix};
use ced_core::cluster::ClusterAssignment;
use ced_core::tokenize::{TokenId, Vocabulary};
use ced_core::{BaseModel, TargetModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{Lineage, Seeds};
use crate::error::{Error, Result};

pub const POOL_FORMAT: &str = "ced-pool/1";
pub const BASE_FORMAT: &str = "ced-base/1";
pub const TARGET_FORMAT: &str = "ced-target/1";
pub const TARGET_INDEX_FORMAT: &str = "ced-target-index/1";
pub const SCORES_FORMAT: &str = "ced-scores/1";
pub const RANKINGS_FORMAT: &str = "ced-rankings/1";
pub const SELECTIONS_FORMAT: &str = "ced-selections/1";
pub const PROMPTS_FORMAT: &str = "ced-prompts/1";
pub const CLUSTERS_FORMAT: &str = "ced-clusters/1";
pub const GRADCHECK_FORMAT: &str = "ced-gradcheck/1";
pub const REPORT_FORMAT: &str = "ced-report/1";
pub const LOSSES_FORMAT: &str = "ced-sorted-losses/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub config_hash: String,
    pub seeds: Seeds,
}

impl Header {
    pub fn new(format: &str, lineage: &Lineage) -> Self {
        Header {
            format: format.into(),
            config_hash: lineage.config_hash.clone(),
            seeds: lineage.seeds,
        }
    }

    /// Fails unless this header names `format` and was produced under `lineage`.
    pub fn check(&self, path: &Path, format: &str, lineage: &Lineage) -> Result<()> {
        if self.format != format {
            return Err(Error::artifact(
                path,
                format!("expected format {format}, found {}", self.format),
            ));
        }
        if self.config_hash != lineage.config_hash || self.seeds != lineage.seeds {
            return Err(Error::Lineage {
                artifact: path.to_path_buf(),
                expected: lineage.config_hash.clone(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}

/// JSON document whose top level holds the header fields next to the body.
#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    #[serde(flatten)]
    header: Header,
    #[serde(flatten)]
    body: T,
}

/// Writes through a sibling temporary file so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, header: Header, body: &T) -> Result<()> {
    let doc = Stamped { header, body };
    let mut bytes = serde_json::to_vec_pretty(&doc).map_err(|e| Error::artifact(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, format: &str, lineage: &Lineage) -> Result<T> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let doc: Stamped<serde_json::Value> =
        serde_json::from_slice(&bytes).map_err(|e| Error::artifact(path, e))?;
    doc.header.check(path, format, lineage)?;
    serde_json::from_value(doc.body).map_err(|e| Error::artifact(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&Header>, rows: &[T]) -> Result<()> {
    fn push(out: &mut Vec<u8>, path: &Path, v: &impl Serialize) -> Result<()> {
        serde_json::to_writer(&mut *out, v).map_err(|e| Error::artifact(path, e))?;
        out.push(b'\n');
        Ok(())
    }
    let mut out = Vec::new();
    if let Some(h) = header {
        push(&mut out, path, h)?;
    }
    for r in rows {
        push(&mut out, path, r)?;
    }
    write_atomic(path, &out)
}

/// Reads a headed JSONL artifact; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, format: &str, lineage: &Lineage) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut rows = Vec::new();
    let mut header = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        };
        if header.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(parse_err)?;
            h.check(path, format, lineage)?;
            header = Some(h);
        } else {
            rows.push(serde_json::from_str(&line).map_err(parse_err)?);
        }
    }
    if header.is_none() {
        return Err(Error::artifact(path, "missing header line"));
    }
    Ok(rows)
}

// ---------------------------------------------------------------- models

#[derive(Serialize, Deserialize)]
struct BaseBody {
    order: usize,
    smoothing: f64,
    weights: Vec<f64>,
    fingerprint: u64,
    vocab: Vocabulary,
    entries: Vec<(Vec<TokenId>, u32)>,
}

pub fn write_base(path: &Path, lineage: &Lineage, base: &BaseModel) -> Result<()> {
    let body = BaseBody {
        order: base.order(),
        smoothing: base.smoothing(),
        weights: base.weights().to_vec(),
        fingerprint: base.fingerprint(),
        vocab: base.vocab().clone(),
        entries: base.counts().entries(),
    };
    write_json(path, Header::new(BASE_FORMAT, lineage), &body)
}

pub fn read_base(path: &Path, lineage: &Lineage) -> Result<BaseModel> {
    let b: BaseBody = read_json(path, BASE_FORMAT, lineage)?;
    let base = BaseModel::from_parts(b.vocab, b.order, b.smoothing, b.weights, b.entries)
        .map_err(|e| Error::artifact(path, e))?;
    if base.fingerprint() != b.fingerprint {
        return Err(Error::artifact(path, "fingerprint does not match contents"));
    }
    Ok(base)
}

#[derive(Serialize, Deserialize)]
struct TargetBody {
    name: String,
    source_ids: Vec<String>,
    lambda: f64,
    order: usize,
    base_fingerprint: u64,
    entries: Vec<(Vec<TokenId>, u32)>,
}

#[derive(Serialize, Deserialize)]
struct TargetIndex {
    names: Vec<String>,
    files: Vec<String>,
}

/// Writes `dir/index.json` plus one `NNNNN.json` per model.
pub fn write_targets(dir: &Path, lineage: &Lineage, models: &[TargetModel]) -> Result<()> {
    let mut files = Vec::with_capacity(models.len());
    for (i, m) in models.iter().enumerate() {
        let file = format!("{i:05}.json");
        let body = TargetBody {
            name: m.name.clone(),
            source_ids: m.source_ids.clone(),
            lambda: m.lambda(),
            order: m.counts().order(),
            base_fingerprint: m.base_fingerprint(),
            entries: m.counts().entries(),
        };
        write_json(&dir.join(&file), Header::new(TARGET_FORMAT, lineage), &body)?;
        files.push(file);
    }
    let index = TargetIndex {
        names: models.iter().map(|m| m.name.clone()).collect(),
        files,
    };
    // The index is written last and marks the directory complete.
    write_json(&dir.join("index.json"), Header::new(TARGET_INDEX_FORMAT, lineage), &index)
}

pub fn read_targets(dir: &Path, lineage: &Lineage) -> Result<Vec<TargetModel>> {
    let index_path = dir.join("index.json");
    let index: TargetIndex = read_json(&index_path, TARGET_INDEX_FORMAT, lineage)?;
    if index.names.len() != index.files.len() {
        return Err(Error::artifact(&index_path, "names and files differ in length"));
    }
    index
        .files
        .iter()
        .zip(&index.names)
        .map(|(file, name)| {
            let path = dir.join(file);
            let t: TargetBody = read_json(&path, TARGET_FORMAT, lineage)?;
            if &t.name != name {
                return Err(Error::artifact(&path, format!("model {:?} listed as {name:?}", t.name)));
            }
            TargetModel::from_parts(t.name, t.source_ids, t.lambda, t.order, t.base_fingerprint, t.entries)
                .map_err(|e| Error::artifact(&path, e))
        })
        .collect()
}

// ---------------------------------------------------------------- scores

fn seeds_line(s: &Seeds) -> String {
    format!(
        "sample={},cluster={},policy={},bootstrap={},gradcheck={}",
        s.sample, s.cluster, s.policy, s.bootstrap, s.gradcheck
    )
}

fn parse_seeds(path: &Path, text: &str) -> Result<Seeds> {
    let mut seeds = Seeds::default();
    for part in text.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| Error::artifact(path, format!("bad seed entry {part:?}")))?;
        let value: u64 = value
            .parse()
            .map_err(|_| Error::artifact(path, format!("bad seed value {value:?}")))?;
        let slot = match key {
            "sample" => &mut seeds.sample,
            "cluster" => &mut seeds.cluster,
            "policy" => &mut seeds.policy,
            "bootstrap" => &mut seeds.bootstrap,
            "gradcheck" => &mut seeds.gradcheck,
            _ => return Err(Error::artifact(path, format!("unknown seed {key:?}"))),
        };
        *slot = value;
    }
    Ok(seeds)
}

fn comment_header(h: &Header) -> String {
    format!(
        "# format={}\n# config_hash={}\n# seeds={}\n",
        h.format,
        h.config_hash,
        seeds_line(&h.seeds)
    )
}

fn parse_comment_header(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<Header> {
    let (mut format, mut hash, mut seeds) = (None, None, None);
    for line in lines {
        match line.split_once('=') {
            Some(("format", v)) => format = Some(v.to_string()),
            Some(("config_hash", v)) => hash = Some(v.to_string()),
            Some(("seeds", v)) => seeds = Some(parse_seeds(path, v)?),
            _ => return Err(Error::artifact(path, format!("bad header line {line:?}"))),
        }
    }
    match (format, hash, seeds) {
        (Some(format), Some(config_hash), Some(seeds)) => Ok(Header {
            format,
            config_hash,
            seeds,
        }),
        _ => Err(Error::artifact(path, "incomplete header")),
    }
}

/// Splits `#`-prefixed header lines from the CSV payload.
fn read_csv_artifact(path: &Path, format: &str, lineage: &Lineage) -> Result<String> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut comments = Vec::new();
    let mut rest = text.as_str();
    while let Some(line) = rest.strip_prefix("# ") {
        let (head, tail) = line.split_once('\n').unwrap_or((line, ""));
        comments.push(head.to_string());
        rest = tail;
    }
    parse_comment_header(path, comments)?.check(path, format, lineage)?;
    Ok(rest.to_string())
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::artifact(path, e)
}

/// Long-format table `test_id,candidate_id,base_ce,target_ce,ced` in row-major order.
pub fn write_scores(path: &Path, lineage: &Lineage, m: &ScoreMatrix) -> Result<()> {
    let mut out = comment_header(&Header::new(SCORES_FORMAT, lineage)).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["test_id", "candidate_id", "base_ce", "target_ce", "ced"])
            .map_err(csv_err(path))?;
        for s in m.scores() {
            w.write_record([
                s.test_id,
                s.candidate_id,
                s.base_ce.to_string(),
                s.target_ce.to_string(),
                s.ced.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
        w.flush().map_err(Error::io(path))?;
    }
    write_atomic(path, &out)
}

#[derive(Deserialize)]
struct ScoreRecord {
    test_id: String,
    candidate_id: String,
    base_ce: f64,
    target_ce: f64,
    ced: f64,
}

pub fn read_scores(path: &Path, lineage: &Lineage) -> Result<ScoreMatrix> {
    let payload = read_csv_artifact(path, SCORES_FORMAT, lineage)?;
    let mut r = csv::Reader::from_reader(payload.as_bytes());
    let mut test_ids: Vec<String> = Vec::new();
    let mut cand_ids: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<Cell>> = Vec::new();
    for rec in r.deserialize::<ScoreRecord>() {
        let rec = rec.map_err(csv_err(path))?;
        if test_ids.last() != Some(&rec.test_id) {
            test_ids.push(rec.test_id.clone());
            rows.push(Vec::new());
        }
        let row = rows.last_mut().expect("row pushed above");
        if test_ids.len() == 1 {
            cand_ids.push(rec.candidate_id.clone());
        } else if cand_ids.get(row.len()) != Some(&rec.candidate_id) {
            return Err(Error::artifact(path, format!("unexpected candidate {:?} for test {:?}", rec.candidate_id, rec.test_id)));
        }
        let cell = Cell::new(rec.base_ce, rec.target_ce);
        if cell.ced.to_bits() != rec.ced.to_bits() {
            return Err(Error::artifact(path, format!("ced column disagrees with base_ce and target_ce for {:?}", rec.test_id)));
        }
        row.push(cell);
    }
    ScoreMatrix::new(test_ids, cand_ids, rows).map_err(|e| Error::artifact(path, e))
}

/// Plain CSV with a lineage header; used for exports.
pub fn write_csv(path: &Path, header: Header, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = comment_header(&header).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(columns).map_err(csv_err(path))?;
        for r in rows {
            w.write_record(r).map_err(csv_err(path))?;
        }
        w.flush().map_err(Error::io(path))?;
    }
    write_atomic(path, &out)
}

// ---------------------------------------------------------------- clusters

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub cluster_index: usize,
    pub seed_id: String,
    pub member_ids: Vec<String>,
}

pub fn write_clusters(path: &Path, models_dir: &Path, lineage: &Lineage, a: &ClusterAssignment) -> Result<()> {
    write_targets(models_dir, lineage, &a.models)?;
    let rows: Vec<ClusterRecord> = (0..a.k)
        .map(|i| ClusterRecord {
            cluster_index: i,
            seed_id: a.seed_ids[i].clone(),
            member_ids: a.members[i].clone(),
        })
        .collect();
    write_jsonl(path, Some(&Header::new(CLUSTERS_FORMAT, lineage)), &rows)
}

pub fn read_clusters(path: &Path, models_dir: &Path, lineage: &Lineage) -> Result<ClusterAssignment> {
    let mut rows: Vec<ClusterRecord> = read_jsonl(path, CLUSTERS_FORMAT, lineage)?;
    rows.sort_by_key(|r| r.cluster_index);
    if rows.iter().enumerate().any(|(i, r)| r.cluster_index != i) || rows.is_empty() {
        return Err(Error::artifact(path, "cluster indices must be 0..k"));
    }
    let k = rows.len();
    let n: usize = rows.iter().map(|r| r.member_ids.len()).sum();
    let models = read_targets(models_dir, lineage)?;
    if models.len() != k {
        return Err(Error::artifact(models_dir, format!("{} models for {k} clusters", models.len())));
    }
    Ok(ClusterAssignment {
        k,
        capacity: n.div_ceil(k),
        seed_ids: rows.iter().map(|r| r.seed_id.clone()).collect(),
        members: rows.into_iter().map(|r| r.member_ids).collect(),
        models,
    })
}

// ---------------------------------------------------------------- text

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

