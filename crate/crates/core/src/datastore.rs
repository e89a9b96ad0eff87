//! Score tensors, labels and the on-disk formats every other module consumes.
//!
//! A dataset is a set of `(query, response)` records, each carrying one score
//! per verifier and optionally a 0/1 correctness label and an extracted answer.
//! Records are held densely as an `n x K x m` tensor ordered by
//! `(query_id asc, response_index asc)`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::synth::SynthTruth;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    ContinuousReward,
    BinaryJudge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierMeta {
    pub id: String,
    pub kind: VerifierKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
}

impl VerifierMeta {
    pub fn new(id: impl Into<String>, kind: VerifierKind) -> Self {
        Self {
            id: id.into(),
            kind,
            notes: None,
        }
    }
}

/// Sidecar manifest declaring verifier kinds: `{"verifiers": [{"id": .., "kind": ..}]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierManifest {
    pub verifiers: Vec<VerifierMeta>,
}

impl VerifierManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Dense real-valued scores indexed `(query, response, verifier)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor<T> {
    scores: Array3<T>,
    verifiers: Vec<VerifierMeta>,
}

impl<T: Real> ScoreTensor<T> {
    pub fn new(scores: Array3<T>, verifiers: Vec<VerifierMeta>) -> Result<Self> {
        let (n, k, m) = scores.dim();
        if k == 0 || m == 0 {
            return Err(Error::Dimension(format!(
                "need K >= 1 and m >= 1, got n={n} K={k} m={m}"
            )));
        }
        if verifiers.len() != m {
            return Err(Error::Dimension(format!(
                "{} verifier entries for {m} score columns",
                verifiers.len()
            )));
        }
        let mut seen = HashSet::new();
        for v in &verifiers {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate verifier id `{}`",
                    v.id
                )));
            }
        }
        if let Some(((i, j, kk), _)) = scores.indexed_iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::NonFiniteScore {
                query_id: format!("#{i}"),
                response_index: j,
                verifier: verifiers[kk].id.clone(),
            });
        }
        Ok(Self { scores, verifiers })
    }

    pub fn n(&self) -> usize {
        self.scores.dim().0
    }

    /// Responses per query.
    pub fn k(&self) -> usize {
        self.scores.dim().1
    }

    /// Verifier count.
    pub fn m(&self) -> usize {
        self.scores.dim().2
    }

    pub fn scores(&self) -> &Array3<T> {
        &self.scores
    }

    pub fn verifiers(&self) -> &[VerifierMeta] {
        &self.verifiers
    }

    pub fn get(&self, query: usize, response: usize, verifier: usize) -> T {
        self.scores[[query, response, verifier]]
    }

    /// All `n * K` scores of one verifier in row order.
    pub fn column(&self, verifier: usize) -> Vec<T> {
        self.scores
            .index_axis(Axis(2), verifier)
            .iter()
            .copied()
            .collect()
    }

    /// Scores flattened to an `(n * K) x m` matrix.
    pub fn as_rows(&self) -> Array2<T> {
        let (n, k, m) = self.scores.dim();
        self.scores
            .to_shape((n * k, m))
            .expect("contiguous reshape")
            .to_owned()
    }

    pub(crate) fn with_scores(&self, scores: Array3<T>) -> Self {
        Self {
            scores,
            verifiers: self.verifiers.clone(),
        }
    }

    pub fn select_verifiers(&self, keep: &[usize]) -> Self {
        Self {
            scores: self.scores.select(Axis(2), keep),
            verifiers: keep.iter().map(|&k| self.verifiers[k].clone()).collect(),
        }
    }

    pub fn select_queries(&self, queries: &[usize]) -> Self {
        Self {
            scores: self.scores.select(Axis(0), queries),
            verifiers: self.verifiers.clone(),
        }
    }

    /// Keeps, for every query `i`, the responses `picks[i]` (all of equal length).
    pub fn select_responses(&self, picks: &[Vec<usize>]) -> Self {
        let k_new = picks.first().map_or(0, Vec::len);
        let m = self.m();
        let scores = Array3::from_shape_fn((self.n(), k_new, m), |(i, j, v)| {
            self.scores[[i, picks[i][j], v]]
        });
        Self {
            scores,
            verifiers: self.verifiers.clone(),
        }
    }
}

/// Ground truth and auxiliary per-response data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    /// `y_ij`, zero where the query is unlabeled.
    pub labels: Array2<u8>,
    /// Queries that carry ground-truth labels for every response.
    pub labeled: Vec<bool>,
    /// Queries in the small labeled development split.
    pub dev_mask: Vec<bool>,
    pub answers: Option<Array2<String>>,
}

impl LabelSet {
    pub fn fully_labeled(labels: Array2<u8>) -> Self {
        let n = labels.nrows();
        Self {
            labels,
            labeled: vec![true; n],
            dev_mask: vec![false; n],
            answers: None,
        }
    }

    pub fn n(&self) -> usize {
        self.labels.nrows()
    }

    pub fn k(&self) -> usize {
        self.labels.ncols()
    }

    pub fn is_fully_labeled(&self) -> bool {
        !self.labeled.is_empty() && self.labeled.iter().all(|&l| l)
    }

    pub fn has_any_labels(&self) -> bool {
        self.labeled.iter().any(|&l| l)
    }

    /// The full label matrix, or an error if any query is unlabeled.
    pub fn require_full(&self) -> Result<&Array2<u8>> {
        if self.is_fully_labeled() {
            Ok(&self.labels)
        } else {
            Err(Error::NoLabels(
                "operation needs ground truth for every query".into(),
            ))
        }
    }

    pub fn dev_queries(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.dev_mask[i]).collect()
    }

    /// Labels of every response in the dev split, in row order.
    pub fn dev_labels(&self) -> Vec<u8> {
        self.dev_queries()
            .into_iter()
            .flat_map(|i| self.labels.row(i).to_vec())
            .collect()
    }

    pub fn select_queries(&self, queries: &[usize]) -> Self {
        Self {
            labels: self.labels.select(Axis(0), queries),
            labeled: queries.iter().map(|&i| self.labeled[i]).collect(),
            dev_mask: queries.iter().map(|&i| self.dev_mask[i]).collect(),
            answers: self.answers.as_ref().map(|a| a.select(Axis(0), queries)),
        }
    }

    pub fn select_responses(&self, picks: &[Vec<usize>]) -> Self {
        let k_new = picks.first().map_or(0, Vec::len);
        let n = self.n();
        Self {
            labels: Array2::from_shape_fn((n, k_new), |(i, j)| self.labels[[i, picks[i][j]]]),
            labeled: self.labeled.clone(),
            dev_mask: self.dev_mask.clone(),
            answers: self.answers.as_ref().map(|a| {
                Array2::from_shape_fn((n, k_new), |(i, j)| a[[i, picks[i][j]]].clone())
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    /// SHA-256 of the canonical JSONL serialization plus verifier manifest.
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<SynthTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle<T> {
    pub query_ids: Vec<String>,
    pub scores: ScoreTensor<T>,
    pub labels: Option<LabelSet>,
    pub provenance: Provenance,
}

impl<T: Real> DatasetBundle<T> {
    /// Assembles a bundle and stamps it with its content hash.
    pub fn new(
        query_ids: Vec<String>,
        scores: ScoreTensor<T>,
        labels: Option<LabelSet>,
        source: impl Into<String>,
    ) -> Result<Self> {
        if query_ids.len() != scores.n() {
            return Err(Error::Dimension(format!(
                "{} query ids for {} queries",
                query_ids.len(),
                scores.n()
            )));
        }
        if let Some(l) = &labels {
            if l.labels.dim() != (scores.n(), scores.k())
                || l.labeled.len() != scores.n()
                || l.dev_mask.len() != scores.n()
            {
                return Err(Error::Dimension(format!(
                    "labels {:?} do not match scores ({}, {})",
                    l.labels.dim(),
                    scores.n(),
                    scores.k()
                )));
            }
            if let Some(a) = &l.answers {
                if a.dim() != l.labels.dim() {
                    return Err(Error::Dimension("answers shape differs from labels".into()));
                }
            }
        }
        let mut bundle = Self {
            query_ids,
            scores,
            labels,
            provenance: Provenance {
                source: source.into(),
                content_hash: String::new(),
                truth: None,
            },
        };
        bundle.provenance.content_hash = bundle.compute_hash();
        Ok(bundle)
    }

    pub fn n(&self) -> usize {
        self.scores.n()
    }

    pub fn k(&self) -> usize {
        self.scores.k()
    }

    pub fn m(&self) -> usize {
        self.scores.m()
    }

    pub fn require_labels(&self) -> Result<&LabelSet> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::NoLabels("dataset carries no labels".into()))
    }

    pub fn compute_hash(&self) -> String {
        let mut buf = Vec::new();
        write_jsonl(self, &mut buf).expect("writing to memory");
        let manifest = serde_json::to_vec(&VerifierManifest {
            verifiers: self.scores.verifiers().to_vec(),
        })
        .expect("manifest serializes");
        let mut hasher = Sha256::new();
        hasher.update(&buf);
        hasher.update(&manifest);
        hex::encode(hasher.finalize())
    }

    /// Restricts the bundle to a subset of queries (order preserved as given).
    pub fn select_queries(&self, queries: &[usize]) -> Self {
        Self {
            query_ids: queries.iter().map(|&i| self.query_ids[i].clone()).collect(),
            scores: self.scores.select_queries(queries),
            labels: self.labels.as_ref().map(|l| l.select_queries(queries)),
            provenance: self.provenance.clone(),
        }
    }

    /// Keeps `picks[i]` responses of every query; all picks must have the same length.
    pub fn select_responses(&self, picks: &[Vec<usize>]) -> Self {
        Self {
            query_ids: self.query_ids.clone(),
            scores: self.scores.select_responses(picks),
            labels: self.labels.as_ref().map(|l| l.select_responses(picks)),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(DataFormat::Jsonl),
            "csv" => Ok(DataFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown format `{other}`"))),
        }
    }
}

/// Path of the sidecar manifest that accompanies a data file.
pub fn manifest_path_for(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".verifiers.json");
    PathBuf::from(name)
}

/// Loads and validates a dataset; the sidecar manifest is used when present,
/// otherwise every verifier is treated as a continuous reward model.
pub fn load_dataset<T: Real>(path: &Path, format: DataFormat) -> Result<DatasetBundle<T>> {
    let sidecar = manifest_path_for(path);
    let manifest = if sidecar.exists() {
        Some(VerifierManifest::read(&sidecar)?)
    } else {
        None
    };
    load_dataset_with_manifest(path, format, manifest)
}

pub fn load_dataset_with_manifest<T: Real>(
    path: &Path,
    format: DataFormat,
    manifest: Option<VerifierManifest>,
) -> Result<DatasetBundle<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let source = path.display().to_string();
    match format {
        DataFormat::Jsonl => read_jsonl(reader, manifest, source),
        DataFormat::Csv => read_csv(reader, manifest, source),
    }
}

/// Writes the data file and its sidecar manifest.
pub fn save_dataset<T: Real>(bundle: &DatasetBundle<T>, path: &Path, format: DataFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match format {
        DataFormat::Jsonl => write_jsonl(bundle, &mut writer)?,
        DataFormat::Csv => write_csv(bundle, &mut writer)?,
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = manifest_path_for(path);
    let manifest = VerifierManifest {
        verifiers: bundle.scores.verifiers().to_vec(),
    };
    let file = File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)?;
    Ok(())
}

struct RawRecord {
    line: usize,
    query_id: String,
    response_index: usize,
    scores: BTreeMap<String, f64>,
    label: Option<u8>,
    answer: Option<String>,
}

fn parse_score(value: &Value, line: usize, verifier: &str) -> Result<f64> {
    match value {
        Value::Number(n) => n.as_f64().ok_or_else(|| Error::Parse {
            line,
            msg: format!("score for `{verifier}` is not representable"),
        }),
        Value::String(s) => s.trim().parse::<f64>().map_err(|_| Error::Parse {
            line,
            msg: format!("score for `{verifier}` is not a number: {s:?}"),
        }),
        other => Err(Error::Parse {
            line,
            msg: format!("score for `{verifier}` has type {other}"),
        }),
    }
}

fn parse_label(value: &Value, line: usize) -> Result<Option<u8>> {
    match value {
        Value::Null => Ok(None),
        Value::Bool(b) => Ok(Some(u8::from(*b))),
        Value::Number(n) => match n.as_u64() {
            Some(v @ (0 | 1)) => Ok(Some(v as u8)),
            _ => Err(Error::Parse {
                line,
                msg: format!("label must be 0 or 1, got {n}"),
            }),
        },
        other => Err(Error::Parse {
            line,
            msg: format!("label must be 0 or 1, got {other}"),
        }),
    }
}

pub(crate) fn read_jsonl<T: Real, R: BufRead>(
    reader: R,
    manifest: Option<VerifierManifest>,
    source: String,
) -> Result<DatasetBundle<T>> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(&source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "record is not a JSON object".into(),
        })?;
        let field = |name: &str| {
            obj.get(name).ok_or_else(|| Error::MissingField {
                line: line_no,
                field: name.into(),
            })
        };
        let query_id = match field("query_id")? {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("query_id has type {other}"),
                })
            }
        };
        let response_index = field("response_index")?
            .as_u64()
            .ok_or_else(|| Error::Parse {
                line: line_no,
                msg: "response_index must be a non-negative integer".into(),
            })? as usize;
        let score_obj = field("scores")?.as_object().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "scores must be an object".into(),
        })?;
        let mut scores = BTreeMap::new();
        for (verifier, v) in score_obj {
            scores.insert(verifier.clone(), parse_score(v, line_no, verifier)?);
        }
        let label = match obj.get("label") {
            Some(v) => parse_label(v, line_no)?,
            None => None,
        };
        let answer = match obj.get("answer") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => Some(other.to_string()),
        };
        records.push(RawRecord {
            line: line_no,
            query_id,
            response_index,
            scores,
            label,
            answer,
        });
    }
    assemble(records, manifest, source)
}

pub(crate) fn read_csv<T: Real, R: Read>(
    reader: R,
    manifest: Option<VerifierManifest>,
    source: String,
) -> Result<DatasetBundle<T>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| headers.iter().position(|h| h == name);
    let q_col = position("query_id").ok_or_else(|| Error::MissingField {
        line: 1,
        field: "query_id".into(),
    })?;
    let r_col = position("response_index").ok_or_else(|| Error::MissingField {
        line: 1,
        field: "response_index".into(),
    })?;
    let l_col = position("label");
    let a_col = position("answer");
    let verifier_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != q_col && *i != r_col && Some(*i) != l_col && Some(*i) != a_col)
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut records = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let line = idx + 2;
        let row = row?;
        let response_index = row[r_col].trim().parse::<usize>().map_err(|_| Error::Parse {
            line,
            msg: format!("bad response_index {:?}", &row[r_col]),
        })?;
        let mut scores = BTreeMap::new();
        for (col, id) in &verifier_cols {
            let raw = row[*col].trim();
            if raw.is_empty() {
                return Err(Error::MissingField {
                    line,
                    field: format!("scores.{id}"),
                });
            }
            let v = raw.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("score for `{id}` is not a number: {raw:?}"),
            })?;
            scores.insert(id.clone(), v);
        }
        let label = match l_col.map(|c| row[c].trim()) {
            None | Some("") => None,
            Some("0") => Some(0),
            Some("1") => Some(1),
            Some(other) => {
                return Err(Error::Parse {
                    line,
                    msg: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let answer = a_col
            .map(|c| row[c].to_string())
            .filter(|a| !a.is_empty());
        records.push(RawRecord {
            line,
            query_id: row[q_col].to_string(),
            response_index,
            scores,
            label,
            answer,
        });
    }
    assemble(records, manifest, source)
}

fn assemble<T: Real>(
    records: Vec<RawRecord>,
    manifest: Option<VerifierManifest>,
    source: String,
) -> Result<DatasetBundle<T>> {
    let first = records.first().ok_or_else(|| Error::Parse {
        line: 0,
        msg: "dataset has no records".into(),
    })?;
    let verifiers: Vec<VerifierMeta> = match manifest {
        Some(m) => m.verifiers,
        None => first
            .scores
            .keys()
            .map(|id| VerifierMeta::new(id.clone(), VerifierKind::ContinuousReward))
            .collect(),
    };
    let any_answer = records.iter().any(|r| r.answer.is_some());
    let any_label = records.iter().any(|r| r.label.is_some());

    let mut by_query: BTreeMap<String, Vec<RawRecord>> = BTreeMap::new();
    for rec in records {
        for v in &verifiers {
            if !rec.scores.contains_key(&v.id) {
                return Err(Error::MissingField {
                    line: rec.line,
                    field: format!("scores.{}", v.id),
                });
            }
        }
        if rec.scores.len() != verifiers.len() {
            let unknown = rec
                .scores
                .keys()
                .find(|id| !verifiers.iter().any(|v| &v.id == *id))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Parse {
                line: rec.line,
                msg: format!("unknown verifier `{unknown}`"),
            });
        }
        if any_answer && rec.answer.is_none() {
            return Err(Error::MissingField {
                line: rec.line,
                field: "answer".into(),
            });
        }
        by_query.entry(rec.query_id.clone()).or_default().push(rec);
    }

    let n = by_query.len();
    let k = by_query.values().next().map_or(0, Vec::len);
    let m = verifiers.len();
    let mut scores = Array3::<T>::zeros((n, k, m));
    let mut labels = Array2::<u8>::zeros((n, k));
    let mut labeled = vec![false; n];
    let mut answers = any_answer.then(|| Array2::<String>::default((n, k)));
    let mut query_ids = Vec::with_capacity(n);

    for (i, (qid, mut recs)) in by_query.into_iter().enumerate() {
        recs.sort_by_key(|r| r.response_index);
        for pair in recs.windows(2) {
            if pair[0].response_index == pair[1].response_index {
                return Err(Error::DuplicateRecord {
                    query_id: qid,
                    response_index: pair[0].response_index,
                });
            }
        }
        if recs.len() != k {
            return Err(Error::RaggedK {
                query_id: qid,
                expected: k,
                found: recs.len(),
            });
        }
        if recs.iter().enumerate().any(|(j, r)| r.response_index != j) {
            return Err(Error::ResponseIndexGap { query_id: qid, k });
        }
        let n_labeled = recs.iter().filter(|r| r.label.is_some()).count();
        if n_labeled != 0 && n_labeled != k {
            return Err(Error::PartialLabels { query_id: qid });
        }
        labeled[i] = n_labeled == k;
        for (j, rec) in recs.iter().enumerate() {
            for (kk, v) in verifiers.iter().enumerate() {
                let s = rec.scores[&v.id];
                if !s.is_finite() {
                    return Err(Error::NonFiniteScore {
                        query_id: qid,
                        response_index: j,
                        verifier: v.id.clone(),
                    });
                }
                scores[[i, j, kk]] = T::from_f64(s).ok_or_else(|| Error::Parse {
                    line: rec.line,
                    msg: "score not representable in scalar type".into(),
                })?;
            }
            labels[[i, j]] = rec.label.unwrap_or(0);
            if let (Some(a), Some(ans)) = (answers.as_mut(), rec.answer.as_ref()) {
                a[[i, j]] = ans.clone();
            }
        }
        query_ids.push(qid);
    }

    let label_set = (any_label || any_answer).then(|| LabelSet {
        labels,
        labeled,
        dev_mask: vec![false; n],
        answers,
    });
    let tensor = ScoreTensor::new(scores, verifiers)?;
    DatasetBundle::new(query_ids, tensor, label_set, source)
}

fn record_value<T: Real>(bundle: &DatasetBundle<T>, i: usize, j: usize) -> Value {
    let mut obj = Map::new();
    obj.insert("query_id".into(), Value::String(bundle.query_ids[i].clone()));
    obj.insert("response_index".into(), Value::from(j));
    let mut scores = Map::new();
    for (kk, v) in bundle.scores.verifiers().iter().enumerate() {
        scores.insert(v.id.clone(), Value::from(bundle.scores.get(i, j, kk).as_f64()));
    }
    obj.insert("scores".into(), Value::Object(scores));
    if let Some(l) = &bundle.labels {
        if l.labeled[i] {
            obj.insert("label".into(), Value::from(l.labels[[i, j]]));
        }
        if let Some(a) = &l.answers {
            obj.insert("answer".into(), Value::String(a[[i, j]].clone()));
        }
    }
    Value::Object(obj)
}

pub fn write_jsonl<T: Real, W: Write>(bundle: &DatasetBundle<T>, mut out: W) -> Result<()> {
    for i in 0..bundle.n() {
        for j in 0..bundle.k() {
            serde_json::to_writer(&mut out, &record_value(bundle, i, j))?;
            out.write_all(b"\n")
                .map_err(|e| Error::io(&bundle.provenance.source, e))?;
        }
    }
    Ok(())
}

pub fn write_csv<T: Real, W: Write>(bundle: &DatasetBundle<T>, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec![
        "query_id".to_string(),
        "response_index".into(),
        "label".into(),
        "answer".into(),
    ];
    header.extend(bundle.scores.verifiers().iter().map(|v| v.id.clone()));
    wtr.write_record(&header)?;
    for i in 0..bundle.n() {
        for j in 0..bundle.k() {
            let mut row = vec![bundle.query_ids[i].clone(), j.to_string()];
            let (label, answer) = match &bundle.labels {
                Some(l) => (
                    if l.labeled[i] {
                        l.labels[[i, j]].to_string()
                    } else {
                        String::new()
                    },
                    l.answers
                        .as_ref()
                        .map(|a| a[[i, j]].clone())
                        .unwrap_or_default(),
                ),
                None => (String::new(), String::new()),
            };
            row.push(label);
            row.push(answer);
            for kk in 0..bundle.m() {
                row.push(format!("{}", bundle.scores.get(i, j, kk).as_f64()));
            }
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()
        .map_err(|e| Error::io(&bundle.provenance.source, e))?;
    Ok(())
}

/// Number of dev queries for a fraction of `n`; tolerant of `0.07 * 100 = 7.000000000000001`.
pub fn dev_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Marks `ceil(fraction * n)` labeled queries as dev, sampled uniformly without
/// replacement with a ChaCha8 stream seeded by `seed`.
pub fn split_dev<T: Real>(bundle: &DatasetBundle<T>, fraction: f64, seed: u64) -> Result<LabelSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dev fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let labels = bundle.require_labels()?;
    let candidates: Vec<usize> = (0..bundle.n()).filter(|&i| labels.labeled[i]).collect();
    if candidates.is_empty() {
        return Err(Error::NoLabels("no labeled queries to draw a dev split from".into()));
    }
    let count = dev_count(bundle.n(), fraction);
    if count > candidates.len() {
        return Err(Error::NoLabels(format!(
            "dev split needs {count} labeled queries, only {} available",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, candidates.len(), count);
    let mut out = labels.clone();
    out.dev_mask = vec![false; bundle.n()];
    for idx in picked.iter() {
        out.dev_mask[candidates[idx]] = true;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifierRange {
    pub id: String,
    pub kind: VerifierKind,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n_queries: usize,
    pub responses_per_query: usize,
    pub n_verifiers: usize,
    pub labeled_queries: usize,
    pub dev_queries: usize,
    pub has_answers: bool,
    pub ranges: Vec<VerifierRange>,
    /// Verifiers whose scores never vary.
    pub degenerate: Vec<String>,
}

pub fn validate<T: Real>(bundle: &DatasetBundle<T>) -> ValidationReport {
    let tensor = &bundle.scores;
    let mut ranges = Vec::with_capacity(tensor.m());
    let mut degenerate = Vec::new();
    for (kk, meta) in tensor.verifiers().iter().enumerate() {
        let col = tensor.column(kk);
        let min = col.iter().copied().fold(T::infinity(), T::min);
        let max = col.iter().copied().fold(T::neg_infinity(), T::max);
        let mean = crate::stats::mean(&col).unwrap_or_else(T::nan);
        if min == max {
            degenerate.push(meta.id.clone());
        }
        ranges.push(VerifierRange {
            id: meta.id.clone(),
            kind: meta.kind,
            min: min.as_f64(),
            max: max.as_f64(),
            mean: mean.as_f64(),
        });
    }
    let (labeled_queries, dev_queries, has_answers) = match &bundle.labels {
        Some(l) => (
            l.labeled.iter().filter(|&&b| b).count(),
            l.dev_mask.iter().filter(|&&b| b).count(),
            l.answers.is_some(),
        ),
        None => (0, 0, false),
    };
    ValidationReport {
        n_queries: tensor.n(),
        responses_per_query: tensor.k(),
        n_verifiers: tensor.m(),
        labeled_queries,
        dev_queries,
        has_answers,
        ranges,
        degenerate,
    }
}
