//! JSON-lines molecule corpora.
//!
//! The first line is a header `{"tasks": int, "task_type": "regression" |
//! "classification"}` (optionally with a persisted `atom_vocab`). Each further
//! line is one record with either a `smiles` string or explicit `nodes` /
//! `edges` arrays, plus `targets` (`null` marks a missing label). Records that
//! fail to parse are skipped and reported, not fatal.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Graph;
use crate::smiles::parse_smiles;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("corpus is empty (no header line)")]
    MissingHeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Regression,
    Classification,
}

/// Sorted list of raw node labels seen in a corpus. Index 0 of the embedding
/// table is reserved for labels outside the vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomVocab {
    labels: Vec<u32>,
}

impl AtomVocab {
    pub fn from_graphs<'a>(graphs: impl IntoIterator<Item = &'a Graph>) -> Self {
        let mut labels: Vec<u32> = graphs.into_iter().flat_map(|g| g.node_labels().iter().copied()).collect();
        labels.sort_unstable();
        labels.dedup();
        AtomVocab { labels }
    }

    pub fn from_labels(mut labels: Vec<u32>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        AtomVocab { labels }
    }

    /// Embedding row for a raw label; 0 for unknown labels.
    pub fn index(&self, label: u32) -> usize {
        self.labels.binary_search(&label).map_or(0, |i| i + 1)
    }

    /// Embedding table size including the unknown row.
    pub fn size(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub tasks: usize,
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atom_vocab: Option<Vec<u32>>,
}

/// Split membership assigned in the corpus file, for provided splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub graph: Graph,
    /// One entry per task; `None` marks a missing label.
    pub targets: Vec<Option<f64>>,
    pub split: Option<SplitTag>,
}

/// A record excluded while loading, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Skipped {
    pub line: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub vocab: AtomVocab,
    pub records: Vec<DatasetRecord>,
    pub skipped: Vec<Skipped>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    smiles: Option<String>,
    #[serde(default)]
    nodes: Option<Vec<u32>>,
    #[serde(default)]
    edges: Option<Vec<(usize, usize, u32)>>,
    targets: Vec<Option<f64>>,
    #[serde(default)]
    split: Option<SplitTag>,
}

/// One corpus line in serialized form.
#[derive(Debug, Clone, Serialize)]
pub struct RecordLine<'a> {
    pub id: &'a str,
    pub nodes: &'a [u32],
    pub edges: Vec<(usize, usize, u32)>,
    pub targets: &'a [Option<f64>],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitTag>,
}

impl<'a> From<&'a DatasetRecord> for RecordLine<'a> {
    fn from(r: &'a DatasetRecord) -> Self {
        RecordLine {
            id: &r.id,
            nodes: r.graph.node_labels(),
            edges: r.graph.edges().iter().map(|e| (e.u, e.v, e.label)).collect(),
            targets: &r.targets,
            split: r.split,
        }
    }
}

fn parse_record(raw: RawRecord, line: usize, header: &CorpusHeader) -> Result<DatasetRecord, Skipped> {
    let id = raw.id.clone().unwrap_or_else(|| format!("line{line}"));
    let skip = |reason: String| Skipped { line, id: id.clone(), reason };
    let graph = match (&raw.smiles, &raw.nodes) {
        (Some(s), None) => parse_smiles(s).map_err(|e| skip(e.to_string()))?,
        (None, Some(nodes)) => {
            let edges = raw.edges.clone().unwrap_or_default();
            Graph::new(nodes.clone(), edges).map_err(|e| skip(e.to_string()))?
        }
        (Some(_), Some(_)) => return Err(skip("record has both `smiles` and `nodes`".into())),
        (None, None) => return Err(skip("record has neither `smiles` nor `nodes`".into())),
    };
    if raw.targets.len() != header.tasks {
        return Err(skip(format!(
            "expected {} targets, found {}",
            header.tasks,
            raw.targets.len()
        )));
    }
    if header.task_type == TaskType::Classification {
        if let Some(bad) = raw.targets.iter().flatten().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(skip(format!("classification label {bad} is not 0 or 1")));
        }
    }
    Ok(DatasetRecord { id, graph, targets: raw.targets, split: raw.split })
}

/// Parses corpus text. Malformed JSON is fatal; unparseable molecules are
/// collected in [`Corpus::skipped`].
pub fn parse_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, htext) = lines.next().ok_or(CorpusError::MissingHeader)?;
    let header: CorpusHeader = serde_json::from_str(htext)
        .map_err(|e| CorpusError::Json { line: hline + 1, message: e.to_string() })?;

    let body: Vec<(usize, &str)> = lines.collect();
    let parsed: Vec<Result<Result<DatasetRecord, Skipped>, CorpusError>> = body
        .par_iter()
        .map(|&(i, l)| {
            let raw: RawRecord = serde_json::from_str(l)
                .map_err(|e| CorpusError::Json { line: i + 1, message: e.to_string() })?;
            Ok(parse_record(raw, i + 1, &header))
        })
        .collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for item in parsed {
        match item? {
            Ok(r) => records.push(r),
            Err(s) => skipped.push(s),
        }
    }
    let vocab = match &header.atom_vocab {
        Some(labels) => AtomVocab::from_labels(labels.clone()),
        None => AtomVocab::from_graphs(records.iter().map(|r| &r.graph)),
    };
    Ok(Corpus { header, vocab, records, skipped })
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    parse_corpus(&text)
}

/// Serializes a corpus back to JSON lines, persisting the vocabulary in the
/// header.
pub fn write_corpus(corpus: &Corpus) -> String {
    let mut header = corpus.header.clone();
    header.atom_vocab = Some(corpus.vocab.labels().to_vec());
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in &corpus.records {
        out.push_str(&serde_json::to_string(&RecordLine::from(r)).expect("record serializes"));
        out.push('\n');
    }
    out
}
