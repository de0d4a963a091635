//! JSON-lines artifact files shared between pipeline stages.
//!
//! Every file starts with one header line
//! `{"format", "version", "config_hash", "labels", "split"}` followed by
//! one record per line:
//!
//! * `ssc-corpus`: `{"abstract_id", "sentences": [{"label", "text"}]}`
//! * `ssc-embeddings`: `{"abstract_id", "sentence_index", "vector"}`
//! * `ssc-predictions`: `{"abstract_id", "sentence_index", "scores"}`

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abs_model::EmbeddingMap;
use crate::corpus::{compute_stats, Abstract, Corpus, LabelSet, Sentence, Split};
use crate::error::{Error, Result};
use crate::fusion::PredictionMatrix;

pub const ARTIFACT_VERSION: u32 = 1;
pub const CORPUS_FORMAT: &str = "ssc-corpus";
pub const EMBEDDINGS_FORMAT: &str = "ssc-embeddings";
pub const PREDICTIONS_FORMAT: &str = "ssc-predictions";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub labels: Vec<String>,
    pub split: Split,
}

impl ArtifactHeader {
    pub fn new(format: &str, config_hash: impl Into<String>, labels: &LabelSet, split: Split) -> Self {
        ArtifactHeader {
            format: format.to_string(),
            version: ARTIFACT_VERSION,
            config_hash: config_hash.into(),
            labels: labels.names().to_vec(),
            split,
        }
    }
}

/// First 16 hex digits of the SHA-256 of the value's JSON encoding.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

pub fn write_jsonl<R: Serialize>(path: &Path, header: &ArtifactHeader, records: impl IntoIterator<Item = R>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        serde_json::to_writer(&mut w, header)?;
        writeln!(w).map_err(|e| Error::io(&tmp, e))?;
        for r in records {
            serde_json::to_writer(&mut w, &r)?;
            writeln!(w).map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: &Path) -> Result<ArtifactHeader> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    BufReader::new(file)
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&line).map_err(|e| Error::format(path, format!("bad header: {e}")))
}

pub fn read_jsonl<R: DeserializeOwned>(path: &Path, format: &str) -> Result<(ArtifactHeader, Vec<R>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: ArtifactHeader =
        serde_json::from_str(&first).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format != format {
        return Err(Error::format(path, format!("expected {format}, found {}", header.format)));
    }
    if header.version != ARTIFACT_VERSION {
        return Err(Error::format(path, format!("unsupported version {}", header.version)));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?);
    }
    Ok((header, records))
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    label: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct AbstractRecord {
    abstract_id: String,
    sentences: Vec<SentenceRecord>,
}

pub fn write_corpus(path: &Path, corpus: &Corpus, config_hash: &str) -> Result<()> {
    let header = ArtifactHeader::new(CORPUS_FORMAT, config_hash, &corpus.labels, corpus.split);
    let records = corpus.abstracts.iter().map(|a| AbstractRecord {
        abstract_id: a.id.clone(),
        sentences: a
            .sentences
            .iter()
            .map(|s| SentenceRecord {
                label: corpus.labels.name(s.label).to_string(),
                text: s.text.clone(),
            })
            .collect(),
    });
    write_jsonl(path, &header, records)
}

pub fn read_corpus(path: &Path) -> Result<(ArtifactHeader, Corpus)> {
    let (header, records) = read_jsonl::<AbstractRecord>(path, CORPUS_FORMAT)?;
    let labels = LabelSet::new(header.labels.clone())?;
    let mut abstracts = Vec::with_capacity(records.len());
    for r in records {
        let mut sentences = Vec::with_capacity(r.sentences.len());
        for s in r.sentences {
            let label = labels
                .parse(&s.label)
                .ok_or_else(|| Error::format(path, format!("unknown label {}", s.label)))?;
            sentences.push(Sentence::new(&s.text, label)?);
        }
        abstracts.push(compute_stats(Abstract {
            id: r.abstract_id,
            sentences,
        }));
    }
    let corpus = Corpus {
        split: header.split,
        labels,
        abstracts,
    };
    Ok((header, corpus))
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    abstract_id: String,
    sentence_index: usize,
    vector: Vec<f64>,
}

pub fn write_embeddings(path: &Path, header: &ArtifactHeader, embeddings: &EmbeddingMap) -> Result<()> {
    write_jsonl(
        path,
        header,
        embeddings.iter().map(|((id, i), v)| EmbeddingRecord {
            abstract_id: id.clone(),
            sentence_index: *i,
            vector: v.clone(),
        }),
    )
}

pub fn read_embeddings(path: &Path) -> Result<(ArtifactHeader, EmbeddingMap)> {
    let (header, records) = read_jsonl::<EmbeddingRecord>(path, EMBEDDINGS_FORMAT)?;
    let width = header.labels.len();
    let mut map = EmbeddingMap::new();
    for r in records {
        if r.vector.len() != width {
            return Err(Error::format(
                path,
                format!("embedding width {} but {width} labels", r.vector.len()),
            ));
        }
        map.insert((r.abstract_id, r.sentence_index), r.vector);
    }
    Ok((header, map))
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    abstract_id: String,
    sentence_index: usize,
    scores: Vec<f64>,
}

pub fn write_predictions(path: &Path, header: &ArtifactHeader, predictions: &[PredictionMatrix<f64>]) -> Result<()> {
    write_jsonl(
        path,
        header,
        predictions.iter().flat_map(|m| {
            m.rows.iter().enumerate().map(|(i, r)| PredictionRecord {
                abstract_id: m.abstract_id.clone(),
                sentence_index: i,
                scores: r.clone(),
            })
        }),
    )
}

/// Reads predictions back, grouped per abstract in file order.
pub fn read_predictions(path: &Path) -> Result<(ArtifactHeader, Vec<PredictionMatrix<f64>>)> {
    let (header, records) = read_jsonl::<PredictionRecord>(path, PREDICTIONS_FORMAT)?;
    let mut out: Vec<PredictionMatrix<f64>> = Vec::new();
    for r in records {
        let open = matches!(out.last(), Some(m) if m.abstract_id == r.abstract_id);
        if !open {
            out.push(PredictionMatrix::new(r.abstract_id.clone(), Vec::new()));
        }
        let m = out.last_mut().expect("pushed above");
        if r.sentence_index != m.rows.len() {
            return Err(Error::format(
                path,
                format!("abstract {}: sentence {} out of order", r.abstract_id, r.sentence_index),
            ));
        }
        m.rows.push(r.scores);
    }
    Ok((header, out))
}
