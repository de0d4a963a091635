//! Vocabularies, embedding tables, statistic one-hots and the cached
//! pretrained sentence vectors.

use std::collections::{btree_map::Entry, BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, SentenceStats};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EMBED_INIT_RANGE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Word,
    Char,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    kind: VocabKind,
    index_to_token: Vec<String>,
    token_to_index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    kind: VocabKind,
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.tokens.len() < 2 || f.tokens[0] != PAD || f.tokens[1] != UNK {
            return Err(Error::Invalid("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut token_to_index = BTreeMap::new();
        for (i, t) in f.tokens.iter().enumerate() {
            if token_to_index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            kind: f.kind,
            index_to_token: f.tokens,
            token_to_index,
        })
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            kind: v.kind,
            tokens: v.index_to_token,
        }
    }
}

impl Vocabulary {
    pub const PAD_INDEX: usize = 0;
    pub const UNK_INDEX: usize = 1;

    /// Counts word tokens or characters over the corpus and keeps those
    /// seen at least `min_freq` times, most frequent first, ties broken by
    /// token order.
    pub fn build(corpus: &Corpus, kind: VocabKind, min_freq: usize) -> Result<Self> {
        if corpus.num_sentences() == 0 {
            return Err(Error::Invalid("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in corpus.sentences() {
            match kind {
                VocabKind::Word => {
                    for w in &s.words {
                        *counts.entry(w.clone()).or_default() += 1;
                    }
                }
                VocabKind::Char => {
                    for c in &s.chars {
                        *counts.entry(c.to_string()).or_default() += 1;
                    }
                }
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_freq.max(1) && t != PAD && t != UNK)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = [PAD.to_string(), UNK.to_string()]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        VocabFile { kind, tokens }.try_into()
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.index_to_token
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }

    pub fn index(&self, token: &str) -> usize {
        self.token_to_index.get(token).copied().unwrap_or(Self::UNK_INDEX)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_index.contains_key(token)
    }

    /// Indices of the first `max_len` tokens.
    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>, max_len: usize) -> Vec<usize> {
        tokens.into_iter().take(max_len).map(|t| self.index(t)).collect()
    }

    pub fn encode_chars(&self, chars: &[char], max_len: usize) -> Vec<usize> {
        let mut buf = [0u8; 4];
        chars
            .iter()
            .take(max_len)
            .map(|c| self.index(c.encode_utf8(&mut buf)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Fills `[vocab.len(), d_w]` from a whitespace-separated vector file
/// (`token v_1 ... v_d` per line, optional `count dim` header line).
/// Tokens in the file keep their vectors; a token missing from the file
/// falls back to its lowercase form, then to uniform noise. The pad row is
/// zero.
pub fn load_word_vectors<T: Scalar>(
    path: &Path,
    vocab: &Vocabulary,
    d_w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut exact: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    let mut folded: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if i == 0 && values.len() == 1 && token.parse::<usize>().is_ok() && values[0].parse::<usize>().is_ok() {
            continue;
        }
        if values.len() != d_w {
            return Err(Error::format(
                path,
                format!("line {}: expected {d_w} values, found {}", i + 1, values.len()),
            ));
        }
        let parse = || -> Result<Vec<T>> {
            values
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map(T::lit)
                        .map_err(|_| Error::format(path, format!("line {}: bad number {v:?}", i + 1)))
                })
                .collect()
        };
        if let Some(&idx) = vocab.token_to_index.get(token) {
            exact.insert(idx, parse()?);
        } else if let Some(&idx) = vocab.token_to_index.get(&token.to_lowercase()) {
            if let Entry::Vacant(e) = folded.entry(idx) {
                e.insert(parse()?);
            }
        }
    }
    let mut table = Tensor::zeros(&[vocab.len(), d_w]);
    let r = EMBED_INIT_RANGE;
    for row in 0..vocab.len() {
        let noise: Vec<T> = (0..d_w).map(|_| T::lit(rng.gen_range(-r..=r))).collect();
        if row == Vocabulary::PAD_INDEX {
            continue;
        }
        let src = exact.remove(&row).or_else(|| folded.remove(&row)).unwrap_or(noise);
        table.data_mut()[row * d_w..(row + 1) * d_w].copy_from_slice(&src);
    }
    Ok(table)
}

/// `[vocab_size, d_c]`, uniform on `[-r, r]`, pad row zero.
pub fn init_char_table<T: Scalar>(vocab_size: usize, d_c: usize, r: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut data: Vec<T> = (0..vocab_size * d_c).map(|_| T::lit(rng.gen_range(-r..=r))).collect();
    let pad = d_c.min(data.len());
    data[..pad].iter_mut().for_each(|x| *x = T::zero());
    Tensor::from_vec(&[vocab_size, d_c], data).expect("consistent shape")
}

pub const DEFAULT_STAT_CAPS: [usize; 3] = [35, 35, 100];

/// One-hot buckets of `t1`, `t2`, `t3`; values past a cap land in its
/// last bucket.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatOneHot {
    pub t1: Vec<u8>,
    pub t2: Vec<u8>,
    pub t3: Vec<u8>,
}

pub fn stat_indices(stats: SentenceStats, caps: [usize; 3]) -> [usize; 3] {
    [
        stats.t1.min(caps[0] - 1),
        stats.t2.min(caps[1] - 1),
        stats.t3.min(caps[2] - 1),
    ]
}

pub fn encode_stats(stats: SentenceStats, caps: [usize; 3]) -> StatOneHot {
    let idx = stat_indices(stats, caps);
    let onehot = |k: usize| {
        let mut v = vec![0u8; caps[k]];
        v[idx[k]] = 1;
        v
    };
    StatOneHot {
        t1: onehot(0),
        t2: onehot(1),
        t3: onehot(2),
    }
}

/// SHA-256 of the trimmed sentence text, lowercase hex.
pub fn sentence_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.trim().as_bytes()))
}

/// A frozen sentence encoder producing one pooled vector per sentence.
pub trait SentenceEncoder {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&mut self, sentences: &[&str]) -> Result<Vec<Vec<f32>>>;
}

/// Offline stand-in encoder: signed feature hashing of lowercased word
/// unigrams and bigrams into `dim` buckets, L2-normalized.
#[derive(Clone, Debug)]
pub struct HashingEncoder {
    dim: usize,
    id: String,
}

impl HashingEncoder {
    pub fn new(dim: usize) -> Self {
        HashingEncoder {
            dim,
            id: format!("hashing-v1-{dim}"),
        }
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let words: Vec<String> = crate::corpus::tokenize(text).map(|(w, _)| w).unwrap_or_default();
        let mut v = vec![0f64; self.dim];
        let mut add = |feature: &str| {
            let h = Sha256::digest(feature.as_bytes());
            let bucket = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) % self.dim as u64;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket as usize] += sign;
        };
        for w in &words {
            add(&format!("u:{w}"));
        }
        for pair in words.windows(2) {
            add(&format!("b:{} {}", pair[0], pair[1]));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm = if norm > 0.0 { norm } else { 1.0 };
        v.into_iter().map(|x| (x / norm) as f32).collect()
    }
}

impl SentenceEncoder for HashingEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&mut self, sentences: &[&str]) -> Result<Vec<Vec<f32>>> {
        Ok(sentences.iter().map(|s| self.embed(s)).collect())
    }
}

/// Runs an external program once per batch: sentences are written to its
/// stdin one per line, and it must print one JSON array of numbers per
/// line in the same order.
#[derive(Clone, Debug)]
pub struct CommandEncoder {
    id: String,
    dim: usize,
    program: String,
    args: Vec<String>,
}

impl CommandEncoder {
    pub fn new(id: impl Into<String>, dim: usize, program: impl Into<String>, args: Vec<String>) -> Self {
        CommandEncoder {
            id: id.into(),
            dim,
            program: program.into(),
            args,
        }
    }
}

impl SentenceEncoder for CommandEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&mut self, sentences: &[&str]) -> Result<Vec<Vec<f32>>> {
        let fail = |msg: String| Error::Encoder(format!("{}: {msg}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            for s in sentences {
                writeln!(stdin, "{}", s.replace(['\n', '\r'], " ")).map_err(|e| fail(e.to_string()))?;
            }
        }
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!("exited with {}", out.status)));
        }
        let text = String::from_utf8(out.stdout).map_err(|e| fail(e.to_string()))?;
        let vectors: Vec<Vec<f32>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| fail(e.to_string())))
            .collect::<Result<_>>()?;
        if vectors.len() != sentences.len() {
            return Err(fail(format!("{} vectors for {} sentences", vectors.len(), sentences.len())));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != self.dim) {
            return Err(fail(format!("vector width {} but expected {}", v.len(), self.dim)));
        }
        Ok(vectors)
    }
}

pub const CACHE_FORMAT: &str = "ssc-sentence-vectors";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheRecord {
    sentence_hash: String,
    encoder_id: String,
    vector: Vec<f32>,
}

/// JSON-lines store of sentence vectors keyed by (encoder id, sentence
/// hash). Line one is `{"format":"ssc-sentence-vectors","version":1}`,
/// every following line is `{"sentence_hash","encoder_id","vector"}`,
/// sorted by encoder id then hash.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SentenceVectorCache {
    records: BTreeMap<(String, String), Vec<f32>>,
}

impl SentenceVectorCache {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header: CacheHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)
                .map_err(|e| Error::format(path, format!("bad header: {e}")))?,
            None => return Err(Error::format(path, "empty cache file")),
        };
        if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported cache {} v{}", header.format, header.version),
            ));
        }
        let mut records = BTreeMap::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: CacheRecord =
                serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?;
            records.insert((r.encoder_id, r.sentence_hash), r.vector);
        }
        Ok(SentenceVectorCache { records })
    }

    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(file);
            let header = CacheHeader {
                format: CACHE_FORMAT.into(),
                version: CACHE_VERSION,
            };
            let line = |w: &mut BufWriter<File>, s: String| writeln!(w, "{s}").map_err(|e| Error::io(&tmp, e));
            line(&mut w, serde_json::to_string(&header)?)?;
            for ((encoder_id, sentence_hash), vector) in &self.records {
                let r = CacheRecord {
                    sentence_hash: sentence_hash.clone(),
                    encoder_id: encoder_id.clone(),
                    vector: vector.clone(),
                };
                line(&mut w, serde_json::to_string(&r)?)?;
            }
            w.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, encoder_id: &str, hash: &str) -> Option<&[f32]> {
        self.records
            .get(&(encoder_id.to_string(), hash.to_string()))
            .map(Vec::as_slice)
    }

    pub fn insert(&mut self, encoder_id: &str, hash: String, vector: Vec<f32>) {
        self.records.insert((encoder_id.to_string(), hash), vector);
    }

    pub fn encoder_ids(&self) -> BTreeSet<&str> {
        self.records.keys().map(|(e, _)| e.as_str()).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub encoder_calls: usize,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            1.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

pub const ENCODER_BATCH: usize = 64;

/// Pretrained vector for every text, in order. Vectors come from the cache
/// when present; misses go to `encoder` (batched) and are written back.
/// Without an encoder the cache must hold exactly one encoder's vectors and
/// cover every sentence.
pub fn encode_pretrained_sentences(
    texts: &[&str],
    encoder: Option<&mut dyn SentenceEncoder>,
    cache_path: &Path,
) -> Result<(Vec<Vec<f32>>, CacheStats)> {
    let missing_hint = |detail: String| {
        Error::Encoder(format!(
            "{detail}; run `ssc export-sentence-vectors` to fill {}",
            cache_path.display()
        ))
    };
    let mut cache = SentenceVectorCache::load_or_default(cache_path)?;
    let hashes: Vec<String> = texts.iter().map(|t| sentence_hash(t)).collect();
    let mut stats = CacheStats::default();

    let encoder_id = match &encoder {
        Some(e) => e.id().to_string(),
        None => {
            let ids = cache.encoder_ids();
            match ids.len() {
                1 => ids.into_iter().next().expect("one id").to_string(),
                0 => return Err(missing_hint("no sentence encoder available and no cached vectors".into())),
                _ => {
                    return Err(Error::Encoder(format!(
                        "cache {} holds several encoders {ids:?}; choose one explicitly",
                        cache_path.display()
                    )))
                }
            }
        }
    };

    let mut todo: Vec<usize> = Vec::new();
    let mut queued = BTreeSet::new();
    for (i, h) in hashes.iter().enumerate() {
        if cache.get(&encoder_id, h).is_some() {
            stats.hits += 1;
        } else {
            stats.misses += 1;
            if queued.insert(h.as_str()) {
                todo.push(i);
            }
        }
    }

    if !todo.is_empty() {
        let Some(encoder) = encoder else {
            return Err(missing_hint(format!(
                "{} sentences have no cached vector for encoder {encoder_id}",
                stats.misses
            )));
        };
        for chunk in todo.chunks(ENCODER_BATCH) {
            let batch: Vec<&str> = chunk.iter().map(|&i| texts[i]).collect();
            let vectors = encoder.encode(&batch)?;
            stats.encoder_calls += 1;
            if vectors.len() != batch.len() {
                return Err(Error::Encoder(format!(
                    "encoder {encoder_id} returned {} vectors for {} sentences",
                    vectors.len(),
                    batch.len()
                )));
            }
            for (&i, v) in chunk.iter().zip(vectors) {
                if v.len() != encoder.dim() || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Encoder(format!(
                        "encoder {encoder_id} produced an invalid vector for sentence {i}"
                    )));
                }
                cache.insert(&encoder_id, hashes[i].clone(), v);
            }
        }
        cache.save(cache_path)?;
    }

    let vectors = hashes
        .iter()
        .map(|h| cache.get(&encoder_id, h).expect("filled above").to_vec())
        .collect::<Vec<_>>();
    if let Some(w) = vectors.first().map(Vec::len) {
        if vectors.iter().any(|v| v.len() != w) {
            return Err(Error::format(cache_path, format!("mixed vector widths for {encoder_id}")));
        }
    }
    Ok((vectors, stats))
}

/// Cached vectors of `encoder_id` for every text, without calling any
/// encoder.
pub fn cached_sentence_vectors(texts: &[&str], encoder_id: &str, cache_path: &Path) -> Result<Vec<Vec<f32>>> {
    let cache = SentenceVectorCache::load_or_default(cache_path)?;
    let mut out = Vec::with_capacity(texts.len());
    let mut missing = 0;
    for t in texts {
        match cache.get(encoder_id, &sentence_hash(t)) {
            Some(v) => out.push(v.to_vec()),
            None => missing += 1,
        }
    }
    if missing > 0 {
        return Err(Error::Encoder(format!(
            "{missing} sentences have no cached vector for encoder {encoder_id}; run `ssc export-sentence-vectors` to fill {}",
            cache_path.display()
        )));
    }
    Ok(out)
}

/// Convenience path for the default cache file name inside a directory.
pub fn cache_file(dir: &Path) -> PathBuf {
    dir.join("sentence_vectors.jsonl")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_pubmed_rct, Split};
    use rand::SeedableRng;

    fn corpus(text: &str) -> Corpus {
        parse_pubmed_rct(text.as_bytes(), Split::Train).unwrap()
    }

    #[test]
    fn vocab_orders_by_frequency() {
        let c = corpus("###1\nMETHODS\ta b a\n");
        let v = Vocabulary::build(&c, VocabKind::Word, 1).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "a", "b"]);
        let v2 = Vocabulary::build(&c, VocabKind::Word, 2).unwrap();
        assert_eq!(v2.tokens(), &["<pad>", "<unk>", "a"]);
        assert_eq!(v2.index("b"), Vocabulary::UNK_INDEX);
        let chars = Vocabulary::build(&c, VocabKind::Char, 1).unwrap();
        assert_eq!(chars.tokens(), &["<pad>", "<unk>", " ", "a", "b"]);
        assert_eq!(chars.encode_chars(&['a', 'z'], 5), vec![3, 1]);
    }

    #[test]
    fn empty_corpus_has_no_vocab() {
        assert!(Vocabulary::build(&corpus(""), VocabKind::Word, 1).is_err());
    }

    #[test]
    fn vocab_json_round_trip() {
        let c = corpus("###1\nMETHODS\tx y z y\n");
        let v = Vocabulary::build(&c, VocabKind::Word, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn word_vectors_copy_and_fill() {
        let c = corpus("###1\nMETHODS\talpha beta gamma\n");
        let v = Vocabulary::build(&c, VocabKind::Word, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vec.txt");
        std::fs::write(&p, "alpha 0.5 -1.25 2\nBeta 1 2 3\nzeta 9 9 9\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = load_word_vectors(&p, &v, 3, &mut rng).unwrap();
        assert_eq!(t.row(v.index("alpha")), &[0.5, -1.25, 2.0]);
        assert_eq!(t.row(v.index("beta")), &[1.0, 2.0, 3.0]);
        assert!(t.row(v.index("gamma")).iter().all(|x| x.abs() <= 0.05));
        assert_eq!(t.row(0), &[0.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let again: Tensor<f64> = load_word_vectors(&p, &v, 3, &mut rng).unwrap();
        assert_eq!(t, again);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(load_word_vectors::<f64>(&p, &v, 4, &mut rng).is_err());
        assert!(load_word_vectors::<f64>(&dir.path().join("none"), &v, 3, &mut rng).is_err());
    }

    #[test]
    fn stats_one_hot_clamps() {
        let h = encode_stats(SentenceStats { t1: 7, t2: 2, t3: 500 }, DEFAULT_STAT_CAPS);
        assert_eq!(h.t2[2], 1);
        assert_eq!(h.t3[99], 1);
        assert_eq!(h.t1.iter().map(|&x| x as usize).sum::<usize>(), 1);
        assert_eq!(h.t3.len(), 100);
    }

    #[test]
    fn char_table_range_and_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f32> = init_char_table(10, 4, 0.05, &mut rng);
        assert!(t.row(0).iter().all(|&x| x == 0.0));
        assert!(t.data().iter().all(|x| x.abs() <= 0.05));
    }

    struct Counting(HashingEncoder, usize);

    impl SentenceEncoder for Counting {
        fn id(&self) -> &str {
            self.0.id()
        }
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn encode(&mut self, s: &[&str]) -> Result<Vec<Vec<f32>>> {
            self.1 += s.len();
            self.0.encode(s)
        }
    }

    #[test]
    fn cache_hits_bypass_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let texts = ["first one.", "second one.", "first one."];
        let mut enc = Counting(HashingEncoder::new(8), 0);
        let (v1, s1) = encode_pretrained_sentences(&texts, Some(&mut enc), &path).unwrap();
        assert_eq!(enc.1, 2);
        assert_eq!(s1.misses, 3);
        assert_eq!(v1[0], v1[2]);
        let (v2, s2) = encode_pretrained_sentences(&texts, Some(&mut enc), &path).unwrap();
        assert_eq!(enc.1, 2);
        assert_eq!(s2.hit_rate(), 1.0);
        assert_eq!(v1, v2);
        let (v3, _) = encode_pretrained_sentences(&texts, None, &path).unwrap();
        assert_eq!(v1, v3);
        assert_eq!(SentenceVectorCache::load(&path).unwrap().len(), 2);
    }

    #[test]
    fn cache_miss_without_encoder_names_export_step() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let err = encode_pretrained_sentences(&["x"], None, &path).unwrap_err();
        assert!(err.to_string().contains("export-sentence-vectors"));
        let mut enc = HashingEncoder::new(4);
        encode_pretrained_sentences(&["x"], Some(&mut enc), &path).unwrap();
        let err = encode_pretrained_sentences(&["x", "y"], None, &path).unwrap_err();
        assert!(err.to_string().contains("export-sentence-vectors"));
        assert_eq!(cached_sentence_vectors(&["x"], enc.id(), &path).unwrap().len(), 1);
        assert!(cached_sentence_vectors(&["x"], "other", &path).is_err());
    }

    #[test]
    fn hashing_encoder_is_deterministic_and_normalized() {
        let mut e = HashingEncoder::new(16);
        let v = e.encode(&["The drug reduced pain.", "The drug reduced pain."]).unwrap();
        assert_eq!(v[0], v[1]);
        let n: f32 = v[0].iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
}
