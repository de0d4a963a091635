//! Benchmark corpora: label sets, abstracts, tokenization and the
//! per-sentence positional statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered, fixed label inventory of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

const PUBMED_LABELS: [&str; 5] = ["BACKGROUND", "OBJECTIVE", "METHOD", "RESULT", "CONCLUSION"];
const NICTA_LABELS: [&str; 6] = ["BACKGROUND", "INTERVENTION", "OUTCOME", "POPULATION", "STUDY DESIGN", "OTHER"];

fn normalize_label(raw: &str) -> String {
    raw.trim()
        .to_uppercase()
        .replace(['_', '-'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl LabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        if names.is_empty() || !names.iter().all(|n| seen.insert(n.clone())) {
            return Err(Error::Config(format!("invalid label set {names:?}")));
        }
        Ok(LabelSet { names })
    }

    pub fn pubmed() -> Self {
        LabelSet {
            names: PUBMED_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn nicta() -> Self {
        LabelSet {
            names: NICTA_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, label: Label) -> &str {
        &self.names[label.0]
    }

    /// Resolves a label name. Matching ignores case, `_`/`-` versus space,
    /// and a trailing plural `S` (the PubMed release writes `METHODS`).
    pub fn parse(&self, raw: &str) -> Option<Label> {
        let norm = normalize_label(raw);
        let find = |s: &str| self.names.iter().position(|n| normalize_label(n) == s);
        find(&norm)
            .or_else(|| norm.strip_suffix('S').and_then(find))
            .or_else(|| if norm == "STUDY" { find("STUDY DESIGN") } else { None })
            .map(Label)
    }
}

/// Index into a [`LabelSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Label(pub usize);

impl Label {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentence count of the abstract (`t1`), zero-based position (`t2`) and
/// word count (`t3`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceStats {
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub text: String,
    pub label: Label,
    pub words: Vec<String>,
    pub chars: Vec<char>,
    pub stats: SentenceStats,
}

impl Sentence {
    pub fn new(text: &str, label: Label) -> Result<Self> {
        let (words, chars) = tokenize(text)?;
        Ok(Sentence {
            text: text.trim().to_string(),
            label,
            words,
            chars,
            stats: SentenceStats::default(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Abstract {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

impl Abstract {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(rename = "dev")]
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub labels: LabelSet,
    pub abstracts: Vec<Abstract>,
}

impl Corpus {
    pub fn num_sentences(&self) -> usize {
        self.abstracts.iter().map(Abstract::len).sum()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.abstracts.iter().flat_map(|a| a.sentences.iter())
    }

    /// Writes the corpus back in the PubMed RCT release grammar.
    pub fn write_pubmed<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for a in &self.abstracts {
            writeln!(out, "###{}", a.id)?;
            for s in &a.sentences {
                writeln!(out, "{}\t{}", self.labels.name(s.label), s.text)?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Splits a sentence into lowercased word tokens (runs of alphanumerics;
/// every other non-space character is its own token) and its characters.
pub fn tokenize(text: &str) -> Result<(Vec<String>, Vec<char>)> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Invalid("cannot tokenize blank text".into()));
    }
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                words.push(c.to_lowercase().collect());
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    Ok((words, text.chars().collect()))
}

/// Fills `t1`, `t2`, `t3` for every sentence.
pub fn compute_stats(mut abs: Abstract) -> Abstract {
    let n = abs.sentences.len();
    for (i, s) in abs.sentences.iter_mut().enumerate() {
        s.stats = SentenceStats {
            t1: n,
            t2: i,
            t3: s.words.len(),
        };
    }
    abs
}

fn parse_error(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

struct BlockParser {
    labels: LabelSet,
    multi_label: bool,
    abstracts: Vec<Abstract>,
    open: Option<(String, usize, Vec<Sentence>)>,
}

impl BlockParser {
    fn close(&mut self) -> Result<()> {
        if let Some((id, line, sentences)) = self.open.take() {
            if sentences.is_empty() {
                return Err(parse_error(line, format!("abstract {id} has no sentences")));
            }
            self.abstracts.push(compute_stats(Abstract { id, sentences }));
        }
        Ok(())
    }

    fn label(&self, raw: &str, line: usize) -> Result<Label> {
        if self.multi_label {
            let mut found = Vec::new();
            for part in raw.split(['|', ',', ';']).filter(|p| !p.trim().is_empty()) {
                found.push(
                    self.labels
                        .parse(part)
                        .ok_or_else(|| parse_error(line, format!("unknown label {:?}", part.trim())))?,
                );
            }
            found
                .into_iter()
                .min()
                .ok_or_else(|| parse_error(line, "empty label"))
        } else {
            self.labels
                .parse(raw)
                .ok_or_else(|| parse_error(line, format!("unknown label {:?}", raw.trim())))
        }
    }

    fn feed(&mut self, lineno: usize, line: &str) -> Result<()> {
        let line = line.trim_end_matches(['\r', '\n']);
        if let Some(id) = line.strip_prefix("###") {
            self.close()?;
            self.open = Some((id.trim().to_string(), lineno, Vec::new()));
            return Ok(());
        }
        if line.trim().is_empty() {
            return self.close();
        }
        let (raw_label, text) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(lineno, "missing TAB between label and sentence"))?;
        let label = self.label(raw_label, lineno)?;
        let sentence = Sentence::new(text, label).map_err(|e| parse_error(lineno, e.to_string()))?;
        match &mut self.open {
            Some((_, _, sentences)) => sentences.push(sentence),
            None => return Err(parse_error(lineno, "sentence outside of an abstract (no ### header)")),
        }
        Ok(())
    }

    fn run<R: BufRead>(mut self, input: R, split: Split) -> Result<Corpus> {
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| parse_error(i + 1, e.to_string()))?;
            self.feed(i + 1, &line)?;
        }
        self.close()?;
        Ok(Corpus {
            split,
            labels: self.labels,
            abstracts: self.abstracts,
        })
    }
}

/// Parses the PubMed RCT release grammar: `###<id>` opens an abstract,
/// each following `LABEL<TAB>sentence` line adds a sentence, and a blank
/// line (or the next header) closes it.
pub fn parse_pubmed_rct<R: BufRead>(input: R, split: Split) -> Result<Corpus> {
    BlockParser {
        labels: LabelSet::pubmed(),
        multi_label: false,
        abstracts: Vec::new(),
        open: None,
    }
    .run(input, split)
}

/// Parses NICTA-PIBOSO data in either of two layouts:
///
/// * the `###<id>` block grammar used for PubMed, where the label field may
///   list several labels separated by `|`, `,` or `;`;
/// * a delimited table (comma or tab) with a header row naming a document
///   column (`document`, `doc_id`, `abstract_id`), an optional sentence
///   position column (`sentence`, `sentence_id`, `sentence_index`), a text
///   column (`text`) and either a `label` column or one 0/1 column per
///   label. Repeated rows for the same sentence add labels.
///
/// A sentence with several labels keeps the one that comes first in the
/// canonical label order.
pub fn parse_nicta<R: BufRead>(mut input: R, split: Split) -> Result<Corpus> {
    let mut content = String::new();
    input
        .read_to_string(&mut content)
        .map_err(|e| parse_error(0, e.to_string()))?;
    let first = content.lines().find(|l| !l.trim().is_empty());
    match first {
        None => Ok(Corpus {
            split,
            labels: LabelSet::nicta(),
            abstracts: Vec::new(),
        }),
        Some(l) if l.starts_with("###") => BlockParser {
            labels: LabelSet::nicta(),
            multi_label: true,
            abstracts: Vec::new(),
            open: None,
        }
        .run(content.as_bytes(), split),
        Some(header) => parse_nicta_table(&content, header.contains('\t'), split),
    }
}

fn parse_nicta_table(content: &str, tabs: bool, split: Split) -> Result<Corpus> {
    let labels = LabelSet::nicta();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(if tabs { b'\t' } else { b',' })
        .flexible(false)
        .from_reader(content.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| parse_error(1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h.as_str()));
    let doc_col = col(&["document", "doc", "doc_id", "document_id", "abstract_id", "abstract"])
        .ok_or_else(|| parse_error(1, "no document id column"))?;
    let sent_col = col(&["sentence", "sentence_id", "sentence_index", "sent", "sent_id"]);
    let text_col = col(&["text", "sentence_text"]).ok_or_else(|| parse_error(1, "no text column"))?;
    let label_col = col(&["label", "labels", "class"]);
    let onehot: Vec<(usize, Label)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| labels.parse(h).map(|l| (i, l)))
        .collect();
    if label_col.is_none() && onehot.is_empty() {
        return Err(parse_error(1, "no label column"));
    }

    // document id -> (position key -> (text, labels)), in first-seen order
    let mut order: Vec<String> = Vec::new();
    let mut docs: BTreeMap<String, (usize, BTreeMap<usize, (String, Vec<Label>)>)> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let lineno = i + 2;
        let record = record.map_err(|e| parse_error(lineno, e.to_string()))?;
        let field = |c: usize| record.get(c).unwrap_or("").trim();
        let doc = field(doc_col).to_string();
        let mut found = Vec::new();
        if let Some(c) = label_col {
            for part in field(c).split(['|', ';']).filter(|p| !p.trim().is_empty()) {
                found.push(
                    labels
                        .parse(part)
                        .ok_or_else(|| parse_error(lineno, format!("unknown label {:?}", part.trim())))?,
                );
            }
        }
        for &(c, l) in &onehot {
            if matches!(field(c), "1" | "1.0" | "true" | "yes") {
                found.push(l);
            }
        }
        if !docs.contains_key(&doc) {
            order.push(doc.clone());
        }
        let entry = docs.entry(doc).or_insert_with(|| (0, BTreeMap::new()));
        let key = match sent_col {
            Some(c) => field(c)
                .parse::<usize>()
                .map_err(|_| parse_error(lineno, format!("bad sentence position {:?}", field(c))))?,
            None => {
                entry.0 += 1;
                entry.0 - 1
            }
        };
        let slot = entry
            .1
            .entry(key)
            .or_insert_with(|| (field(text_col).to_string(), Vec::new()));
        slot.1.extend(found);
    }
    let mut abstracts = Vec::with_capacity(order.len());
    for id in order {
        let (_, sentences) = docs.remove(&id).expect("seen document");
        let mut parsed = Vec::with_capacity(sentences.len());
        for (pos, (text, ls)) in sentences {
            let label = ls
                .into_iter()
                .min()
                .ok_or_else(|| parse_error(0, format!("document {id} sentence {pos} has no label")))?;
            parsed.push(
                Sentence::new(&text, label)
                    .map_err(|e| parse_error(0, format!("document {id} sentence {pos}: {e}")))?,
            );
        }
        abstracts.push(compute_stats(Abstract { id, sentences: parsed }));
    }
    Ok(Corpus {
        split,
        labels,
        abstracts,
    })
}
