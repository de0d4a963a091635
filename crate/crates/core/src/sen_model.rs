//! Sentence-level classifier: word, character, statistic and pretrained
//! sentence branches fused into a softmax head. Its pre-softmax logits
//! serve as the sentence embeddings of the higher levels.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::SelfAttention;
use crate::autograd::{Graph, Var};
use crate::corpus::{Corpus, Label, LabelSet};
use crate::error::{Error, Result};
use crate::features::{init_char_table, stat_indices, Vocabulary, DEFAULT_STAT_CAPS, EMBED_INIT_RANGE};
use crate::fusion::argmax;
use crate::losses::cce_graph;
use crate::nn::{apply_mask, dropout, BiRnn, Binding, CellKind, Linear, Mode, ParamKind, ParamStore, SeqMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{BatchEval, NormUpdate, TrainConfig, Trainable};

/// Which input branches feed the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub word: bool,
    pub char: bool,
    pub stat: bool,
    pub pretrained: bool,
}

impl Branches {
    pub const ALL: Branches = Branches {
        word: true,
        char: true,
        stat: true,
        pretrained: true,
    };

    pub fn any(&self) -> bool {
        self.word || self.char || self.stat || self.pretrained
    }

    /// Whether the recurrent head over the word/char/stat sequence runs.
    pub fn sequence(&self) -> bool {
        self.word || self.char || self.stat
    }
}

impl Default for Branches {
    fn default() -> Self {
        Branches::ALL
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.word, "word"),
            (self.char, "char"),
            (self.stat, "stat"),
            (self.pretrained, "pretrained"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut b = Branches {
            word: false,
            char: false,
            stat: false,
            pretrained: false,
        };
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "word" => b.word = true,
                "char" => b.char = true,
                "stat" => b.stat = true,
                "pretrained" => b.pretrained = true,
                "all" => b = Branches::ALL,
                other => return Err(Error::Config(format!("unknown branch {other:?}"))),
            }
        }
        if !b.any() {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        Ok(b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SenConfig {
    pub labels: LabelSet,
    pub d_h: usize,
    pub d_w: usize,
    pub d_c: usize,
    pub d_p: usize,
    pub w_max: usize,
    pub c_max: usize,
    pub stat_caps: [usize; 3],
    pub stat_hidden: usize,
    pub dropout: f64,
    pub branches: Branches,
    pub word_vocab: usize,
    pub char_vocab: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SenConfig {
    fn default() -> Self {
        SenConfig {
            labels: LabelSet::pubmed(),
            d_h: 128,
            d_w: 300,
            d_c: 50,
            d_p: 768,
            w_max: 50,
            c_max: 300,
            stat_caps: DEFAULT_STAT_CAPS,
            stat_hidden: 256,
            dropout: 0.2,
            branches: Branches::ALL,
            word_vocab: 2,
            char_vocab: 2,
            lr: 0.001,
            epochs: 30,
            batch_size: 64,
        }
    }
}

impl SenConfig {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_h", self.d_h),
            ("d_w", self.d_w),
            ("d_c", self.d_c),
            ("w_max", self.w_max),
            ("c_max", self.c_max),
            ("stat_hidden", self.stat_hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.stat_caps.contains(&0) {
            return Err(Error::Config("statistic caps must be positive".into()));
        }
        if self.branches.pretrained && self.d_p == 0 {
            return Err(Error::Config("d_p must be positive with the pretrained branch".into()));
        }
        if !self.branches.any() {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.word_vocab < 2 || self.char_vocab < 2 {
            return Err(Error::Config("vocabularies must hold <pad> and <unk>".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            plateau_factor: 0.1,
            plateau_patience: 3,
        }
    }
}

/// A featurized sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct SenExample {
    pub abstract_id: String,
    pub index: usize,
    pub words: Vec<usize>,
    pub chars: Vec<usize>,
    /// Bucket index of each statistic.
    pub stats: [usize; 3],
    pub pretrained: Vec<f64>,
    pub label: Label,
}

/// Turns every sentence of `corpus` into vocabulary indices, truncated to
/// `w_max` words and `c_max` characters. `pretrained` holds one vector per
/// sentence in corpus order and is required by the pretrained branch.
pub fn featurize(
    corpus: &Corpus,
    words: &Vocabulary,
    chars: &Vocabulary,
    pretrained: Option<&[Vec<f32>]>,
    config: &SenConfig,
) -> Result<Vec<SenExample>> {
    if corpus.labels != config.labels {
        return Err(Error::LabelMismatch {
            expected: config.labels.names().to_vec(),
            found: corpus.labels.names().to_vec(),
        });
    }
    if let Some(p) = pretrained {
        if p.len() != corpus.num_sentences() {
            return Err(Error::Shape(format!(
                "{} pretrained vectors for {} sentences",
                p.len(),
                corpus.num_sentences()
            )));
        }
    } else if config.branches.pretrained {
        return Err(Error::Config("pretrained branch enabled but no sentence vectors given".into()));
    }
    let mut out = Vec::with_capacity(corpus.num_sentences());
    for a in &corpus.abstracts {
        for (i, s) in a.sentences.iter().enumerate() {
            let pre = match pretrained {
                Some(p) if config.branches.pretrained => {
                    let v = &p[out.len()];
                    if v.len() != config.d_p {
                        return Err(Error::Shape(format!(
                            "pretrained vector width {} but d_p = {}",
                            v.len(),
                            config.d_p
                        )));
                    }
                    v.iter().map(|&x| x as f64).collect()
                }
                _ => Vec::new(),
            };
            out.push(SenExample {
                abstract_id: a.id.clone(),
                index: i,
                words: words.encode(s.words.iter().map(String::as_str), config.w_max),
                chars: chars.encode_chars(&s.chars, config.c_max),
                stats: stat_indices(s.stats, config.stat_caps),
                pretrained: pre,
                label: s.label,
            });
        }
    }
    Ok(out)
}

/// Padded inputs of a batch of sentences.
pub struct SenBatch<T> {
    pub word_ids: Vec<usize>,
    pub word_mask: SeqMask,
    pub char_ids: Vec<usize>,
    pub char_mask: SeqMask,
    pub stats: [Tensor<T>; 3],
    pub pretrained: Option<Tensor<T>>,
    pub targets: Tensor<T>,
}

fn pad_ids(seqs: &[&[usize]]) -> (Vec<usize>, SeqMask) {
    let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
    let mut ids = vec![Vocabulary::PAD_INDEX; seqs.len() * len];
    for (b, s) in seqs.iter().enumerate() {
        ids[b * len..b * len + s.len()].copy_from_slice(s);
    }
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    (ids, SeqMask::from_lengths(&lengths, len))
}

impl<T: Scalar> SenBatch<T> {
    pub fn new(examples: &[&SenExample], config: &SenConfig) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if let Some(e) = examples.iter().find(|e| e.words.is_empty() || e.chars.is_empty()) {
            return Err(Error::Shape(format!(
                "zero-length sentence {} of abstract {}",
                e.index, e.abstract_id
            )));
        }
        let b = examples.len();
        let words: Vec<&[usize]> = examples.iter().map(|e| e.words.as_slice()).collect();
        let chars: Vec<&[usize]> = examples.iter().map(|e| e.chars.as_slice()).collect();
        let (word_ids, word_mask) = pad_ids(&words);
        let (char_ids, char_mask) = pad_ids(&chars);
        let stats = std::array::from_fn(|k| {
            let cap = config.stat_caps[k];
            let mut t = Tensor::zeros(&[b, cap]);
            for (i, e) in examples.iter().enumerate() {
                t.data_mut()[i * cap + e.stats[k].min(cap - 1)] = T::one();
            }
            t
        });
        let pretrained = if config.branches.pretrained {
            let mut data = Vec::with_capacity(b * config.d_p);
            for e in examples {
                if e.pretrained.len() != config.d_p {
                    return Err(Error::Shape(format!(
                        "pretrained vector width {} but d_p = {}",
                        e.pretrained.len(),
                        config.d_p
                    )));
                }
                data.extend(e.pretrained.iter().map(|&x| T::lit(x)));
            }
            Some(Tensor::from_vec(&[b, config.d_p], data)?)
        } else {
            None
        };
        let l = config.num_labels();
        let mut targets = Tensor::zeros(&[b, l]);
        for (i, e) in examples.iter().enumerate() {
            if e.label.0 >= l {
                return Err(Error::Invalid(format!("label {} outside {l} labels", e.label.0)));
            }
            targets.data_mut()[i * l + e.label.0] = T::one();
        }
        Ok(SenBatch {
            word_ids,
            word_mask,
            char_ids,
            char_mask,
            stats,
            pretrained,
            targets,
        })
    }
}

/// Stacked bidirectional LSTM layers, each followed by a linear map from
/// `2 * d_h` back to `d_h`, optionally topped with self-attention.
#[derive(Clone, Debug)]
pub struct RecurrentStack {
    layers: Vec<(BiRnn, Linear)>,
    attention: Option<SelfAttention>,
}

impl RecurrentStack {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input: usize,
        d_h: usize,
        depth: usize,
        attention: bool,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        let mut width = input;
        for i in 0..depth {
            let rnn = BiRnn::new(store, rng, &format!("{prefix}.rnn{i}"), CellKind::Lstm, width, d_h)?;
            let merge = Linear::new(store, rng, &format!("{prefix}.merge{i}"), 2 * d_h, d_h)?;
            layers.push((rnn, merge));
            width = d_h;
        }
        let attention = if attention {
            Some(SelfAttention::new(store, rng, &format!("{prefix}.attention"), d_h)?)
        } else {
            None
        };
        Ok(RecurrentStack { layers, attention })
    }

    /// `[B, T, input]` to `[B, T, d_h]`, zero at padded positions.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Binding, x: Var, mask: &SeqMask) -> Result<Var> {
        if mask.is_empty() {
            return Err(Error::Shape("zero-length sequence".into()));
        }
        let mut h = x;
        for (rnn, merge) in &self.layers {
            let out = rnn.forward(g, p, h, mask)?;
            let merged = merge.forward(g, p, out.sequence)?;
            h = apply_mask(g, merged, mask)?;
        }
        match &self.attention {
            Some(att) => att.forward(g, p, h, mask),
            None => Ok(h),
        }
    }
}

#[derive(Clone, Debug)]
struct StatMlp {
    hidden: Linear,
    out: Linear,
}

/// Intermediate and final nodes of a forward pass.
pub struct SenOutput {
    /// `[B, W, d_h]`
    pub words: Option<Var>,
    /// `[B, C, d_h]`
    pub chars: Option<Var>,
    /// `[B, W + C, d_h]`
    pub word_char: Option<Var>,
    /// `[B, 3, d_h]`
    pub stats: Option<Var>,
    /// `[B, d_h]`
    pub pooled: Option<Var>,
    /// `[B, L]`, the sentence embeddings.
    pub logits: Var,
    /// `[B, L]`
    pub probs: Var,
}

pub const WORD_TABLE: &str = "word_embedding";
pub const CHAR_TABLE: &str = "char_embedding";

#[derive(Clone, Debug)]
pub struct SenModel<T> {
    pub config: SenConfig,
    pub store: ParamStore<T>,
    word: Option<RecurrentStack>,
    char: Option<RecurrentStack>,
    word_char: Option<RecurrentStack>,
    stats: Option<[StatMlp; 3]>,
    head: Option<(BiRnn, Linear)>,
    out: Linear,
}

impl<T: Scalar> SenModel<T> {
    /// Builds a freshly initialized model. The word table starts at zero;
    /// install pretrained vectors with [`SenModel::set_word_vectors`].
    pub fn new(config: SenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let word = if c.branches.word {
            store.insert(WORD_TABLE, ParamKind::Buffer, Tensor::zeros(&[c.word_vocab, c.d_w]))?;
            Some(RecurrentStack::new(&mut store, &mut rng, "word", c.d_w, c.d_h, 2, true)?)
        } else {
            None
        };
        let char = if c.branches.char {
            let table = init_char_table(c.char_vocab, c.d_c, EMBED_INIT_RANGE, &mut rng);
            store.insert(CHAR_TABLE, ParamKind::Embedding, table)?;
            Some(RecurrentStack::new(&mut store, &mut rng, "char", c.d_c, c.d_h, 2, true)?)
        } else {
            None
        };
        let word_char = if c.branches.word || c.branches.char {
            Some(RecurrentStack::new(&mut store, &mut rng, "word_char", c.d_h, c.d_h, 2, false)?)
        } else {
            None
        };
        let stats = if c.branches.stat {
            let mut mlps = Vec::with_capacity(3);
            for (k, &cap) in c.stat_caps.iter().enumerate() {
                mlps.push(StatMlp {
                    hidden: Linear::new(&mut store, &mut rng, &format!("stat{k}.hidden"), cap, c.stat_hidden)?,
                    out: Linear::new(&mut store, &mut rng, &format!("stat{k}.out"), c.stat_hidden, c.d_h)?,
                });
            }
            Some(mlps.try_into().expect("three statistics"))
        } else {
            None
        };
        let head = if c.branches.sequence() {
            Some((
                BiRnn::new(&mut store, &mut rng, "head.rnn", CellKind::Lstm, c.d_h, c.d_h)?,
                Linear::new(&mut store, &mut rng, "head.dense", 2 * c.d_h, c.d_h)?,
            ))
        } else {
            None
        };
        let head_width =
            if head.is_some() { c.d_h } else { 0 } + if c.branches.pretrained { c.d_p } else { 0 };
        let out = Linear::new(&mut store, &mut rng, "output", head_width, c.num_labels())?;
        Ok(SenModel {
            config,
            store,
            word,
            char,
            word_char,
            stats,
            head,
            out,
        })
    }

    /// Installs the frozen `[word_vocab, d_w]` word embedding table.
    pub fn set_word_vectors(&mut self, table: Tensor<T>) -> Result<()> {
        let slot = self
            .store
            .get_mut(WORD_TABLE)
            .ok_or_else(|| Error::Config("word branch disabled".into()))?;
        if slot.shape() != table.shape() {
            return Err(Error::Shape(format!(
                "word table {:?}, expected {:?}",
                table.shape(),
                slot.shape()
            )));
        }
        *slot = table;
        Ok(())
    }

    fn lookup_words(&self, g: &mut Graph<T>, batch: &SenBatch<T>) -> Result<Var> {
        let table = self.store.get(WORD_TABLE).expect("word table");
        let d = self.config.d_w;
        let mut data = Vec::with_capacity(batch.word_ids.len() * d);
        for &id in &batch.word_ids {
            if id >= table.shape()[0] {
                return Err(Error::Shape(format!("word index {id} outside vocabulary")));
            }
            data.extend_from_slice(table.row(id));
        }
        Ok(g.constant(Tensor::from_vec(
            &[batch.word_mask.batch(), batch.word_mask.len(), d],
            data,
        )?))
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Binding, batch: &SenBatch<T>, mode: &mut Mode) -> Result<SenOutput> {
        let rate = self.config.dropout;
        let b = batch.targets.shape()[0];
        let mut seq: Vec<(Var, SeqMask)> = Vec::new();
        let mut words = None;
        let mut chars = None;
        if let Some(stack) = &self.word {
            let x = self.lookup_words(g, batch)?;
            let h = stack.forward(g, p, x, &batch.word_mask)?;
            let h = dropout(g, h, rate, mode)?;
            words = Some(h);
            seq.push((h, batch.word_mask.clone()));
        }
        if let Some(stack) = &self.char {
            let prefix = [b, batch.char_mask.len()];
            let x = g.gather(p.get(CHAR_TABLE), &batch.char_ids, &prefix, Some(Vocabulary::PAD_INDEX))?;
            let h = stack.forward(g, p, x, &batch.char_mask)?;
            let h = dropout(g, h, rate, mode)?;
            chars = Some(h);
            seq.push((h, batch.char_mask.clone()));
        }
        let mut word_char = None;
        let mut parts: Vec<(Var, SeqMask)> = Vec::new();
        if let Some(stack) = &self.word_char {
            let (u, mask) = concat_sequences(g, &seq)?;
            let h = stack.forward(g, p, u, &mask)?;
            let h = dropout(g, h, rate, mode)?;
            word_char = Some(h);
            parts.push((h, mask));
        }
        let mut stats = None;
        if let Some(mlps) = &self.stats {
            let mut encoded = Vec::with_capacity(3);
            for (mlp, onehot) in mlps.iter().zip(&batch.stats) {
                let x = g.constant(onehot.clone());
                let h = mlp.hidden.forward(g, p, x)?;
                let h = g.relu(h);
                let h = mlp.out.forward(g, p, h)?;
                encoded.push(g.relu(h));
            }
            let t = g.stack(&encoded, 1)?;
            stats = Some(t);
            parts.push((t, SeqMask::all(b, 3)));
        }
        let mut features = Vec::new();
        let mut pooled = None;
        if let Some((rnn, dense)) = &self.head {
            let (z, mask) = concat_sequences(g, &parts)?;
            let out = rnn.forward(g, p, z, &mask)?;
            let h = dense.forward(g, p, out.pooled)?;
            let h = g.relu(h);
            let h = dropout(g, h, rate, mode)?;
            pooled = Some(h);
            features.push(h);
        }
        if let Some(pre) = &batch.pretrained {
            features.push(g.constant(pre.clone()));
        }
        let joined = if features.len() == 1 {
            features[0]
        } else {
            g.concat(&features, 1)?
        };
        let logits = self.out.forward(g, p, joined)?;
        let probs = g.softmax(logits, None)?;
        Ok(SenOutput {
            words,
            chars,
            word_char,
            stats,
            pooled,
            logits,
            probs,
        })
    }

    /// Logits and probabilities of every example, in order.
    pub fn predict(&self, examples: &[SenExample]) -> Result<Vec<(Vec<T>, Vec<T>)>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(self.config.batch_size.max(1)) {
            let refs: Vec<&SenExample> = chunk.iter().collect();
            let batch = SenBatch::new(&refs, &self.config)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let o = self.forward(&mut g, &p, &batch, &mut Mode::Eval)?;
            for (l, pr) in g.value(o.logits).rows().zip(g.value(o.probs).rows()) {
                out.push((l.to_vec(), pr.to_vec()));
            }
        }
        Ok(out)
    }

    /// The `L`-wide pre-softmax activations of every sentence of a corpus
    /// featurized for this model.
    pub fn extract_sentence_embeddings(&self, labels: &LabelSet, examples: &[SenExample]) -> Result<Vec<Vec<T>>> {
        if labels != &self.config.labels {
            return Err(Error::LabelMismatch {
                expected: self.config.labels.names().to_vec(),
                found: labels.names().to_vec(),
            });
        }
        Ok(self.predict(examples)?.into_iter().map(|(l, _)| l).collect())
    }
}

fn concat_sequences<T: Scalar>(g: &mut Graph<T>, parts: &[(Var, SeqMask)]) -> Result<(Var, SeqMask)> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::Config("no sequence branch enabled".into()))?;
    let mut mask = first.1.clone();
    for (_, m) in rest {
        mask = mask.concat(m)?;
    }
    let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
    let joined = if vars.len() == 1 { vars[0] } else { g.concat(&vars, 1)? };
    Ok((joined, mask))
}

impl<T: Scalar> Trainable<T> for SenModel<T> {
    type Example = SenExample;

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn num_labels(&self) -> usize {
        self.config.num_labels()
    }

    fn pinned_rows(&self) -> Vec<(String, usize)> {
        if self.char.is_some() {
            vec![(CHAR_TABLE.to_string(), Vocabulary::PAD_INDEX)]
        } else {
            Vec::new()
        }
    }

    fn loss(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        batch: &[&SenExample],
        mode: &mut Mode,
    ) -> Result<(Var, Vec<NormUpdate<T>>)> {
        let b = SenBatch::new(batch, &self.config)?;
        let out = self.forward(g, p, &b, mode)?;
        Ok((cce_graph(g, out.probs, &b.targets)?, Vec::new()))
    }

    fn eval_batch(&self, batch: &[&SenExample]) -> Result<BatchEval> {
        let b = SenBatch::new(batch, &self.config)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let out = self.forward(&mut g, &p, &b, &mut Mode::Eval)?;
        let loss = cce_graph(&mut g, out.probs, &b.targets)?;
        let pairs = batch
            .iter()
            .zip(g.value(out.probs).rows())
            .map(|(e, row)| (e.label, Label(argmax(row))))
            .collect();
        Ok(BatchEval {
            loss: g.value(loss).data()[0].as_f64(),
            pairs,
        })
    }
}
