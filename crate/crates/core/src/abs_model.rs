//! Abstract-level model: two convolutions over the stacked sentence
//! embeddings of an abstract, a bidirectional recurrent decoder and a
//! per-sentence sigmoid head trained with binary cross-entropy.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::{Corpus, Label, LabelSet};
use crate::error::{Error, Result};
use crate::fusion::{argmax, PredictionMatrix};
use crate::losses::bce_graph;
use crate::nn::{apply_mask, BiRnn, Binding, CellKind, Conv2d, Linear, Mode, ParamStore, SeqMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{BatchEval, NormUpdate, TrainConfig, Trainable};

/// Sentence embeddings keyed by `(abstract id, sentence index)`.
pub type EmbeddingMap = BTreeMap<(String, usize), Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbsConfig {
    pub labels: LabelSet,
    pub kernel: (usize, usize),
    pub filters: usize,
    pub cell: CellKind,
    pub rnn_hidden: usize,
    pub max_sentences: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for AbsConfig {
    fn default() -> Self {
        AbsConfig {
            labels: LabelSet::pubmed(),
            kernel: (8, 3),
            filters: 16,
            cell: CellKind::Lstm,
            rnn_hidden: 40,
            max_sentences: 64,
            lr: 0.003,
            epochs: 60,
            batch_size: 32,
        }
    }
}

impl AbsConfig {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.filters == 0 || self.rnn_hidden == 0 {
            return Err(Error::Config("kernel, filters and rnn_hidden must be positive".into()));
        }
        if self.max_sentences == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_sentences and batch_size must be positive".into()));
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

/// One abstract: its `I x L` embedding rows and gold labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AbstractExample {
    pub id: String,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

impl AbstractExample {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Collects the embeddings of each abstract in sentence order.
pub fn group_by_abstract(corpus: &Corpus, embeddings: &EmbeddingMap, width: usize) -> Result<Vec<AbstractExample>> {
    let mut out = Vec::with_capacity(corpus.abstracts.len());
    for a in &corpus.abstracts {
        let mut rows = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let v = embeddings
                .get(&(a.id.clone(), i))
                .ok_or_else(|| Error::MissingEmbedding {
                    abstract_id: a.id.clone(),
                    index: i,
                })?;
            if v.len() != width {
                return Err(Error::Shape(format!(
                    "embedding of abstract {} sentence {i} has width {}, expected {width}",
                    a.id,
                    v.len()
                )));
            }
            rows.push(v.clone());
        }
        out.push(AbstractExample {
            id: a.id.clone(),
            rows,
            labels: a.sentences.iter().map(|s| s.label).collect(),
        });
    }
    Ok(out)
}

/// A batch padded to its longest abstract.
pub struct AbsBatch<T> {
    /// `[B, I_max, L]`
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
    pub mask: SeqMask,
}

impl<T: Scalar> AbsBatch<T> {
    pub fn new(examples: &[&AbstractExample], labels: usize, max_sentences: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let lengths: Vec<usize> = examples.iter().map(|e| e.len().min(max_sentences)).collect();
        let i_max = lengths.iter().copied().max().unwrap_or(0).max(1);
        let b = examples.len();
        let mut inputs = Tensor::zeros(&[b, i_max, labels]);
        let mut targets = Tensor::zeros(&[b, i_max, labels]);
        for (n, e) in examples.iter().enumerate() {
            for i in 0..lengths[n] {
                let row = &e.rows[i];
                if row.len() != labels {
                    return Err(Error::Shape(format!(
                        "abstract {} row width {} but model has {labels} labels",
                        e.id,
                        row.len()
                    )));
                }
                let base = (n * i_max + i) * labels;
                for (k, &v) in row.iter().enumerate() {
                    inputs.data_mut()[base + k] = T::lit(v);
                }
                if let Some(l) = e.labels.get(i) {
                    if l.0 >= labels {
                        return Err(Error::Invalid(format!("label {} outside {labels} labels", l.0)));
                    }
                    targets.data_mut()[base + l.0] = T::one();
                }
            }
        }
        Ok(AbsBatch {
            inputs,
            targets,
            mask: SeqMask::from_lengths(&lengths, i_max),
        })
    }
}

/// Nodes of a forward pass.
pub struct AbsOutput {
    /// `[B, filters, I, L]` after the first and second convolution.
    pub conv1: Var,
    pub conv2: Var,
    /// `[B, I, 2 * rnn_hidden]`
    pub decoded: Var,
    /// `[B, I, L]` sigmoid scores, zero at padded rows.
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct AbsModel<T> {
    pub config: AbsConfig,
    pub store: ParamStore<T>,
    conv1: Conv2d,
    conv2: Conv2d,
    rnn: BiRnn,
    out: Linear,
}

impl<T: Scalar> AbsModel<T> {
    pub fn new(config: AbsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = config.num_labels();
        let conv1 = Conv2d::new(&mut store, &mut rng, "conv1", 1, config.filters, config.kernel)?;
        let conv2 = Conv2d::new(&mut store, &mut rng, "conv2", config.filters, config.filters, config.kernel)?;
        let rnn = BiRnn::new(&mut store, &mut rng, "decoder", config.cell, l * config.filters, config.rnn_hidden)?;
        let out = Linear::new(&mut store, &mut rng, "output", 2 * config.rnn_hidden, l)?;
        Ok(AbsModel {
            config,
            store,
            conv1,
            conv2,
            rnn,
            out,
        })
    }

    fn conv_mask(&self, mask: &SeqMask) -> Tensor<T> {
        let (b, i, l, c) = (mask.batch(), mask.len(), self.config.num_labels(), self.config.filters);
        let mut data = Vec::with_capacity(b * c * i * l);
        for n in 0..b {
            for _ in 0..c {
                for t in 0..i {
                    let v = if mask.get(n, t) { T::one() } else { T::zero() };
                    data.extend(std::iter::repeat_n(v, l));
                }
            }
        }
        Tensor::from_vec(&[b, c, i, l], data).expect("mask shape")
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Binding, batch: &AbsBatch<T>) -> Result<AbsOutput> {
        let shape = batch.inputs.shape().to_vec();
        let (b, i, l) = (shape[0], shape[1], shape[2]);
        if l != self.config.num_labels() {
            return Err(Error::Shape(format!(
                "embedding width {l} but model expects {}",
                self.config.num_labels()
            )));
        }
        let keep = self.conv_mask(&batch.mask);
        let x = g.constant(batch.inputs.clone().reshape(&[b, 1, i, l])?);
        let h = self.conv1.forward(g, p, x)?;
        let h = g.relu(h);
        let conv1 = g.mul_const(h, keep.clone())?;
        let h = self.conv2.forward(g, p, conv1)?;
        let h = g.relu(h);
        let conv2 = g.mul_const(h, keep)?;
        let h = g.permute(conv2, &[0, 2, 3, 1])?;
        let h = g.reshape(h, &[b, i, l * self.config.filters])?;
        let decoded = self.rnn.forward(g, p, h, &batch.mask)?.sequence;
        let z = self.out.forward(g, p, decoded)?;
        let s = g.sigmoid(z);
        let scores = apply_mask(g, s, &batch.mask)?;
        Ok(AbsOutput {
            conv1,
            conv2,
            decoded,
            scores,
        })
    }

    /// Per-sentence scores for every abstract. Abstracts longer than
    /// `max_sentences` are scored in consecutive windows.
    pub fn predict(&self, examples: &[AbstractExample]) -> Result<Vec<PredictionMatrix<T>>> {
        let cap = self.config.max_sentences;
        let mut pieces: Vec<(usize, AbstractExample)> = Vec::new();
        for (n, e) in examples.iter().enumerate() {
            if e.is_empty() {
                return Err(Error::Invalid(format!("abstract {} has no sentences", e.id)));
            }
            for (start, rows) in e.rows.chunks(cap).enumerate() {
                let labels = e.labels.iter().skip(start * cap).take(rows.len()).copied().collect();
                pieces.push((
                    n,
                    AbstractExample {
                        id: e.id.clone(),
                        rows: rows.to_vec(),
                        labels,
                    },
                ));
            }
        }
        let mut out: Vec<PredictionMatrix<T>> = examples.iter().map(|e| PredictionMatrix::new(e.id.clone(), Vec::new())).collect();
        let l = self.config.num_labels();
        for chunk in pieces.chunks(self.config.batch_size) {
            let refs: Vec<&AbstractExample> = chunk.iter().map(|(_, e)| e).collect();
            let batch = AbsBatch::new(&refs, l, cap)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let o = self.forward(&mut g, &p, &batch)?;
            let scores = g.value(o.scores);
            let i_max = batch.mask.len();
            for (k, (n, e)) in chunk.iter().enumerate() {
                for i in 0..e.len() {
                    let base = (k * i_max + i) * l;
                    out[*n].rows.push(scores.data()[base..base + l].to_vec());
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Trainable<T> for AbsModel<T> {
    type Example = AbstractExample;

    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn num_labels(&self) -> usize {
        self.config.num_labels()
    }

    fn loss(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        batch: &[&AbstractExample],
        _mode: &mut Mode,
    ) -> Result<(Var, Vec<NormUpdate<T>>)> {
        let b = AbsBatch::new(batch, self.config.num_labels(), self.config.max_sentences)?;
        let out = self.forward(g, p, &b)?;
        Ok((bce_graph(g, out.scores, &b.targets, &b.mask)?, Vec::new()))
    }

    fn eval_batch(&self, batch: &[&AbstractExample]) -> Result<BatchEval> {
        let l = self.config.num_labels();
        let b = AbsBatch::new(batch, l, self.config.max_sentences)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let out = self.forward(&mut g, &p, &b)?;
        let loss = bce_graph(&mut g, out.scores, &b.targets, &b.mask)?;
        let scores = g.value(out.scores);
        let i_max = b.mask.len();
        let mut pairs = Vec::new();
        for (n, e) in batch.iter().enumerate() {
            for (i, &gold) in e.labels.iter().enumerate().take(self.config.max_sentences) {
                let base = (n * i_max + i) * l;
                pairs.push((gold, Label(argmax(&scores.data()[base..base + l]))));
            }
        }
        Ok(BatchEval {
            loss: g.value(loss).data()[0].as_f64(),
            pairs,
        })
    }
}
