//! Segment-level model: windows of `Q` consecutive sentence embeddings
//! with soft labels, classified by an MLP trained with KL divergence and
//! an L2 penalty, then averaged back onto sentences.

use num_traits::{Float, Num};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abs_model::AbstractExample;
use crate::autograd::{Graph, Var};
use crate::corpus::{Label, LabelSet};
use crate::error::{Error, Result};
use crate::fusion::{argmax, PredictionMatrix};
use crate::losses::kl_graph;
use crate::nn::{dropout, BatchNorm, Binding, Linear, Mode, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{BatchEval, NormUpdate, TrainConfig, Trainable};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub labels: LabelSet,
    pub q: usize,
    pub widths: Vec<usize>,
    pub dropout: f64,
    pub lambda: f64,
    pub aggregation: Aggregation,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            labels: LabelSet::pubmed(),
            q: 3,
            widths: vec![512, 256, 128, 64],
            dropout: 0.5,
            lambda: 1e-4,
            aggregation: Aggregation::Mean,
            lr: 0.001,
            epochs: 60,
            batch_size: 64,
        }
    }
}

impl SegConfig {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn input_width(&self) -> usize {
        self.q * self.num_labels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.batch_size == 0 || self.widths.contains(&0) {
            return Err(Error::Config("q, batch_size and widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!("invalid L2 coefficient {}", self.lambda)));
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

/// `Q` concatenated sentence embeddings starting at sentence `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub abstract_id: String,
    pub start: usize,
    /// Real sentences covered; less than `Q` only for short abstracts.
    pub covered: usize,
    pub vector: Vec<f64>,
    pub soft_label: Vec<f64>,
}

/// Sum of the label vectors divided by the sum of all their entries.
/// Padding slots are zero vectors.
pub fn segment_soft_label<T: Num + Copy>(labels: &[Vec<T>]) -> Result<Vec<T>> {
    let width = labels
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Invalid("segment without labels".into()))?;
    if labels.iter().any(|l| l.len() != width) {
        return Err(Error::Shape("label vectors differ in width".into()));
    }
    let mut sum = vec![T::zero(); width];
    for l in labels {
        for (s, &v) in sum.iter_mut().zip(l) {
            *s = *s + v;
        }
    }
    let total = sum.iter().fold(T::zero(), |a, &b| a + b);
    if total.is_zero() {
        return Err(Error::Invalid("segment has no labelled sentence".into()));
    }
    Ok(sum.into_iter().map(|s| s / total).collect())
}

fn one_hot(label: Label, width: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    v[label.0] = 1.0;
    v
}

/// Sliding windows of stride one: `I - Q + 1` segments when `I >= Q`,
/// otherwise a single zero-padded segment.
pub fn make_segments(example: &AbstractExample, q: usize, labels: usize) -> Result<Vec<Segment>> {
    let n = example.len();
    if n == 0 {
        return Err(Error::Invalid(format!("abstract {} has no sentences", example.id)));
    }
    if example.labels.len() != n {
        return Err(Error::Shape(format!(
            "abstract {}: {} labels for {n} sentences",
            example.id,
            example.labels.len()
        )));
    }
    let starts = if n >= q { n - q + 1 } else { 1 };
    let mut out = Vec::with_capacity(starts);
    for start in 0..starts {
        let covered = q.min(n - start);
        let mut vector = Vec::with_capacity(q * labels);
        let mut hots = Vec::with_capacity(q);
        for k in 0..q {
            match example.rows.get(start + k) {
                Some(row) if k < covered => {
                    if row.len() != labels {
                        return Err(Error::Shape(format!(
                            "abstract {} row width {}, expected {labels}",
                            example.id,
                            row.len()
                        )));
                    }
                    vector.extend_from_slice(row);
                    hots.push(one_hot(example.labels[start + k], labels));
                }
                _ => {
                    vector.extend(std::iter::repeat_n(0.0, labels));
                    hots.push(vec![0.0; labels]);
                }
            }
        }
        out.push(Segment {
            abstract_id: example.id.clone(),
            start,
            covered,
            vector,
            soft_label: segment_soft_label(&hots)?,
        });
    }
    Ok(out)
}

/// Per-sentence scores from overlapping segment predictions given as
/// `(start, distribution)`; each segment covers `start .. start + q`.
pub fn aggregate_to_sentences<T: Float>(
    abstract_id: &str,
    num_sentences: usize,
    q: usize,
    predictions: &[(usize, Vec<T>)],
    aggregation: Aggregation,
) -> Result<PredictionMatrix<T>> {
    let width = predictions
        .first()
        .map(|(_, p)| p.len())
        .ok_or_else(|| Error::Invalid(format!("abstract {abstract_id} has no segment predictions")))?;
    let mut acc: Vec<Option<(Vec<T>, usize)>> = vec![None; num_sentences];
    for (start, dist) in predictions {
        if dist.len() != width {
            return Err(Error::Shape("segment predictions differ in width".into()));
        }
        for slot in acc.iter_mut().skip(*start).take(q) {
            match slot {
                None => *slot = Some((dist.clone(), 1)),
                Some((v, n)) => {
                    for (a, &b) in v.iter_mut().zip(dist) {
                        *a = match aggregation {
                            Aggregation::Mean => *a + b,
                            Aggregation::Max => a.max(b),
                        };
                    }
                    *n += 1;
                }
            }
        }
    }
    let rows = acc
        .into_iter()
        .enumerate()
        .map(|(i, slot)| {
            let (v, n) = slot.ok_or_else(|| {
                Error::Invalid(format!("sentence {i} of abstract {abstract_id} is not covered by any segment"))
            })?;
            Ok(match aggregation {
                Aggregation::Mean => {
                    let n = T::from(n).expect("count");
                    v.into_iter().map(|x| x / n).collect()
                }
                Aggregation::Max => v,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PredictionMatrix::new(abstract_id, rows))
}

#[derive(Clone, Debug)]
struct Block {
    dense: Linear,
    norm: BatchNorm,
}

/// Nodes of a forward pass.
pub struct SegOutput {
    /// Output of each hidden block.
    pub blocks: Vec<Var>,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    pub config: SegConfig,
    pub store: ParamStore<T>,
    blocks: Vec<Block>,
    out: Linear,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut width = config.input_width();
        let mut blocks = Vec::with_capacity(config.widths.len());
        for (i, &w) in config.widths.iter().enumerate() {
            blocks.push(Block {
                dense: Linear::new(&mut store, &mut rng, &format!("block{i}.dense"), width, w)?,
                norm: BatchNorm::new(&mut store, &format!("block{i}.norm"), w)?,
            });
            width = w;
        }
        let out = Linear::new(&mut store, &mut rng, "output", width, config.num_labels())?;
        Ok(SegModel {
            config,
            store,
            blocks,
            out,
        })
    }

    /// `x: [B, Q * L]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        x: Var,
        mode: &mut Mode,
    ) -> Result<(SegOutput, Vec<NormUpdate<T>>)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_width() {
            return Err(Error::Shape(format!(
                "segment input {shape:?}, expected width {}",
                self.config.input_width()
            )));
        }
        let mut h = x;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut updates = Vec::new();
        for block in &self.blocks {
            let z = block.dense.forward(g, p, h)?;
            let z = g.elu(z);
            let (z, stats) = block.norm.forward(g, p, &self.store, z, mode)?;
            if let Some(stats) = stats {
                updates.push(NormUpdate {
                    layer: block.norm.clone(),
                    stats,
                    rows: shape[0],
                });
            }
            h = dropout(g, z, self.config.dropout, mode)?;
            outputs.push(h);
        }
        let logits = self.out.forward(g, p, h)?;
        let probs = g.softmax(logits, None)?;
        Ok((
            SegOutput {
                blocks: outputs,
                logits,
                probs,
            },
            updates,
        ))
    }

    fn inputs(&self, batch: &[&Segment]) -> Result<(Tensor<T>, Tensor<T>)> {
        let w = self.config.input_width();
        let l = self.config.num_labels();
        let mut x = Vec::with_capacity(batch.len() * w);
        let mut y = Vec::with_capacity(batch.len() * l);
        for s in batch {
            if s.vector.len() != w || s.soft_label.len() != l {
                return Err(Error::Shape(format!(
                    "segment of abstract {} has width {}/{}, expected {w}/{l}",
                    s.abstract_id,
                    s.vector.len(),
                    s.soft_label.len()
                )));
            }
            x.extend(s.vector.iter().map(|&v| T::lit(v)));
            y.extend(s.soft_label.iter().map(|&v| T::lit(v)));
        }
        Ok((
            Tensor::from_vec(&[batch.len(), w], x)?,
            Tensor::from_vec(&[batch.len(), l], y)?,
        ))
    }

    fn regularized(&self, p: &Binding) -> Vec<Var> {
        self.store
            .iter()
            .filter(|(_, kind, _)| *kind == ParamKind::Weight)
            .map(|(name, _, _)| p.get(name))
            .collect()
    }

    /// Predicted distribution of every segment, in order.
    pub fn predict_segments(&self, segments: &[Segment]) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(segments.len());
        for chunk in segments.chunks(self.config.batch_size) {
            let refs: Vec<&Segment> = chunk.iter().collect();
            let (x, _) = self.inputs(&refs)?;
            let mut g = Graph::new();
            let p = self.store.bind(&mut g);
            let xv = g.constant(x);
            let (o, _) = self.forward(&mut g, &p, xv, &mut Mode::Eval)?;
            out.extend(g.value(o.probs).rows().map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// Per-sentence scores of every abstract.
    pub fn predict(&self, examples: &[AbstractExample]) -> Result<Vec<PredictionMatrix<T>>> {
        let l = self.config.num_labels();
        let mut out = Vec::with_capacity(examples.len());
        for e in examples {
            let segments = make_segments(e, self.config.q, l)?;
            let preds = self.predict_segments(&segments)?;
            let starts: Vec<(usize, Vec<T>)> = segments.iter().map(|s| s.start).zip(preds).collect();
            out.push(aggregate_to_sentences(&e.id, e.len(), self.config.q, &starts, self.config.aggregation)?);
        }
        Ok(out)
    }
}

impl<T: Scalar> Trainable<T> for SegModel<T> {
    type Example = Segment;

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
        batch: &[&Segment],
        mode: &mut Mode,
    ) -> Result<(Var, Vec<NormUpdate<T>>)> {
        let (x, y) = self.inputs(batch)?;
        let xv = g.constant(x);
        let (out, updates) = self.forward(g, p, xv, mode)?;
        let weights = self.regularized(p);
        Ok((kl_graph(g, out.probs, &y, &weights, self.config.lambda)?, updates))
    }

    fn eval_batch(&self, batch: &[&Segment]) -> Result<BatchEval> {
        let (x, y) = self.inputs(batch)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let xv = g.constant(x);
        let (out, _) = self.forward(&mut g, &p, xv, &mut Mode::Eval)?;
        let weights = self.regularized(&p);
        let loss = kl_graph(&mut g, out.probs, &y, &weights, self.config.lambda)?;
        let pairs = y
            .rows()
            .zip(g.value(out.probs).rows())
            .map(|(gold, pred)| (Label(argmax(gold)), Label(argmax(pred))))
            .collect();
        Ok(BatchEval {
            loss: g.value(loss).data()[0].as_f64(),
            pairs,
        })
    }
}
