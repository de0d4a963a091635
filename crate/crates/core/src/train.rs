//! Mini-batch training shared by the three models: Adam, learning-rate
//! reduction on plateau, per-epoch history and best-epoch snapshots.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, Graph, Var};
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::metrics::weighted_f1;
use crate::nn::{Adam, BatchNorm, Binding, Mode, ParamStore, ReduceLrOnPlateau};
use crate::scalar::Scalar;

/// Running-statistics update for one batch-norm layer.
pub struct NormUpdate<T> {
    pub layer: BatchNorm,
    pub stats: BatchStats<T>,
    pub rows: usize,
}

/// Loss value and gold/predicted label pairs of an evaluation batch.
#[derive(Clone, Debug, Default)]
pub struct BatchEval {
    pub loss: f64,
    pub pairs: Vec<(Label, Label)>,
}

pub trait Trainable<T: Scalar> {
    type Example;

    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    fn num_labels(&self) -> usize;

    /// `(param, row)` pairs held at zero after each update.
    fn pinned_rows(&self) -> Vec<(String, usize)> {
        Vec::new()
    }

    /// Builds the loss of a batch on `g`.
    fn loss(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        batch: &[&Self::Example],
        mode: &mut Mode,
    ) -> Result<(Var, Vec<NormUpdate<T>>)>;

    /// Loss in inference mode plus per-unit label pairs.
    fn eval_batch(&self, batch: &[&Self::Example]) -> Result<BatchEval>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; `None` means the
    /// initialization.
    pub best_epoch: Option<usize>,
}

/// Everything needed to continue training where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub optimizer: Adam<T>,
    pub scheduler: ReduceLrOnPlateau,
    pub history: History,
    pub lr: f64,
    pub best: Option<ParamStore<T>>,
    best_key: Option<(f64, f64)>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            optimizer: Adam::new(config.lr),
            scheduler: ReduceLrOnPlateau::new(config.plateau_factor, config.plateau_patience),
            history: History::default(),
            lr: config.lr,
            best: None,
            best_key: None,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.history.epochs.len()
    }

    /// Rebuilds the selection key from a restored history.
    pub fn restore(
        optimizer: Adam<T>,
        scheduler: ReduceLrOnPlateau,
        history: History,
        lr: f64,
        best: Option<ParamStore<T>>,
    ) -> Self {
        let best_key = history
            .best_epoch
            .and_then(|e| history.epochs.get(e - 1))
            .map(selection_key);
        TrainState {
            optimizer,
            scheduler,
            history,
            lr,
            best,
            best_key,
        }
    }
}

/// Higher is better: validation F1, then lower validation loss; without a
/// validation set, lower training loss.
fn selection_key(r: &EpochRecord) -> (f64, f64) {
    match (r.val_f1, r.val_loss) {
        (Some(f), Some(l)) => (f, -l),
        _ => (0.0, -r.train_loss),
    }
}

/// Deterministic RNG for one epoch of one run.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Mean evaluation loss (weighted by batch size) and label pairs.
pub fn evaluate_examples<T: Scalar, M: Trainable<T>>(
    model: &M,
    examples: &[M::Example],
    batch_size: usize,
) -> Result<(f64, Vec<(Label, Label)>)> {
    let mut total = 0.0;
    let mut pairs = Vec::new();
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&M::Example> = chunk.iter().collect();
        let out = model.eval_batch(&refs)?;
        total += out.loss * chunk.len() as f64;
        pairs.extend(out.pairs);
    }
    Ok((total / examples.len().max(1) as f64, pairs))
}

/// Trains `model` until `config.epochs` epochs are recorded in `state`.
/// The model is left at its final-epoch parameters; the best epoch's
/// parameters are kept in `state.best`.
pub fn fit<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    train: &[M::Example],
    val: &[M::Example],
    config: &TrainConfig,
    state: &mut TrainState<T>,
) -> Result<()> {
    config.validate()?;
    let pinned = model.pinned_rows();
    let pinned: Vec<(&str, usize)> = pinned.iter().map(|(n, r)| (n.as_str(), *r)).collect();
    if train.is_empty() && config.epochs > state.epochs_done() {
        return Err(Error::Invalid("no training examples".into()));
    }
    for epoch in state.epochs_done() + 1..=config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        state.optimizer.lr = state.lr;
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let p = model.store().bind(&mut g);
            let (loss, norms) = {
                let mut mode = Mode::Train(&mut rng);
                model.loss(&mut g, &p, &batch, &mut mode)?
            };
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: value,
                });
            }
            total += value * batch.len() as f64;
            let grads = g.backward(loss);
            state.optimizer.update(model.store_mut(), &p, &grads, &pinned);
            for u in norms {
                u.layer.update_running(model.store_mut(), &u.stats, u.rows);
            }
        }
        let train_loss = total / train.len() as f64;
        let (val_loss, val_f1) = if val.is_empty() {
            (None, None)
        } else {
            let (loss, pairs) = evaluate_examples(model, val, config.batch_size)?;
            let (gold, pred): (Vec<Label>, Vec<Label>) = pairs.into_iter().unzip();
            (Some(loss), Some(weighted_f1(&pred, &gold, model.num_labels())?))
        };
        let record = EpochRecord {
            epoch,
            lr: state.lr,
            train_loss,
            val_loss,
            val_f1,
        };
        info!(
            "epoch {epoch}: lr {:.2e} train loss {train_loss:.6} val loss {} val F1 {}",
            state.lr,
            val_loss.map_or("-".into(), |v| format!("{v:.6}")),
            val_f1.map_or("-".into(), |v| format!("{v:.4}")),
        );
        let key = selection_key(&record);
        if state.best_key.is_none_or(|b| key > b) {
            state.best_key = Some(key);
            state.best = Some(model.store().clone());
            state.history.best_epoch = Some(epoch);
        }
        state.lr = state.scheduler.step(val_loss.unwrap_or(train_loss), state.lr);
        state.history.epochs.push(record);
    }
    Ok(())
}
