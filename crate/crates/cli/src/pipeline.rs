//! Stage commands. Each reads the artifacts of earlier stages from the work
//! directory, checks their config hashes and writes its own outputs.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use ssc_core::abs_model::{group_by_abstract, EmbeddingMap};
use ssc_core::artifacts::{
    read_corpus, read_embeddings, read_predictions, write_corpus, write_embeddings, write_predictions,
    ArtifactHeader, EMBEDDINGS_FORMAT, PREDICTIONS_FORMAT,
};
use ssc_core::checkpoint::Checkpoint;
use ssc_core::features::{
    cached_sentence_vectors, encode_pretrained_sentences, load_word_vectors, Vocabulary, VocabKind, EMBED_INIT_RANGE,
};
use ssc_core::fusion::{decode, fuse_with};
use ssc_core::metrics::evaluate;
use ssc_core::nn::{Adam, ParamKind, ParamStore, ReduceLrOnPlateau};
use ssc_core::seg_model::make_segments;
use ssc_core::sen_model::{featurize, SenExample, WORD_TABLE};
use ssc_core::train::{fit, History, TrainConfig, TrainState, Trainable};
use ssc_core::{
    AbsModel, AbstractExample, Corpus, EvalReport, PredictionMatrix, Scalar, SegModel, SenConfig, SenModel,
    Split, Tensor,
};

use crate::config::{Dataset, PipelineConfig, Precision};
use crate::layout::{find_split_file, Layout, Stage};
use crate::Level;

/// Share of NICTA training abstracts held out when no dev file exists.
pub const NICTA_DEV_SHARE: f64 = 0.1;

macro_rules! with_precision {
    ($self:ident, $f:ident($($a:expr),*)) => {
        match $self.config.precision {
            Precision::F32 => $self.$f::<f32>($($a),*),
            Precision::F64 => $self.$f::<f64>($($a),*),
        }
    };
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub layout: Layout,
    pub allow_mismatch: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, allow_mismatch: bool) -> Self {
        let layout = Layout::new(&config.paths.work_dir);
        Pipeline {
            config,
            layout,
            allow_mismatch,
        }
    }

    fn check_hash(&self, what: &Path, found: &str, expected: &str, producer: &str) -> Result<()> {
        if found == expected {
            return Ok(());
        }
        let msg = format!(
            "{} was produced under config {found} but the current config gives {expected}; rerun `ssc {producer}`",
            what.display()
        );
        if self.allow_mismatch {
            warn!("{msg} (continuing: --allow-config-mismatch)");
            Ok(())
        } else {
            bail!("{msg} or pass --allow-config-mismatch")
        }
    }

    fn require(path: &Path, producer: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            bail!("missing {}; run `ssc {producer}` first", path.display())
        }
    }

    // ---- prepare -------------------------------------------------------

    pub fn prepare(&self) -> Result<()> {
        let c = &self.config;
        self.layout.create()?;
        let dir = &c.paths.data_dir;
        let load = |split: Split| -> Result<Option<Corpus>> {
            match find_split_file(dir, split) {
                Some(p) => {
                    info!("reading {split} from {}", p.display());
                    c.dataset.parse(&p, split).map(Some)
                }
                None => Ok(None),
            }
        };
        let mut train = load(Split::Train)?.ok_or_else(|| anyhow!("no train file in {}", dir.display()))?;
        let test = load(Split::Test)?.ok_or_else(|| anyhow!("no test file in {}", dir.display()))?;
        let dev = match load(Split::Validation)? {
            Some(d) => d,
            None if c.dataset == Dataset::Nicta => carve_dev(&mut train, NICTA_DEV_SHARE)?,
            None => bail!("no dev file in {}", dir.display()),
        };
        let hash = c.prepare_hash()?;
        for corpus in [&train, &dev, &test] {
            info!(
                "{}: {} abstracts, {} sentences",
                corpus.split,
                corpus.abstracts.len(),
                corpus.num_sentences()
            );
            write_corpus(&self.layout.corpus(corpus.split), corpus, &hash)?;
        }

        let words = Vocabulary::build(&train, VocabKind::Word, c.vocab.min_freq)?;
        let chars = Vocabulary::build(&train, VocabKind::Char, c.vocab.char_min_freq)?;
        info!("vocabulary: {} words, {} characters", words.len(), chars.len());
        words.save(&self.layout.word_vocab())?;
        chars.save(&self.layout.char_vocab())?;

        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let table: Tensor<f32> = match &c.paths.word_vectors {
            Some(p) => load_word_vectors(p, &words, c.sen.d_w, &mut rng)?,
            None => {
                warn!("no word vectors configured; word embeddings are random");
                random_table(words.len(), c.sen.d_w, &mut rng)
            }
        };
        let mut params = ParamStore::new();
        params.insert(WORD_TABLE, ParamKind::Buffer, table)?;
        Checkpoint::new(json!({"config_hash": hash}), params).save(&self.layout.word_table())?;
        Ok(())
    }

    pub fn load_corpus(&self, split: Split) -> Result<Corpus> {
        let path = self.layout.corpus(split);
        Self::require(&path, "prepare")?;
        let (header, corpus) = read_corpus(&path)?;
        self.check_hash(&path, &header.config_hash, &self.config.prepare_hash()?, "prepare")?;
        if corpus.labels != self.config.dataset.labels() {
            bail!("{} uses labels {:?}", path.display(), corpus.labels.names());
        }
        Ok(corpus)
    }

    // ---- sentence vectors ----------------------------------------------

    pub fn export_sentence_vectors(&self) -> Result<()> {
        let mut encoder = self.config.encoder.build()?;
        let cache = self.config.sentence_cache();
        if let Some(d) = cache.parent() {
            std::fs::create_dir_all(d)?;
        }
        for split in Split::ALL {
            let corpus = self.load_corpus(split)?;
            let texts: Vec<&str> = corpus.sentences().map(|s| s.text.as_str()).collect();
            let (_, stats) = encode_pretrained_sentences(&texts, Some(encoder.as_mut()), &cache)?;
            info!(
                "{split}: {} sentences, cache hit rate {:.1}%, {} encoder calls",
                texts.len(),
                100.0 * stats.hit_rate(),
                stats.encoder_calls
            );
        }
        Ok(())
    }

    fn pretrained_vectors(&self, corpus: &Corpus) -> Result<Option<Vec<Vec<f32>>>> {
        if !self.config.sen.branches.pretrained {
            return Ok(None);
        }
        let texts: Vec<&str> = corpus.sentences().map(|s| s.text.as_str()).collect();
        let id = self.config.encoder.encoder_id()?;
        Ok(Some(cached_sentence_vectors(&texts, &id, &self.config.sentence_cache())?))
    }

    // ---- sentence model ------------------------------------------------

    fn vocabularies(&self) -> Result<(Vocabulary, Vocabulary)> {
        Self::require(&self.layout.word_vocab(), "prepare")?;
        Self::require(&self.layout.char_vocab(), "prepare")?;
        Ok((
            Vocabulary::load(&self.layout.word_vocab())?,
            Vocabulary::load(&self.layout.char_vocab())?,
        ))
    }

    fn sen_examples(&self, split: Split, words: &Vocabulary, chars: &Vocabulary, cfg: &SenConfig) -> Result<(Corpus, Vec<SenExample>)> {
        let corpus = self.load_corpus(split)?;
        let vectors = self.pretrained_vectors(&corpus)?;
        let examples = featurize(&corpus, words, chars, vectors.as_deref(), cfg)?;
        Ok((corpus, examples))
    }

    pub fn train_sen(&self, resume: bool) -> Result<History> {
        with_precision!(self, train_sen_as(resume))
    }

    fn train_sen_as<T: Scalar>(&self, resume: bool) -> Result<History> {
        let c = &self.config;
        let (words, chars) = self.vocabularies()?;
        let cfg = SenConfig {
            word_vocab: words.len(),
            char_vocab: chars.len(),
            ..c.sen.clone()
        };
        let (_, train) = self.sen_examples(Split::Train, &words, &chars, &cfg)?;
        let (_, dev) = self.sen_examples(Split::Validation, &words, &chars, &cfg)?;
        let mut model = SenModel::<T>::new(cfg.clone(), c.seed)?;
        if cfg.branches.word {
            let path = self.layout.word_table();
            Self::require(&path, "prepare")?;
            let table = Checkpoint::<T>::load(&path)?;
            let found = table.meta["config_hash"].as_str().unwrap_or_default().to_string();
            self.check_hash(&path, &found, &c.prepare_hash()?, "prepare")?;
            let t = table
                .params
                .get(WORD_TABLE)
                .cloned()
                .ok_or_else(|| anyhow!("{} holds no word table", path.display()))?;
            model.set_word_vectors(t)?;
        }
        let tc = cfg.train_config(c.seed);
        self.run_training(Stage::Sen, &mut model, &train, &dev, &tc, &c.sen_hash()?, resume, serde_json::to_value(&cfg)?)
    }

    fn load_stage<T: Scalar>(&self, stage: Stage, expected: &str) -> Result<Checkpoint<T>> {
        let path = self.layout.checkpoint(stage);
        Self::require(&path, stage.command())?;
        let ckpt = Checkpoint::<T>::load(&path)?;
        let found = ckpt.meta["config_hash"].as_str().unwrap_or_default().to_string();
        self.check_hash(&path, &found, expected, stage.command())?;
        Ok(ckpt)
    }

    fn load_sen_model<T: Scalar>(&self) -> Result<SenModel<T>> {
        let ckpt = self.load_stage::<T>(Stage::Sen, &self.config.sen_hash()?)?;
        let cfg: SenConfig = serde_json::from_value(ckpt.meta["config"].clone()).context("sen checkpoint config")?;
        let mut model = SenModel::<T>::new(cfg, self.config.seed)?;
        model.store.load_from(&ckpt.params)?;
        Ok(model)
    }

    pub fn extract_embeddings(&self) -> Result<()> {
        with_precision!(self, extract_embeddings_as())
    }

    fn extract_embeddings_as<T: Scalar>(&self) -> Result<()> {
        let model = self.load_sen_model::<T>()?;
        let (words, chars) = self.vocabularies()?;
        let hash = self.config.sen_hash()?;
        for split in Split::ALL {
            let (corpus, examples) = self.sen_examples(split, &words, &chars, &model.config)?;
            let vectors = model.extract_sentence_embeddings(&corpus.labels, &examples)?;
            let map: EmbeddingMap = examples
                .iter()
                .zip(vectors)
                .map(|(e, v)| ((e.abstract_id.clone(), e.index), v.iter().map(|x| x.as_f64()).collect()))
                .collect();
            let header = ArtifactHeader::new(EMBEDDINGS_FORMAT, hash.as_str(), &corpus.labels, split);
            write_embeddings(&self.layout.embeddings(split), &header, &map)?;
            info!("{split}: {} sentence embeddings", map.len());
        }
        Ok(())
    }

    pub fn load_embeddings(&self, split: Split) -> Result<EmbeddingMap> {
        let path = self.layout.embeddings(split);
        Self::require(&path, "extract-embeddings")?;
        let (header, map) = read_embeddings(&path)?;
        self.check_hash(&path, &header.config_hash, &self.config.sen_hash()?, "extract-embeddings")?;
        Ok(map)
    }

    fn abstracts(&self, split: Split) -> Result<Vec<AbstractExample>> {
        let corpus = self.load_corpus(split)?;
        let map = self.load_embeddings(split)?;
        Ok(group_by_abstract(&corpus, &map, corpus.labels.len())?)
    }

    // ---- abstract and segment models -----------------------------------

    pub fn train_abs(&self, resume: bool) -> Result<History> {
        with_precision!(self, train_abs_as(resume))
    }

    fn train_abs_as<T: Scalar>(&self, resume: bool) -> Result<History> {
        let c = &self.config;
        let train = self.abstracts(Split::Train)?;
        let dev = self.abstracts(Split::Validation)?;
        let mut model = AbsModel::<T>::new(c.abs.clone(), c.seed)?;
        let tc = c.abs.train_config(c.seed);
        self.run_training(Stage::Abs, &mut model, &train, &dev, &tc, &c.abs_hash()?, resume, serde_json::to_value(&c.abs)?)
    }

    pub fn train_seg(&self, resume: bool) -> Result<History> {
        with_precision!(self, train_seg_as(resume))
    }

    fn train_seg_as<T: Scalar>(&self, resume: bool) -> Result<History> {
        let c = &self.config;
        let l = c.seg.num_labels();
        let segments = |split| -> Result<Vec<_>> {
            let mut out = Vec::new();
            for e in self.abstracts(split)? {
                out.extend(make_segments(&e, c.seg.q, l)?);
            }
            Ok(out)
        };
        let train = segments(Split::Train)?;
        let dev = segments(Split::Validation)?;
        info!("{} training segments, {} dev segments", train.len(), dev.len());
        let mut model = SegModel::<T>::new(c.seg.clone(), c.seed)?;
        let tc = c.seg.train_config(c.seed);
        self.run_training(Stage::Seg, &mut model, &train, &dev, &tc, &c.seg_hash()?, resume, serde_json::to_value(&c.seg)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_training<T: Scalar, M: Trainable<T>>(
        &self,
        stage: Stage,
        model: &mut M,
        train: &[M::Example],
        val: &[M::Example],
        tc: &TrainConfig,
        hash: &str,
        resume: bool,
        config: Value,
    ) -> Result<History> {
        self.layout.create()?;
        let resume_hash = self.config.resume_hash(stage)?;
        let state_path = self.layout.state(stage);
        let mut state = if resume && state_path.exists() {
            let s = self.load_train_state(&state_path, model, &resume_hash, stage)?;
            info!("resuming {} after epoch {}", stage.name(), s.epochs_done());
            s
        } else {
            if resume {
                warn!("no state at {}; training from scratch", state_path.display());
            }
            TrainState::new(tc)
        };
        fit(model, train, val, tc, &mut state)?;

        let best = state.best.clone().unwrap_or_else(|| model.store().clone());
        let meta = json!({
            "stage": stage.name(),
            "config_hash": hash,
            "config": config,
            "seed": self.config.seed,
            "best_epoch": state.history.best_epoch,
        });
        Checkpoint::new(meta, best).save(&self.layout.checkpoint(stage))?;

        let mut ckpt = Checkpoint::new(
            json!({
                "stage": stage.name(),
                "config_hash": resume_hash,
                "optimizer_step": state.optimizer.step,
                "scheduler": state.scheduler,
                "lr": state.lr,
                "history": state.history,
            }),
            model.store().clone(),
        );
        for (k, t) in state.optimizer.moments() {
            ckpt.extra.insert(k, t.clone());
        }
        if let Some(b) = &state.best {
            for (name, _, t) in b.iter() {
                ckpt.extra.insert(format!("best/{name}"), t.clone());
            }
        }
        ckpt.save(&state_path)?;
        std::fs::write(
            self.layout.history(stage),
            serde_json::to_string_pretty(&state.history)? + "\n",
        )?;
        Ok(state.history)
    }

    fn load_train_state<T: Scalar, M: Trainable<T>>(
        &self,
        path: &Path,
        model: &mut M,
        hash: &str,
        stage: Stage,
    ) -> Result<TrainState<T>> {
        let ckpt = Checkpoint::<T>::load(path)?;
        let m = &ckpt.meta;
        let found = m["config_hash"].as_str().unwrap_or_default().to_string();
        self.check_hash(path, &found, hash, stage.command())?;
        model.store_mut().load_from(&ckpt.params)?;
        let lr = m["lr"].as_f64().context("state lr")?;
        let mut optimizer = Adam::new(lr);
        optimizer.step = m["optimizer_step"].as_u64().context("state optimizer_step")?;
        let scheduler: ReduceLrOnPlateau = serde_json::from_value(m["scheduler"].clone())?;
        let history: History = serde_json::from_value(m["history"].clone())?;
        let mut best_params = BTreeMap::new();
        for (k, t) in &ckpt.extra {
            if let Some(name) = k.strip_prefix("best/") {
                best_params.insert(name.to_string(), t.clone());
            } else if !optimizer.set_moment(k, t.clone()) {
                bail!("{}: unexpected tensor {k}", path.display());
            }
        }
        let best = if best_params.is_empty() {
            None
        } else {
            let mut store = ParamStore::new();
            for (name, kind, _) in model.store().iter() {
                let t = best_params
                    .remove(name)
                    .ok_or_else(|| anyhow!("{}: best snapshot lacks {name}", path.display()))?;
                store.insert(name, kind, t)?;
            }
            Some(store)
        };
        Ok(TrainState::restore(optimizer, scheduler, history, lr, best))
    }

    // ---- prediction and evaluation -------------------------------------

    fn level_hash(&self, level: Level) -> Result<String> {
        Ok(match level {
            Level::Sen => self.config.sen_hash()?,
            Level::Abs => self.config.abs_hash()?,
            Level::Seg => self.config.seg_hash()?,
            Level::Combine => self.config.combine_hash()?,
        })
    }

    /// Scores every sentence of `split` at `level` and writes them to the
    /// predictions directory.
    pub fn predict(&self, level: Level, split: Split) -> Result<Vec<PredictionMatrix<f64>>> {
        let preds = match level {
            Level::Sen => {
                let corpus = self.load_corpus(split)?;
                let map = self.load_embeddings(split)?;
                group_by_abstract(&corpus, &map, corpus.labels.len())?
                    .into_iter()
                    .map(|e| PredictionMatrix::new(e.id, e.rows.iter().map(|r| softmax(r)).collect()))
                    .collect()
            }
            Level::Abs => with_precision!(self, predict_abs(split))?,
            Level::Seg => with_precision!(self, predict_seg(split))?,
            Level::Combine => {
                let abs = self.predict(Level::Abs, split)?;
                let seg = self.predict(Level::Seg, split)?;
                abs.iter()
                    .zip(&seg)
                    .map(|(a, s)| fuse_with(a, s, &self.config.fusion))
                    .collect::<ssc_core::Result<Vec<_>>>()?
            }
        };
        self.layout.create()?;
        let header = ArtifactHeader::new(
            PREDICTIONS_FORMAT,
            self.level_hash(level)?,
            &self.config.dataset.labels(),
            split,
        );
        write_predictions(&self.layout.predictions(level, split), &header, &preds)?;
        Ok(preds)
    }

    fn predict_abs<T: Scalar>(&self, split: Split) -> Result<Vec<PredictionMatrix<f64>>> {
        let ckpt = self.load_stage::<T>(Stage::Abs, &self.config.abs_hash()?)?;
        let mut model = AbsModel::<T>::new(self.config.abs.clone(), self.config.seed)?;
        model.store.load_from(&ckpt.params)?;
        Ok(widen(model.predict(&self.abstracts(split)?)?))
    }

    fn predict_seg<T: Scalar>(&self, split: Split) -> Result<Vec<PredictionMatrix<f64>>> {
        let ckpt = self.load_stage::<T>(Stage::Seg, &self.config.seg_hash()?)?;
        let mut model = SegModel::<T>::new(self.config.seg.clone(), self.config.seed)?;
        model.store.load_from(&ckpt.params)?;
        Ok(widen(model.predict(&self.abstracts(split)?)?))
    }

    /// Scores the predictions of `level` on `split` against the gold
    /// labels. Existing prediction files are reused when their config hash
    /// matches; otherwise they are produced first.
    pub fn evaluate(&self, level: Level, split: Split) -> Result<EvalReport> {
        let path = self.layout.predictions(level, split);
        let preds = if path.exists() {
            let (header, preds) = read_predictions(&path)?;
            let expected = self.level_hash(level)?;
            if header.config_hash == expected {
                preds
            } else if self.allow_mismatch {
                self.check_hash(&path, &header.config_hash, &expected, "predict")?;
                preds
            } else {
                info!("{} is stale; predicting again", path.display());
                self.predict(level, split)?
            }
        } else {
            self.predict(level, split)?
        };
        let corpus = self.load_corpus(split)?;
        let by_id: BTreeMap<&str, &PredictionMatrix<f64>> = preds.iter().map(|p| (p.abstract_id.as_str(), p)).collect();
        let (mut pred, mut gold) = (Vec::new(), Vec::new());
        for a in &corpus.abstracts {
            let p = by_id
                .get(a.id.as_str())
                .ok_or_else(|| anyhow!("{} has no prediction for abstract {}", path.display(), a.id))?;
            if p.len() != a.len() {
                bail!("abstract {}: {} predictions for {} sentences", a.id, p.len(), a.len());
            }
            pred.extend(decode(p));
            gold.extend(a.sentences.iter().map(|s| s.label));
        }
        let mut report = evaluate(&pred, &gold, corpus.labels.names())?;
        if let Some(other) = corpus.labels.parse("OTHER") {
            report = report.with_exclusion(other);
        }
        let title = format!("{} level, {split} split", level.name());
        std::fs::write(self.layout.report(level, split, "txt"), report.to_table(&title))?;
        let json = json!({
            "level": level.name(),
            "split": split,
            "config_hash": self.level_hash(level)?,
            "report": report,
        });
        std::fs::write(self.layout.report(level, split, "json"), serde_json::to_string_pretty(&json)? + "\n")?;
        Ok(report)
    }
}

/// Moves the last `share` of the training abstracts (at least one) into a
/// validation corpus.
pub fn carve_dev(train: &mut Corpus, share: f64) -> Result<Corpus> {
    let n = train.abstracts.len();
    if n < 2 {
        bail!("cannot hold out a dev split from {n} training abstracts");
    }
    let k = ((n as f64 * share).ceil() as usize).clamp(1, n - 1);
    let held = train.abstracts.split_off(n - k);
    info!("no dev file: holding out the last {k} of {n} training abstracts");
    Ok(Corpus {
        split: Split::Validation,
        labels: train.labels.clone(),
        abstracts: held,
    })
}

fn random_table(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let mut t = ssc_core::nn::params::uniform::<f32, _>(rng, &[rows, cols], EMBED_INIT_RANGE);
    t.data_mut()[..cols].iter_mut().for_each(|x| *x = 0.0);
    t
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn widen<T: Scalar>(preds: Vec<PredictionMatrix<T>>) -> Vec<PredictionMatrix<f64>> {
    preds
        .into_iter()
        .map(|p| {
            let rows = p.rows.iter().map(|r| r.iter().map(|x| x.as_f64()).collect()).collect();
            PredictionMatrix::new(p.abstract_id, rows)
        })
        .collect()
}

