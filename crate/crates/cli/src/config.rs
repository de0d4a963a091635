//! Pipeline configuration: dataset defaults overlaid with a TOML file and
//! `--set key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ssc_core::artifacts::config_hash;
use ssc_core::corpus::{parse_nicta, parse_pubmed_rct, Corpus, LabelSet, Split};
use ssc_core::features::{CommandEncoder, HashingEncoder, SentenceEncoder};
use ssc_core::nn::CellKind;
use ssc_core::{AbsConfig, FusionConfig, SegConfig, SenConfig};

use crate::layout::Stage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Pubmed20k,
    Pubmed200k,
    Nicta,
}

impl Dataset {
    pub fn labels(self) -> LabelSet {
        match self {
            Dataset::Pubmed20k | Dataset::Pubmed200k => LabelSet::pubmed(),
            Dataset::Nicta => LabelSet::nicta(),
        }
    }

    pub fn cell(self) -> CellKind {
        match self {
            Dataset::Nicta => CellKind::Gru,
            _ => CellKind::Lstm,
        }
    }

    pub fn rnn_hidden(self) -> usize {
        match self {
            Dataset::Nicta => 36,
            _ => 40,
        }
    }

    pub fn parse(self, path: &Path, split: Split) -> Result<Corpus> {
        let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let reader = std::io::BufReader::new(file);
        let corpus = match self {
            Dataset::Nicta => parse_nicta(reader, split),
            _ => parse_pubmed_rct(reader, split),
        };
        corpus.with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `train`, `dev` and `test` files (`.txt`, `.csv`
    /// or `.tsv`).
    pub data_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_vectors: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_cache: Option<PathBuf>,
    pub work_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub char_min_freq: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Hashing,
    Command,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub program: Option<String>,
    #[serde(default)]
    pub args: Vec<String>,
}

impl EncoderConfig {
    pub fn encoder_id(&self) -> Result<String> {
        match self.kind {
            EncoderKind::Hashing => Ok(HashingEncoder::new(self.dim).id().to_string()),
            EncoderKind::Command => self
                .id
                .clone()
                .context("encoder.id is required for a command encoder"),
        }
    }

    pub fn build(&self) -> Result<Box<dyn SentenceEncoder>> {
        Ok(match self.kind {
            EncoderKind::Hashing => Box::new(HashingEncoder::new(self.dim)),
            EncoderKind::Command => {
                let program = self
                    .program
                    .clone()
                    .context("encoder.program is required for a command encoder")?;
                Box::new(CommandEncoder::new(self.encoder_id()?, self.dim, program, self.args.clone()))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Dataset,
    pub seed: u64,
    pub precision: Precision,
    pub paths: Paths,
    pub vocab: VocabConfig,
    pub encoder: EncoderConfig,
    pub sen: SenConfig,
    pub abs: AbsConfig,
    pub seg: SegConfig,
    pub fusion: FusionConfig,
}

impl PipelineConfig {
    pub fn defaults(dataset: Dataset) -> Self {
        let labels = dataset.labels();
        PipelineConfig {
            dataset,
            seed: 42,
            precision: Precision::F32,
            paths: Paths {
                data_dir: PathBuf::from("data"),
                word_vectors: None,
                sentence_cache: None,
                work_dir: PathBuf::from("work"),
            },
            vocab: VocabConfig {
                min_freq: 1,
                char_min_freq: 1,
            },
            encoder: EncoderConfig {
                kind: EncoderKind::Hashing,
                dim: 768,
                id: None,
                program: None,
                args: Vec::new(),
            },
            sen: SenConfig {
                labels: labels.clone(),
                ..SenConfig::default()
            },
            abs: AbsConfig {
                labels: labels.clone(),
                cell: dataset.cell(),
                rnn_hidden: dataset.rnn_hidden(),
                ..AbsConfig::default()
            },
            seg: SegConfig {
                labels,
                ..SegConfig::default()
            },
            fusion: FusionConfig::default(),
        }
    }

    /// Resolves the configuration: dataset defaults, then the file, then
    /// `--set` overrides, then explicit flags.
    pub fn load(
        file: Option<&Path>,
        dataset: Option<Dataset>,
        overrides: &[String],
        seed: Option<u64>,
        work_dir: Option<&Path>,
    ) -> Result<Self> {
        let mut user = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let dataset = match dataset {
            Some(d) => d,
            None => match user.get("dataset") {
                Some(v) => v.clone().try_into().context("invalid dataset")?,
                None => Dataset::Pubmed20k,
            },
        };
        user.insert("dataset".into(), toml::Value::try_from(dataset)?);
        let mut merged = toml::Table::try_from(Self::defaults(dataset))?;
        for section in ["sen", "abs", "seg"] {
            let given = user.get(section).and_then(|t| t.get("labels"));
            if given.is_some_and(|l| Some(l) != merged[section].get("labels")) {
                bail!("{section}.labels is fixed by the dataset");
            }
        }
        merge(&mut merged, user);
        let mut config: PipelineConfig = toml::Value::Table(merged)
            .try_into()
            .context("invalid configuration")?;
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(w) = work_dir {
            config.paths.work_dir = w.to_path_buf();
        }
        config.sen.d_p = config.encoder.dim;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.sen.validate_shape()?;
        self.abs.validate()?;
        self.seg.validate()?;
        self.fusion.validate()?;
        if self.encoder.dim == 0 {
            bail!("encoder.dim must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn sentence_cache(&self) -> PathBuf {
        self.paths
            .sentence_cache
            .clone()
            .unwrap_or_else(|| self.paths.work_dir.join("features").join("sentence_vectors.jsonl"))
    }

    pub fn prepare_hash(&self) -> Result<String> {
        Ok(config_hash(&json!({
            "dataset": self.dataset,
            "data_dir": self.paths.data_dir,
            "word_vectors": self.paths.word_vectors,
            "vocab": self.vocab,
            "d_w": self.sen.d_w,
            "seed": self.seed,
        }))?)
    }

    pub fn sen_hash(&self) -> Result<String> {
        let mut sen = self.sen.clone();
        sen.word_vocab = 0;
        sen.char_vocab = 0;
        Ok(config_hash(&json!({
            "upstream": self.prepare_hash()?,
            "sen": sen,
            "encoder": if self.sen.branches.pretrained { Some(self.encoder.encoder_id()?) } else { None },
            "precision": self.precision,
        }))?)
    }

    pub fn abs_hash(&self) -> Result<String> {
        Ok(config_hash(&json!({"upstream": self.sen_hash()?, "abs": self.abs}))?)
    }

    pub fn seg_hash(&self) -> Result<String> {
        Ok(config_hash(&json!({"upstream": self.sen_hash()?, "seg": self.seg}))?)
    }

    /// Stage hash ignoring the epoch budget, so a run can be resumed with
    /// more epochs.
    pub fn resume_hash(&self, stage: Stage) -> Result<String> {
        let mut c = self.clone();
        match stage {
            Stage::Sen => {
                c.sen.epochs = 0;
                c.sen_hash()
            }
            Stage::Abs => {
                c.abs.epochs = 0;
                c.abs_hash()
            }
            Stage::Seg => {
                c.seg.epochs = 0;
                c.seg_hash()
            }
        }
    }

    pub fn combine_hash(&self) -> Result<String> {
        Ok(config_hash(&json!({
            "abs": self.abs_hash()?,
            "seg": self.seg_hash()?,
            "fusion": self.fusion,
        }))?)
    }
}

trait ValidateShape {
    fn validate_shape(&self) -> ssc_core::Result<()>;
}

impl ValidateShape for SenConfig {
    /// Everything but the vocabulary sizes, which are only known after
    /// `prepare`.
    fn validate_shape(&self) -> ssc_core::Result<()> {
        SenConfig {
            word_vocab: self.word_vocab.max(2),
            char_vocab: self.char_vocab.max(2),
            ..self.clone()
        }
        .validate()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`; the value is read as TOML, falling back to a
/// plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?} is not KEY=VALUE"))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().context("empty override key")?;
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .with_context(|| format!("override {key}: {p} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_fixes_recurrent_decoder() {
        let c = PipelineConfig::load(None, Some(Dataset::Nicta), &[], None, None).unwrap();
        assert_eq!(c.abs.cell, CellKind::Gru);
        assert_eq!(c.abs.rnn_hidden, 36);
        assert_eq!(c.sen.labels.len(), 6);
        let p = PipelineConfig::load(None, None, &[], None, None).unwrap();
        assert_eq!(p.abs.cell, CellKind::Lstm);
        assert_eq!(p.abs.rnn_hidden, 40);
        assert_eq!((p.sen.lr, p.abs.lr, p.seg.lr), (0.001, 0.003, 0.001));
        assert_eq!((p.sen.epochs, p.abs.epochs, p.seg.epochs), (30, 60, 60));
    }

    #[test]
    fn explicit_override_wins() {
        let sets = ["abs.rnn_hidden=12".to_string(), "abs.cell=\"lstm\"".to_string(), "sen.branches.char=false".to_string()];
        let c = PipelineConfig::load(None, Some(Dataset::Nicta), &sets, Some(7), None).unwrap();
        assert_eq!(c.abs.rnn_hidden, 12);
        assert_eq!(c.abs.cell, CellKind::Lstm);
        assert!(!c.sen.branches.char);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn rejects_unknown_keys_and_label_overrides() {
        assert!(PipelineConfig::load(None, None, &["sen.bogus=1".into()], None, None).is_err());
        assert!(PipelineConfig::load(None, None, &["seg.labels.names=[\"A\"]".into()], None, None).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = PipelineConfig::defaults(Dataset::Pubmed20k);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, c.to_toml().unwrap()).unwrap();
        let back = PipelineConfig::load(Some(&p), None, &[], None, None).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn stage_hashes_chain() {
        let a = PipelineConfig::defaults(Dataset::Pubmed20k);
        let mut b = a.clone();
        b.seg.lambda = 0.5;
        assert_eq!(a.abs_hash().unwrap(), b.abs_hash().unwrap());
        assert_ne!(a.seg_hash().unwrap(), b.seg_hash().unwrap());
        b.vocab.min_freq = 3;
        assert_ne!(a.abs_hash().unwrap(), b.abs_hash().unwrap());
    }
}
