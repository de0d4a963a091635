//! File layout of a work directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use ssc_core::Split;

use crate::Level;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Sen,
    Abs,
    Seg,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sen => "sen",
            Stage::Abs => "abs",
            Stage::Seg => "seg",
        }
    }

    /// Command that writes this stage's checkpoint.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Sen => "train-sen",
            Stage::Abs => "train-abs",
            Stage::Seg => "train-seg",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        for d in ["corpus", "features", "checkpoints", "embeddings", "predictions", "reports"] {
            let p = self.root.join(d);
            std::fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        }
        Ok(())
    }

    pub fn corpus(&self, split: Split) -> PathBuf {
        self.root.join("corpus").join(format!("{split}.jsonl"))
    }

    pub fn word_vocab(&self) -> PathBuf {
        self.root.join("features").join("words.json")
    }

    pub fn char_vocab(&self) -> PathBuf {
        self.root.join("features").join("chars.json")
    }

    pub fn word_table(&self) -> PathBuf {
        self.root.join("features").join("word_table.ckpt")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.name()))
    }

    pub fn state(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.state.ckpt", stage.name()))
    }

    pub fn history(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}_history.json", stage.name()))
    }

    pub fn embeddings(&self, split: Split) -> PathBuf {
        self.root.join("embeddings").join(format!("{split}.jsonl"))
    }

    pub fn predictions(&self, level: Level, split: Split) -> PathBuf {
        self.root.join("predictions").join(format!("{}_{split}.jsonl", level.name()))
    }

    pub fn report(&self, level: Level, split: Split, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{}_{split}.{ext}", level.name()))
    }
}

/// Finds `<name>.{txt,csv,tsv}` in `dir` for the first matching name.
pub fn find_split_file(dir: &Path, split: Split) -> Option<PathBuf> {
    let names: &[&str] = match split {
        Split::Train => &["train"],
        Split::Validation => &["dev", "valid", "validation", "val"],
        Split::Test => &["test"],
    };
    names
        .iter()
        .flat_map(|n| ["txt", "csv", "tsv"].map(|e| dir.join(format!("{n}.{e}"))))
        .find(|p| p.is_file())
}
