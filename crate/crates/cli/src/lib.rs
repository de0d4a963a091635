//! Command-line pipeline: corpus preparation, the three model stages,
//! prediction and evaluation over a work directory.

pub mod config;
pub mod layout;
pub mod pipeline;

pub use config::{Dataset, PipelineConfig, Precision};
pub use layout::{Layout, Stage};
pub use pipeline::Pipeline;

/// Which scores to predict or evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    /// Softmax of the sentence model's embeddings.
    Sen,
    Abs,
    Seg,
    /// Fused abstract and segment scores.
    Combine,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Sen => "sen",
            Level::Abs => "abs",
            Level::Seg => "seg",
            Level::Combine => "combine",
        }
    }
}
