//! Multi-level sequential sentence classification of medical abstracts.
//!
//! A sentence-level classifier produces label-width sentence embeddings;
//! an abstract-level convolutional-recurrent model and a segment-level MLP
//! score every sentence from those embeddings, and their scores are fused
//! before decoding. All models are generic over the scalar type.

pub mod abs_model;
pub mod artifacts;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod features;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod seg_model;
pub mod sen_model;
pub mod tensor;
pub mod train;

pub use abs_model::{AbsConfig, AbsModel, AbstractExample};
pub use corpus::{Corpus, Label, LabelSet, Split};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, PredictionMatrix};
pub use metrics::EvalReport;
pub use scalar::Scalar;
pub use seg_model::{SegConfig, SegModel, Segment};
pub use sen_model::{Branches, SenConfig, SenModel};
pub use tensor::Tensor;

pub type TensorF32 = Tensor<f32>;
pub type TensorF64 = Tensor<f64>;
pub type SenModelF32 = SenModel<f32>;
pub type SenModelF64 = SenModel<f64>;
pub type AbsModelF32 = AbsModel<f32>;
pub type AbsModelF64 = AbsModel<f64>;
pub type SegModelF32 = SegModel<f32>;
pub type SegModelF64 = SegModel<f64>;
