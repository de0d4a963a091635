//! Layers, parameter storage and optimizers on top of the autodiff graph.

pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{apply_mask, dropout, BatchNorm, BiOutput, BiRnn, CellKind, Conv2d, Linear, Mode, RnnLayer, SeqMask};
pub use optim::{Adam, ReduceLrOnPlateau};
pub use params::{Binding, ParamKind, ParamStore};
