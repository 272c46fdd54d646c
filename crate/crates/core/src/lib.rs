//! Channel attention with a learnable constant input, trained like ordinary
//! attention and folded into the neighbouring linear layer for inference.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod backbones;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use attention::{AttentionKind, AttentionParams, AttentionSlot, PsiMode, SlotMode};
pub use autodiff::{backward, cross_entropy, forward, Mode, Tape};
pub use error::{Error, Result};
pub use fusion::{fuse_model, verify_equivalence, FoldKind, FusionReport};
pub use graph::{GraphBuilder, ModelGraph, Op, PositionTag};
pub use params::{ParamKind, ParamSet};
pub use tensor::{ConvSpec, Tensor};
