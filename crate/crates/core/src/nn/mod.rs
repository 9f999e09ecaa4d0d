//! Minimal tensor engine with reverse-mode autodiff, layers and the five
//! force-estimation models.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use graph::{Graph, Var};
pub use model::{Model, ModelSpec, Network, Variant, SEQUENCE_LEN};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::{Real, Tensor};
