//! Vision-transformer layers realised purely with convolutions, plus a
//! simulator and planner for running them on a 4f free-space optical
//! correlator.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod init;
pub mod linear;
pub mod model;
pub mod optics;
pub mod plan;
pub mod simulate;
pub mod tensor;
pub mod training;
pub mod verify;

pub use attention::{ConvAttentionLayer, HeadGeometry};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{ConvShareViT, ModelConfig, PositionalKind};
pub use linear::{LinearEquivalent, Projection, SharedGroupedConv, UnsharedGroupedConv};
pub use tensor::{PaddingMode, Precision, Tensor};
