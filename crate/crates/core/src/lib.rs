//! Rotation-invariant dense correspondence for point clouds.
//!
//! An SO(3)-equivariant encoder maps a cloud to a global descriptor `Z`
//! (`C × 3`, rotating with the input) and per-point local shape transforms
//! `θᵢ` (`C′ × C`, invariant). A pointwise equivariant decoder turns
//! `θᵢ Z` back into points. Decoding one shape's transforms against
//! another's `Z` yields a cross-reconstruction whose nearest neighbours give
//! the correspondence.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod equivariance;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod losses;
pub mod mlp;
pub mod model;
pub mod params;
pub mod training;
pub mod vn;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use decoder::{Decoder, DecoderConfig};
pub use encoder::{Encoder, EncoderConfig, EncoderOutput, GlobalShapeDescriptor, LocalShapeTransform};
pub use error::{Error, Result};
pub use geometry::{sample_uniform_rotation, Point, PointCloud, Rotation};
pub use inference::{correspond, correspond_lst, transfer_labels, CorrespondenceSet, Direction, Matcher};
pub use model::{cross_reconstruct, Model, ModelConfig};
pub use params::Parameterized;
pub use training::{compute_loss, LossSelection, TrainConfig};
