//! Pose-based scoliosis screening with dual pose representations.
//!
//! The pipeline turns COCO-17 keypoint sequences into two complementary
//! views: dense two-channel skeleton maps (Gaussian keypoint and limb
//! heatmaps) and a Postural Asymmetry Vector (PAV) of per-pair vertical,
//! midline and angular deviations. A compact convolutional encoder consumes
//! the maps; a guided-attention block uses the PAV to produce channel and
//! strip weights that recalibrate the encoded features before the
//! classification and embedding heads.

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod normalize;
pub mod pav;
pub mod pose_io;
pub mod skeleton_map;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autograd::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor, TensorError};
