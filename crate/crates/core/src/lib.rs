//! IoU-guided visual tracking at desk scale.

pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod classifier;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod imaging;
pub mod iounet;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod prpool;
pub mod sequence;
pub mod synth;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use autodiff::{BnMode, RunningStats, Tape, Var};
pub use error::{Error, Result};
pub use imaging::{Image, PatchTransform};
pub use kernels::ConvParams;
pub use prpool::BoundingBox;
pub use tensor::{Scalar, Tensor};
