//! Volumetric vision transformer toolkit.

pub mod analysis;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod mats;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use autograd::{Activation, AttentionCapture, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use rng::Seeds;
