//! Source-guided prompt learning for open-set multi-target domain adaptation.
//!
//! Frozen image and text encoders, one learnable context for known classes,
//! one for the unknown class, and a small bias network that turns an image
//! feature into a domain token added to every context position.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The crate
//! root re-exports `f32` aliases for the common types; `f64` variants carry a
//! `64` suffix.

pub mod bias_net;
pub mod config;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod label;
pub mod objective;
pub mod optim;
pub mod prompts;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use config::{validate_config, ContextInit, PartialTrainConfig, TrainConfig};
pub use error::{Error, Result};
pub use label::{build_label_space, LabelSpace, SplitSpec};
pub use scalar::Scalar;

pub type BiasNet = bias_net::BiasNetParams<f32>;
pub type BiasNet64 = bias_net::BiasNetParams<f64>;
pub type Prompts = prompts::PromptState<f32>;
pub type Prompts64 = prompts::PromptState<f64>;
