//! Multimodal sleep staging with coordinated representations.
//!
//! The crate contains a small reverse-mode autodiff engine ([`autodiff`]),
//! a transformer backbone with an inner (per-window) and outer
//! (across-window) stage ([`backbone`]), three fusion architectures plus
//! missing-modality routing ([`fusion`]), the training objective
//! ([`objectives`]), a signal pipeline and synthetic data ([`data`]),
//! training ([`training`]) and evaluation ([`metrics`], [`eval`]).
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod manifest;
pub mod metrics;
pub mod modality;
pub mod objectives;
pub mod scalar;
pub mod training;

pub use autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
pub use config::{FusionVariant, LossConfig, ModelConfig, RunConfig, NUM_CLASSES};
pub use error::{Error, Result};
pub use fusion::{infer_with_missing, Model, ModelOutputs};
pub use modality::{Modality, PerModality};
pub use scalar::Scalar;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type ParamStore64 = ParamStore<f64>;
