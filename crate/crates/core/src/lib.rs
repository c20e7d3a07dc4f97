//! A desk-scale multi-label recognition head built on semantic-space
//! prompting and gated dual-modal alignment.
//!
//! The crate is self-contained: a small reverse-mode differentiation engine
//! ([`autodiff`]), quaternion layers and semantic synthesis ([`quaternion`]),
//! prompt construction ([`prompting`]), gated cross-modal attention
//! ([`gated`]), regional aggregation and the asymmetric loss
//! ([`aggregation`]), ranking metrics ([`metrics`]) and the training and
//! ablation harness ([`train`], [`ablation`]).

pub mod ablation;
pub mod aggregation;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gated;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod pgm;
pub mod prompting;
pub mod quaternion;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
