//! Semantic representational distillation: a student learns from a frozen
//! teacher by passing its own (adapted) features through the teacher's
//! classifier, optionally on unconstrained unlabeled data.
//!
//! The crate is self-contained: a small reverse-mode autograd engine
//! ([`tensor`]), MLP teacher/student networks ([`nn`]), the distillation
//! losses and training step ([`distill`]), synthetic open-set data
//! ([`data`]), comparison baselines ([`baselines`]), metrics ([`metrics`]),
//! and a config-driven experiment harness ([`config`], [`harness`]).

pub mod baselines;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
