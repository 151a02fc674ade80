//! Universal adversarial perturbations against image–text retrieval.
//!
//! The crate is organised bottom-up: [`tensor`] holds the numeric containers
//! and projections, [`boundary`] the closed-form linear boundary geometry,
//! [`encoder`] the differentiable image encoders, [`retrieval`] ranking and
//! recall, [`datagen`] the synthetic benchmark, [`attack`] the perturbation
//! drivers, [`eval`] the before/after reports, and [`cli`] the `uap` binary.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod boundary;
pub mod cli;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod retrieval;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
