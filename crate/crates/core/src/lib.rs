//! Gated transfer networks built on a small from-scratch neural-network
//! toolkit.

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod files;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
