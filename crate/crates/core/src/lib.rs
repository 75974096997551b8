//! Byte-level language model whose learned router picks a subset of byte
//! positions ("concept tokens") to run through a deeper middle stack.

pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod nn;
pub mod router;
pub mod scalar;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use scalar::Scalar;
