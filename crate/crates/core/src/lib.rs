//! Streaming multichannel speech enhancement with parallel dual-path
//! recurrent mixing blocks.

pub mod error;
pub mod io;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod profile;
pub mod signal;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
