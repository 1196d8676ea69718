//! Channel-relation attention over feature pyramids, built as a verified
//! numerical library: dense f64 tensors with hand-written backward passes,
//! the in-level and cross-level attention blocks, exact multiply-accumulate
//! and parameter accounting, an SGD/gradient-check toolkit, and file formats
//! plus command implementations for the `opnet` CLI.

pub mod accounting;
pub mod attention;
pub mod config;
pub mod counter;
pub mod error;
pub mod harness;
pub mod init;
pub mod io;
pub mod ops;
pub mod pyramid;
pub mod tensor;
pub mod training;

mod threads;

pub use counter::MacCounter;
pub use error::{Error, Result};
pub use tensor::Tensor;
