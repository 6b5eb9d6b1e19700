//! Insertion-based generative sequence modeling.
//!
//! A single full-attention network scores every slot of a partial canvas with
//! a content distribution and a location distribution. Training marginalizes
//! over generation orders through a sampled lower bound; decoding inserts
//! either one token at a time or one token per open slot per iteration.

pub mod canvas;
pub mod data;
pub mod decode;
pub mod error;
pub mod exec;
pub mod objective;
pub mod oracle;
pub mod order;
pub mod rng;
pub mod scorer;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
