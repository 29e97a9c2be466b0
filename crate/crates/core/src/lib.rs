//! Bidirectional LSTM language modeling and diagnostic probing of its
//! hidden states for lexical and contextual word information.

pub mod cli;
pub mod container;
pub mod error;
pub mod eval;
pub mod lexsub;
pub mod lm;
pub mod numcore;
pub mod probe;
pub mod states;
pub mod synth;

pub use error::{Error, Result};
