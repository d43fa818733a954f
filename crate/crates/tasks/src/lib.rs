//! Tasks, evaluation and recipes on top of the chain and network crates.

pub mod error;
pub mod eval;
pub mod hmm;
pub mod pipeline;
pub mod stats;
pub mod sudoku;
pub mod zebra;

pub use error::{Result, TaskError};
