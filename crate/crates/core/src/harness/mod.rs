//! Persistence, evaluation, experiment drivers and output files.

pub mod checkpoint;
pub mod eval;
pub mod experiments;
pub mod goals;
pub mod output;
pub mod pipeline;

pub use eval::{evaluate, evaluate_with, EvalOutcome, EvalPolicy, EvalReport};
