//! Library surface of the command-line pipeline; the binary and the
//! acceptance suite share it.

pub mod pipeline;

pub use pipeline::{run_ablation, AblationRow, AblationTable, Pipeline, PseudoRecord};
