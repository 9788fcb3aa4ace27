//! Visual grounding with coordinates spelled as text tokens.
//!
//! The pipeline: procedurally generated shape scenes with unambiguous
//! template referring expressions; a tiny multimodal encoder-decoder that
//! reads an image plus an instruction and writes answers containing
//! `[x1, y1, x2, y2]` coordinates on a 0..=1000 relative scale; a coordinate
//! activation stage trained on detection captions; and a cycle stage that
//! ties expression generation and comprehension together, with pseudo-labels
//! expanding detection-only data into comprehension training pairs.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hash;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scenegen;
pub mod textio;
pub mod train;

pub use error::{Error, Result};
