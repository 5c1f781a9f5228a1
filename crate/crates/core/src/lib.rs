//! Region Loss: penalizing segmentation foreground predicted in slices whose
//! body-part score lies outside a class's plausible range.
//!
//! The crate covers the whole desk-scale pipeline: volume I/O, slice score
//! maps, valid-region calibration, the loss and its multi-dataset
//! composition, a small per-voxel trainer, postprocessing, evaluation and a
//! phantom generator.

pub mod calibrate;
pub mod composeloss;
mod error;
pub mod evaluate;
pub mod experiment;
pub mod postprocess;
pub mod regionloss;
pub mod scoremap;
pub mod synth;
pub mod trainer;
pub mod volio;

pub use error::{Error, Result};
