//! Layered instance segmentation with fine-grained attribute recognition.
//!
//! A small pyramid backbone feeds a query-based decoder whose stages refine
//! masks through a two-pass (internal, then external) attention cascade and
//! pool multi-level features under the previous mask for attribute logits.
//! Everything, including the autodiff engine, is implemented in this crate.

pub mod tensor;
pub mod nn;
pub mod synthdata;
pub mod encoder;
pub mod decoder;
pub mod matching;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod config;
pub mod checkpoint;
pub mod trainer;
pub mod experiment;
pub mod cli;
