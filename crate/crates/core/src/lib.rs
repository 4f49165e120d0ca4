//! Entity classification on document layouts with a transformer whose
//! attention is biased by hop distances on a KNN graph of bounding boxes and
//! by relative distance and angle, restricted to a local hop neighborhood,
//! and decoded one-to-one for fields that occur once per document.

pub mod cli;
pub mod data;
pub mod embedder;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
