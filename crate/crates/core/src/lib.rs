//! Graph relation distillation for pixel-embedding instance segmentation.
//!
//! A heavy teacher network and a light student network each map an image to
//! per-pixel unit embeddings. The student is trained to reproduce the
//! teacher's instance graphs (per-instance mean embeddings and their cosine
//! similarities) and pixel affinity graphs, both within an image and against
//! teacher maps kept in a memory bank of past iterations.

pub mod affinity_graph;
pub mod data;
pub mod error;
pub mod instance_graph;
pub mod memory_bank;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{EmbeddingMap, LabelMask, PixelIndex, TensorData};
