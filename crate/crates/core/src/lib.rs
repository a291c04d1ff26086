//! Reconstruction of documents from square image patches.
//!
//! Every ordered pair of patches is an edge of a complete directed graph; a
//! small convolutional network classifies each edge as Up, Down, Left, Right
//! or None (placement of the target relative to the source), and the
//! surviving directional edges are turned into partial image layouts.

pub mod assembly;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod graphio;
pub mod pairnet;
pub mod raster;
pub mod reconstruct;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{complete_graph, reverse_label, AssemblyGraph, EdgeFeatures, Patch, RelationLabel};
