//! Learning per-image digit labels from sum-only supervision.
//!
//! Images are bundled into `h x w` grids whose only supervision is the sum of
//! the `h` numbers they spell. The pipeline embeds every image, clusters the
//! embeddings, solves an exact integer program mapping clusters to digits,
//! repairs labels by propagating the sum constraints, and finally trains a
//! CNN on the repaired labels.

pub mod assignment;
pub mod classifier;
pub mod clustering;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod nn;
pub mod pipeline;
pub mod tensorfile;

pub use error::{Error, Result};
