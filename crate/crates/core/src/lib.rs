//! Cross-modal retrieval with a single shared backbone for images and
//! word-vector-encoded text.
//!
//! Text is rendered into an image canvas by [`encoder`], both modalities go
//! through one network in [`model`], and [`retrieval`] plus [`metrics`]
//! rank and score the resulting embeddings. [`synthgen`] produces toy
//! datasets with known semantics and [`cli`] wires the stages together.

pub mod cli;
pub mod embedding;
pub mod encoder;
pub mod io;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod synthgen;
