//! Identity-guided collaborative learning for cloth-changing person
//! re-identification.
//!
//! The crate covers the whole training and retrieval pipeline: parse-map
//! driven mask derivation, the transformer backbone and its three auxiliary
//! training streams (clothing attention degradation, semantic attention with
//! body jigsaw, identity enhancement through a learned head-shoulder crop),
//! the four-term objective, and CMC/mAP evaluation.

pub mod autograd;
pub mod error;
pub mod tensor;

pub use error::{IgclError, Result};
pub mod dataio;
pub mod encoder;
pub mod types;
pub mod backbone;
pub mod checkpoint;
pub mod nn;
pub mod cad;
pub mod pie;
pub mod saj;
pub mod eval;
pub mod losses;
pub mod trainer;
