//! Numerical core for fine-grained slide–caption pretraining.
//!
//! Everything here is pure computation over in-memory values: synthetic
//! planted-correspondence corpora, slide partitioning, a tape-based autodiff
//! engine, the shared region/slide query transformer, text encoding, the
//! region and global alignment losses, text-region grounding, a small
//! instruction-following decoder, evaluation metrics, and the training loop.
//! File formats and the command line live in the `pathflip` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod alignment;
pub mod corpus;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod graph;
pub mod grounding;
pub mod instruct;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod partition;
pub mod pipeline;
pub mod qformer;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore};
pub use tensor::{Matrix, Real};
