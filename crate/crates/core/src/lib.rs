//! Transparent GPT-2 Small inference and routing analysis of its final MLP.
//!
//! Everything in this crate is pure computation over in-memory values: byte
//! pair encoding, the traced forward pass with ablation hooks, lens probes,
//! integrated gradients, the exact tier decomposition of the final MLP and
//! the statistics used to characterise neuron firing. File formats, corpus
//! handling and experiment orchestration live in the `tmlp` crate.
//!
//! The crate is `no_std` (it needs `alloc`). The default `std` feature only
//! turns on runtime CPU feature detection in the matrix-multiply backend.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod decomposition;
pub mod error;
pub mod linalg;
pub mod model;
pub mod stats;
pub mod tokenizer;

pub use decomposition::{Tier, TierPartition};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{AblationSpec, ModelConfig, ModelWeights, Trace, TraceRequest};
pub use tokenizer::BpeVocab;
