//! Generative knowledge-graph completion.
//!
//! Queries `(h, r, ?, m)` / `(?, r, t, m)` are verbalized into flat text, a
//! small encoder-decoder transformer with per-relation soft prompts learns to
//! generate the missing entity's name, and trie-constrained beam search turns
//! generations into a ranked entity list that is scored under the filtered
//! link-prediction protocol.

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod kg;
pub mod model;
pub mod optim;
pub mod train;
pub mod synth;
pub mod trie;

pub use error::{Error, Result};
