//! Prompt choreography over a toy decoder-only transformer.
//!
//! Messages are encoded once into a [`kv_cache::GlobalKvCache`] shared by
//! every agent of a workflow. Each `prefill` or `decode` call names the
//! parent messages its tokens may attend to and the logical offsets those
//! parents occupy; the engine repositions cached keys by rotation, builds the
//! attention mask from per-token message ids, and can decode several messages
//! at once by interleaving their tokens in the cache.
//!
//! [`baseline::BaselineEngine`] is the reference: it stores only token
//! sequences and re-encodes the concatenated parents for every decode, with
//! an optional prefix cache. Both engines implement [`engine::Choreographer`],
//! so every workflow in [`workflows`] runs under either.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod baseline;
pub mod bench;
pub mod cost;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod kv_cache;
pub mod masking;
pub mod model;
pub mod prefix_cache;
pub mod sampling;
pub mod script;
pub mod tensor;
pub mod tokenizer;
pub mod weights_io;
pub mod workflows;

pub use baseline::BaselineEngine;
pub use cost::CallCost;
pub use engine::{Choreographer, DecodeCall, DecodeOutput, Engine, PrefillCall};
pub use error::{ChoreoError, Result};
pub use kv_cache::GlobalKvCache;
pub use model::{Model, ModelConfig};
pub use sampling::SamplingParams;

/// Dense message identifier, assigned in creation order starting at 0.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct MessageId(pub usize);

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}
