//! Federated prompt tuning over a frozen transformer encoder.
//!
//! Clients learn shared prompts on early layers and group prompts on later
//! layers. A key-based selector routes each sample to a group prompt; the
//! server aggregates prompts, head and keys each round and applies momentum
//! to keys and group prompts.

pub mod checkpoint;
pub mod client;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod selection;
pub mod server;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// SHA-256 over names, shapes and exact `f64` bytes.
pub fn hash_tensors<'a, S: AsRef<str>>(
    items: impl Iterator<Item = (S, &'a numerics::Tensor)>,
) -> String {
    let mut buf = Vec::new();
    for (name, t) in items {
        let name = name.as_ref();
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        t.write_bytes(&mut buf);
    }
    hex::encode(Sha256::digest(&buf))
}
