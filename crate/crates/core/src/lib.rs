//! Deterministic simulator for federated training of face-style embedding
//! models where the server shares normalized mean class representations
//! of its public identities instead of public data.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod federated;
pub mod losses;
pub mod model;
pub mod numkit;

pub use error::{Error, Result};
