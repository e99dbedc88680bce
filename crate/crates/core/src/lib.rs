//! Depth-growing laboratory for small decoder-only transformers.
//!
//! The crate covers the whole loop: a deterministic training engine
//! ([`nn`], [`optim`], [`data`]), growth operators that turn an `L`-layer
//! checkpoint into an `L + k`-layer one ([`growth`]), the LAG race and
//! stacking schedulers that pick operators from short training runs
//! ([`race`]), and the correlation/regret toolkit used to study how early
//! the eventual winner becomes visible ([`analysis`]).

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod growth;
pub mod nn;
pub mod optim;
pub mod race;
pub mod rng;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
