//! Deterministic simulator of federated learning under Byzantine attacks.
//!
//! The crate is organized around a flat-vector-with-layer-metadata update
//! representation ([`update::LayeredUpdate`]). On top of it sit the Top-k
//! sparsifier ([`sparsify`]), the robust statistics used for filtering
//! ([`stats`]), the LASA rule and baseline aggregators ([`aggregate`]),
//! poisoning attack generators ([`attack`]), a local-SGD training loop
//! ([`engine`]), dataset synthesis and partitioning ([`data`]), and the
//! evaluation layer ([`metrics`]).

pub mod aggregate;
pub mod attack;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod sparsify;
pub mod stats;
pub mod update;

pub use error::{Error, Result};
