//! Deterministic federated-learning simulator: FedAvg with periodic
//! server-side iterate averaging and epoch decay, on non-IID MNIST.
//!
//! The crate is organized around one communication round: the server
//! broadcasts a model, sampled clients run local SGD ([`fed`]), the server
//! aggregates by dataset-size weights, and between rounds applies the
//! server-side policies ([`server`]). The [`harness`] module drives whole
//! experiments and writes machine-readable outputs; [`metrics`] extracts
//! rounds-to-accuracy statistics.
//!
//! With the default `parallel` feature, clients within a round and
//! evaluation chunks run on rayon; the sequential paths are always compiled
//! and produce bit-identical results.

pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod partition;
pub mod rng;
pub mod server;
pub mod synth;

pub use error::{Error, Result};
