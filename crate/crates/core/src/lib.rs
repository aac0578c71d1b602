//! Core of a deterministic simulator for semi-asynchronous collaborative
//! training of a block-structured attention model across clients with
//! heterogeneous compute budgets.
//!
//! The crate is `no_std` (with `alloc`) and free of IO. It contains:
//!
//! - [`model`]: the block model (embedding, attention + MLP blocks, exit
//!   classifiers) with hand-written reverse-mode gradients,
//! - [`mask`]: trainable segment masks (importance, probability, Bernoulli
//!   sample, straight-through gradients, budget penalty),
//! - [`submodel`]: rolling depth windows, coverage and staging of deltas,
//! - [`distill`]: multi-exit placement and the self-distillation loss,
//! - [`client`]: the two-phase local trainer,
//! - [`server`]: staleness-aware segment aggregation and the round ledger,
//! - [`sim`]: the discrete-event driver and resource utilization,
//! - [`data`] and [`metrics`]: synthetic data, partitioning and evaluation,
//! - [`experiment`]: configuration and end-to-end orchestration.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod client;
pub mod config;
pub mod convex;
pub mod data;
pub mod digest;
pub mod distill;
mod error;
pub mod experiment;
pub mod federation;
pub mod layout;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod server;
pub mod sim;
pub mod submodel;
pub mod tensor;

pub use error::{Error, Result};
