//! Robust federated learning over heterogeneous LoRA updates.
//!
//! Clients share only the low-rank factors `A` and `B` of two instrumented
//! layers. The server scores each client from the singular-value spectrum
//! of its `A` factors, excludes outliers, aligns the remaining factors to a
//! common shape and averages them with weights given by how well each
//! client's dominant direction agrees with the running global one.
//!
//! The crate also contains a deterministic synthetic simulator with planted
//! poisoning attacks and classical robust baselines for comparison.

pub mod aggregation;
pub mod attacks;
pub mod cli;
pub mod config;
pub mod detection;
pub mod error;
pub mod lora;
pub mod rng;
pub mod output;
pub mod sim;
pub mod spectral;

pub use error::{HorusError, Result};
