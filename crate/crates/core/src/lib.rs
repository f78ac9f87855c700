//! Deterministic simulator of ZeRO++-style sharded data-parallel training.
//!
//! Toy-scale numerics run for real on top of a stream-ordered execution model,
//! so an unsynchronized secondary-shard copy racing a prefetched backward
//! gather shows up as NaN in the loss, and the event-synchronized variant does
//! not. A ring cost model turns each step into simulated time.

pub mod config;
pub mod error;
pub mod numerics;
pub mod report;
pub mod sim;
pub mod stream;
pub mod topology;
pub mod trainer;
pub mod zeropp;

pub use error::{Error, Result};
