//! Multi-agent adaptation of a frozen dual encoder to out-of-distribution
//! concepts, on a synthetic benchmark with a built-in name-collapse failure.

pub mod adapter;
pub mod agents;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod error;
pub mod messaging;
pub mod objectives;
pub mod optim;
pub mod pipeline;

pub use error::{Error, Result};
