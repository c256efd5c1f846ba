pub mod analysis;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod merging;
pub mod model;
pub mod numeric;
pub mod objectives;
pub mod retrieval;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
