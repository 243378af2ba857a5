pub mod attack;
pub mod baseline;
pub mod checkpoint;
pub mod cli;
pub mod cmi;
pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod graph;
pub mod losses;
pub mod manifest;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod sparse;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
