pub mod backbone;
pub mod config;
pub mod error;
pub mod eval;
pub mod event_io;
pub mod fusion;
pub mod graph;
pub mod head;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod selfcheck;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
