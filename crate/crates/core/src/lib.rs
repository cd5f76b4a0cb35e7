pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod episode;
pub mod error;
pub mod eval;
pub mod hyper;
pub mod metric;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod reptile;
pub mod synth;
pub mod system;
pub mod train;
pub mod vocab;

pub use error::{Error, ErrorKind, Result};
