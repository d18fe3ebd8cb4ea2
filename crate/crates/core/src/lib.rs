pub mod adcore;
pub mod alphabet;
pub mod attn;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod focus;
pub mod model;
pub mod netpbm;
pub mod rfgeom;
pub mod train;

pub use error::{FanError, Result};
