pub mod ablation;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod retrieval_eval;
pub mod synthdata;
pub mod trainer;

pub use error::{CheckpointError, Error, ErrorCategory, Result};
