pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod report;

pub use error::{PerserError, Result};
