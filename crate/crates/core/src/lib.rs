//! Content-private deepfake detection over shuffled acoustic codec tokens.

pub mod cdm;
pub mod config;
pub mod corpus;
pub mod channel;
pub mod detector;
pub mod diffnum;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod privacy;
pub mod probe;
pub mod report;
pub mod signal;

pub use error::{Error, Result};
