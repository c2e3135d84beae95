pub mod diagnostics;
pub mod diff;
pub mod error;
pub mod flow;
pub mod gcpt;
pub mod metrics;
pub mod molgraph;
pub mod train;

pub use error::{Error, Result};
