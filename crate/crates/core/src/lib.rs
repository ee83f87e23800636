//! Rule discovery for table question answering: value-list restructuring,
//! program generation, sandboxed execution, error clustering and the
//! statistically gated rule loop.

pub mod agent;
pub mod clustering;
pub mod dataset;
pub mod error;
pub mod features;
pub mod numeric;
pub mod restructure;
pub mod rule_loop;
pub mod sandbox;
pub mod scoring;
pub mod stats;
pub mod testkit;

pub use error::{Error, Result};
