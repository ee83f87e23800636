//! REST service and command line driving the tabrule rule loop.

pub mod api;
pub mod cli;
pub mod engine;
