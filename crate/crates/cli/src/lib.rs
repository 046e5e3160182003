//! Library surface of the experiment runner, exposed so integration tests
//! can drive config parsing, checkpoints and sinks directly.

pub mod checkpoint;
pub mod config;
pub mod runner;
pub mod sink;
