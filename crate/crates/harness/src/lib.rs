//! Experiments around the BackMAN and EBP engines: MNIST data, training runs,
//! Split-MNIST forgetting, depth sweeps, grid search and the verification suites
//! behind the `backman` command.

pub mod config;
pub mod data;
pub mod experiments;
pub mod train;
pub mod verify;
