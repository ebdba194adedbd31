//! Config-driven experiment runner: in-process or as a TCP ring of node
//! processes, plus reports over finished run directories.

pub mod config;
pub mod report;
pub mod ring;
pub mod run;

pub use config::{Algorithm, DataConfig, ExperimentConfig};
pub use report::report;
pub use ring::run_ring;
pub use run::{execute, run_experiment, Summary};
