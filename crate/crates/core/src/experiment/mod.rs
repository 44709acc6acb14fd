//! JSON-configured benchmark runner and result emission.

pub mod config;
pub mod output;
pub mod runner;
pub mod validate;

pub use config::{batch_lengths, ExperimentConfig};
pub use output::{emit_results, OutputFormat, Summary};
pub use runner::{run_benchmark, run_design, run_estimate, BenchmarkOutput};
pub use validate::{run_validation, CheckResult};
