//! Batch experiment runner: generate datasets, run methods over seeds,
//! aggregate results into CSV tables and plot data.

pub mod config;
pub mod ei;
pub mod gen;
pub mod report;
pub mod run;
pub mod selftest;
pub mod stats;

pub use config::ExperimentConfig;
pub use ei::cmd_ei;
pub use gen::cmd_gen;
pub use report::cmd_report;
pub use run::cmd_run;
