//! Orchestration of cross-market experiments: pairwise (AVG/BST) and global
//! result tables, training-time benchmarks, manifests and table output.

pub mod config;
pub mod method;
pub mod pipeline;
pub mod runner;
pub mod table;

pub use config::ExperimentConfig;
pub use method::{parse_methods, resolve_plan, Method};
pub use pipeline::{prepare, run_benchmark, run_global, run_pairwise, RunManifest, TimingRow};
pub use table::{emit_results, ResultsTable};
