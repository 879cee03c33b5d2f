//! Configured benchmark runs and their reports.
//!
//! An [`ExperimentSpec`] is read from TOML, optionally patched with
//! `key=value` overrides, and executed by [`run_experiment`] on an
//! in-process cluster. The resulting [`Report`] serializes to JSON and can be
//! set against others with [`compare`].

mod report;
mod run;
mod spec;

pub use report::{compare, Comparison, ComparisonRow, CorunReport, GraphSummary, Report, RunReport, SCHEMA_VERSION};
pub use run::{digest, host_config, run_experiment, run_with_graph, summarize};
pub use spec::{apply_override, CorunSpec, ExperimentSpec, FabricSpec, GraphKind, GraphSpec, HostSpec, ProxySpec};

use crate::cluster::ClusterError;
use crate::graphbench::GraphError;
use crate::host_agent::HostError;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("reports do not match: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
