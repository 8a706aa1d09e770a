//! Execution-graph tracing and failure attribution for stateful pipelines.

pub mod agent;
pub mod attribution;
pub mod explorer;
pub mod faultsim;
pub mod graph;
pub mod model;
pub mod obs;
pub mod persist;
pub mod recorder;
pub mod reporter;
pub mod retrieval;
