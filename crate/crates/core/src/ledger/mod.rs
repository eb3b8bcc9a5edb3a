//! Git-backed experiment history.

mod grammar;
mod id;
mod store;

pub use grammar::{
    is_metric_name, looks_like_experiment, parse_commit, scan_number, CommitMessage, ErrorCode, Metric,
    ParseError,
};
pub use id::{BadId, ExperimentId};
pub use store::*;
