//! Query-plan representation learning.
//!
//! Plans are parsed into [`plan::PlanTree`]s, featurized by the
//! [`encoder`], turned into a graph-level embedding by one of the tree
//! models in [`models`], and mapped to a latency by the cost head in
//! [`estimator`]. [`metrics`] scores cost estimates and plan choices, and
//! [`workload`] generates synthetic catalogs, plans and ground-truth
//! latencies.

pub mod error;
pub mod estimator;
pub mod numerics;
pub mod encoder;
pub mod metrics;
pub mod models;
pub mod plan;
pub mod workload;

pub use error::{Error, Result};
