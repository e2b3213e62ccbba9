//! Scenario harness for the QKDN stack: runs, metrics, artifacts and the
//! HTTP front end.

pub mod http;
pub mod metrics;
pub mod output;
pub mod requirements;
pub mod scenario;
