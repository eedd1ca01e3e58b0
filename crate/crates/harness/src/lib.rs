//! Anomaly cases, dataset building, experiments and reports.

pub mod cases;
pub mod dataset;
pub mod experiment;
pub mod metrics;
