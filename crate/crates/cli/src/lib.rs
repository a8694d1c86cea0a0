//! Batch execution of scenario files and peak-deceleration reports.

pub mod batch;
pub mod report;
