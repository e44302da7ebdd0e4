//! Library half of the benchmark CLI: experiment plans and reports, the
//! verification suites behind the `verify` verbs, heatmap rendering, and
//! deterministic serialization helpers.

pub mod experiment;
pub mod render;
pub mod report;
pub mod verify;
