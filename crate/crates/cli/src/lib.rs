//! Support library for the `chaincalc` binary: scenario schema, report
//! formatting, and the deterministic verification suites.

pub mod report;
pub mod scenario;
pub mod suites;
