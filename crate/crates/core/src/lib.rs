//! Anomaly-pattern-guided testing of transaction isolation.
//!
//! The pipeline generates a schema and a pool of statements, composes a
//! two-transaction test case that realizes one anomaly pattern, runs it
//! statement by statement against a target database under a controlled
//! schedule, and matches the resulting history against the pattern catalog.

pub mod campaign;
pub mod catalog;
pub mod constraints;
pub mod detector;
pub mod engine;
pub mod executor;
pub mod pattern;
pub mod schema_gen;
pub mod sql;
pub mod sql_gen;
pub mod txn_gen;
