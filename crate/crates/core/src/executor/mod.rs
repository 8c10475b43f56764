//! Scheduled execution of a test case against a target.

mod adapter;
mod classify;
mod recording;
mod schedule;
mod trace;

pub use adapter::*;
pub use classify::{classify_message, FailureClass};
pub use recording::{
    augment_read_projection, install_recording, is_log_table, log_table, touched_from_result,
    trigger_ddl,
};
pub use schedule::{run_schedule, ExecOptions};
pub use trace::*;
