use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FailureClass {
    Crash,
    AssertionFailure,
    Deadlock,
    LockTimeout,
    SyntaxError,
    SemanticError,
    Other,
}

impl FailureClass {
    pub const ALL: [FailureClass; 7] = [
        FailureClass::Crash,
        FailureClass::AssertionFailure,
        FailureClass::Deadlock,
        FailureClass::LockTimeout,
        FailureClass::SyntaxError,
        FailureClass::SemanticError,
        FailureClass::Other,
    ];

    /// Classes that stop a run. Everything else is a per-statement error.
    pub fn is_terminal(self) -> bool {
        self != FailureClass::Other
    }

    /// Crashes and assertion failures are bugs by themselves.
    pub fn is_bug(self) -> bool {
        matches!(self, FailureClass::Crash | FailureClass::AssertionFailure)
    }
}

impl fmt::Display for FailureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

const SEMANTIC_MARKERS: [&str; 8] = [
    "unknown column",
    "doesn't exist",
    "does not exist",
    "already exists",
    "ambiguous",
    "incorrect",
    "operand should contain",
    "not updatable",
];

pub fn classify_message(msg: &str) -> FailureClass {
    let m = msg.to_ascii_lowercase();
    let lost_connection = m.contains("lost connection") || m.contains("server has gone away");
    if m.contains("crash")
        || m.contains("segmentation fault")
        || m.contains("segfault")
        || m.contains("signal 11")
        || (lost_connection && (m.contains("restart") || m.contains("shutdown")))
    {
        FailureClass::Crash
    } else if m.contains("assert") {
        FailureClass::AssertionFailure
    } else if m.contains("deadlock") {
        FailureClass::Deadlock
    } else if m.contains("lock wait timeout") {
        FailureClass::LockTimeout
    } else if m.contains("syntax") {
        FailureClass::SyntaxError
    } else if SEMANTIC_MARKERS.iter().any(|k| m.contains(k)) || m.contains("not supported") {
        FailureClass::SemanticError
    } else {
        FailureClass::Other
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes() {
        let cases = [
            (
                "Lost connection to MySQL server during query; server restarted",
                FailureClass::Crash,
            ),
            ("mysqld got signal 11", FailureClass::Crash),
            (
                "Assertion `trx->state' failed",
                FailureClass::AssertionFailure,
            ),
            (
                "Deadlock found when trying to get lock; try restarting transaction",
                FailureClass::Deadlock,
            ),
            (
                "Lock wait timeout exceeded; try restarting transaction",
                FailureClass::LockTimeout,
            ),
            (
                "You have an error in your SQL syntax; near 'SELEC'",
                FailureClass::SyntaxError,
            ),
            (
                "Unknown column 'c9' in 'field list'",
                FailureClass::SemanticError,
            ),
            ("Table 'db.t' doesn't exist", FailureClass::SemanticError),
            (
                "Duplicate entry '1' for key 't.PRIMARY'",
                FailureClass::Other,
            ),
            (
                "Record has changed since last read in table 't'",
                FailureClass::Other,
            ),
            (
                "Lost connection to MySQL server during query",
                FailureClass::Other,
            ),
        ];
        for (msg, want) in cases {
            assert_eq!(classify_message(msg), want, "{msg}");
        }
        assert!(!FailureClass::Other.is_terminal());
        assert!(FailureClass::Crash.is_bug() && !FailureClass::Deadlock.is_bug());
    }
}
