//! Anomaly patterns: a fully ordered sequence of read, write, commit and
//! abort operations over versioned variables.
//!
//! The textual form flattens the usual subscripted notation, so
//! `R_1[x_0] W_2[x_1] C_2` is written `R1[x0]W2[x1]C2`. Whitespace between
//! tokens is ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Isolation levels, ordered from weakest to strongest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IsolationLevel {
    #[serde(rename = "RU")]
    ReadUncommitted,
    #[serde(rename = "RC")]
    ReadCommitted,
    #[serde(rename = "RR")]
    RepeatableRead,
    #[serde(rename = "SER")]
    Serializable,
}

impl IsolationLevel {
    pub const ALL: [IsolationLevel; 4] = [
        IsolationLevel::ReadUncommitted,
        IsolationLevel::ReadCommitted,
        IsolationLevel::RepeatableRead,
        IsolationLevel::Serializable,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            IsolationLevel::ReadUncommitted => "RU",
            IsolationLevel::ReadCommitted => "RC",
            IsolationLevel::RepeatableRead => "RR",
            IsolationLevel::Serializable => "SER",
        }
    }

    /// The level as written in `SET SESSION TRANSACTION ISOLATION LEVEL ...`.
    pub fn sql_name(self) -> &'static str {
        match self {
            IsolationLevel::ReadUncommitted => "READ UNCOMMITTED",
            IsolationLevel::ReadCommitted => "READ COMMITTED",
            IsolationLevel::RepeatableRead => "REPEATABLE READ",
            IsolationLevel::Serializable => "SERIALIZABLE",
        }
    }
}

impl fmt::Display for IsolationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown isolation level `{0}`")]
pub struct UnknownLevel(pub String);

impl FromStr for IsolationLevel {
    type Err = UnknownLevel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .to_ascii_uppercase()
            .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
            .filter(|p| !p.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        match norm.as_str() {
            "RU" | "READ UNCOMMITTED" => Ok(IsolationLevel::ReadUncommitted),
            "RC" | "READ COMMITTED" => Ok(IsolationLevel::ReadCommitted),
            "RR" | "REPEATABLE READ" => Ok(IsolationLevel::RepeatableRead),
            "SER" | "SERIALIZABLE" => Ok(IsolationLevel::Serializable),
            _ => Err(UnknownLevel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Read,
    Write,
    Commit,
    Abort,
}

impl OpKind {
    fn letter(self) -> char {
        match self {
            OpKind::Read => 'R',
            OpKind::Write => 'W',
            OpKind::Commit => 'C',
            OpKind::Abort => 'A',
        }
    }

    pub fn is_data(self) -> bool {
        matches!(self, OpKind::Read | OpKind::Write)
    }
}

/// One operation of a pattern. `var` and `version` are present exactly for
/// reads and writes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatternOp {
    pub kind: OpKind,
    pub txn: u32,
    pub var: Option<String>,
    pub version: Option<u32>,
}

impl PatternOp {
    pub fn read(txn: u32, var: &str, version: u32) -> Self {
        PatternOp {
            kind: OpKind::Read,
            txn,
            var: Some(var.to_string()),
            version: Some(version),
        }
    }

    pub fn write(txn: u32, var: &str, version: u32) -> Self {
        PatternOp {
            kind: OpKind::Write,
            txn,
            var: Some(var.to_string()),
            version: Some(version),
        }
    }

    pub fn commit(txn: u32) -> Self {
        PatternOp {
            kind: OpKind::Commit,
            txn,
            var: None,
            version: None,
        }
    }

    pub fn abort(txn: u32) -> Self {
        PatternOp {
            kind: OpKind::Abort,
            txn,
            var: None,
            version: None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.kind, OpKind::Commit | OpKind::Abort)
    }
}

impl fmt::Display for PatternOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.letter(), self.txn)?;
        if let (Some(var), Some(version)) = (&self.var, self.version) {
            write!(f, "[{var}{version}]")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyPattern {
    pub id: String,
    pub ops: Vec<PatternOp>,
    pub disallowed: BTreeSet<IsolationLevel>,
}

impl AnomalyPattern {
    /// Number of distinct transactions, which are always `1..=n`.
    pub fn txn_count(&self) -> u32 {
        self.ops.iter().map(|op| op.txn).max().unwrap_or(0)
    }

    /// Variables in order of first appearance.
    pub fn variables(&self) -> Vec<String> {
        let mut vars: Vec<String> = Vec::new();
        for op in &self.ops {
            if let Some(v) = &op.var {
                if !vars.contains(v) {
                    vars.push(v.clone());
                }
            }
        }
        vars
    }

    pub fn ops_of(&self, txn: u32) -> impl Iterator<Item = &PatternOp> {
        self.ops.iter().filter(move |op| op.txn == txn)
    }

    pub fn is_violation(&self, level: IsolationLevel) -> bool {
        self.disallowed.contains(&level)
    }
}

impl fmt::Display for AnomalyPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_pattern(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PatternError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("invalid pattern at op {index}: {msg}")]
    Validation { index: usize, msg: String },
}

fn syntax(pos: usize, msg: impl Into<String>) -> PatternError {
    PatternError::Syntax {
        pos,
        msg: msg.into(),
    }
}

/// Parses the flattened pattern syntax and validates the result. The
/// disallowed set is left empty.
pub fn parse_pattern(text: &str) -> Result<AnomalyPattern, PatternError> {
    let bytes = text.as_bytes();
    let mut pos = 0;
    let mut ops = Vec::new();

    let skip_ws = |pos: &mut usize| {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
    };
    let number = |pos: &mut usize| -> Option<u32> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        text[start..*pos].parse().ok()
    };

    skip_ws(&mut pos);
    if pos == bytes.len() {
        return Err(syntax(0, "empty pattern"));
    }
    while pos < bytes.len() {
        let start = pos;
        let kind = match bytes[pos].to_ascii_uppercase() {
            b'R' => OpKind::Read,
            b'W' => OpKind::Write,
            b'C' => OpKind::Commit,
            b'A' => OpKind::Abort,
            other => {
                return Err(syntax(
                    pos,
                    format!("unexpected character `{}`", other as char),
                ))
            }
        };
        pos += 1;
        let txn = number(&mut pos).ok_or_else(|| syntax(pos, "expected transaction index"))?;
        if kind.is_data() {
            if bytes.get(pos) != Some(&b'[') {
                return Err(syntax(pos, "expected `[`"));
            }
            pos += 1;
            let var_start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_alphabetic() {
                pos += 1;
            }
            if pos == var_start {
                return Err(syntax(pos, "expected variable name"));
            }
            let var = text[var_start..pos].to_string();
            let version = number(&mut pos).ok_or_else(|| syntax(pos, "expected version"))?;
            if bytes.get(pos) != Some(&b']') {
                return Err(syntax(pos, "expected `]`"));
            }
            pos += 1;
            ops.push(PatternOp {
                kind,
                txn,
                var: Some(var),
                version: Some(version),
            });
        } else {
            ops.push(PatternOp {
                kind,
                txn,
                var: None,
                version: None,
            });
        }
        if ops.last().is_some_and(|op| op.txn == 0) {
            return Err(syntax(start, "transaction indices start at 1"));
        }
        skip_ws(&mut pos);
    }

    let pattern = AnomalyPattern {
        id: String::new(),
        ops,
        disallowed: BTreeSet::new(),
    };
    validate(&pattern)?;
    Ok(pattern)
}

pub fn format_pattern(p: &AnomalyPattern) -> String {
    p.ops.iter().map(|op| op.to_string()).collect()
}

/// Checks the structural invariants of a pattern, reporting the first
/// offending op.
pub fn validate(p: &AnomalyPattern) -> Result<(), PatternError> {
    let invalid = |index: usize, msg: String| Err(PatternError::Validation { index, msg });
    if p.ops.is_empty() {
        return invalid(0, "pattern has no operations".into());
    }
    let mut terminated: BTreeSet<u32> = BTreeSet::new();
    let mut installed: BTreeMap<&str, u32> = BTreeMap::new();
    for (index, op) in p.ops.iter().enumerate() {
        if op.txn == 0 {
            return invalid(index, "transaction index must be >= 1".into());
        }
        if terminated.contains(&op.txn) {
            return invalid(index, format!("transaction {} already terminated", op.txn));
        }
        match (op.kind, &op.var, op.version) {
            (OpKind::Commit | OpKind::Abort, None, None) => {
                terminated.insert(op.txn);
            }
            (OpKind::Write, Some(var), Some(version)) => {
                let expected = installed.get(var.as_str()).copied().unwrap_or(0) + 1;
                if version != expected {
                    return invalid(
                        index,
                        format!("write installs {var}{version}, expected {var}{expected}"),
                    );
                }
                installed.insert(var, version);
            }
            (OpKind::Read, Some(var), Some(version)) => {
                let latest = installed.get(var.as_str()).copied().unwrap_or(0);
                if version > latest {
                    return invalid(
                        index,
                        format!("read of {var}{version} before it is installed"),
                    );
                }
            }
            _ => return invalid(index, "malformed operation operands".into()),
        }
    }
    let max = p.txn_count();
    for txn in 1..=max {
        if !p.ops.iter().any(|op| op.txn == txn) {
            return invalid(
                p.ops.len() - 1,
                format!("transaction {txn} has no operations"),
            );
        }
        if !terminated.contains(&txn) {
            return invalid(
                p.ops.len() - 1,
                format!("transaction {txn} never commits or aborts"),
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lost_update() {
        let p = parse_pattern("R1[x0]W2[x1]C2W1[x2]C1").unwrap();
        assert_eq!(
            p.ops,
            vec![
                PatternOp::read(1, "x", 0),
                PatternOp::write(2, "x", 1),
                PatternOp::commit(2),
                PatternOp::write(1, "x", 2),
                PatternOp::commit(1),
            ]
        );
        assert!(p.disallowed.is_empty());
    }

    #[test]
    fn parses_dirty_write_with_whitespace() {
        let p = parse_pattern(" W1[x1] W2[x2]\tC1 C2 ").unwrap();
        assert_eq!(
            p.ops,
            vec![
                PatternOp::write(1, "x", 1),
                PatternOp::write(2, "x", 2),
                PatternOp::commit(1),
                PatternOp::commit(2),
            ]
        );
    }

    #[test]
    fn empty_is_syntax_error() {
        assert!(matches!(
            parse_pattern(""),
            Err(PatternError::Syntax { .. })
        ));
        assert!(matches!(
            parse_pattern("   "),
            Err(PatternError::Syntax { .. })
        ));
    }

    #[test]
    fn malformed_tokens() {
        for bad in [
            "X1", "R1x0]", "R1[x0", "R[x0]C1", "R1[0]C1", "R1[x]C1", "R0[x0]C0",
        ] {
            assert!(
                matches!(parse_pattern(bad), Err(PatternError::Syntax { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn double_terminal_is_invalid() {
        assert_eq!(
            parse_pattern("R1[x0]C1C1"),
            Err(PatternError::Validation {
                index: 2,
                msg: "transaction 1 already terminated".into()
            })
        );
    }

    #[test]
    fn version_rules() {
        // gap in installed versions
        assert!(matches!(
            parse_pattern("W1[x2]C1"),
            Err(PatternError::Validation { index: 0, .. })
        ));
        // read of a version nobody installed
        assert!(matches!(
            parse_pattern("W1[x1]R2[x2]A1C2"),
            Err(PatternError::Validation { index: 1, .. })
        ));
        // reading a version installed by a later-aborted writer is fine
        assert!(parse_pattern("W1[x1]R2[x1]A1C2").is_ok());
    }

    #[test]
    fn missing_terminal_and_gaps() {
        assert!(matches!(
            parse_pattern("R1[x0]"),
            Err(PatternError::Validation { .. })
        ));
        assert!(matches!(
            parse_pattern("R1[x0]C1R3[x0]C3"),
            Err(PatternError::Validation { .. })
        ));
    }

    #[test]
    fn multi_digit_indices_are_accepted() {
        let p = parse_pattern("W1[xy1]R12[xy1]C1C12R2[z0]C2R3[z0]C3R4[z0]C4R5[z0]C5R6[z0]C6R7[z0]C7R8[z0]C8R9[z0]C9R10[z0]C10R11[z0]C11");
        assert!(p.is_ok(), "{p:?}");
    }

    #[test]
    fn format_round_trip() {
        let text = "W1[x1]W2[y1]C2R1[y1]C1";
        assert_eq!(format_pattern(&parse_pattern(text).unwrap()), text);
    }

    #[test]
    fn level_parsing() {
        assert_eq!(
            "rr".parse::<IsolationLevel>().unwrap(),
            IsolationLevel::RepeatableRead
        );
        assert_eq!(
            "READ COMMITTED".parse::<IsolationLevel>().unwrap(),
            IsolationLevel::ReadCommitted
        );
        assert_eq!(
            "repeatable-read".parse::<IsolationLevel>().unwrap(),
            IsolationLevel::RepeatableRead
        );
        assert!("snapshot".parse::<IsolationLevel>().is_err());
        assert!(IsolationLevel::ReadCommitted < IsolationLevel::Serializable);
    }
}
