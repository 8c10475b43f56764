//! Multi-version row storage.

use std::collections::BTreeMap;

use crate::schema_gen::{ROW_ID, VERSION};
use crate::sql::{ColumnSpec, CreateTable, DataType, Value};

pub type TxnId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Version {
    pub vers: i64,
    /// `None` marks a deletion.
    pub values: Option<Vec<Value>>,
    pub writer: TxnId,
    pub commit_ts: Option<u64>,
}

impl Version {
    pub fn is_committed(&self) -> bool {
        self.commit_ts.is_some()
    }
}

/// Which versions a statement may observe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Versions committed at or before `ts`, plus the reader's own writes.
    Snapshot { ts: u64, me: TxnId },
    /// The newest version regardless of commit state.
    Dirty,
}

impl View {
    pub fn sees(&self, v: &Version) -> bool {
        match *self {
            View::Snapshot { ts, me } => match v.commit_ts {
                Some(c) => c <= ts,
                None => v.writer == me,
            },
            View::Dirty => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMeta {
    pub spec: ColumnSpec,
    pub hidden: bool,
}

#[derive(Debug, Clone)]
pub struct Table {
    pub name: String,
    pub columns: Vec<ColumnMeta>,
    pub id_col: usize,
    pub vers_col: usize,
    pub rows: BTreeMap<i64, Vec<Version>>,
    pub next_id: i64,
    pub auto_inc: BTreeMap<usize, i64>,
}

impl Table {
    pub fn from_create(ct: &CreateTable) -> Table {
        let mut columns: Vec<ColumnMeta> = ct
            .columns
            .iter()
            .map(|c| ColumnMeta {
                spec: c.clone(),
                hidden: false,
            })
            .collect();
        for synthetic in [ROW_ID, VERSION] {
            if !columns
                .iter()
                .any(|c| c.spec.name.eq_ignore_ascii_case(synthetic))
            {
                columns.push(ColumnMeta {
                    spec: ColumnSpec::new(synthetic, DataType::Int),
                    hidden: true,
                });
            }
        }
        let find = |n: &str| {
            columns
                .iter()
                .position(|c| c.spec.name.eq_ignore_ascii_case(n))
                .unwrap()
        };
        let id_col = find(ROW_ID);
        let vers_col = find(VERSION);
        let auto_inc = columns
            .iter()
            .enumerate()
            .filter(|(i, c)| c.spec.auto_increment && *i != id_col)
            .map(|(i, _)| (i, 1))
            .collect();
        Table {
            name: ct.name.clone(),
            columns,
            id_col,
            vers_col,
            rows: BTreeMap::new(),
            next_id: 1,
            auto_inc,
        }
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.spec.name.eq_ignore_ascii_case(name))
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.spec.name.clone()).collect()
    }

    /// The version of row `id` visible in `view`; `None` if absent or deleted.
    pub fn visible(&self, id: i64, view: View) -> Option<&Version> {
        let v = self.rows.get(&id)?.iter().rev().find(|v| view.sees(v))?;
        v.values.as_ref().map(|_| v)
    }

    pub fn visible_rows(&self, view: View) -> Vec<(i64, &Version)> {
        self.rows
            .keys()
            .filter_map(|&id| self.visible(id, view).map(|v| (id, v)))
            .collect()
    }

    pub fn head(&self, id: i64) -> Option<&Version> {
        self.rows.get(&id).and_then(|c| c.last())
    }

    /// Rows whose newest version is live, whoever wrote it.
    pub fn live_heads(&self) -> impl Iterator<Item = (i64, &Vec<Value>)> {
        self.rows.iter().filter_map(|(id, c)| {
            c.last()
                .and_then(|v| v.values.as_ref())
                .map(|vals| (*id, vals))
        })
    }

    /// Drops every version written by `txn` (rollback).
    pub fn discard(&mut self, txn: TxnId) {
        self.rows.retain(|_, chain| {
            chain.retain(|v| !(v.writer == txn && v.commit_ts.is_none()));
            !chain.is_empty()
        });
    }

    pub fn commit(&mut self, txn: TxnId, ts: u64) {
        for chain in self.rows.values_mut() {
            for v in chain
                .iter_mut()
                .filter(|v| v.writer == txn && v.commit_ts.is_none())
            {
                v.commit_ts = Some(ts);
            }
        }
    }
}
