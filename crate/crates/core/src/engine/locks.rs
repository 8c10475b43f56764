//! Table intention locks and row locks, held to transaction end.

use std::collections::{BTreeMap, BTreeSet};

use super::storage::TxnId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TableMode {
    IntentShared,
    IntentExclusive,
    Shared,
    Exclusive,
}

impl TableMode {
    fn compatible(self, other: TableMode) -> bool {
        use TableMode::*;
        matches!(
            (self, other),
            (IntentShared, IntentShared | IntentExclusive | Shared)
                | (IntentExclusive, IntentShared | IntentExclusive)
                | (Shared, IntentShared | Shared)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RowMode {
    Shared,
    Exclusive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LockRequest {
    Table(String, TableMode),
    Row(String, i64, RowMode),
}

#[derive(Debug, Default, Clone)]
pub struct LockManager {
    tables: BTreeMap<String, BTreeMap<TxnId, BTreeSet<TableMode>>>,
    rows: BTreeMap<(String, i64), BTreeMap<TxnId, BTreeSet<RowMode>>>,
}

impl LockManager {
    /// Other transactions whose held locks conflict with `req`.
    /// `exclusive_rows_shared` lets row X locks coexist with each other.
    pub fn conflicts(
        &self,
        txn: TxnId,
        req: &LockRequest,
        exclusive_rows_shared: bool,
    ) -> Vec<TxnId> {
        match req {
            LockRequest::Table(t, mode) => self
                .tables
                .get(t)
                .into_iter()
                .flatten()
                .filter(|(holder, modes)| {
                    **holder != txn && modes.iter().any(|m| !mode.compatible(*m))
                })
                .map(|(holder, _)| *holder)
                .collect(),
            LockRequest::Row(t, id, mode) => self
                .rows
                .get(&(t.clone(), *id))
                .into_iter()
                .flatten()
                .filter(|(holder, modes)| {
                    **holder != txn
                        && modes.iter().any(|m| match (mode, m) {
                            (RowMode::Shared, RowMode::Shared) => false,
                            (RowMode::Exclusive, RowMode::Exclusive) => !exclusive_rows_shared,
                            _ => true,
                        })
                })
                .map(|(holder, _)| *holder)
                .collect(),
        }
    }

    pub fn grant(&mut self, txn: TxnId, req: &LockRequest) {
        match req {
            LockRequest::Table(t, mode) => {
                self.tables
                    .entry(t.clone())
                    .or_default()
                    .entry(txn)
                    .or_default()
                    .insert(*mode);
            }
            LockRequest::Row(t, id, mode) => {
                self.rows
                    .entry((t.clone(), *id))
                    .or_default()
                    .entry(txn)
                    .or_default()
                    .insert(*mode);
            }
        }
    }

    pub fn release_all(&mut self, txn: TxnId) {
        for holders in self.tables.values_mut() {
            holders.remove(&txn);
        }
        self.tables.retain(|_, h| !h.is_empty());
        for holders in self.rows.values_mut() {
            holders.remove(&txn);
        }
        self.rows.retain(|_, h| !h.is_empty());
    }

    pub fn holds_any(&self, txn: TxnId) -> bool {
        self.tables.values().any(|h| h.contains_key(&txn))
            || self.rows.values().any(|h| h.contains_key(&txn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use TableMode::*;

    fn table(mode: TableMode) -> LockRequest {
        LockRequest::Table("t".into(), mode)
    }

    #[test]
    fn table_compatibility_matrix() {
        let modes = [IntentShared, IntentExclusive, Shared, Exclusive];
        let expected = [
            [true, true, true, false],
            [true, true, false, false],
            [true, false, true, false],
            [false, false, false, false],
        ];
        for (i, held) in modes.iter().enumerate() {
            for (j, req) in modes.iter().enumerate() {
                let mut lm = LockManager::default();
                lm.grant(1, &table(*held));
                assert_eq!(
                    lm.conflicts(2, &table(*req), false).is_empty(),
                    expected[i][j],
                    "{held:?} vs {req:?}"
                );
                assert!(lm.conflicts(1, &table(*req), false).is_empty());
            }
        }
    }

    #[test]
    fn row_locks_and_release() {
        let mut lm = LockManager::default();
        let x = LockRequest::Row("t".into(), 1, RowMode::Exclusive);
        let s = LockRequest::Row("t".into(), 1, RowMode::Shared);
        lm.grant(1, &s);
        assert!(lm.conflicts(2, &s, false).is_empty());
        assert_eq!(lm.conflicts(2, &x, false), vec![1]);
        lm.grant(2, &s);
        assert_eq!(lm.conflicts(3, &x, false), vec![1, 2]);
        lm.release_all(1);
        lm.release_all(2);
        assert!(!lm.holds_any(1));
        lm.grant(1, &x);
        assert_eq!(lm.conflicts(2, &x, false), vec![1]);
        assert!(lm.conflicts(2, &x, true).is_empty());
        assert_eq!(lm.conflicts(2, &s, true), vec![1]);
    }
}
