//! Write recording through triggers, and read augmentation for targets that
//! do not report touched rows themselves.

use super::adapter::{AdapterError, DbAdapter, StmtOutput};
use super::trace::Touched;
use crate::schema_gen::{Schema, ROW_ID, VERSION};
use crate::sql::{Expr, Projection, Select, Value};

/// Name of the log table that receives a table's trigger rows.
pub fn log_table(table: &str) -> String {
    format!("{table}_log")
}

pub fn is_log_table(table: &str) -> bool {
    table.ends_with("_log")
}

/// DDL for the log table and the three AFTER triggers of `table`.
pub fn trigger_ddl(table: &str) -> Vec<String> {
    let log = log_table(table);
    let mut out = vec![format!(
        "CREATE TABLE {log} (operation_type VARCHAR(10), txn_id BIGINT, row_id BIGINT, version BIGINT, time DATETIME(6))"
    )];
    for (event, row) in [("INSERT", "NEW"), ("UPDATE", "NEW"), ("DELETE", "OLD")] {
        let vers = if event == "DELETE" {
            format!("{row}.{VERSION} + 1")
        } else {
            format!("{row}.{VERSION}")
        };
        out.push(format!(
            "CREATE TRIGGER tri_{}_{table} AFTER {event} ON {table} FOR EACH ROW \
             INSERT INTO {log} VALUES ('{event}', CONNECTION_ID(), {row}.{ROW_ID}, {vers}, SYSDATE(6))",
            event.to_ascii_lowercase()
        ));
    }
    out
}

/// Installs trigger logging on every table of `schema`. Targets that log
/// natively need nothing.
pub fn install_recording(adapter: &mut dyn DbAdapter, schema: &Schema) -> Result<(), AdapterError> {
    if adapter.native_event_log().is_some() {
        return Ok(());
    }
    if !adapter.supports_triggers() {
        return Err(AdapterError::TriggerUnsupported(adapter.backend()));
    }
    let s = adapter.open_session()?;
    for t in schema.tables.iter().filter(|t| !is_log_table(&t.name)) {
        for ddl in trigger_ddl(&t.name) {
            match adapter.submit(s, &ddl) {
                super::Submission::Done(Ok(_)) => {}
                super::Submission::Done(Err(e)) => {
                    adapter.close_session(s);
                    return Err(AdapterError::Other(e.to_string()));
                }
                super::Submission::Pending => {
                    adapter.close_session(s);
                    return Err(AdapterError::Other(format!("trigger DDL blocked: {ddl}")));
                }
            }
        }
    }
    adapter.close_session(s);
    Ok(())
}

/// Adds `ID` and `VERS` of every base table in a read to its projection, so
/// the observed versions can be recovered from the result set. A `*` is
/// expanded from `schema` first; reads over derived tables keep their star.
pub fn augment_read_projection(q: &Select, schema: &Schema) -> Select {
    let bases: Vec<(String, &str)> = std::iter::once(&q.from)
        .chain(q.joins.iter().map(|j| &j.item))
        .filter_map(|i| i.base_table().map(|t| (i.binding_name().to_string(), t)))
        .collect();
    let mut exprs = match &q.projection {
        Projection::Exprs(es) => es.clone(),
        Projection::Star => {
            if bases.len() != 1 + q.joins.len() {
                return q.clone();
            }
            let mut es = Vec::new();
            for (binding, table) in &bases {
                let Some(t) = schema.table(table) else {
                    return q.clone();
                };
                es.extend(
                    t.user_columns()
                        .map(|c| Expr::qualified(binding.clone(), c.name.clone())),
                );
            }
            es
        }
    };
    for (binding, _) in &bases {
        for col in [ROW_ID, VERSION] {
            let e = Expr::qualified(binding.clone(), col);
            if !exprs.contains(&e) {
                exprs.push(e);
            }
        }
    }
    Select {
        projection: Projection::Exprs(exprs),
        ..q.clone()
    }
}

/// Touched rows of a read from its augmented result set: one entry per
/// (table, ID, VERS) triple found in the columns.
pub fn touched_from_result(q: &Select, out: &StmtOutput) -> Vec<Touched> {
    let tables: Vec<(String, String)> = std::iter::once(&q.from)
        .chain(q.joins.iter().map(|j| &j.item))
        .filter_map(|i| {
            i.base_table()
                .map(|t| (i.binding_name().to_string(), t.to_string()))
        })
        .collect();
    let pos = |name: &str| {
        out.columns
            .iter()
            .position(|c| c.eq_ignore_ascii_case(name))
    };
    let mut touched = Vec::new();
    for (binding, table) in &tables {
        let id_col = pos(&format!("{binding}.{ROW_ID}"))
            .or_else(|| (tables.len() == 1).then(|| pos(ROW_ID)).flatten());
        let vers_col = pos(&format!("{binding}.{VERSION}"))
            .or_else(|| (tables.len() == 1).then(|| pos(VERSION)).flatten());
        let (Some(ic), Some(vc)) = (id_col, vers_col) else {
            continue;
        };
        for row in &out.rows {
            if let (Value::Int(id), Value::Int(v)) = (&row[ic], &row[vc]) {
                let t = Touched {
                    table: table.clone(),
                    row_id: *id,
                    version: *v,
                    write: None,
                };
                if !touched.contains(&t) {
                    touched.push(t);
                }
            }
        }
    }
    touched
}
