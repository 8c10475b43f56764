//! Random schemas and seed data. Every table carries the synthetic `ID` and
//! `VERS` columns used to reconstruct row identity and version order.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sql::{ColumnSpec, CreateTable, DataType, Expr, ForeignKey, Insert, Stmt, Value};

pub const ROW_ID: &str = "ID";
pub const VERSION: &str = "VERS";

/// Small fixed pool for TEXT values.
pub const TEXT_POOL: [&str; 8] = ["a", "b", "ab", "foo", "bar", "baz", "qux", "zz"];

pub type ColumnDef = ColumnSpec;

/// Knobs for the generators. Defaults are configuration, not measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub max_tables: usize,
    pub min_columns: usize,
    pub max_columns: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    pub pool_size: usize,
    pub p_id: f64,
    pub p_empty: f64,
    /// Ratio of successive row weights, newest row first.
    pub recency_decay: f64,
    pub p_insert: f64,
    /// Weights for BEGIN, START TRANSACTION, START TRANSACTION WITH CONSISTENT SNAPSHOT.
    pub begin_weights: [u32; 3],
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_tables: 2,
            min_columns: 1,
            max_columns: 4,
            min_rows: 3,
            max_rows: 10,
            pool_size: 40,
            p_id: 0.8,
            p_empty: 0.05,
            recency_decay: 0.5,
            p_insert: 0.25,
            begin_weights: [1, 1, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }

    /// Declared columns other than `ID` and `VERS`.
    pub fn user_columns(&self) -> impl Iterator<Item = &ColumnDef> {
        self.columns.iter().filter(|c| !is_synthetic(&c.name))
    }

    /// User columns that an INSERT must supply.
    pub fn insert_columns(&self) -> impl Iterator<Item = &ColumnDef> {
        self.user_columns().filter(|c| !c.auto_increment)
    }

    pub fn to_create(&self) -> CreateTable {
        CreateTable {
            name: self.name.clone(),
            columns: self.columns.clone(),
        }
    }
}

pub fn is_synthetic(column: &str) -> bool {
    column.eq_ignore_ascii_case(ROW_ID) || column.eq_ignore_ascii_case(VERSION)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FkEdge {
    pub child_table: String,
    pub child_column: String,
    pub parent_table: String,
    pub parent_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Schema {
    pub tables: Vec<TableDef>,
    pub fk_edges: Vec<FkEdge>,
    /// Values inserted into each key column, per table.
    pub inserted_keys: BTreeMap<String, BTreeMap<String, Vec<Value>>>,
}

impl Schema {
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn fk_of(&self, table: &str, column: &str) -> Option<&FkEdge> {
        self.fk_edges
            .iter()
            .find(|e| e.child_table == table && e.child_column == column)
    }
}

/// One seeded row as the generator expects it to exist after loading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRow {
    pub id: i64,
    pub values: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SeedData {
    pub statements: Vec<String>,
    pub rows: BTreeMap<String, Vec<SeedRow>>,
}

impl SeedData {
    pub fn rows_of(&self, table: &str) -> &[SeedRow] {
        self.rows.get(table).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The ID the next INSERT into `table` will receive.
    pub fn next_id(&self, table: &str) -> i64 {
        self.rows_of(table).len() as i64 + 1
    }
}

pub fn gen_schema(seed: u64, cfg: &GenConfig) -> Schema {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tables = rng.gen_range(1..=cfg.max_tables.clamp(1, 4));
    let mut schema = Schema::default();
    for t in 0..n_tables {
        let name = format!("t{t}");
        let n_cols = rng
            .gen_range(cfg.min_columns.max(1)..=cfg.max_columns.clamp(cfg.min_columns.max(1), 6));
        let mut columns: Vec<ColumnDef> = Vec::new();
        let mut has_pk = false;
        for c in 0..n_cols {
            let col_name = format!("c{c}");
            let data_type = *[
                DataType::Int,
                DataType::Int,
                DataType::Text,
                DataType::Boolean,
            ]
            .choose(&mut rng)
            .unwrap();
            let mut col = ColumnSpec::new(col_name.clone(), data_type);
            if data_type == DataType::Int {
                let candidates: Vec<(String, String)> = schema
                    .tables
                    .iter()
                    .flat_map(|p| {
                        p.user_columns()
                            .filter(|k| k.is_key() && k.data_type == DataType::Int)
                            .map(|k| (p.name.clone(), k.name.clone()))
                            .collect::<Vec<_>>()
                    })
                    .collect();
                if !candidates.is_empty() && rng.gen_bool(0.4) {
                    let (parent_table, parent_column) =
                        candidates.choose(&mut rng).unwrap().clone();
                    col.references = Some(ForeignKey {
                        table: parent_table.clone(),
                        column: parent_column.clone(),
                    });
                    schema.fk_edges.push(FkEdge {
                        child_table: name.clone(),
                        child_column: col_name,
                        parent_table,
                        parent_column,
                    });
                } else if !has_pk && rng.gen_bool(0.3) {
                    col.primary_key = true;
                    has_pk = true;
                } else if rng.gen_bool(0.2) {
                    col.unique = true;
                }
            }
            if !col.primary_key && rng.gen_bool(0.2) {
                col.not_null = true;
            }
            columns.push(col);
        }
        if n_cols > 1 && rng.gen_bool(0.3) {
            if let Some(pk) = columns.iter_mut().find(|c| c.primary_key) {
                pk.auto_increment = true;
            }
        }
        columns.push(ColumnSpec::new(ROW_ID, DataType::Int));
        columns.push(ColumnSpec::new(VERSION, DataType::Int));
        schema.tables.push(TableDef { name, columns });
    }
    schema
}

/// CREATE TABLE statements, parents before children.
pub fn emit_ddl(s: &Schema) -> Vec<String> {
    assert!(!s.tables.is_empty(), "schema has no tables");
    let mut emitted: BTreeSet<&str> = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < s.tables.len() {
        let before = out.len();
        for t in &s.tables {
            if emitted.contains(t.name.as_str()) {
                continue;
            }
            let ready = s
                .fk_edges
                .iter()
                .filter(|e| e.child_table == t.name && e.parent_table != t.name)
                .all(|e| emitted.contains(e.parent_table.as_str()));
            if ready {
                emitted.insert(&t.name);
                out.push(Stmt::CreateTable(t.to_create()).to_string());
            }
        }
        assert!(out.len() > before, "foreign keys form a cycle");
    }
    out
}

pub fn random_int(rng: &mut impl Rng) -> i64 {
    rng.gen_range(i32::MIN as i64..=i32::MAX as i64)
}

pub fn random_value(rng: &mut impl Rng, ty: DataType) -> Value {
    match ty {
        DataType::Int => Value::Int(random_int(rng)),
        DataType::Text => Value::Text(TEXT_POOL.choose(rng).unwrap().to_string()),
        DataType::Boolean => Value::Bool(rng.gen_bool(0.5)),
    }
}

/// A fresh value for `col` of `table`, drawing foreign keys from the parent's
/// recorded keys and avoiding collisions on key columns.
pub fn value_for_column(
    s: &Schema,
    table: &str,
    col: &ColumnDef,
    used: &BTreeSet<Value>,
    rng: &mut impl Rng,
) -> Value {
    if let Some(fk) = s.fk_of(table, &col.name) {
        let keys = s
            .inserted_keys
            .get(&fk.parent_table)
            .and_then(|m| m.get(&fk.parent_column))
            .filter(|k| !k.is_empty());
        if let Some(keys) = keys {
            return keys.choose(rng).unwrap().clone();
        }
        return Value::Null;
    }
    loop {
        let v = random_value(rng, col.data_type);
        if !col.is_key() || !used.contains(&v) {
            return v;
        }
    }
}

/// One multi-row INSERT per table (parents first). Records key values in
/// `s.inserted_keys`. IDs are 1..=rows_per_table and VERS starts at 0.
pub fn gen_seed_data(s: &mut Schema, rows_per_table: usize, seed: u64) -> SeedData {
    assert!(rows_per_table >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = SeedData::default();
    let order: Vec<String> = emit_order(s);
    for name in order {
        let table = s.table(&name).unwrap().clone();
        let insert_cols: Vec<&ColumnDef> = table.insert_columns().collect();
        let mut used: BTreeMap<String, BTreeSet<Value>> = BTreeMap::new();
        let mut rows = Vec::new();
        let mut seed_rows = Vec::new();
        for i in 0..rows_per_table {
            let id = i as i64 + 1;
            let mut values = BTreeMap::new();
            let mut row = Vec::new();
            for col in &insert_cols {
                let taken = used.entry(col.name.clone()).or_default();
                let v = value_for_column(s, &name, col, taken, &mut rng);
                taken.insert(v.clone());
                row.push(Expr::Literal(v.clone()));
                values.insert(col.name.clone(), v);
            }
            for col in table.user_columns().filter(|c| c.auto_increment) {
                values.insert(col.name.clone(), Value::Int(id));
            }
            rows.push(row);
            seed_rows.push(SeedRow { id, values });
        }
        let keys = s.inserted_keys.entry(name.clone()).or_default();
        for col in table.user_columns().filter(|c| c.is_key()) {
            keys.insert(
                col.name.clone(),
                seed_rows
                    .iter()
                    .map(|r| r.values[&col.name].clone())
                    .collect(),
            );
        }
        let insert = Insert {
            table: name.clone(),
            columns: Some(insert_cols.iter().map(|c| c.name.clone()).collect()),
            rows,
        };
        data.statements.push(Stmt::Insert(insert).to_string());
        data.rows.insert(name, seed_rows);
    }
    data
}

fn emit_order(s: &Schema) -> Vec<String> {
    emit_ddl(s)
        .iter()
        .map(|sql| {
            sql["CREATE TABLE ".len()..]
                .split(' ')
                .next()
                .unwrap()
                .to_string()
        })
        .collect()
}
