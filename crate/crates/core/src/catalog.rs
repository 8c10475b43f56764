//! The built-in pattern catalog and the tab-separated catalog file format.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::pattern::{parse_pattern, AnomalyPattern, IsolationLevel, PatternError};

const BUILTIN: &str = include_str!("catalog.tsv");

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("line {line}: expected `<id>\\t<pattern>\\t<levels>`")]
    Format { line: usize },
    #[error("line {line}: {source}")]
    Pattern { line: usize, source: PatternError },
    #[error("line {line}: unknown isolation level `{level}`")]
    Level { line: usize, level: String },
    #[error("line {line}: pattern `{id}` has an empty disallowed set")]
    EmptyLevels { line: usize, id: String },
    #[error("duplicate pattern id `{0}`")]
    Duplicate(String),
}

/// An ordered, immutable set of patterns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    patterns: Vec<AnomalyPattern>,
}

impl Catalog {
    pub fn new(patterns: Vec<AnomalyPattern>) -> Result<Self, CatalogError> {
        let mut seen = BTreeSet::new();
        for p in &patterns {
            if !seen.insert(p.id.clone()) {
                return Err(CatalogError::Duplicate(p.id.clone()));
            }
        }
        Ok(Catalog { patterns })
    }

    pub fn patterns(&self) -> &[AnomalyPattern] {
        &self.patterns
    }

    pub fn get(&self, id: &str) -> Option<&AnomalyPattern> {
        self.patterns.iter().find(|p| p.id == id)
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn disallowed_at(&self, level: IsolationLevel) -> impl Iterator<Item = &AnomalyPattern> {
        self.patterns.iter().filter(move |p| p.is_violation(level))
    }

    /// Appends patterns from another catalog, rejecting id clashes.
    pub fn extend(&mut self, other: Catalog) -> Result<(), CatalogError> {
        for p in other.patterns {
            if self.get(&p.id).is_some() {
                return Err(CatalogError::Duplicate(p.id));
            }
            self.patterns.push(p);
        }
        Ok(())
    }
}

impl std::ops::Index<&str> for Catalog {
    type Output = AnomalyPattern;

    fn index(&self, id: &str) -> &AnomalyPattern {
        self.get(id)
            .unwrap_or_else(|| panic!("no pattern `{id}` in catalog"))
    }
}

/// Parses the catalog file format: one `<id>\t<pattern>\t<levels|ALL>` per
/// line, `#` comments and blank lines ignored.
pub fn parse_catalog(text: &str) -> Result<Catalog, CatalogError> {
    let mut patterns = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').map(str::trim).collect();
        let [id, body, levels] = fields.as_slice() else {
            return Err(CatalogError::Format { line });
        };
        if id.is_empty() {
            return Err(CatalogError::Format { line });
        }
        let mut pattern =
            parse_pattern(body).map_err(|source| CatalogError::Pattern { line, source })?;
        pattern.id = id.to_string();
        pattern.disallowed = parse_levels(levels, line)?;
        if pattern.disallowed.is_empty() {
            return Err(CatalogError::EmptyLevels {
                line,
                id: pattern.id,
            });
        }
        patterns.push(pattern);
    }
    Catalog::new(patterns)
}

fn parse_levels(field: &str, line: usize) -> Result<BTreeSet<IsolationLevel>, CatalogError> {
    if field.eq_ignore_ascii_case("ALL") {
        return Ok(IsolationLevel::ALL.into_iter().collect());
    }
    field
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| CatalogError::Level {
                line,
                level: s.to_string(),
            })
        })
        .collect()
}

/// Renders a catalog back to the file format.
pub fn format_catalog(catalog: &Catalog) -> String {
    let mut out = String::new();
    for p in catalog.patterns() {
        let levels = if p.disallowed.len() == IsolationLevel::ALL.len() {
            "ALL".to_string()
        } else {
            p.disallowed
                .iter()
                .map(|l| l.short_name())
                .collect::<Vec<_>>()
                .join(",")
        };
        out.push_str(&format!("{}\t{}\t{}\n", p.id, p, levels));
    }
    out
}

/// Loads the 46 built-in patterns. The embedded table is validated on every
/// load; a failure is a defect in the shipped data.
pub fn load_builtin_catalog() -> Catalog {
    let catalog = parse_catalog(BUILTIN).expect("built-in catalog is malformed");
    for p in catalog.patterns() {
        assert_eq!(
            p.txn_count(),
            2,
            "built-in pattern {} must use two transactions",
            p.id
        );
        assert!(
            p.variables().len() <= 2,
            "built-in pattern {} uses too many variables",
            p.id
        );
    }
    catalog
}

pub fn is_violation(p: &AnomalyPattern, level: IsolationLevel) -> bool {
    p.is_violation(level)
}
