//! Tokenizer and recursive-descent parser for the SQL subset.

use thiserror::Error;

use super::ast::*;
use crate::pattern::IsolationLevel;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at position {pos}: {msg}")]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    Sym(&'static str),
}

const SYMBOLS: [&str; 15] = [
    "<>", "!=", "<=", ">=", "(", ")", ",", ";", ".", "*", "=", "<", ">", "+", "-",
];

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((start, Tok::Ident(src[start..i].to_string())));
        } else if c == b'`' {
            i += 1;
            while i < bytes.len() && bytes[i] != b'`' {
                i += 1;
            }
            if i == bytes.len() {
                return Err(ParseError {
                    pos: start,
                    msg: "unterminated quoted identifier".into(),
                });
            }
            out.push((start, Tok::Ident(src[start + 1..i].to_string())));
            i += 1;
        } else if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let n = src[start..i].parse::<i64>().map_err(|_| ParseError {
                pos: start,
                msg: "integer literal out of range".into(),
            })?;
            out.push((start, Tok::Int(n)));
        } else if c == b'\'' {
            let mut s = String::new();
            i += 1;
            loop {
                match bytes.get(i) {
                    None => {
                        return Err(ParseError {
                            pos: start,
                            msg: "unterminated string".into(),
                        })
                    }
                    Some(b'\'') if bytes.get(i + 1) == Some(&b'\'') => {
                        s.push('\'');
                        i += 2;
                    }
                    Some(b'\'') => {
                        i += 1;
                        break;
                    }
                    Some(_) => {
                        let ch = src[i..].chars().next().unwrap();
                        s.push(ch);
                        i += ch.len_utf8();
                    }
                }
            }
            out.push((start, Tok::Str(s)));
        } else if let Some(sym) = SYMBOLS.iter().find(|s| src[i..].starts_with(**s)) {
            i += sym.len();
            out.push((start, Tok::Sym(sym)));
        } else {
            return Err(ParseError {
                pos: start,
                msg: format!(
                    "unexpected character `{}`",
                    src[i..].chars().next().unwrap()
                ),
            });
        }
    }
    Ok(out)
}

const RESERVED: [&str; 24] = [
    "SELECT", "FROM", "WHERE", "AND", "OR", "NOT", "IN", "IS", "NULL", "JOIN", "INNER", "LEFT",
    "RIGHT", "CROSS", "ON", "ORDER", "BY", "LIMIT", "AS", "SET", "VALUES", "TRUE", "FALSE", "DESC",
];

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

type PResult<T> = Result<T, ParseError>;

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn peek_at(&self, n: usize) -> Option<&Tok> {
        self.toks.get(self.pos + n).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(p, _)| *p).unwrap_or(self.end)
    }

    fn err<T>(&self, msg: impl Into<String>) -> PResult<T> {
        Err(ParseError {
            pos: self.offset(),
            msg: msg.into(),
        })
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw))
    }

    fn is_kw_at(&self, n: usize, kw: &str) -> bool {
        matches!(self.peek_at(n), Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> PResult<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.err(format!("expected {kw}"))
        }
    }

    fn is_sym(&self, sym: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(s)) if *s == sym)
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if self.is_sym(sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, sym: &str) -> PResult<()> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            self.err(format!("expected `{sym}`"))
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek() {
            Some(Tok::Ident(s)) if !RESERVED.iter().any(|r| s.eq_ignore_ascii_case(r)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.err("expected identifier"),
        }
    }

    fn statement(&mut self) -> PResult<Stmt> {
        let stmt = if self.eat_kw("CREATE") {
            self.expect_kw("TABLE")?;
            Stmt::CreateTable(self.create_table()?)
        } else if self.eat_kw("INSERT") {
            self.expect_kw("INTO")?;
            Stmt::Insert(self.insert()?)
        } else if self.eat_kw("UPDATE") {
            Stmt::Update(self.update()?)
        } else if self.eat_kw("DELETE") {
            self.expect_kw("FROM")?;
            let table = self.ident()?;
            let filter = self.where_clause()?;
            Stmt::Delete(Delete { table, filter })
        } else if self.is_kw("SELECT") {
            Stmt::Select(self.select()?)
        } else if self.eat_kw("BEGIN") {
            self.eat_kw("WORK");
            Stmt::Begin(BeginKind::Begin)
        } else if self.eat_kw("START") {
            self.expect_kw("TRANSACTION")?;
            if self.eat_kw("WITH") {
                self.expect_kw("CONSISTENT")?;
                self.expect_kw("SNAPSHOT")?;
                Stmt::Begin(BeginKind::ConsistentSnapshot)
            } else {
                Stmt::Begin(BeginKind::StartTransaction)
            }
        } else if self.eat_kw("COMMIT") {
            self.eat_kw("WORK");
            Stmt::Commit
        } else if self.eat_kw("ROLLBACK") {
            self.eat_kw("WORK");
            Stmt::Rollback
        } else if self.eat_kw("SET") {
            self.eat_kw("SESSION");
            self.expect_kw("TRANSACTION")?;
            self.expect_kw("ISOLATION")?;
            self.expect_kw("LEVEL")?;
            let mut words = Vec::new();
            while let Some(Tok::Ident(w)) = self.peek() {
                words.push(w.clone());
                self.pos += 1;
            }
            let level: IsolationLevel = match words.join(" ").parse() {
                Ok(l) => l,
                Err(_) => return self.err("unknown isolation level"),
            };
            Stmt::SetIsolation(level)
        } else {
            return self.err("unsupported statement");
        };
        self.eat_sym(";");
        if self.pos != self.toks.len() {
            return self.err("unexpected trailing input");
        }
        Ok(stmt)
    }

    fn create_table(&mut self) -> PResult<CreateTable> {
        let name = self.ident()?;
        self.expect_sym("(")?;
        let mut columns = Vec::new();
        loop {
            let col_name = self.ident()?;
            let data_type = if self.eat_kw("INT") || self.eat_kw("INTEGER") || self.eat_kw("BIGINT")
            {
                DataType::Int
            } else if self.eat_kw("TEXT") || self.eat_kw("VARCHAR") {
                if self.eat_sym("(") {
                    match self.peek() {
                        Some(Tok::Int(_)) => self.pos += 1,
                        _ => return self.err("expected length"),
                    }
                    self.expect_sym(")")?;
                }
                DataType::Text
            } else if self.eat_kw("BOOLEAN") || self.eat_kw("BOOL") {
                DataType::Boolean
            } else {
                return self.err("expected column type");
            };
            let mut col = ColumnSpec::new(col_name, data_type);
            loop {
                if self.eat_kw("PRIMARY") {
                    self.expect_kw("KEY")?;
                    col.primary_key = true;
                } else if self.eat_kw("NOT") {
                    self.expect_kw("NULL")?;
                    col.not_null = true;
                } else if self.eat_kw("UNIQUE") {
                    col.unique = true;
                } else if self.eat_kw("AUTO_INCREMENT") {
                    col.auto_increment = true;
                } else if self.eat_kw("REFERENCES") {
                    let table = self.ident()?;
                    self.expect_sym("(")?;
                    let column = self.ident()?;
                    self.expect_sym(")")?;
                    col.references = Some(ForeignKey { table, column });
                } else {
                    break;
                }
            }
            columns.push(col);
            if !self.eat_sym(",") {
                break;
            }
        }
        self.expect_sym(")")?;
        Ok(CreateTable { name, columns })
    }

    fn insert(&mut self) -> PResult<Insert> {
        let table = self.ident()?;
        let columns = if self.eat_sym("(") {
            let mut cols = vec![self.ident()?];
            while self.eat_sym(",") {
                cols.push(self.ident()?);
            }
            self.expect_sym(")")?;
            Some(cols)
        } else {
            None
        };
        if !self.eat_kw("VALUES") && !self.eat_kw("VALUE") {
            return self.err("expected VALUES");
        }
        let mut rows = Vec::new();
        loop {
            self.expect_sym("(")?;
            let mut row = vec![self.expr()?];
            while self.eat_sym(",") {
                row.push(self.expr()?);
            }
            self.expect_sym(")")?;
            rows.push(row);
            if !self.eat_sym(",") {
                break;
            }
        }
        Ok(Insert {
            table,
            columns,
            rows,
        })
    }

    fn update(&mut self) -> PResult<Update> {
        let table = self.ident()?;
        self.expect_kw("SET")?;
        let mut assignments = Vec::new();
        loop {
            let column = self.ident()?;
            self.expect_sym("=")?;
            let value = self.expr()?;
            assignments.push(Assignment { column, value });
            if !self.eat_sym(",") {
                break;
            }
        }
        let filter = self.where_clause()?;
        Ok(Update {
            table,
            assignments,
            filter,
        })
    }

    fn where_clause(&mut self) -> PResult<Option<Expr>> {
        if self.eat_kw("WHERE") {
            Ok(Some(self.expr()?))
        } else {
            Ok(None)
        }
    }

    fn select(&mut self) -> PResult<Select> {
        self.expect_kw("SELECT")?;
        let projection = if self.eat_sym("*") {
            Projection::Star
        } else {
            let mut es = vec![self.expr()?];
            while self.eat_sym(",") {
                es.push(self.expr()?);
            }
            Projection::Exprs(es)
        };
        self.expect_kw("FROM")?;
        let from = self.table_ref()?;
        let mut joins = Vec::new();
        loop {
            let kind = if self.is_kw("JOIN") {
                self.pos += 1;
                JoinKind::Inner
            } else if self.is_kw("INNER") && self.is_kw_at(1, "JOIN") {
                self.pos += 2;
                JoinKind::Inner
            } else if (self.is_kw("LEFT") || self.is_kw("RIGHT"))
                && (self.is_kw_at(1, "JOIN") || self.is_kw_at(1, "OUTER"))
            {
                let kind = if self.is_kw("LEFT") {
                    JoinKind::Left
                } else {
                    JoinKind::Right
                };
                self.pos += 1;
                self.eat_kw("OUTER");
                self.expect_kw("JOIN")?;
                kind
            } else if self.is_kw("CROSS") && self.is_kw_at(1, "JOIN") {
                self.pos += 2;
                JoinKind::Cross
            } else {
                break;
            };
            let item = self.table_ref()?;
            let on = if kind != JoinKind::Cross && self.eat_kw("ON") {
                Some(self.expr()?)
            } else {
                None
            };
            joins.push(Join { kind, item, on });
        }
        let filter = self.where_clause()?;
        let mut order_by = Vec::new();
        if self.eat_kw("ORDER") {
            self.expect_kw("BY")?;
            loop {
                let expr = self.expr()?;
                let desc = if self.eat_kw("DESC") {
                    true
                } else {
                    self.eat_kw("ASC");
                    false
                };
                order_by.push(OrderBy { expr, desc });
                if !self.eat_sym(",") {
                    break;
                }
            }
        }
        let limit = if self.eat_kw("LIMIT") {
            match self.peek() {
                Some(Tok::Int(n)) if *n >= 0 => {
                    let n = *n as u64;
                    self.pos += 1;
                    Some(n)
                }
                _ => return self.err("expected LIMIT count"),
            }
        } else {
            None
        };
        Ok(Select {
            projection,
            from,
            joins,
            filter,
            order_by,
            limit,
        })
    }

    fn table_ref(&mut self) -> PResult<FromItem> {
        if self.eat_sym("(") {
            let query = self.select()?;
            self.expect_sym(")")?;
            self.eat_kw("AS");
            let alias = self.ident()?;
            return Ok(FromItem::Subquery {
                query: Box::new(query),
                alias,
            });
        }
        let name = self.ident()?;
        let alias = if self.eat_kw("AS")
            || matches!(self.peek(), Some(Tok::Ident(s)) if !RESERVED.iter().any(|r| s.eq_ignore_ascii_case(r)))
        {
            Some(self.ident()?)
        } else {
            None
        };
        Ok(FromItem::Table { name, alias })
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.and_expr()?;
        while self.eat_kw("OR") {
            let rhs = self.and_expr()?;
            lhs = Expr::binary(BinOp::Or, lhs, rhs);
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> PResult<Expr> {
        let mut lhs = self.not_expr()?;
        while self.eat_kw("AND") {
            let rhs = self.not_expr()?;
            lhs = Expr::binary(BinOp::And, lhs, rhs);
        }
        Ok(lhs)
    }

    fn not_expr(&mut self) -> PResult<Expr> {
        if self.eat_kw("NOT") {
            Ok(Expr::Not(Box::new(self.not_expr()?)))
        } else {
            self.comparison()
        }
    }

    fn comparison(&mut self) -> PResult<Expr> {
        let lhs = self.additive()?;
        let op = match self.peek() {
            Some(Tok::Sym("=")) => Some(BinOp::Eq),
            Some(Tok::Sym("<>")) | Some(Tok::Sym("!=")) => Some(BinOp::Ne),
            Some(Tok::Sym("<")) => Some(BinOp::Lt),
            Some(Tok::Sym("<=")) => Some(BinOp::Le),
            Some(Tok::Sym(">")) => Some(BinOp::Gt),
            Some(Tok::Sym(">=")) => Some(BinOp::Ge),
            _ => None,
        };
        if let Some(op) = op {
            self.pos += 1;
            let rhs = self.additive()?;
            return Ok(Expr::binary(op, lhs, rhs));
        }
        if self.eat_kw("IS") {
            let negated = self.eat_kw("NOT");
            self.expect_kw("NULL")?;
            return Ok(Expr::IsNull {
                expr: Box::new(lhs),
                negated,
            });
        }
        let negated = if self.is_kw("NOT") && self.is_kw_at(1, "IN") {
            self.pos += 1;
            true
        } else {
            false
        };
        if self.eat_kw("IN") {
            self.expect_sym("(")?;
            let e = if self.is_kw("SELECT") {
                let query = self.select()?;
                Expr::InSubquery {
                    expr: Box::new(lhs),
                    query: Box::new(query),
                    negated,
                }
            } else {
                let mut list = vec![self.expr()?];
                while self.eat_sym(",") {
                    list.push(self.expr()?);
                }
                Expr::InList {
                    expr: Box::new(lhs),
                    list,
                    negated,
                }
            };
            self.expect_sym(")")?;
            return Ok(e);
        }
        if negated {
            return self.err("expected IN");
        }
        Ok(lhs)
    }

    fn additive(&mut self) -> PResult<Expr> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = if self.eat_sym("+") {
                BinOp::Add
            } else if self.eat_sym("-") {
                BinOp::Sub
            } else {
                break;
            };
            let rhs = self.multiplicative()?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn multiplicative(&mut self) -> PResult<Expr> {
        let mut lhs = self.unary()?;
        while self.eat_sym("*") {
            let rhs = self.unary()?;
            lhs = Expr::binary(BinOp::Mul, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.eat_sym("-") {
            if let Some(Tok::Int(n)) = self.peek() {
                let n = *n;
                self.pos += 1;
                return Ok(Expr::Literal(Value::Int(-n)));
            }
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_sym("+") {
            return self.unary();
        }
        self.primary()
    }

    fn primary(&mut self) -> PResult<Expr> {
        match self.peek().cloned() {
            Some(Tok::Int(n)) => {
                self.pos += 1;
                Ok(Expr::Literal(Value::Int(n)))
            }
            Some(Tok::Str(s)) => {
                self.pos += 1;
                Ok(Expr::Literal(Value::Text(s)))
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_sym(")")?;
                Ok(e)
            }
            Some(Tok::Ident(s)) => {
                if s.eq_ignore_ascii_case("NULL") {
                    self.pos += 1;
                    return Ok(Expr::Literal(Value::Null));
                }
                if s.eq_ignore_ascii_case("TRUE") {
                    self.pos += 1;
                    return Ok(Expr::Literal(Value::Bool(true)));
                }
                if s.eq_ignore_ascii_case("FALSE") {
                    self.pos += 1;
                    return Ok(Expr::Literal(Value::Bool(false)));
                }
                let first = self.ident()?;
                if self.eat_sym(".") {
                    let name = self.ident()?;
                    Ok(Expr::Column {
                        table: Some(first),
                        name,
                    })
                } else {
                    Ok(Expr::Column {
                        table: None,
                        name: first,
                    })
                }
            }
            _ => self.err("expected expression"),
        }
    }
}

/// Parses one statement; a trailing `;` is accepted.
pub fn parse_statement(sql: &str) -> Result<Stmt, ParseError> {
    let toks = tokenize(sql)?;
    if toks.is_empty() {
        return Err(ParseError {
            pos: 0,
            msg: "empty statement".into(),
        });
    }
    Parser {
        toks,
        pos: 0,
        end: sql.len(),
    }
    .statement()
}

/// Parses a standalone expression.
pub fn parse_expr(sql: &str) -> Result<Expr, ParseError> {
    let toks = tokenize(sql)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end: sql.len(),
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return p.err("unexpected trailing input");
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(sql: &str) {
        let stmt = parse_statement(sql).unwrap_or_else(|e| panic!("{sql}: {e}"));
        assert_eq!(stmt.to_string(), sql);
    }

    #[test]
    fn canonical_round_trips() {
        for sql in [
            "CREATE TABLE t1 (c0 INT)",
            "CREATE TABLE t2 (c0 INT PRIMARY KEY AUTO_INCREMENT, c1 INT)",
            "CREATE TABLE t3 (c0 TEXT NOT NULL, c1 INT UNIQUE REFERENCES t2(c0), c2 BOOLEAN)",
            "INSERT INTO t1(c0) VALUES (1), (2), (3)",
            "INSERT INTO t VALUES (1, 'a''b', TRUE, NULL)",
            "UPDATE t SET c0 = 900 WHERE ID = 1",
            "UPDATE t SET c0 = c0 + 1, c1 = 'x' WHERE c0 < 0 AND NOT c2",
            "DELETE FROM t WHERE ID IN (1, 2)",
            "DELETE FROM t",
            "SELECT * FROM t",
            "SELECT ID, c0 FROM t WHERE c0 >= -5 ORDER BY c0 DESC LIMIT 2",
            "SELECT * FROM t0 LEFT JOIN t1 ON t0.c0 = t1.c1 WHERE t0.ID = 3",
            "SELECT * FROM t0 CROSS JOIN t1",
            "UPDATE t1 SET c0 = 10 WHERE c0 IN (SELECT c1 FROM (SELECT * FROM t2 ORDER BY c0 LIMIT 2) AS t)",
            "SELECT * FROM t WHERE (c0 = 1 OR c0 = 2) AND c1 IS NOT NULL",
            "BEGIN",
            "START TRANSACTION",
            "START TRANSACTION WITH CONSISTENT SNAPSHOT",
            "COMMIT",
            "ROLLBACK",
            "SET SESSION TRANSACTION ISOLATION LEVEL READ COMMITTED",
        ] {
            round_trip(sql);
        }
    }

    #[test]
    fn accepts_reproducer_spellings() {
        let s = parse_statement("UPDATE t1 SET c0 = 10 WHERE c0 in (SELECT c1 FROM (SELECT * FROM t2 ORDER BY c0 LIMIT 2) AS t);");
        assert!(s.is_ok());
        let s = parse_statement("SELECT * FROM tYv10enE WHERE (c0 >= 0)").unwrap();
        assert_eq!(s.to_string(), "SELECT * FROM tYv10enE WHERE c0 >= 0");
        let s = parse_statement("INSERT INTO t2(c1) VALUES(2), (3)").unwrap();
        assert_eq!(s.to_string(), "INSERT INTO t2(c1) VALUES (2), (3)");
        assert_eq!(
            parse_statement("set session transaction isolation level serializable;").unwrap(),
            Stmt::SetIsolation(IsolationLevel::Serializable)
        );
        assert_eq!(
            parse_statement("INSERT INTO t VALUES (-1404643822)")
                .unwrap()
                .to_string(),
            "INSERT INTO t VALUES (-1404643822)"
        );
    }

    #[test]
    fn precedence() {
        let e = parse_expr("a OR b AND c").unwrap();
        assert!(matches!(e, Expr::Binary { op: BinOp::Or, .. }));
        let e = parse_expr("NOT a = 1 AND b").unwrap();
        assert_eq!(e.to_string(), "NOT a = 1 AND b");
        assert!(matches!(e, Expr::Binary { op: BinOp::And, .. }));
        let e = parse_expr("(a + 1) * 2").unwrap();
        assert_eq!(e.to_string(), "(a + 1) * 2");
        let e = parse_expr("a - (b - c)").unwrap();
        assert_eq!(e.to_string(), "a - (b - c)");
    }

    #[test]
    fn errors() {
        for bad in [
            "",
            "SELEC * FROM t",
            "SELECT * FROM",
            "UPDATE t SET",
            "INSERT INTO t VALUES (1",
            "SELECT * FROM t WHERE c0 = 'x",
            "COMMIT COMMIT",
            "SET SESSION TRANSACTION ISOLATION LEVEL SNAPSHOT",
        ] {
            assert!(parse_statement(bad).is_err(), "{bad}");
        }
    }
}
