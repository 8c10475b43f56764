//! The SQL subset shared by the generators, the reference engine and the
//! reproducer file format.

mod ast;
mod parser;

pub use ast::*;
pub use parser::{parse_expr, parse_statement, ParseError};
