//! Per-pixel map-algebra expressions.
//!
//! Grammar:
//! ```text
//! expr  := cmp
//! cmp   := add (("<"|"<="|">"|">="|"=="|"!=") add)?
//! add   := mul (("+"|"-") mul)*
//! mul   := unary (("*"|"/") unary)*
//! unary := "-" unary | atom
//! atom  := NUMBER | IDENT "." "b" INT | IDENT "(" args ")" | "(" expr ")" | "NODATA"
//! ```
//! Results are IEEE doubles; NaN and infinities collapse to NODATA at every node.

mod eval;
mod parse;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::{canonical_digest, Digest};

pub use eval::{eval_chunk, output_cell, Bindings, OUTPUT_NODATA};
pub use parse::parse;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier {name:?} at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("input chunks do not share one geometry")]
    GeometryMismatch,
    #[error("no input bound for {0}")]
    MissingBand(BandRef),
}

/// A band of a declared input, `<alias>.b<band>` (bands start at 1).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BandRef {
    pub alias: String,
    pub band: u32,
}

impl BandRef {
    pub fn new(alias: impl Into<String>, band: u32) -> Self {
        BandRef { alias: alias.into(), band }
    }
}

impl fmt::Display for BandRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.b{}", self.alias, self.band)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
        }
    }

    pub fn is_comparison(self) -> bool {
        !matches!(self, BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Func {
    Min,
    Max,
    Abs,
    Clamp,
    Ifelse,
}

impl Func {
    pub fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "min" => Func::Min,
            "max" => Func::Max,
            "abs" => Func::Abs,
            "clamp" => Func::Clamp,
            "ifelse" => Func::Ifelse,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Abs => "abs",
            Func::Clamp => "clamp",
            Func::Ifelse => "ifelse",
        }
    }

    /// Accepted argument counts as (min, max).
    pub fn arity(self) -> (usize, usize) {
        match self {
            Func::Min | Func::Max => (2, usize::MAX),
            Func::Abs => (1, 1),
            Func::Clamp | Func::Ifelse => (3, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Num(f64),
    Band(BandRef),
    Nodata,
    Neg(Box<Expr>),
    Bin { op: BinOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Call { func: Func, args: Vec<Expr> },
}

impl Expr {
    pub fn bin(op: BinOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Bin { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }
    }

    pub fn band(alias: &str, band: u32) -> Expr {
        Expr::Band(BandRef::new(alias, band))
    }

    pub fn bands(&self) -> BTreeSet<BandRef> {
        let mut out = BTreeSet::new();
        self.collect_bands(&mut out);
        out
    }

    fn collect_bands(&self, out: &mut BTreeSet<BandRef>) {
        match self {
            Expr::Band(b) => {
                out.insert(b.clone());
            }
            Expr::Neg(e) => e.collect_bands(out),
            Expr::Bin { lhs, rhs, .. } => {
                lhs.collect_bands(out);
                rhs.collect_bands(out);
            }
            Expr::Call { args, .. } => args.iter().for_each(|a| a.collect_bands(out)),
            Expr::Num(_) | Expr::Nodata => {}
        }
    }
}

/// Canonical printer: every compound subexpression is parenthesized, so the
/// output re-parses to the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Band(b) => b.fmt(f),
            Expr::Nodata => f.write_str("NODATA"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin { op, lhs, rhs } => write!(f, "({lhs} {} {rhs})", op.symbol()),
            Expr::Call { func, args } => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    a.fmt(f)?;
                }
                f.write_str(")")
            }
        }
    }
}

/// A parsed expression together with its source and AST hash.
#[derive(Debug, Clone, PartialEq)]
pub struct ExprProgram {
    pub source: String,
    pub expr: Expr,
    pub canonical_hash: Digest,
}

impl ExprProgram {
    pub fn from_expr(source: impl Into<String>, expr: Expr) -> Self {
        let canonical_hash = canonical_digest(&expr).expect("AST serializes");
        ExprProgram { source: source.into(), expr, canonical_hash }
    }

    pub fn bands(&self) -> BTreeSet<BandRef> {
        self.expr.bands()
    }

    pub fn aliases(&self) -> BTreeSet<String> {
        self.bands().into_iter().map(|b| b.alias).collect()
    }

    pub fn canonical_text(&self) -> String {
        self.expr.to_string()
    }

    /// Scalar reference evaluation. `None` is NODATA.
    pub fn eval_pixel(&self, bindings: &dyn Bindings) -> Option<f64> {
        eval::eval_pixel(&self.expr, bindings)
    }
}
