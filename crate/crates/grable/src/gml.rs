//! Graded modal logic over grable signatures: abstract syntax, a parser,
//! an evaluator, and the built-in task formulas.
//!
//! Concrete syntax:
//! ```text
//! f ::= P            predicate (identifier)
//!     | !f           negation
//!     | (f & g)      conjunction
//!     | (f | g)      disjunction
//!     | <R>=N f      graded diamond: at least N R-neighbors satisfy f
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constructors::{column_relation, pair_relation, Grable, NodeRecord};
use crate::table::Value;
use crate::tasks::{CountMode, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Formula {
    Atom(String),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Diamond {
        relation: String,
        grade: usize,
        inner: Box<Formula>,
    },
}

impl Formula {
    pub fn atom(name: &str) -> Formula {
        Formula::Atom(name.to_string())
    }

    pub fn not(f: Formula) -> Formula {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Formula {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Formula {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn diamond(relation: &str, grade: usize, inner: Formula) -> Formula {
        Formula::Diamond {
            relation: relation.to_string(),
            grade,
            inner: Box::new(inner),
        }
    }

    /// Nesting depth of graded diamonds.
    pub fn modal_depth(&self) -> usize {
        match self {
            Formula::Atom(_) => 0,
            Formula::Not(f) => f.modal_depth(),
            Formula::And(a, b) | Formula::Or(a, b) => a.modal_depth().max(b.modal_depth()),
            Formula::Diamond { inner, .. } => 1 + inner.modal_depth(),
        }
    }

    /// All subformulas, children before parents, without duplicates.
    pub fn subformulas(&self) -> Vec<&Formula> {
        let mut out: Vec<&Formula> = Vec::new();
        fn walk<'a>(f: &'a Formula, out: &mut Vec<&'a Formula>) {
            match f {
                Formula::Atom(_) => {}
                Formula::Not(g) => walk(g, out),
                Formula::And(a, b) | Formula::Or(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                Formula::Diamond { inner, .. } => walk(inner, out),
            }
            if !out.iter().any(|h| *h == f) {
                out.push(f);
            }
        }
        walk(self, &mut out);
        out
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Atom(p) => write!(f, "{p}"),
            Formula::Not(g) => write!(f, "!{g}"),
            Formula::And(a, b) => write!(f, "({a} & {b})"),
            Formula::Or(a, b) => write!(f, "({a} | {b})"),
            Formula::Diamond { relation, grade, inner } => {
                write!(f, "<{relation}>={grade} {inner}")
            }
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GmlError {
    #[error("parse error at byte {at}: {message}")]
    Parse { at: usize, message: String },
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, GmlError> {
        Err(GmlError::Parse { at: self.pos, message: message.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), GmlError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected `{}`", c as char))
        }
    }

    fn ident(&mut self) -> Result<String, GmlError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
        {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected an identifier");
        }
        if self.bytes[start].is_ascii_digit() {
            self.pos = start;
            return self.err("identifiers may not start with a digit");
        }
        Ok(std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii slice")
            .to_string())
    }

    fn number(&mut self) -> Result<usize, GmlError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return self.err("expected a grade");
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits");
        let n: usize = text
            .parse()
            .map_err(|_| GmlError::Parse { at: start, message: "grade out of range".into() })?;
        if n == 0 {
            self.pos = start;
            return self.err("grade must be at least 1");
        }
        Ok(n)
    }

    fn formula(&mut self) -> Result<Formula, GmlError> {
        self.skip_ws();
        match self.peek() {
            Some(b'!') => {
                self.pos += 1;
                Ok(Formula::not(self.formula()?))
            }
            Some(b'(') => {
                self.pos += 1;
                let lhs = self.formula()?;
                self.skip_ws();
                let op = match self.peek() {
                    Some(b'&') => '&',
                    Some(b'|') => '|',
                    _ => return self.err("expected `&` or `|`"),
                };
                self.pos += 1;
                let rhs = self.formula()?;
                self.skip_ws();
                self.expect(b')')?;
                Ok(if op == '&' {
                    Formula::and(lhs, rhs)
                } else {
                    Formula::or(lhs, rhs)
                })
            }
            Some(b'<') => {
                self.pos += 1;
                let relation = self.ident()?;
                self.expect(b'>')?;
                self.expect(b'=')?;
                let grade = self.number()?;
                let inner = self.formula()?;
                Ok(Formula::Diamond { relation, grade, inner: Box::new(inner) })
            }
            Some(_) => Ok(Formula::Atom(self.ident()?)),
            None => self.err("unexpected end of input"),
        }
    }
}

pub fn parse(text: &str) -> Result<Formula, GmlError> {
    let mut p = Parser { bytes: text.as_bytes(), pos: 0 };
    let f = p.formula()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return p.err("trailing input");
    }
    Ok(f)
}

/// An atomic predicate over node records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    /// True on nodes of the given type tag.
    NodeType(String),
    /// True on nodes whose local schema has `column` and whose value there
    /// equals `value` (missing matches nothing; absent column is false).
    FeatureEq { column: String, value: Value },
}

impl Predicate {
    pub fn holds(&self, node: &NodeRecord) -> bool {
        match self {
            Predicate::NodeType(t) => node.node_type == *t,
            Predicate::FeatureEq { column, value } => node
                .local_schema
                .index_of(column)
                .map(|i| node.features.values()[i].same(value))
                .unwrap_or(false),
        }
    }
}

/// Named predicates available to a formula.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredicateSet {
    map: BTreeMap<String, Predicate>,
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_ascii_uppercase().to_string() + chars.as_str(),
        None => String::new(),
    }
}

impl PredicateSet {
    /// Type indicators for the standard node types: `Row`, `Val`, `Pair`,
    /// `Cell`, `Token`.
    pub fn standard() -> Self {
        let mut set = PredicateSet::default();
        for t in ["row", "val", "pair", "cell", "token"] {
            set.map.insert(capitalize(t), Predicate::NodeType(t.to_string()));
        }
        set
    }

    pub fn insert(&mut self, name: &str, predicate: Predicate) {
        self.map.insert(name.to_string(), predicate);
    }

    pub fn with_feature_eq(mut self, name: &str, column: &str, value: Value) -> Self {
        self.insert(name, Predicate::FeatureEq { column: column.to_string(), value });
        self
    }

    pub fn names(&self) -> Vec<&String> {
        self.map.keys().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Predicate> {
        self.map.get(name)
    }

    pub fn holds(&self, name: &str, node: &NodeRecord) -> Result<bool, GmlError> {
        self.map
            .get(name)
            .map(|p| p.holds(node))
            .ok_or_else(|| GmlError::UnknownPredicate(name.to_string()))
    }
}

/// Evaluate a formula on every node, bottom-up. A diamond over a relation
/// the grable does not have is an error; grables with zero relations of that
/// name and zero edges are distinct cases on purpose.
pub fn eval(formula: &Formula, grable: &Grable, predicates: &PredicateSet) -> Result<Vec<bool>, GmlError> {
    let adjacency = grable.adjacency();
    eval_with(formula, grable, predicates, &adjacency)
}

fn eval_with(
    formula: &Formula,
    grable: &Grable,
    predicates: &PredicateSet,
    adjacency: &BTreeMap<String, Vec<Vec<usize>>>,
) -> Result<Vec<bool>, GmlError> {
    match formula {
        Formula::Atom(name) => grable
            .nodes
            .iter()
            .map(|n| predicates.holds(name, n))
            .collect(),
        Formula::Not(inner) => Ok(eval_with(inner, grable, predicates, adjacency)?
            .into_iter()
            .map(|b| !b)
            .collect()),
        Formula::And(a, b) => {
            let va = eval_with(a, grable, predicates, adjacency)?;
            let vb = eval_with(b, grable, predicates, adjacency)?;
            Ok(va.into_iter().zip(vb).map(|(x, y)| x && y).collect())
        }
        Formula::Or(a, b) => {
            let va = eval_with(a, grable, predicates, adjacency)?;
            let vb = eval_with(b, grable, predicates, adjacency)?;
            Ok(va.into_iter().zip(vb).map(|(x, y)| x || y).collect())
        }
        Formula::Diamond { relation, grade, inner } => {
            let lists = adjacency
                .get(relation)
                .ok_or_else(|| GmlError::UnknownRelation(relation.clone()))?;
            let vi = eval_with(inner, grable, predicates, adjacency)?;
            Ok(lists
                .iter()
                .map(|neighbors| neighbors.iter().filter(|&&u| vi[u]).count() >= *grade)
                .collect())
        }
    }
}

/// Restriction of a node-indexed vector to row nodes, in row order.
pub fn row_restriction<T: Copy>(grable: &Grable, bits: &[T]) -> Vec<T> {
    grable.row_map.iter().map(|&v| bits[v]).collect()
}

/// The built-in formula for a task, together with the predicates it needs,
/// phrased against the (extended) incidence grable of the task's table.
pub fn builtin(task: &TaskKind) -> (Formula, PredicateSet) {
    let predicates = PredicateSet::standard();
    match task {
        TaskKind::Unique { column } => {
            let rel = column_relation(column);
            // unique: my value node has no second row
            let f = Formula::diamond(
                &rel,
                1,
                Formula::and(
                    Formula::atom("Val"),
                    Formula::not(Formula::diamond(&rel, 2, Formula::atom("Row"))),
                ),
            );
            (f, predicates)
        }
        TaskKind::Count { column, k, mode } => {
            let rel = column_relation(column);
            let gt = |threshold: usize| {
                Formula::diamond(
                    &rel,
                    1,
                    Formula::and(
                        Formula::atom("Val"),
                        Formula::diamond(&rel, threshold + 1, Formula::atom("Row")),
                    ),
                )
            };
            let f = match mode {
                CountMode::Gt => gt(*k),
                // count == k: more than k-1 and not more than k
                CountMode::Eq => Formula::and(gt(*k - 1), Formula::not(gt(*k))),
            };
            (f, predicates)
        }
        TaskKind::Double { c1, c2, anchor } => {
            let predicates = predicates.with_feature_eq("Anchor", c2, anchor.clone());
            let r1 = column_relation(c1);
            let r2 = column_relation(c2);
            // an anchor row that provably sits in the grable with its c2 value
            let anchor_row = Formula::and(
                Formula::atom("Row"),
                Formula::and(
                    Formula::atom("Anchor"),
                    Formula::diamond(&r2, 1, Formula::atom("Val")),
                ),
            );
            let share_with = |grade: usize| {
                Formula::diamond(
                    &r1,
                    1,
                    Formula::and(Formula::atom("Val"), Formula::diamond(&r1, grade, anchor_row.clone())),
                )
            };
            // a row that is itself an anchor needs a second anchor in its group
            let f = Formula::or(
                Formula::and(Formula::not(Formula::atom("Anchor")), share_with(1)),
                Formula::and(Formula::atom("Anchor"), share_with(2)),
            );
            (f, predicates)
        }
        TaskKind::Diamond { c1, c2 } => {
            let rel = pair_relation(c1, c2);
            let f = Formula::diamond(
                &rel,
                1,
                Formula::and(
                    Formula::atom("Pair"),
                    Formula::diamond(&rel, 2, Formula::atom("Row")),
                ),
            );
            (f, predicates)
        }
    }
}
