//! The four extension-sensitive labeling functions and their flip witnesses.
//!
//! Labelers are pure functions of the table multiset; a missing value in a
//! task column is an error rather than a silent skip.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{Row, Schema, Table, Value};

/// Per-row binary targets aligned with table row indices.
pub type LabelVector = Vec<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// Value frequency strictly greater than `k`.
    Gt,
    /// Value frequency exactly `k`.
    Eq,
}

/// One of the four labeling tasks, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskKind {
    Unique {
        column: String,
    },
    Count {
        column: String,
        k: usize,
        mode: CountMode,
    },
    Double {
        c1: String,
        c2: String,
        anchor: Value,
    },
    Diamond {
        c1: String,
        c2: String,
    },
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{column}` has a missing value at row {row}")]
    MissingValue { column: String, row: usize },
    #[error("count threshold k must be >= 1")]
    BadThreshold,
    #[error("task columns must differ (both are `{0}`)")]
    SameColumn(String),
}

fn column_no_missing<'a>(table: &'a Table, column: &str) -> Result<Vec<&'a Value>, TaskError> {
    let values = table
        .column(column)
        .map_err(|_| TaskError::UnknownColumn(column.to_string()))?;
    for (row, v) in values.iter().enumerate() {
        if v.is_missing() {
            return Err(TaskError::MissingValue {
                column: column.to_string(),
                row,
            });
        }
    }
    Ok(values)
}

fn frequencies<'a>(values: &[&'a Value]) -> HashMap<&'a Value, usize> {
    let mut freq: HashMap<&Value, usize> = HashMap::new();
    for v in values {
        *freq.entry(v).or_insert(0) += 1;
    }
    freq
}

/// `y_i = 1` iff the value of `column` in row `i` occurs exactly once.
pub fn label_unique(table: &Table, column: &str) -> Result<LabelVector, TaskError> {
    let values = column_no_missing(table, column)?;
    let freq = frequencies(&values);
    Ok(values.iter().map(|v| u8::from(freq[v] == 1)).collect())
}

/// `y_i` from the full-table frequency of the row's value (the row itself
/// counts): `gt` means frequency > k, `eq` means frequency == k.
pub fn label_count(
    table: &Table,
    column: &str,
    k: usize,
    mode: CountMode,
) -> Result<LabelVector, TaskError> {
    if k == 0 {
        return Err(TaskError::BadThreshold);
    }
    let values = column_no_missing(table, column)?;
    let freq = frequencies(&values);
    Ok(values
        .iter()
        .map(|v| {
            let f = freq[v];
            u8::from(match mode {
                CountMode::Gt => f > k,
                CountMode::Eq => f == k,
            })
        })
        .collect())
}

/// Double condition: another row shares the `c1` value and carries the
/// anchor in `c2`. Rows that are themselves anchor rows need a second
/// anchor witness.
pub fn label_double(
    table: &Table,
    c1: &str,
    c2: &str,
    anchor: &Value,
) -> Result<LabelVector, TaskError> {
    if c1 == c2 {
        return Err(TaskError::SameColumn(c1.to_string()));
    }
    let v1 = column_no_missing(table, c1)?;
    let v2 = column_no_missing(table, c2)?;
    // anchor-row count per c1 value
    let mut anchor_count: HashMap<&Value, usize> = HashMap::new();
    for (a, b) in v1.iter().zip(v2.iter()) {
        if b.same(anchor) {
            *anchor_count.entry(a).or_insert(0) += 1;
        }
    }
    Ok(v1
        .iter()
        .zip(v2.iter())
        .map(|(a, b)| {
            let m = anchor_count.get(a).copied().unwrap_or(0);
            let need = if b.same(anchor) { 2 } else { 1 };
            u8::from(m >= need)
        })
        .collect())
}

/// `y_i = 1` iff the `(c1, c2)` pair of row `i` occurs in at least two rows.
pub fn label_diamond(table: &Table, c1: &str, c2: &str) -> Result<LabelVector, TaskError> {
    if c1 == c2 {
        return Err(TaskError::SameColumn(c1.to_string()));
    }
    let v1 = column_no_missing(table, c1)?;
    let v2 = column_no_missing(table, c2)?;
    let mut freq: HashMap<(&Value, &Value), usize> = HashMap::new();
    for pair in v1.iter().zip(v2.iter()) {
        *freq.entry((pair.0, pair.1)).or_insert(0) += 1;
    }
    Ok(v1
        .iter()
        .zip(v2.iter())
        .map(|(a, b)| u8::from(freq[&(*a, *b)] >= 2))
        .collect())
}

/// Dispatch on [`TaskKind`].
pub fn label(table: &Table, task: &TaskKind) -> Result<LabelVector, TaskError> {
    match task {
        TaskKind::Unique { column } => label_unique(table, column),
        TaskKind::Count { column, k, mode } => label_count(table, column, *k, *mode),
        TaskKind::Double { c1, c2, anchor } => label_double(table, c1, c2, anchor),
        TaskKind::Diamond { c1, c2 } => label_diamond(table, c1, c2),
    }
}

fn text(s: &str) -> Value {
    Value::Text(s.to_string())
}

/// A pair of tables `T ⊆ T′` with a designated row whose label flips
/// between them, certifying that the task is not row-local.
pub struct FlipWitness {
    pub small: Table,
    pub large: Table,
    /// Row index of the designated row (same in both tables).
    pub row: usize,
}

/// Build the extension flip witness for a task: the large table extends the
/// small one, yet the designated row's label changes.
pub fn extension_flip_witness(task: &TaskKind) -> FlipWitness {
    match task {
        TaskKind::Unique { .. } => {
            let schema = Schema::new(["c", "d"]).unwrap();
            let r = Row::new(vec![text("v"), text("p")]);
            let s = Row::new(vec![text("v"), text("q")]);
            FlipWitness {
                small: Table::new(schema.clone(), vec![r.clone()]).unwrap(),
                large: Table::new(schema, vec![r, s]).unwrap(),
                row: 0,
            }
        }
        TaskKind::Count { k, .. } => {
            // frequency 1 -> fails both gt and (for k >= 2) eq; adding k
            // sharing rows brings the frequency to k+1 > k, and for eq we
            // add k-1 rows to land exactly on k.
            let schema = Schema::new(["c", "d"]).unwrap();
            let r = Row::new(vec![text("v"), text("p0")]);
            let extra = match task {
                TaskKind::Count { mode: CountMode::Gt, .. } => *k,
                _ => k.saturating_sub(1).max(1),
            };
            let mut rows = vec![r.clone()];
            rows.extend(
                (0..extra).map(|i| Row::new(vec![text("v"), text(&format!("q{i}"))])),
            );
            FlipWitness {
                small: Table::new(schema.clone(), vec![r]).unwrap(),
                large: Table::new(schema, rows).unwrap(),
                row: 0,
            }
        }
        TaskKind::Double { anchor, .. } => {
            let schema = Schema::new(["c1", "c2"]).unwrap();
            let r = Row::new(vec![text("v"), text("not-anchor")]);
            let s = Row::new(vec![text("v"), anchor.clone()]);
            FlipWitness {
                small: Table::new(schema.clone(), vec![r.clone()]).unwrap(),
                large: Table::new(schema, vec![r, s]).unwrap(),
                row: 0,
            }
        }
        TaskKind::Diamond { .. } => {
            let schema = Schema::new(["c1", "c2"]).unwrap();
            let r = Row::new(vec![text("a"), text("b")]);
            let s = r.clone();
            FlipWitness {
                small: Table::new(schema.clone(), vec![r]).unwrap(),
                large: Table::new(schema, vec![s.clone(), s]).unwrap(),
                row: 0,
            }
        }
    }
}

/// Rebase a task's columns onto the generic flip-witness schema, keeping
/// the other parameters. Used by the flip-witness acceptance check.
pub fn witness_task(task: &TaskKind) -> TaskKind {
    match task {
        TaskKind::Unique { .. } => TaskKind::Unique { column: "c".into() },
        TaskKind::Count { k, mode, .. } => TaskKind::Count {
            column: "c".into(),
            k: *k,
            mode: *mode,
        },
        TaskKind::Double { anchor, .. } => TaskKind::Double {
            c1: "c1".into(),
            c2: "c2".into(),
            anchor: anchor.clone(),
        },
        TaskKind::Diamond { .. } => TaskKind::Diamond {
            c1: "c1".into(),
            c2: "c2".into(),
        },
    }
}
