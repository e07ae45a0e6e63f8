//! Schemas, rows, tables, CSV ingestion and split utilities.
//!
//! Tables are immutable after construction and safe to share across threads;
//! every operation here is a pure function.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tagged scalar value. Reals compare bitwise for the purposes of
/// value-node identity; `Missing` produces no value node and never
/// participates in label frequencies.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum Value {
    Text(String),
    Integer(i64),
    Real(f64),
    /// Seconds since epoch.
    Timestamp(i64),
    Missing,
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Integer(a), Value::Integer(b)) => a == b,
            (Value::Real(a), Value::Real(b)) => a.to_bits() == b.to_bits(),
            (Value::Timestamp(a), Value::Timestamp(b)) => a == b,
            (Value::Missing, Value::Missing) => true,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            Value::Text(s) => {
                0u8.hash(state);
                s.hash(state);
            }
            Value::Integer(i) => {
                1u8.hash(state);
                i.hash(state);
            }
            Value::Real(r) => {
                2u8.hash(state);
                r.to_bits().hash(state);
            }
            Value::Timestamp(t) => {
                3u8.hash(state);
                t.hash(state);
            }
            Value::Missing => 4u8.hash(state),
        }
    }
}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        fn rank(v: &Value) -> u8 {
            match v {
                Value::Text(_) => 0,
                Value::Integer(_) => 1,
                Value::Real(_) => 2,
                Value::Timestamp(_) => 3,
                Value::Missing => 4,
            }
        }
        match (self, other) {
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Integer(a), Value::Integer(b)) => a.cmp(b),
            (Value::Real(a), Value::Real(b)) => a.to_bits().cmp(&b.to_bits()),
            (Value::Timestamp(a), Value::Timestamp(b)) => a.cmp(b),
            _ => rank(self).cmp(&rank(other)),
        }
    }
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    /// Value equality as used by labelers and constructors: `Missing`
    /// matches nothing, not even itself.
    pub fn same(&self, other: &Value) -> bool {
        !self.is_missing() && !other.is_missing() && self == other
    }

    pub fn as_timestamp(&self) -> Option<i64> {
        match self {
            Value::Timestamp(t) => Some(*t),
            _ => None,
        }
    }

    pub fn as_numeric(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            Value::Timestamp(t) => Some(*t as f64),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => write!(f, "{s}"),
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Timestamp(t) => write!(f, "{t}"),
            Value::Missing => Ok(()),
        }
    }
}

/// The declared kind of a column, used by CSV parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Text,
    Integer,
    Real,
    Timestamp,
}

/// Ordered sequence of distinct column names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    columns: Vec<String>,
}

impl Schema {
    pub fn new<I, S>(columns: I) -> Result<Self, TableError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let columns: Vec<String> = columns.into_iter().map(Into::into).collect();
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].contains(c) {
                return Err(TableError::DuplicateColumn(c.clone()));
            }
        }
        Ok(Schema { columns })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }

    pub fn contains(&self, column: &str) -> bool {
        self.index_of(column).is_some()
    }
}

/// A row: one value per schema column, in schema order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Row {
    values: Vec<Value>,
}

impl Row {
    pub fn new(values: Vec<Value>) -> Self {
        Row { values }
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn get<'a>(&'a self, schema: &Schema, column: &str) -> Option<&'a Value> {
        schema.index_of(column).map(|i| &self.values[i])
    }
}

/// A schema plus a sequence of rows. Duplicate rows are allowed: the
/// labeling tasks and the separation witnesses rely on controlling
/// multiplicities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    schema: Schema,
    rows: Vec<Row>,
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("duplicate column name `{0}` in header")]
    DuplicateColumn(String),
    #[error("line {line}: expected {expected} cells, found {found}")]
    ArityMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse `{cell}` as {kind:?} in column `{column}`")]
    BadCell {
        line: usize,
        column: String,
        cell: String,
        kind: ValueKind,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty input: missing header line")]
    MissingHeader,
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{column}` has a missing value at row {row}")]
    MissingValue { column: String, row: usize },
    #[error("split fractions must be positive and sum to 1 (got {0:?})")]
    BadFractions((f64, f64, f64)),
    #[error("row arity {found} does not match schema arity {expected}")]
    RowArity { expected: usize, found: usize },
}

impl Table {
    pub fn new(schema: Schema, rows: Vec<Row>) -> Result<Self, TableError> {
        for row in &rows {
            if row.values.len() != schema.len() {
                return Err(TableError::RowArity {
                    expected: schema.len(),
                    found: row.values.len(),
                });
            }
        }
        Ok(Table { schema, rows })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn value(&self, row: usize, column: &str) -> Result<&Value, TableError> {
        let i = self
            .schema
            .index_of(column)
            .ok_or_else(|| TableError::UnknownColumn(column.to_string()))?;
        Ok(&self.rows[row].values()[i])
    }

    /// Column values in row order. Errors if the column is unknown.
    pub fn column(&self, column: &str) -> Result<Vec<&Value>, TableError> {
        let i = self
            .schema
            .index_of(column)
            .ok_or_else(|| TableError::UnknownColumn(column.to_string()))?;
        Ok(self.rows.iter().map(|r| &r.values()[i]).collect())
    }

    /// Serialize back to CSV with the same quoting convention `parse_table`
    /// accepts; round-trips for all well-formed tables.
    pub fn to_csv(&self) -> String {
        let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
        wtr.write_record(self.schema.columns()).expect("in-memory write");
        for row in &self.rows {
            let record: Vec<String> = row.values().iter().map(|v| v.to_string()).collect();
            wtr.write_record(&record).expect("in-memory write");
        }
        String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8")
    }
}

fn parse_cell(cell: &str, kind: ValueKind, line: usize, column: &str) -> Result<Value, TableError> {
    if cell.is_empty() {
        return Ok(Value::Missing);
    }
    let bad = || TableError::BadCell {
        line,
        column: column.to_string(),
        cell: cell.to_string(),
        kind,
    };
    match kind {
        ValueKind::Text => Ok(Value::Text(cell.to_string())),
        ValueKind::Integer => cell.parse().map(Value::Integer).map_err(|_| bad()),
        ValueKind::Real => cell.parse().map(Value::Real).map_err(|_| bad()),
        ValueKind::Timestamp => cell.parse().map(Value::Timestamp).map_err(|_| bad()),
    }
}

/// Parse comma-delimited CSV text (header row required, RFC-style double
/// quoting). Columns default to `Text` unless `type_hints` says otherwise;
/// empty cells become `Missing`.
pub fn parse_table(
    csv_text: &str,
    type_hints: &BTreeMap<String, ValueKind>,
) -> Result<Table, TableError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(csv_text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()
        .map_err(TableError::Csv)?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(TableError::MissingHeader);
    }
    let schema = Schema::new(headers.clone())?;
    let kinds: Vec<ValueKind> = headers
        .iter()
        .map(|h| type_hints.get(h).copied().unwrap_or(ValueKind::Text))
        .collect();

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(TableError::Csv)?;
        let line = i + 2; // 1-based, after the header
        if record.len() != schema.len() {
            return Err(TableError::ArityMismatch {
                line,
                expected: schema.len(),
                found: record.len(),
            });
        }
        let values = record
            .iter()
            .zip(kinds.iter())
            .zip(headers.iter())
            .map(|((cell, kind), column)| parse_cell(cell, *kind, line, column))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(Row::new(values));
    }
    Table::new(schema, rows)
}

fn check_fractions(fractions: (f64, f64, f64)) -> Result<(), TableError> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(TableError::BadFractions(fractions));
    }
    Ok(())
}

fn partition_by_fractions(
    table: &Table,
    order: Vec<usize>,
    fractions: (f64, f64, f64),
) -> (Table, Table, Table) {
    let n = order.len();
    let n_train = (n as f64 * fractions.0).round() as usize;
    let n_val = (n as f64 * fractions.1).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let take = |idx: &[usize]| {
        Table::new(
            table.schema().clone(),
            idx.iter().map(|&i| table.rows()[i].clone()).collect(),
        )
        .expect("rows share the schema")
    };
    (
        take(&order[..n_train]),
        take(&order[n_train..n_train + n_val]),
        take(&order[n_train + n_val..]),
    )
}

/// Sort rows ascending by `time_column` (ties broken by original row index)
/// and cut into train/validation/test by the given fractions. Every train
/// timestamp is then at most every validation timestamp, and so on.
pub fn split_temporal(
    table: &Table,
    time_column: &str,
    fractions: (f64, f64, f64),
) -> Result<(Table, Table, Table), TableError> {
    check_fractions(fractions)?;
    let col = table.column(time_column)?;
    let mut keyed: Vec<(i64, usize)> = Vec::with_capacity(col.len());
    for (i, v) in col.iter().enumerate() {
        let t = v.as_timestamp().ok_or(TableError::MissingValue {
            column: time_column.to_string(),
            row: i,
        })?;
        keyed.push((t, i));
    }
    keyed.sort(); // (time, original index): stable tie-break by construction
    let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    Ok(partition_by_fractions(table, order, fractions))
}

/// Seeded shuffle followed by a fraction cut. Deterministic per seed.
pub fn split_random(
    table: &Table,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Table, Table, Table), TableError> {
    check_fractions(fractions)?;
    let mut order: Vec<usize> = (0..table.n_rows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(partition_by_fractions(table, order, fractions))
}
