//! Tabular query results and the comparison primitives every accuracy
//! metric is built on.
//!
//! Two comparisons matter:
//!
//! * [`containment_indicator`]: the ground-truth table must be recoverable
//!   from the generated one. Every truth column has to be present and the
//!   generated rows, projected onto those columns, must equal the truth rows
//!   as a multiset. Extra generated columns are tolerated.
//! * [`column_precision`]: the fraction of generated columns that belong to
//!   the truth column set, which is how superfluous projections get
//!   penalized.
//!
//! Column names are matched after [`normalize_column_name`]. Expression
//! columns such as `count(*)` rarely carry the golden alias, so once named
//! columns are paired up, the remaining ones are paired by position whenever
//! either side is an expression.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ResultSetError {
    #[error("invalid column name {0:?}")]
    InvalidName(String),
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("row {row} has {found} cells, expected {expected}")]
    RowArity {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {column:?}: value {value} does not conform to type {ty}")]
    TypeMismatch {
        row: usize,
        column: String,
        ty: ColumnType,
        value: String,
    },
    #[error("column precision is undefined for a table with zero columns")]
    UndefinedPrecision,
    #[error("malformed result table json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Integer,
    Float,
    Text,
    Bool,
    Date,
    Null,
}

impl fmt::Display for ColumnType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ColumnType::Integer => "integer",
            ColumnType::Float => "float",
            ColumnType::Text => "text",
            ColumnType::Bool => "bool",
            ColumnType::Date => "date",
            ColumnType::Null => "null",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ColumnType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "integer" | "int" | "bigint" => Ok(ColumnType::Integer),
            "float" | "double" | "real" | "decimal" => Ok(ColumnType::Float),
            "text" | "string" | "varchar" => Ok(ColumnType::Text),
            "bool" | "boolean" => Ok(ColumnType::Bool),
            "date" => Ok(ColumnType::Date),
            "null" => Ok(ColumnType::Null),
            other => Err(format!("unknown column type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellValue {
    Integer(i64),
    Float(f64),
    Text(String),
    Bool(bool),
    /// ISO-8601 calendar date, `YYYY-MM-DD`.
    Date(String),
    Null,
}

impl CellValue {
    fn conforms_to(&self, ty: ColumnType) -> bool {
        matches!(
            (self, ty),
            (CellValue::Null, _)
                | (CellValue::Integer(_), ColumnType::Integer)
                | (CellValue::Float(_), ColumnType::Float)
                | (CellValue::Text(_), ColumnType::Text)
                | (CellValue::Bool(_), ColumnType::Bool)
                | (CellValue::Date(_), ColumnType::Date)
        )
    }

    fn as_f64(&self) -> Option<f64> {
        match self {
            CellValue::Integer(i) => Some(*i as f64),
            CellValue::Float(f) => Some(*f),
            _ => None,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            CellValue::Null => 0,
            CellValue::Bool(_) => 1,
            CellValue::Integer(_) | CellValue::Float(_) => 2,
            CellValue::Date(_) => 3,
            CellValue::Text(_) => 4,
        }
    }

    /// Value equality used by result diffing: null equals null, numerics
    /// compare under `tol` regardless of integer/float representation, and
    /// text ignores trailing whitespace.
    pub fn matches(&self, other: &CellValue, tol: &Tolerance) -> bool {
        match (self, other) {
            (CellValue::Null, CellValue::Null) => true,
            (CellValue::Integer(a), CellValue::Integer(b)) => a == b,
            (CellValue::Text(a), CellValue::Text(b)) => a.trim_end() == b.trim_end(),
            (CellValue::Bool(a), CellValue::Bool(b)) => a == b,
            (CellValue::Date(a), CellValue::Date(b)) => a == b,
            (a, b) => match (a.as_f64(), b.as_f64()) {
                (Some(x), Some(y)) => tol.close(x, y),
                _ => false,
            },
        }
    }

    /// Total order consistent with [`CellValue::matches`] up to tolerance,
    /// used to canonicalize row multisets before pairwise comparison.
    fn total_cmp(&self, other: &CellValue) -> Ordering {
        match self.rank().cmp(&other.rank()) {
            Ordering::Equal => {}
            o => return o,
        }
        match (self, other) {
            (CellValue::Bool(a), CellValue::Bool(b)) => a.cmp(b),
            (CellValue::Integer(a), CellValue::Integer(b)) => a.cmp(b),
            (CellValue::Date(a), CellValue::Date(b)) => a.cmp(b),
            (CellValue::Text(a), CellValue::Text(b)) => a.trim_end().cmp(b.trim_end()),
            (a, b) => match (a.as_f64(), b.as_f64()) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                _ => Ordering::Equal,
            },
        }
    }

    fn to_json(&self) -> serde_json::Value {
        use serde_json::Value;
        match self {
            CellValue::Integer(i) => Value::from(*i),
            CellValue::Float(f) => serde_json::Number::from_f64(*f)
                .map(Value::Number)
                .unwrap_or(Value::Null),
            CellValue::Text(s) | CellValue::Date(s) => Value::String(s.clone()),
            CellValue::Bool(b) => Value::Bool(*b),
            CellValue::Null => Value::Null,
        }
    }

    fn from_json(value: &serde_json::Value, ty: ColumnType) -> Option<CellValue> {
        use serde_json::Value;
        match (value, ty) {
            (Value::Null, _) => Some(CellValue::Null),
            (Value::Number(n), ColumnType::Integer) => n.as_i64().map(CellValue::Integer),
            (Value::Number(n), ColumnType::Float) => n.as_f64().map(CellValue::Float),
            (Value::String(s), ColumnType::Text) => Some(CellValue::Text(s.clone())),
            (Value::String(s), ColumnType::Date) => Some(CellValue::Date(s.clone())),
            (Value::Bool(b), ColumnType::Bool) => Some(CellValue::Bool(*b)),
            _ => None,
        }
    }
}

impl fmt::Display for CellValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellValue::Integer(i) => write!(f, "{i}"),
            CellValue::Float(x) => write!(f, "{x}"),
            CellValue::Text(s) | CellValue::Date(s) => f.write_str(s),
            CellValue::Bool(b) => write!(f, "{b}"),
            CellValue::Null => f.write_str("NULL"),
        }
    }
}

/// Float tolerance: two numbers match when
/// `|a - b| <= max(absolute, relative * max(|a|, |b|))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub relative: f64,
    pub absolute: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            relative: 1e-6,
            absolute: 1e-9,
        }
    }
}

impl Tolerance {
    pub fn close(&self, a: f64, b: f64) -> bool {
        if a == b {
            return true;
        }
        if a.is_nan() || b.is_nan() {
            return a.is_nan() && b.is_nan();
        }
        let scale = a.abs().max(b.abs());
        (a - b).abs() <= self.absolute.max(self.relative * scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CompareOptions {
    #[serde(default)]
    pub tolerance: Tolerance,
    /// Compare rows in order instead of as a multiset.
    #[serde(default)]
    pub ordered: bool,
}

impl CompareOptions {
    pub fn ordered(mut self, ordered: bool) -> Self {
        self.ordered = ordered;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
}

impl Column {
    pub fn new(name: &str, ty: ColumnType) -> Result<Self, ResultSetError> {
        Ok(Column {
            name: normalize_column_name(name)?,
            ty,
        })
    }

    /// True for columns that carry an engine-derived expression label rather
    /// than an identifier, e.g. `count(*)` or `sum(l_quantity)`.
    pub fn is_expression(&self) -> bool {
        !self
            .name
            .chars()
            .all(|c| c.is_alphanumeric() || c == '_' || c == '#')
    }
}

/// Lower-cases, strips surrounding quotes or backticks and collapses runs of
/// internal whitespace into a single underscore.
pub fn normalize_column_name(raw: &str) -> Result<String, ResultSetError> {
    let mut s = raw.trim();
    loop {
        let stripped = ['`', '"', '\'']
            .iter()
            .find_map(|q| s.strip_prefix(*q).and_then(|t| t.strip_suffix(*q)))
            .or_else(|| s.strip_prefix('[').and_then(|t| t.strip_suffix(']')));
        match stripped {
            Some(inner) => s = inner.trim(),
            None => break,
        }
    }
    if s.is_empty() {
        return Err(ResultSetError::InvalidName(raw.to_string()));
    }
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join("_");
    Ok(collapsed.to_lowercase())
}

pub type Row = Vec<CellValue>;

/// Named, typed columns plus a multiset of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    columns: Vec<Column>,
    rows: Vec<Row>,
}

impl ResultTable {
    pub fn new(columns: Vec<Column>, rows: Vec<Row>) -> Result<Self, ResultSetError> {
        let mut seen = HashSet::new();
        for c in &columns {
            let name = normalize_column_name(&c.name)?;
            if name != c.name {
                return Err(ResultSetError::InvalidName(c.name.clone()));
            }
            if !seen.insert(name) {
                return Err(ResultSetError::DuplicateColumn(c.name.clone()));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(ResultSetError::RowArity {
                    row: i,
                    expected: columns.len(),
                    found: row.len(),
                });
            }
            for (cell, col) in row.iter().zip(&columns) {
                if !cell.conforms_to(col.ty) {
                    return Err(ResultSetError::TypeMismatch {
                        row: i,
                        column: col.name.clone(),
                        ty: col.ty,
                        value: cell.to_string(),
                    });
                }
            }
        }
        Ok(ResultTable { columns, rows })
    }

    /// Builds a table from raw engine labels. Names are normalized; a label
    /// that repeats an earlier one is kept as a distinct, superfluous column
    /// named `<name>#<k>` and reported in the returned warnings.
    pub fn from_raw_columns(
        labels: &[(String, ColumnType)],
        rows: Vec<Row>,
    ) -> Result<(Self, Vec<String>), ResultSetError> {
        let mut warnings = Vec::new();
        let mut seen: HashSet<String> = HashSet::new();
        let mut columns = Vec::with_capacity(labels.len());
        for (label, ty) in labels {
            let base = normalize_column_name(label)?;
            let mut name = base.clone();
            let mut k = 2;
            while seen.contains(&name) {
                name = format!("{base}#{k}");
                k += 1;
            }
            if name != base {
                warnings.push(format!(
                    "duplicate output column {base:?} kept as superfluous column {name:?}"
                ));
            }
            seen.insert(name.clone());
            columns.push(Column { name, ty: *ty });
        }
        Ok((ResultTable::new(columns, rows)?, warnings))
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        let name = normalize_column_name(name).ok()?;
        self.columns.iter().position(|c| c.name == name)
    }

    /// Renders up to `limit` rows as a compact pipe-separated grid.
    pub fn render_grid(&self, limit: usize) -> String {
        let mut out = self
            .columns
            .iter()
            .map(|c| c.name.as_str())
            .collect::<Vec<_>>()
            .join(" | ");
        for row in self.rows.iter().take(limit) {
            out.push('\n');
            out.push_str(
                &row.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" | "),
            );
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("result tables always serialize")
    }

    pub fn from_json_str(s: &str) -> Result<Self, ResultSetError> {
        serde_json::from_str(s).map_err(|e| ResultSetError::Json(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct TableRepr {
    columns: Vec<Column>,
    rows: Vec<Vec<serde_json::Value>>,
}

impl Serialize for ResultTable {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TableRepr {
            columns: self.columns.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(CellValue::to_json).collect())
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ResultTable {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = TableRepr::deserialize(deserializer)?;
        let mut rows = Vec::with_capacity(repr.rows.len());
        for (i, raw) in repr.rows.iter().enumerate() {
            if raw.len() != repr.columns.len() {
                return Err(D::Error::custom(format!(
                    "row {i} has {} cells, expected {}",
                    raw.len(),
                    repr.columns.len()
                )));
            }
            let row = raw
                .iter()
                .zip(&repr.columns)
                .map(|(v, c)| {
                    CellValue::from_json(v, c.ty).ok_or_else(|| {
                        D::Error::custom(format!("row {i}: {v} is not a valid {}", c.ty))
                    })
                })
                .collect::<Result<Row, _>>()?;
            rows.push(row);
        }
        ResultTable::new(repr.columns, rows).map_err(D::Error::custom)
    }
}

/// For each truth column, the index of the generated column it pairs with.
fn column_mapping(truth: &ResultTable, generated: &ResultTable) -> Vec<Option<usize>> {
    let mut mapping: Vec<Option<usize>> = truth
        .columns
        .iter()
        .map(|t| generated.columns.iter().position(|g| g.name == t.name))
        .collect();
    let used: HashSet<usize> = mapping.iter().flatten().copied().collect();
    let free_truth: Vec<usize> = (0..truth.columns.len())
        .filter(|i| mapping[*i].is_none())
        .collect();
    let free_gen: Vec<usize> = (0..generated.columns.len())
        .filter(|j| !used.contains(j))
        .collect();
    for (&ti, &gj) in free_truth.iter().zip(&free_gen) {
        if truth.columns[ti].is_expression() || generated.columns[gj].is_expression() {
            mapping[ti] = Some(gj);
        }
    }
    mapping
}

/// `|S ∩ Ŝ| / |Ŝ|` over the normalized column sets.
pub fn column_precision(
    truth: &ResultTable,
    generated: &ResultTable,
) -> Result<f64, ResultSetError> {
    if generated.columns.is_empty() {
        return Err(ResultSetError::UndefinedPrecision);
    }
    let matched = column_mapping(truth, generated).iter().flatten().count();
    Ok(matched as f64 / generated.columns.len() as f64)
}

fn rows_equal(a: &[CellValue], b: &[CellValue], tol: &Tolerance) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.matches(y, tol))
}

fn row_cmp(a: &[CellValue], b: &[CellValue]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

const GREEDY_MATCH_LIMIT: usize = 5_000;

fn multisets_equal(truth: &[Row], generated: Vec<Row>, opts: &CompareOptions) -> bool {
    if truth.len() != generated.len() {
        return false;
    }
    let tol = &opts.tolerance;
    if opts.ordered {
        return truth
            .iter()
            .zip(&generated)
            .all(|(a, b)| rows_equal(a, b, tol));
    }
    let mut lhs: Vec<&Row> = truth.iter().collect();
    let mut rhs = generated;
    lhs.sort_by(|a, b| row_cmp(a, b));
    rhs.sort_by(|a, b| row_cmp(a, b));
    if lhs.iter().zip(&rhs).all(|(a, b)| rows_equal(a, b, tol)) {
        return true;
    }
    // Values within tolerance of each other can sort into different slots;
    // fall back to greedy pairing for moderately sized results.
    if lhs.len() > GREEDY_MATCH_LIMIT {
        return false;
    }
    let mut taken = vec![false; rhs.len()];
    lhs.iter().all(|row| {
        let hit = rhs
            .iter()
            .enumerate()
            .find(|(j, cand)| !taken[*j] && rows_equal(row, cand, tol))
            .map(|(j, _)| j);
        match hit {
            Some(j) => {
                taken[j] = true;
                true
            }
            None => false,
        }
    })
}

/// 1 when the truth table is contained in the generated output, else 0.
pub fn containment_indicator(
    truth: &ResultTable,
    generated: &ResultTable,
    opts: &CompareOptions,
) -> u8 {
    let mapping = column_mapping(truth, generated);
    let Some(indices) = mapping.into_iter().collect::<Option<Vec<usize>>>() else {
        return 0;
    };
    if truth.rows.len() != generated.rows.len() {
        return 0;
    }
    let projected: Vec<Row> = generated
        .rows
        .iter()
        .map(|r| indices.iter().map(|&j| r[j].clone()).collect())
        .collect();
    multisets_equal(&truth.rows, projected, opts) as u8
}

/// Strict result equality: identical column sets and equal row multisets.
pub fn tables_equal_exact(x: &ResultTable, y: &ResultTable, opts: &CompareOptions) -> bool {
    x.columns.len() == y.columns.len() && containment_indicator(x, y, opts) == 1
}
