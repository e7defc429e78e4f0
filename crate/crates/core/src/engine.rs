//! Query-engine adapter: catalog introspection, timed execution and result
//! capture.
//!
//! The desk-scale implementation is an in-process SQLite database populated
//! from a data directory of `<table>.csv` files, each with a `<table>.schema`
//! sidecar. Sidecar lines are `name type [pk] [ref table.column]`; `#` starts
//! a comment.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::resultset::{CellValue, ColumnType, ResultTable, Row};

pub const DEFAULT_MAX_ROWS: usize = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("session is closed")]
    Closed,
    #[error("table not found: {0}")]
    UnknownTable(String),
    #[error("sql error: {0}")]
    Sql(String),
    #[error("result exceeds the materialization cap of {limit} rows")]
    Overflow { limit: usize },
    #[error("data directory {0} does not exist")]
    MissingDataDir(String),
    #[error("missing data file {0}")]
    MissingDataFile(String),
    #[error("failed to register {file}: {reason}")]
    Registration { file: String, reason: String },
    #[error("unsupported connection string {0:?}")]
    UnsupportedConnection(String),
}

impl From<rusqlite::Error> for EngineError {
    fn from(e: rusqlite::Error) -> Self {
        EngineError::Sql(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Embedded,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub ty: ColumnType,
    #[serde(default)]
    pub primary_key: bool,
    /// `(table, column)` this column references.
    #[serde(default)]
    pub references: Option<(String, String)>,
}

impl ColumnSpec {
    pub fn new(name: &str, ty: ColumnType) -> Self {
        ColumnSpec {
            name: name.to_string(),
            ty,
            primary_key: false,
            references: None,
        }
    }

    pub fn pk(mut self) -> Self {
        self.primary_key = true;
        self
    }

    pub fn refs(mut self, table: &str, column: &str) -> Self {
        self.references = Some((table.to_string(), column.to_string()));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnSpec>,
}

impl TableSchema {
    pub fn parse_sidecar(name: &str, text: &str) -> Result<Self, String> {
        let mut columns = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: &str| format!("line {}: {msg}", lineno + 1);
            if parts.len() < 2 {
                return Err(err("expected `name type`"));
            }
            let ty: ColumnType = parts[1].parse().map_err(|e: String| err(&e))?;
            let mut spec = ColumnSpec::new(parts[0], ty);
            let mut rest = parts[2..].iter();
            while let Some(tok) = rest.next() {
                match tok.to_ascii_lowercase().as_str() {
                    "pk" => spec.primary_key = true,
                    "ref" => {
                        let target = rest.next().ok_or_else(|| err("`ref` needs table.column"))?;
                        let (t, c) = target
                            .split_once('.')
                            .ok_or_else(|| err("`ref` target must be table.column"))?;
                        spec.references = Some((t.to_string(), c.to_string()));
                    }
                    other => return Err(err(&format!("unknown annotation {other:?}"))),
                }
            }
            columns.push(spec);
        }
        if columns.is_empty() {
            return Err("schema declares no columns".into());
        }
        Ok(TableSchema {
            name: name.to_string(),
            columns,
        })
    }

    pub fn to_sidecar(&self) -> String {
        let mut out = String::new();
        for c in &self.columns {
            out.push_str(&format!("{} {}", c.name, c.ty));
            if c.primary_key {
                out.push_str(" pk");
            }
            if let Some((t, col)) = &c.references {
                out.push_str(&format!(" ref {t}.{col}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn create_table_sql(&self) -> String {
        let mut lines: Vec<String> = self
            .columns
            .iter()
            .map(|c| {
                let mut l = format!("  {} {}", quote_ident(&c.name), sql_type(c.ty));
                if let Some((t, col)) = &c.references {
                    l.push_str(&format!(" REFERENCES {}({})", quote_ident(t), quote_ident(col)));
                }
                l
            })
            .collect();
        let pk: Vec<String> = self
            .columns
            .iter()
            .filter(|c| c.primary_key)
            .map(|c| quote_ident(&c.name))
            .collect();
        if !pk.is_empty() {
            lines.push(format!("  PRIMARY KEY ({})", pk.join(", ")));
        }
        format!("CREATE TABLE {} (\n{}\n)", quote_ident(&self.name), lines.join(",\n"))
    }
}

fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn sql_type(ty: ColumnType) -> &'static str {
    match ty {
        ColumnType::Integer => "INTEGER",
        ColumnType::Float => "DOUBLE",
        ColumnType::Text => "TEXT",
        ColumnType::Bool => "BOOLEAN",
        ColumnType::Date => "DATE",
        ColumnType::Null => "TEXT",
    }
}

fn type_from_decl(decl: &str) -> Option<ColumnType> {
    let d = decl.to_ascii_uppercase();
    if d.contains("BOOL") {
        Some(ColumnType::Bool)
    } else if d.contains("INT") {
        Some(ColumnType::Integer)
    } else if d.contains("DOUB") || d.contains("REAL") || d.contains("FLOA") || d.contains("DEC") {
        Some(ColumnType::Float)
    } else if d == "DATE" {
        Some(ColumnType::Date)
    } else if d.contains("CHAR") || d.contains("TEXT") || d.contains("CLOB") {
        Some(ColumnType::Text)
    } else {
        None
    }
}

/// Outcome of a timed execution.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub table: ResultTable,
    pub seconds: f64,
    pub bytes_scanned: Option<u64>,
    /// Column-shape warnings raised while capturing the result.
    pub warnings: Vec<String>,
}

pub trait EngineAdapter: Send {
    fn kind(&self) -> EngineKind;
    fn database(&self) -> &str;
    fn is_open(&self) -> bool;
    fn close(&mut self);
    /// Sorted table names.
    fn list_tables(&self) -> Result<Vec<String>, EngineError>;
    fn get_create_table(&self, table: &str) -> Result<String, EngineError>;
    fn sample_rows(&self, table: &str, limit: usize) -> Result<ResultTable, EngineError>;
    fn execute_timed(&self, sql: &str) -> Result<QueryOutcome, EngineError>;
    /// Compiles `sql` without running it.
    fn validate_sql(&self, sql: &str) -> Result<(), EngineError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EngineConfig {
    Embedded {
        data_dir: PathBuf,
        #[serde(default)]
        max_rows: Option<usize>,
    },
    /// An existing database reached by connection string. Only
    /// `sqlite:<path>` is understood by this adapter.
    External {
        connection: String,
        #[serde(default)]
        max_rows: Option<usize>,
    },
}

impl EngineConfig {
    pub fn embedded(data_dir: impl Into<PathBuf>) -> Self {
        EngineConfig::Embedded {
            data_dir: data_dir.into(),
            max_rows: None,
        }
    }
}

pub struct SqliteEngine {
    conn: Option<Connection>,
    kind: EngineKind,
    database: String,
    max_rows: usize,
}

impl fmt::Debug for SqliteEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SqliteEngine")
            .field("kind", &self.kind)
            .field("database", &self.database)
            .field("open", &self.conn.is_some())
            .finish()
    }
}

pub fn open_session(config: &EngineConfig) -> Result<SqliteEngine, EngineError> {
    match config {
        EngineConfig::Embedded { data_dir, max_rows } => {
            let mut engine = SqliteEngine::load_dir(data_dir)?;
            engine.max_rows = max_rows.unwrap_or(DEFAULT_MAX_ROWS);
            Ok(engine)
        }
        EngineConfig::External {
            connection,
            max_rows,
        } => {
            let path = connection
                .strip_prefix("sqlite:")
                .ok_or_else(|| EngineError::UnsupportedConnection(connection.clone()))?;
            let path = path.trim_start_matches("//");
            let conn = Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY)?;
            Ok(SqliteEngine {
                conn: Some(conn),
                kind: EngineKind::External,
                database: path.to_string(),
                max_rows: max_rows.unwrap_or(DEFAULT_MAX_ROWS),
            })
        }
    }
}

fn parse_cell(raw: &str, ty: ColumnType) -> Result<rusqlite::types::Value, String> {
    use rusqlite::types::Value;
    if raw.is_empty() {
        return Ok(Value::Null);
    }
    match ty {
        ColumnType::Integer => raw.trim().parse::<i64>().map(Value::Integer).map_err(|e| e.to_string()),
        ColumnType::Float => raw.trim().parse::<f64>().map(Value::Real).map_err(|e| e.to_string()),
        ColumnType::Bool => match raw.trim().to_ascii_lowercase().as_str() {
            "true" | "1" | "t" => Ok(Value::Integer(1)),
            "false" | "0" | "f" => Ok(Value::Integer(0)),
            other => Err(format!("{other:?} is not a bool")),
        },
        ColumnType::Date => chrono::NaiveDate::parse_from_str(raw.trim(), "%Y-%m-%d")
            .map(|_| Value::Text(raw.trim().to_string()))
            .map_err(|e| format!("{raw:?}: {e}")),
        ColumnType::Text | ColumnType::Null => Ok(Value::Text(raw.to_string())),
    }
}

impl SqliteEngine {
    /// Session over an empty in-memory catalog.
    pub fn in_memory(database: &str) -> Result<Self, EngineError> {
        let conn = Connection::open_in_memory()?;
        // References are documentation for the agent; load order is alphabetical.
        conn.pragma_update(None, "foreign_keys", false)?;
        Ok(SqliteEngine {
            conn: Some(conn),
            kind: EngineKind::Embedded,
            database: database.to_string(),
            max_rows: DEFAULT_MAX_ROWS,
        })
    }

    pub fn with_max_rows(mut self, max_rows: usize) -> Self {
        self.max_rows = max_rows;
        self
    }

    fn conn(&self) -> Result<&Connection, EngineError> {
        self.conn.as_ref().ok_or(EngineError::Closed)
    }

    fn load_dir(dir: &Path) -> Result<Self, EngineError> {
        if !dir.is_dir() {
            return Err(EngineError::MissingDataDir(dir.display().to_string()));
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut engine = SqliteEngine::in_memory(&name)?;
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| EngineError::MissingDataDir(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for path in &entries {
            match path.extension().and_then(|e| e.to_str()) {
                Some("schema") => {
                    let csv_path = path.with_extension("csv");
                    if !csv_path.is_file() {
                        return Err(EngineError::MissingDataFile(csv_path.display().to_string()));
                    }
                    let table = path.file_stem().unwrap().to_string_lossy().into_owned();
                    let text = fs::read_to_string(path).map_err(|e| EngineError::Registration {
                        file: path.display().to_string(),
                        reason: e.to_string(),
                    })?;
                    let schema = TableSchema::parse_sidecar(&table, &text).map_err(|reason| {
                        EngineError::Registration {
                            file: path.display().to_string(),
                            reason,
                        }
                    })?;
                    engine.register_csv(&schema, &csv_path)?;
                }
                Some("csv") if !path.with_extension("schema").is_file() => {
                    return Err(EngineError::Registration {
                        file: path.display().to_string(),
                        reason: "no .schema sidecar".into(),
                    });
                }
                _ => {}
            }
        }
        engine.conn()?.pragma_update(None, "query_only", true)?;
        Ok(engine)
    }

    /// Creates `schema` and bulk-loads rows from a CSV file with a header.
    pub fn register_csv(&mut self, schema: &TableSchema, csv_path: &Path) -> Result<(), EngineError> {
        let file = csv_path.display().to_string();
        let reg = |reason: String| EngineError::Registration {
            file: file.clone(),
            reason,
        };
        let mut reader = csv::Reader::from_path(csv_path).map_err(|e| reg(e.to_string()))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| reg(e.to_string()))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let expected: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
        if header != expected {
            return Err(reg(format!("header {header:?} does not match schema {expected:?}")));
        }
        let conn = self.conn.as_mut().ok_or(EngineError::Closed)?;
        let tx = conn.transaction()?;
        tx.execute_batch(&schema.create_table_sql())?;
        for c in schema.columns.iter().filter(|c| c.references.is_some()) {
            tx.execute_batch(&format!(
                "CREATE INDEX {} ON {} ({})",
                quote_ident(&format!("idx_{}_{}", schema.name, c.name)),
                quote_ident(&schema.name),
                quote_ident(&c.name)
            ))?;
        }
        {
            let placeholders = vec!["?"; schema.columns.len()].join(", ");
            let mut stmt = tx.prepare(&format!(
                "INSERT INTO {} VALUES ({placeholders})",
                quote_ident(&schema.name)
            ))?;
            for (i, record) in reader.records().enumerate() {
                let record = record.map_err(|e| reg(e.to_string()))?;
                if record.len() != schema.columns.len() {
                    return Err(reg(format!(
                        "line {}: {} fields, expected {}",
                        i + 2,
                        record.len(),
                        schema.columns.len()
                    )));
                }
                let values = record
                    .iter()
                    .zip(&schema.columns)
                    .map(|(raw, c)| parse_cell(raw, c.ty))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| reg(format!("line {}: {e}", i + 2)))?;
                stmt.execute(rusqlite::params_from_iter(values))?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    fn table_exists(&self, table: &str) -> Result<bool, EngineError> {
        let n: i64 = self.conn()?.query_row(
            "SELECT COUNT(*) FROM sqlite_master WHERE type = 'table' AND name = ?1",
            [table],
            |r| r.get(0),
        )?;
        Ok(n > 0)
    }

    fn materialize(&self, sql: &str) -> Result<(ResultTable, Vec<String>), EngineError> {
        let conn = self.conn()?;
        let sql = sql.trim().trim_end_matches(';').trim();
        let mut stmt = conn.prepare(sql)?;
        let names: Vec<String> = stmt.column_names().iter().map(|s| s.to_string()).collect();
        let declared: Vec<Option<ColumnType>> = stmt
            .columns()
            .iter()
            .map(|c| c.decl_type().and_then(type_from_decl))
            .collect();
        let width = names.len();
        let mut raw: Vec<Vec<rusqlite::types::Value>> = Vec::new();
        let mut rows = stmt.query([])?;
        while let Some(row) = rows.next()? {
            if raw.len() >= self.max_rows {
                return Err(EngineError::Overflow {
                    limit: self.max_rows,
                });
            }
            let mut cells = Vec::with_capacity(width);
            for i in 0..width {
                cells.push(row.get::<_, rusqlite::types::Value>(i)?);
            }
            raw.push(cells);
        }
        let types: Vec<ColumnType> = (0..width)
            .map(|i| declared[i].unwrap_or_else(|| infer_type(raw.iter().map(|r| &r[i]))))
            .collect();
        let rows: Vec<Row> = raw
            .into_iter()
            .map(|r| r.into_iter().zip(&types).map(|(v, t)| to_cell(v, *t)).collect())
            .collect();
        let labels: Vec<(String, ColumnType)> = names.into_iter().zip(types).collect();
        let (table, warnings) = ResultTable::from_raw_columns(&labels, rows)
            .map_err(|e| EngineError::Sql(format!("result capture: {e}")))?;
        Ok((table, warnings))
    }
}

fn infer_type<'a>(values: impl Iterator<Item = &'a rusqlite::types::Value>) -> ColumnType {
    use rusqlite::types::Value;
    let (mut ints, mut reals, mut texts) = (false, false, false);
    for v in values {
        match v {
            Value::Integer(_) => ints = true,
            Value::Real(_) => reals = true,
            Value::Text(_) | Value::Blob(_) => texts = true,
            Value::Null => {}
        }
    }
    match (ints, reals, texts) {
        (_, _, true) => ColumnType::Text,
        (_, true, false) => ColumnType::Float,
        (true, false, false) => ColumnType::Integer,
        _ => ColumnType::Null,
    }
}

fn to_cell(v: rusqlite::types::Value, ty: ColumnType) -> CellValue {
    use rusqlite::types::Value;
    match (v, ty) {
        (Value::Null, _) => CellValue::Null,
        (Value::Integer(i), ColumnType::Integer) => CellValue::Integer(i),
        (Value::Integer(i), ColumnType::Float) => CellValue::Float(i as f64),
        (Value::Integer(i), ColumnType::Bool) => CellValue::Bool(i != 0),
        (Value::Real(f), ColumnType::Float) => CellValue::Float(f),
        (Value::Real(f), ColumnType::Integer) if f.fract() == 0.0 => CellValue::Integer(f as i64),
        (Value::Text(s), ColumnType::Date) => CellValue::Date(s),
        (Value::Text(s), ColumnType::Text) => CellValue::Text(s),
        // Stored value disagrees with the declared type.
        (Value::Text(s), ColumnType::Integer) => s.parse().map(CellValue::Integer).unwrap_or(CellValue::Null),
        (Value::Text(s), ColumnType::Float) => s.parse().map(CellValue::Float).unwrap_or(CellValue::Null),
        (Value::Real(f), ColumnType::Integer) => CellValue::Integer(f.round() as i64),
        (Value::Real(f), ColumnType::Bool) => CellValue::Bool(f != 0.0),
        (Value::Real(f), _) => CellValue::Text(f.to_string()),
        (Value::Integer(i), _) => CellValue::Text(i.to_string()),
        (Value::Blob(b), _) => CellValue::Text(hex::encode(b)),
        (Value::Text(s), _) => CellValue::Text(s),
    }
}

impl EngineAdapter for SqliteEngine {
    fn kind(&self) -> EngineKind {
        self.kind
    }

    fn database(&self) -> &str {
        &self.database
    }

    fn is_open(&self) -> bool {
        self.conn.is_some()
    }

    fn close(&mut self) {
        self.conn = None;
    }

    fn list_tables(&self) -> Result<Vec<String>, EngineError> {
        let conn = self.conn()?;
        let mut stmt = conn.prepare(
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name",
        )?;
        let names = stmt
            .query_map([], |r| r.get::<_, String>(0))?
            .collect::<Result<Vec<_>, _>>()?;
        Ok(names)
    }

    fn get_create_table(&self, table: &str) -> Result<String, EngineError> {
        let conn = self.conn()?;
        conn.query_row(
            "SELECT sql FROM sqlite_master WHERE type = 'table' AND name = ?1",
            [table],
            |r| r.get::<_, String>(0),
        )
        .map_err(|e| match e {
            rusqlite::Error::QueryReturnedNoRows => EngineError::UnknownTable(table.to_string()),
            other => other.into(),
        })
    }

    fn sample_rows(&self, table: &str, limit: usize) -> Result<ResultTable, EngineError> {
        if !self.table_exists(table)? {
            return Err(EngineError::UnknownTable(table.to_string()));
        }
        let sql = format!("SELECT * FROM {} LIMIT {limit}", quote_ident(table));
        Ok(self.materialize(&sql)?.0)
    }

    fn execute_timed(&self, sql: &str) -> Result<QueryOutcome, EngineError> {
        let started = Instant::now();
        let (table, warnings) = self.materialize(sql)?;
        let seconds = started.elapsed().as_secs_f64().max(1e-9);
        Ok(QueryOutcome {
            table,
            seconds,
            bytes_scanned: None,
            warnings,
        })
    }

    fn validate_sql(&self, sql: &str) -> Result<(), EngineError> {
        let sql = sql.trim().trim_end_matches(';').trim();
        self.conn()?.prepare(sql)?;
        Ok(())
    }
}

/// Loads `data_dir` and writes it to a standalone SQLite file at `out`,
/// which later sessions can open read-only without re-parsing the CSVs.
pub fn build_database_file(data_dir: &Path, out: &Path) -> Result<(), EngineError> {
    let engine = SqliteEngine::load_dir(data_dir)?;
    let conn = engine.conn()?;
    conn.pragma_update(None, "query_only", false)?;
    if out.exists() {
        fs::remove_file(out).map_err(|e| EngineError::Registration {
            file: out.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    conn.execute("VACUUM INTO ?1", [out.to_string_lossy()])?;
    Ok(())
}

/// Runs `sql` `warmups` times untimed, then `runs` times, returning the
/// last result and the median runtime.
pub fn time_median(
    engine: &dyn EngineAdapter,
    sql: &str,
    warmups: usize,
    runs: usize,
) -> Result<(ResultTable, f64), EngineError> {
    for _ in 0..warmups {
        engine.execute_timed(sql)?;
    }
    let mut times = Vec::with_capacity(runs.max(1));
    let mut last = None;
    for _ in 0..runs.max(1) {
        let outcome = engine.execute_timed(sql)?;
        times.push(outcome.seconds);
        last = Some(outcome.table);
    }
    times.sort_by(f64::total_cmp);
    let median = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        (times[times.len() / 2 - 1] + times[times.len() / 2]) / 2.0
    };
    Ok((last.expect("at least one run"), median))
}
