//! Read-only SQL execution against catalog databases, result comparison
//! (the execution-accuracy check), and prompt serialization of results.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatabaseCatalog;

/// Hard row ceiling for scoring executions. Exceeding it is reported as a timeout.
pub const SCORING_ROW_CEILING: usize = 1_000_000;

/// How often (in VM instructions) the engine checks the wall-clock deadline.
const PROGRESS_INTERVAL: i32 = 1_000;

#[derive(Debug, Error)]
pub enum SqlError {
    #[error("unknown database id `{0}`")]
    UnknownDatabase(String),
    #[error("timeout must be positive")]
    ZeroTimeout,
    #[error("cannot open database `{db_id}`: {source}")]
    Open {
        db_id: String,
        #[source]
        source: rusqlite::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompareError {
    #[error("refusing to compare a truncated result set; scoring executions must not truncate")]
    TruncatedResult,
}

/// A single cell value. Reals compare by bit pattern, so `Cell` is `Eq + Hash + Ord`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    Null,
    Integer(i64),
    Real(#[serde(with = "real_repr")] f64),
    Text(String),
    Blob(#[serde(with = "hex_repr")] Vec<u8>),
}

impl Cell {
    fn rank(&self) -> u8 {
        match self {
            Cell::Null => 0,
            Cell::Integer(_) => 1,
            Cell::Real(_) => 2,
            Cell::Text(_) => 3,
            Cell::Blob(_) => 4,
        }
    }

    fn from_value_ref(value: ValueRef<'_>) -> Self {
        match value {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(r) => Cell::Real(r),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }

    fn render(&self) -> String {
        match self {
            Cell::Null => "NULL".to_string(),
            Cell::Integer(i) => i.to_string(),
            Cell::Real(r) => format!("{r:?}"),
            Cell::Text(t) => t
                .replace('\\', "\\\\")
                .replace('\n', "\\n")
                .replace('\r', "\\r"),
            Cell::Blob(b) => format!("X'{}'", hex::encode_upper(b)),
        }
    }
}

impl PartialEq for Cell {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Cell {}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cell {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Cell::Null, Cell::Null) => Ordering::Equal,
            (Cell::Integer(a), Cell::Integer(b)) => a.cmp(b),
            (Cell::Real(a), Cell::Real(b)) => a.to_bits().cmp(&b.to_bits()),
            (Cell::Text(a), Cell::Text(b)) => a.cmp(b),
            (Cell::Blob(a), Cell::Blob(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl Hash for Cell {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            Cell::Null => {}
            Cell::Integer(i) => i.hash(state),
            Cell::Real(r) => r.to_bits().hash(state),
            Cell::Text(t) => t.hash(state),
            Cell::Blob(b) => b.hash(state),
        }
    }
}

mod real_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            s.serialize_f64(*value)
        } else if value.is_nan() {
            s.serialize_str("nan")
        } else if *value > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(n) => Ok(n),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("invalid real `{other}`"))),
            },
        }
    }
}

mod hex_repr {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(value))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSet {
    pub columns: usize,
    pub rows: Vec<Vec<Cell>>,
    #[serde(default)]
    pub truncated: bool,
    /// Row count before truncation, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_rows: Option<u64>,
}

impl ResultSet {
    pub fn new(columns: usize, rows: Vec<Vec<Cell>>) -> Self {
        debug_assert!(rows.iter().all(|r| r.len() == columns));
        Self {
            columns,
            rows,
            truncated: false,
            original_rows: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExecutionOutcome {
    Success(ResultSet),
    EngineError {
        message: String,
    },
    /// The configured limit that was exceeded (wall clock or row ceiling).
    /// Recording the limit rather than the measured time keeps records replayable.
    Timeout {
        limit_ms: u64,
    },
}

impl ExecutionOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, ExecutionOutcome::Success(_))
    }
}

/// Whether row collections compare as sets (deduplicated) or multisets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonMode {
    #[default]
    Set,
    Multiset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecLimits {
    pub timeout_ms: u64,
    pub max_rows: usize,
    /// When false, exceeding `max_rows` aborts the query as a timeout instead of clipping.
    pub truncate: bool,
}

impl ExecLimits {
    /// Limits for executions whose results feed `compare_results`.
    pub fn scoring(timeout_ms: u64) -> Self {
        Self {
            timeout_ms,
            max_rows: SCORING_ROW_CEILING,
            truncate: false,
        }
    }

    pub fn preview(timeout_ms: u64, max_rows: usize) -> Self {
        Self {
            timeout_ms,
            max_rows,
            truncate: true,
        }
    }
}

/// Executes SQL on catalog databases. Each call opens its own read-only
/// connection, so one executor can be shared across worker threads.
#[derive(Debug, Clone)]
pub struct Executor {
    catalog: Arc<DatabaseCatalog>,
}

impl Executor {
    pub fn new(catalog: Arc<DatabaseCatalog>) -> Self {
        Self { catalog }
    }

    pub fn catalog(&self) -> &DatabaseCatalog {
        &self.catalog
    }

    pub fn execute(
        &self,
        db_id: &str,
        sql: &str,
        limits: ExecLimits,
    ) -> Result<ExecutionOutcome, SqlError> {
        let entry = self
            .catalog
            .get(db_id)
            .ok_or_else(|| SqlError::UnknownDatabase(db_id.to_string()))?;
        execute_on_path(&entry.path, sql, limits).map_err(|e| match e {
            SqlError::Open { source, .. } => SqlError::Open {
                db_id: db_id.to_string(),
                source,
            },
            other => other,
        })
    }
}

pub(crate) fn open_read_only(path: &Path) -> rusqlite::Result<Connection> {
    let conn = Connection::open_with_flags(
        path,
        OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
    )?;
    conn.pragma_update(None, "query_only", true)?;
    // No ATTACH: an attached file could be created or written.
    conn.set_limit(rusqlite::limits::Limit::SQLITE_LIMIT_ATTACHED, 0)?;
    Ok(conn)
}

/// Executes `sql` against the database file at `path` under `limits`.
pub fn execute_on_path(
    path: &Path,
    sql: &str,
    limits: ExecLimits,
) -> Result<ExecutionOutcome, SqlError> {
    if limits.timeout_ms == 0 {
        return Err(SqlError::ZeroTimeout);
    }
    let conn = open_read_only(path).map_err(|source| SqlError::Open {
        db_id: path.display().to_string(),
        source,
    })?;
    let start = Instant::now();
    let deadline = start + Duration::from_millis(limits.timeout_ms);
    conn.progress_handler(PROGRESS_INTERVAL, Some(move || Instant::now() >= deadline))
        .map_err(|source| SqlError::Open {
            db_id: path.display().to_string(),
            source,
        })?;

    let timed_out = |start: Instant| {
        log::debug!("query aborted after {} ms", start.elapsed().as_millis());
        ExecutionOutcome::Timeout {
            limit_ms: limits.timeout_ms,
        }
    };

    let outcome = (|| -> rusqlite::Result<ExecutionOutcome> {
        let mut stmt = conn.prepare(sql)?;
        let columns = stmt.column_count();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        let mut truncated = false;
        while let Some(row) = rows.next()? {
            if out.len() == limits.max_rows {
                if limits.truncate {
                    truncated = true;
                    break;
                }
                return Ok(timed_out(start));
            }
            let mut cells = Vec::with_capacity(columns);
            for i in 0..columns {
                cells.push(Cell::from_value_ref(row.get_ref(i)?));
            }
            out.push(cells);
            if Instant::now() >= deadline {
                return Ok(timed_out(start));
            }
        }
        let mut set = ResultSet::new(columns, out);
        set.truncated = truncated;
        Ok(ExecutionOutcome::Success(set))
    })();

    Ok(match outcome {
        Ok(o) => o,
        Err(rusqlite::Error::SqliteFailure(err, _))
            if err.code == rusqlite::ErrorCode::OperationInterrupted =>
        {
            timed_out(start)
        }
        Err(e) => ExecutionOutcome::EngineError {
            message: engine_message(&e),
        },
    })
}

fn engine_message(e: &rusqlite::Error) -> String {
    match e {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => msg.clone(),
        rusqlite::Error::SqlInputError { msg, .. } => msg.clone(),
        other => other.to_string(),
    }
}

/// Execution-accuracy indicator: 1 iff both outcomes succeeded with equal row
/// collections (order-insensitive; deduplicated under [`ComparisonMode::Set`]).
pub fn compare_results(
    a: &ExecutionOutcome,
    b: &ExecutionOutcome,
    mode: ComparisonMode,
) -> Result<u8, CompareError> {
    for o in [a, b] {
        if let ExecutionOutcome::Success(rs) = o {
            if rs.truncated {
                return Err(CompareError::TruncatedResult);
            }
        }
    }
    let (ExecutionOutcome::Success(a), ExecutionOutcome::Success(b)) = (a, b) else {
        return Ok(0);
    };
    let equal = match mode {
        ComparisonMode::Set => row_counts(a, true) == row_counts(b, true),
        ComparisonMode::Multiset => row_counts(a, false) == row_counts(b, false),
    };
    Ok(u8::from(equal))
}

fn row_counts(rs: &ResultSet, dedup: bool) -> BTreeMap<&[Cell], usize> {
    let mut counts = BTreeMap::new();
    for row in &rs.rows {
        let c = counts.entry(row.as_slice()).or_insert(0);
        if !dedup || *c == 0 {
            *c += 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub max_rows: usize,
    pub max_chars: usize,
}

impl Default for PromptBudget {
    fn default() -> Self {
        Self {
            max_rows: 20,
            max_chars: 2000,
        }
    }
}

pub const TRUNCATION_MARKER: &str = "... (truncated)";

/// Renders an outcome as the text shown to the model.
///
/// Success renders as a `rows: k` header followed by one ` | `-separated line
/// per row. Lines are added while both budgets hold; if anything is left out
/// the truncation marker is appended (the marker itself is not budgeted).
pub fn serialize_for_prompt(outcome: &ExecutionOutcome, budget: PromptBudget) -> String {
    let rs = match outcome {
        ExecutionOutcome::Success(rs) => rs,
        ExecutionOutcome::EngineError { message } => return format!("ERROR: {message}"),
        ExecutionOutcome::Timeout { .. } => return "TIMEOUT".to_string(),
    };
    let total = rs.original_rows.unwrap_or(rs.rows.len() as u64);
    let mut out = format!("rows: {total}");
    let mut chars = out.chars().count();
    let mut clipped = rs.truncated;
    for (i, row) in rs.rows.iter().enumerate() {
        if i >= budget.max_rows {
            clipped = true;
            break;
        }
        let line = row.iter().map(Cell::render).collect::<Vec<_>>().join(" | ");
        let cost = 1 + line.chars().count();
        if chars + cost > budget.max_chars {
            clipped = true;
            break;
        }
        out.push('\n');
        out.push_str(&line);
        chars += cost;
    }
    if clipped {
        out.push('\n');
        out.push_str(TRUNCATION_MARKER);
    }
    out
}
