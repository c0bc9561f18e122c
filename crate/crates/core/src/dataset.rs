//! Benchmark ingestion: instance files, the database catalog, schema text.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sqlrunner::{self, ExecLimits, ExecutionOutcome, Executor};

/// File extensions recognised as database files inside a catalog directory.
const DB_EXTENSIONS: &[&str] = &["sqlite", "sqlite3", "db"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed instance file: {0}")]
    NotAnArray(String),
    #[error("malformed instance at index {index}: {message}")]
    Parse { index: usize, message: String },
    #[error("instance at index {index}: {message}")]
    Schema { index: usize, message: String },
    #[error("catalog error for {}: {details}", db_ids.join(", "))]
    Catalog {
        db_ids: Vec<String>,
        details: String,
    },
    #[error("schema extraction failed: {0}")]
    Extraction(#[from] rusqlite::Error),
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub question_id: String,
    pub db_id: String,
    /// The user's data requirement.
    pub question: String,
    /// Annotated external knowledge handed over when the model asks. May be empty.
    pub support: String,
    pub gold_sql: String,
}

#[derive(Deserialize)]
struct RawInstance {
    question_id: Option<Value>,
    db_id: Option<String>,
    question: Option<String>,
    evidence: Option<String>,
    #[serde(rename = "SQL")]
    sql: Option<String>,
}

/// Parses a benchmark file (JSON array of objects with `question_id`,
/// `db_id`, `question`, `evidence`, `SQL`).
pub fn load_instances(path: &Path) -> Result<Vec<Instance>, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_instances(&bytes)
}

pub fn parse_instances(bytes: &[u8]) -> Result<Vec<Instance>, DatasetError> {
    let values: Vec<Value> = match serde_json::from_slice::<Value>(bytes) {
        Ok(Value::Array(values)) => values,
        Ok(_) => return Err(DatasetError::NotAnArray("top level is not an array".into())),
        Err(e) => return Err(DatasetError::NotAnArray(e.to_string())),
    };
    values
        .into_iter()
        .enumerate()
        .map(|(index, value)| instance_from_value(index, value))
        .collect()
}

fn instance_from_value(index: usize, value: Value) -> Result<Instance, DatasetError> {
    if !value.is_object() {
        return Err(DatasetError::Parse {
            index,
            message: "expected an object".into(),
        });
    }
    let raw: RawInstance = serde_json::from_value(value).map_err(|e| DatasetError::Parse {
        index,
        message: e.to_string(),
    })?;
    let missing = |field: &str| DatasetError::Schema {
        index,
        message: format!("missing required field `{field}`"),
    };
    // BIRD uses integer ids; files without ids fall back to the array index.
    let question_id = match raw.question_id.unwrap_or(Value::Null) {
        Value::Null => index.to_string(),
        Value::String(s) => s,
        Value::Number(n) => n.to_string(),
        other => {
            return Err(DatasetError::Schema {
                index,
                message: format!("question_id must be a string or number, got {other}"),
            })
        }
    };
    let question = raw.question.ok_or_else(|| missing("question"))?;
    if question.trim().is_empty() {
        return Err(DatasetError::Schema {
            index,
            message: "question is empty".into(),
        });
    }
    Ok(Instance {
        question_id,
        db_id: raw.db_id.ok_or_else(|| missing("db_id"))?,
        question,
        support: raw.evidence.unwrap_or_default(),
        gold_sql: raw.sql.ok_or_else(|| missing("SQL"))?,
    })
}

/// Hex SHA-256 of the raw dataset bytes, recorded in run manifests.
pub fn dataset_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Table-definition statements of a database, in catalog order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaText {
    pub ddl: Vec<String>,
    pub rendered: String,
}

impl SchemaText {
    pub fn from_ddl(ddl: Vec<String>) -> Self {
        let rendered = ddl.join("\n");
        Self { ddl, rendered }
    }
}

/// Reads the stored `CREATE TABLE` statement of every user table.
pub fn extract_schema(conn: &Connection) -> Result<SchemaText, DatasetError> {
    let mut stmt = conn.prepare(
        "SELECT sql FROM sqlite_master \
         WHERE type = 'table' AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' AND sql IS NOT NULL \
         ORDER BY rowid",
    )?;
    let ddl = stmt
        .query_map([], |row| row.get::<_, String>(0))?
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SchemaText::from_ddl(ddl))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub path: PathBuf,
    pub schema: SchemaText,
}

/// Map from database id to its file and extracted schema.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatabaseCatalog {
    entries: BTreeMap<String, CatalogEntry>,
}

impl DatabaseCatalog {
    pub fn get(&self, db_id: &str) -> Option<&CatalogEntry> {
        self.entries.get(db_id)
    }

    pub fn contains(&self, db_id: &str) -> bool {
        self.entries.contains_key(db_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn db_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Registers a single database file under `db_id`.
    pub fn insert(&mut self, db_id: impl Into<String>, path: PathBuf) -> Result<(), DatasetError> {
        let db_id = db_id.into();
        let conn = sqlrunner::open_read_only(&path).map_err(|e| DatasetError::Catalog {
            db_ids: vec![db_id.clone()],
            details: e.to_string(),
        })?;
        let schema = extract_schema(&conn).map_err(|e| DatasetError::Catalog {
            db_ids: vec![db_id.clone()],
            details: e.to_string(),
        })?;
        self.entries.insert(db_id, CatalogEntry { path, schema });
        Ok(())
    }
}

/// Scans `root` for one subdirectory per database id, each holding exactly one
/// database file. All failing ids are reported together.
pub fn build_catalog(root: &Path) -> Result<DatabaseCatalog, DatasetError> {
    let io = |source| DatasetError::Io {
        path: root.to_path_buf(),
        source,
    };
    let mut dirs: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(io)? {
        let entry = entry.map_err(io)?;
        if entry.file_type().map_err(io)?.is_dir() {
            dirs.push((
                entry.file_name().to_string_lossy().into_owned(),
                entry.path(),
            ));
        }
    }
    dirs.sort();

    let mut catalog = DatabaseCatalog::default();
    let mut failures: Vec<(String, String)> = Vec::new();
    for (db_id, dir) in dirs {
        let files = match database_files(&dir) {
            Ok(files) => files,
            Err(e) => {
                failures.push((db_id, e.to_string()));
                continue;
            }
        };
        match files.as_slice() {
            [] => failures.push((db_id, "no database file".into())),
            [path] => {
                if let Err(e) = catalog.insert(db_id.clone(), path.clone()) {
                    failures.push((db_id, e.to_string()));
                }
            }
            many => failures.push((db_id, format!("{} database files", many.len()))),
        }
    }
    if failures.is_empty() {
        Ok(catalog)
    } else {
        let details = failures
            .iter()
            .map(|(id, why)| format!("{id}: {why}"))
            .collect::<Vec<_>>()
            .join("; ");
        Err(DatasetError::Catalog {
            db_ids: failures.into_iter().map(|(id, _)| id).collect(),
            details,
        })
    }
}

fn database_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        let is_db = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| DB_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_db && entry.file_type()?.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationFailure {
    UnknownDatabase,
    EngineError { message: String },
    Timeout { limit_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationIssue {
    pub index: usize,
    pub question_id: String,
    pub db_id: String,
    pub failure: ValidationFailure,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn len(&self) -> usize {
        self.issues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn failed_question_ids(&self) -> impl Iterator<Item = &str> {
        self.issues.iter().map(|i| i.question_id.as_str())
    }
}

/// Executes every gold query and reports those that fail or time out.
pub fn validate_gold(
    instances: &[Instance],
    executor: &Executor,
    timeout_ms: u64,
) -> ValidationReport {
    let limits = ExecLimits::scoring(timeout_ms.max(1));
    let issues = instances
        .iter()
        .enumerate()
        .filter_map(|(index, inst)| {
            let failure = match executor.execute(&inst.db_id, &inst.gold_sql, limits) {
                Err(sqlrunner::SqlError::UnknownDatabase(_)) => ValidationFailure::UnknownDatabase,
                Err(e) => ValidationFailure::EngineError {
                    message: e.to_string(),
                },
                Ok(ExecutionOutcome::Success(_)) => return None,
                Ok(ExecutionOutcome::EngineError { message }) => {
                    ValidationFailure::EngineError { message }
                }
                Ok(ExecutionOutcome::Timeout { limit_ms }) => {
                    ValidationFailure::Timeout { limit_ms }
                }
            };
            Some(ValidationIssue {
                index,
                question_id: inst.question_id.clone(),
                db_id: inst.db_id.clone(),
                failure,
            })
        })
        .collect();
    ValidationReport { issues }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn make_db(dir: &Path, db_id: &str, ddl: &str) -> PathBuf {
        let sub = dir.join(db_id);
        fs::create_dir_all(&sub).unwrap();
        let path = sub.join(format!("{db_id}.sqlite"));
        Connection::open(&path).unwrap().execute_batch(ddl).unwrap();
        path
    }

    #[test]
    fn direct_field_mapping() {
        let json =
            br#"[{"question_id": 7, "question":"q","evidence":"e","SQL":"SELECT 1","db_id":"d"}]"#;
        let got = parse_instances(json).unwrap();
        assert_eq!(
            got,
            vec![Instance {
                question_id: "7".into(),
                db_id: "d".into(),
                question: "q".into(),
                support: "e".into(),
                gold_sql: "SELECT 1".into(),
            }]
        );
    }

    #[test]
    fn empty_array_and_empty_evidence() {
        assert!(parse_instances(b"[]").unwrap().is_empty());
        let json = br#"[{"question":"q","evidence":"e","SQL":"SELECT 1","db_id":"d"}]"#;
        let got = parse_instances(json).unwrap();
        assert_eq!(
            (got[0].question_id.as_str(), got[0].support.as_str()),
            ("0", "e")
        );
        let json = br#"[{"question_id":"a","question":"q","SQL":"SELECT 1","db_id":"d"}]"#;
        assert_eq!(parse_instances(json).unwrap()[0].support, "");
        let json =
            br#"[{"question_id":"a","question":"q","evidence":"","SQL":"SELECT 1","db_id":"d"}]"#;
        assert_eq!(parse_instances(json).unwrap()[0].support, "");
    }

    #[test]
    fn missing_sql_is_schema_error_at_index() {
        let json = br#"[{"question_id":"a","question":"q","evidence":"e","db_id":"d"}]"#;
        match parse_instances(json) {
            Err(DatasetError::Schema { index: 0, message }) => assert!(message.contains("SQL")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_entry_names_index() {
        let json =
            br#"[{"question_id":"a","question":"q","evidence":"e","SQL":"s","db_id":"d"}, 3]"#;
        assert!(matches!(
            parse_instances(json),
            Err(DatasetError::Parse { index: 1, .. })
        ));
        let json = br#"[{"question_id":"a","question":5,"evidence":"e","SQL":"s","db_id":"d"}]"#;
        assert!(matches!(
            parse_instances(json),
            Err(DatasetError::Parse { index: 0, .. })
        ));
        assert!(matches!(
            parse_instances(b"{}"),
            Err(DatasetError::NotAnArray(_))
        ));
        assert!(matches!(
            parse_instances(b"[1,"),
            Err(DatasetError::NotAnArray(_))
        ));
    }

    #[test]
    fn empty_question_rejected() {
        let json = br#"[{"question_id":"a","question":"  ","evidence":"e","SQL":"s","db_id":"d"}]"#;
        assert!(matches!(
            parse_instances(json),
            Err(DatasetError::Schema { index: 0, .. })
        ));
    }

    #[test]
    fn schema_extraction() {
        let dir = tempfile::tempdir().unwrap();
        let p = make_db(dir.path(), "one", "CREATE TABLE T(a INT);");
        let conn = Connection::open(&p).unwrap();
        assert_eq!(
            extract_schema(&conn).unwrap().ddl,
            vec!["CREATE TABLE T(a INT)"]
        );

        let p = make_db(dir.path(), "none", "CREATE VIEW v AS SELECT 1;");
        let conn = Connection::open(&p).unwrap();
        assert!(extract_schema(&conn).unwrap().ddl.is_empty());

        let p = make_db(
            dir.path(),
            "two",
            "CREATE TABLE b(x TEXT); CREATE TABLE a(y INT PRIMARY KEY) WITHOUT ROWID; \
             CREATE INDEX ix ON b(x); CREATE VIEW v AS SELECT x FROM b; \
             CREATE TABLE c(id INTEGER PRIMARY KEY AUTOINCREMENT);",
        );
        let conn = Connection::open(&p).unwrap();
        let schema = extract_schema(&conn).unwrap();
        assert_eq!(schema.ddl.len(), 3, "{:?}", schema.ddl);
        assert_eq!(
            schema.rendered,
            "CREATE TABLE b(x TEXT)\nCREATE TABLE a(y INT PRIMARY KEY) WITHOUT ROWID\n\
             CREATE TABLE c(id INTEGER PRIMARY KEY AUTOINCREMENT)"
        );
        assert_eq!(schema, extract_schema(&conn).unwrap());
    }

    #[test]
    fn catalog_from_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_catalog(dir.path()).unwrap().is_empty());
        make_db(dir.path(), "a", "CREATE TABLE t(x);");
        make_db(dir.path(), "b", "CREATE TABLE u(y);");
        fs::create_dir_all(dir.path().join("b/database_description")).unwrap();
        fs::write(dir.path().join("b/database_description/u.csv"), "y\n").unwrap();
        let cat = build_catalog(dir.path()).unwrap();
        assert_eq!(cat.db_ids().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(cat.get("b").unwrap().schema.rendered, "CREATE TABLE u(y)");
    }

    #[test]
    fn catalog_errors_name_db_ids() {
        let dir = tempfile::tempdir().unwrap();
        make_db(dir.path(), "ok", "CREATE TABLE t(x);");
        fs::create_dir_all(dir.path().join("empty")).unwrap();
        let dup = make_db(dir.path(), "dup", "CREATE TABLE t(x);");
        fs::copy(&dup, dir.path().join("dup/copy.db")).unwrap();
        match build_catalog(dir.path()) {
            Err(DatasetError::Catalog { db_ids, .. }) => assert_eq!(db_ids, vec!["dup", "empty"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn garbage_database_file_is_catalog_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("bad")).unwrap();
        fs::write(
            dir.path().join("bad/bad.sqlite"),
            b"definitely not sqlite, padded out",
        )
        .unwrap();
        match build_catalog(dir.path()) {
            Err(DatasetError::Catalog { db_ids, .. }) => assert_eq!(db_ids, vec!["bad"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gold_validation_report() {
        let dir = tempfile::tempdir().unwrap();
        make_db(
            dir.path(),
            "d",
            "CREATE TABLE t(x INT);
             WITH RECURSIVE c(v) AS (SELECT 1 UNION ALL SELECT v+1 FROM c WHERE v < 2000)
             INSERT INTO t SELECT v FROM c;",
        );
        let exec = Executor::new(Arc::new(build_catalog(dir.path()).unwrap()));
        let inst = |id: &str, db: &str, sql: &str| Instance {
            question_id: id.into(),
            db_id: db.into(),
            question: "q".into(),
            support: String::new(),
            gold_sql: sql.into(),
        };
        let good = vec![inst("1", "d", "SELECT count(*) FROM t")];
        assert!(validate_gold(&good, &exec, 1000).is_clean());

        let bad = vec![
            inst("1", "d", "SELECT 1"),
            inst("2", "d", "SELECT * FROM missing"),
            inst("3", "d", "SELECT count(*) FROM t a, t b, t c"),
            inst("4", "nope", "SELECT 1"),
        ];
        let report = validate_gold(&bad, &exec, 50);
        assert_eq!(report.len(), 3);
        assert!(matches!(
            report.issues[0].failure,
            ValidationFailure::EngineError { .. }
        ));
        assert_eq!(report.issues[0].question_id, "2");
        assert!(matches!(
            report.issues[1].failure,
            ValidationFailure::Timeout { .. }
        ));
        assert_eq!(report.issues[2].failure, ValidationFailure::UnknownDatabase);
    }
}
