//! Builds a self-contained evaluation workspace: one SQLite database, a
//! dataset file, a mock script and a config.

#![allow(dead_code)]

#[path = "../../../core/tests/common/mod.rs"]
pub mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;
use supportbench_core::llmgateway::MockScript;

pub const GOLD: &str = "SELECT name FROM pets WHERE age > 3";
pub const RIGHT: &str = "SELECT name FROM pets WHERE age >= 4";
pub const WRONG: &str = "SELECT name FROM pets";
pub const BROKEN: &str = "SELEC name FROM pets";

#[derive(Debug, Clone)]
pub struct Case {
    pub question: String,
    pub base_sql: &'static str,
    pub support_sql: &'static str,
    pub p_yes: f64,
}

impl Case {
    pub fn new(question: &str, base_ok: bool, support_ok: bool, p_yes: f64) -> Self {
        Self {
            question: question.to_string(),
            base_sql: if base_ok { RIGHT } else { WRONG },
            support_sql: if support_ok { GOLD } else { BROKEN },
            p_yes,
        }
    }
}

/// The three-instance fixture with scores 0.9/0.6/0.2.
pub fn three_cases() -> Vec<Case> {
    vec![
        Case::new("Which pets are old?", false, true, 0.9),
        Case::new("Name the senior pets?", false, false, 0.6),
        Case::new("List pets past three years?", true, true, 0.2),
    ]
}

pub fn ten_cases() -> Vec<Case> {
    let pattern = [
        (false, true),
        (true, true),
        (false, false),
        (true, false),
        (false, true),
        (true, true),
        (false, true),
        (true, true),
        (false, false),
        (false, true),
    ];
    pattern
        .iter()
        .enumerate()
        .map(|(i, &(b, s))| {
            let p = [0.95, 0.12, 0.5, 0.33, 0.81, 0.05, 0.66, 0.27, 0.5, 0.74][i];
            Case::new(&format!("Fixture question number {i}?"), b, s, p)
        })
        .collect()
}

pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    /// Writes database, dataset, mock script and a TOML config into `root`.
    pub fn create(root: &Path, cases: &[Case], methods: &[&str], scoring: &str) -> Self {
        fs::create_dir_all(root).unwrap();
        common::pets_db(&root.join("dbs"));
        let dataset: Vec<_> = cases
            .iter()
            .enumerate()
            .map(|(i, c)| {
                json!({
                    "question_id": i,
                    "db_id": "pets",
                    "question": c.question,
                    "evidence": format!("hint for {i}"),
                    "SQL": GOLD,
                })
            })
            .collect();
        fs::write(
            root.join("dev.json"),
            serde_json::to_vec_pretty(&dataset).unwrap(),
        )
        .unwrap();
        let rules = cases
            .iter()
            .flat_map(|c| common::rules_for(&c.question, c.base_sql, c.support_sql, c.p_yes))
            .collect();
        fs::write(
            root.join("mock.json"),
            serde_json::to_vec_pretty(&MockScript { rules }).unwrap(),
        )
        .unwrap();
        let ws = Self {
            root: root.to_path_buf(),
        };
        ws.write_config("config.toml", "out", "cache", methods, scoring, "record");
        ws
    }

    pub fn write_config(
        &self,
        name: &str,
        out: &str,
        cache: &str,
        methods: &[&str],
        scoring: &str,
        mode: &str,
    ) -> PathBuf {
        let methods: Vec<String> = methods.iter().map(|m| format!("\"{m}\"")).collect();
        let text = format!(
            r#"dataset = "dev.json"
db_root = "dbs"
output_dir = "{out}"
cache_root = "{cache}"
methods = [{}]
scoring = "{scoring}"
workers = 3

[backend]
kind = "mock"
model = "mock-model"
script = "mock.json"
mode = "{mode}"

[limits]
timeout_ms = 2000
"#,
            methods.join(", ")
        );
        let path = self.root.join(name);
        fs::write(&path, text).unwrap();
        path
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

pub fn supportbench(args: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supportbench"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn sb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supportbench"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs validate, run and metrics for `config`, returning the output directory.
pub fn cycle(config: &Path, out: &Path) -> Result<(), String> {
    let c = config.to_str().unwrap();
    for args in [vec!["validate", "-c", c], vec!["run", "-c", c]] {
        let o = sb(&args);
        if code(&o) != 0 {
            return Err(format!(
                "{args:?} exited {}: {}{}",
                code(&o),
                stdout(&o),
                stderr(&o)
            ));
        }
    }
    let records = out.join("records.jsonl");
    let o = sb(&["metrics", records.to_str().unwrap()]);
    if code(&o) != 0 {
        return Err(format!("metrics exited {}: {}", code(&o), stderr(&o)));
    }
    Ok(())
}

/// Relative paths and contents of every file under `dir`, sorted.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
