#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rusqlite::Connection;

pub const PETS_DDL: &str = "CREATE TABLE pets (id INTEGER PRIMARY KEY, name TEXT, age INTEGER)";

/// Creates `<root>/pets/pets.sqlite` with four rows and returns its path.
pub fn pets_db(root: &Path) -> PathBuf {
    let dir = root.join("pets");
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join("pets.sqlite");
    let conn = Connection::open(&path).unwrap();
    conn.execute_batch(&format!(
        "{PETS_DDL};
         INSERT INTO pets (name, age) VALUES ('rex', 5), ('tom', 2), ('kit', 7), ('bo', 1);"
    ))
    .unwrap();
    path
}

/// Creates `<root>/big/big.sqlite` holding tables `n` and `m` of `rows` integers each.
pub fn big_db(root: &Path, rows: u64) -> PathBuf {
    let dir = root.join("big");
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join("big.sqlite");
    let conn = Connection::open(&path).unwrap();
    conn.execute_batch(&format!(
        "CREATE TABLE n (v INTEGER);
         WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c WHERE x < {rows})
         INSERT INTO n SELECT x FROM c;
         CREATE TABLE m AS SELECT v FROM n;"
    ))
    .unwrap();
    path
}

use supportbench_core::dataset::Instance;
use supportbench_core::llmgateway::{CompletionResponse, Matcher, MockRule};

pub const ASK_MARKER: &str = "Answer (Yes / No):";
pub const VERB_MARKER: &str = "Give ONLY the precise probability";

pub fn instance(id: &str, question: &str, gold: &str) -> Instance {
    Instance {
        question_id: id.to_string(),
        db_id: "pets".to_string(),
        question: question.to_string(),
        support: format!("hint for {id}"),
        gold_sql: gold.to_string(),
    }
}

pub fn fenced(sql: &str) -> CompletionResponse {
    CompletionResponse::text(format!("```sql\n{sql}\n```"))
}

/// Rules answering both generation prompts and every ask prompt for one
/// question. `p_yes` drives both the logprob and verbalized answers.
pub fn rules_for(question: &str, base_sql: &str, support_sql: &str, p_yes: f64) -> Vec<MockRule> {
    let q_gen = format!("-- Question: {question}\n");
    let q_ask = format!("User's question:\n{question}\n");
    let lp_yes = p_yes.ln();
    let lp_no = (1.0 - p_yes).ln();
    vec![
        MockRule::new(
            Matcher::contains([q_gen.clone()]).excluding(["-- External Knowledge:"]),
            fenced(base_sql),
        ),
        MockRule::new(
            Matcher::contains([q_gen, "-- External Knowledge:".to_string()]),
            fenced(support_sql),
        ),
        MockRule::new(
            Matcher::contains([q_ask.clone(), ASK_MARKER.to_string()]),
            CompletionResponse::with_alternatives(&[
                ("Yes", lp_yes),
                ("No", lp_no),
                ("Maybe", -20.0),
            ]),
        ),
        MockRule::new(
            Matcher::contains([q_ask, VERB_MARKER.to_string()]),
            CompletionResponse::text(format!("{p_yes:.5}")),
        ),
    ]
}
