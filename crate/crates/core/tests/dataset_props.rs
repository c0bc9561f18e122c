mod common;

use std::fs;

use proptest::prelude::*;
use supportbench_core::dataset::{build_catalog, dataset_digest, parse_instances};

proptest! {
    #[test]
    fn loading_is_a_function_of_bytes(
        questions in prop::collection::vec("[a-zA-Z][a-zA-Z ?]{0,19}", 0..6),
        evidence in prop::collection::vec(prop::option::of("[a-z ]{0,10}"), 6),
    ) {
        let items: Vec<serde_json::Value> = questions
            .iter()
            .zip(&evidence)
            .enumerate()
            .map(|(i, (q, e))| {
                let mut v = serde_json::json!({"question_id": i, "db_id": "d", "question": q, "SQL": "SELECT 1"});
                if let Some(e) = e {
                    v["evidence"] = e.clone().into();
                }
                v
            })
            .collect();
        let bytes = serde_json::to_vec(&items).unwrap();
        let a = parse_instances(&bytes).unwrap();
        prop_assert_eq!(&a, &parse_instances(&bytes.clone()).unwrap());
        prop_assert_eq!(a.len(), questions.len());
        for (inst, e) in a.iter().zip(&evidence) {
            prop_assert_eq!(&inst.support, e.as_deref().unwrap_or(""));
        }
        prop_assert_eq!(dataset_digest(&bytes), dataset_digest(&bytes.clone()));
    }
}

#[test]
fn schema_extraction_is_deterministic_across_copies() {
    let a = tempfile::tempdir().unwrap();
    let path = common::pets_db(a.path());
    let conn = rusqlite::Connection::open(&path).unwrap();
    conn.execute_batch("CREATE TABLE owners (id INTEGER, pet_id INTEGER); CREATE VIEW v AS SELECT 1;")
        .unwrap();
    drop(conn);
    let b = tempfile::tempdir().unwrap();
    fs::create_dir_all(b.path().join("pets")).unwrap();
    fs::copy(&path, b.path().join("pets/pets.sqlite")).unwrap();

    let first = build_catalog(a.path()).unwrap();
    let second = build_catalog(b.path()).unwrap();
    let (sa, sb) = (&first.get("pets").unwrap().schema, &second.get("pets").unwrap().schema);
    assert_eq!(sa.rendered, sb.rendered);
    assert_eq!(sa.ddl.len(), 2);
    assert_eq!(sa.rendered, sa.ddl.join("\n"));
    assert!(!sa.rendered.contains("VIEW"));
}
