use std::collections::HashSet;
use std::path::Path;

use cotedit_core::cotgen::load_mquake;
use cotedit_core::evaluation::{load_dataset, DatasetKind, EvalError, LoadOptions};
use cotedit_core::memory::MemoryPayload;
use cotedit_core::schema::SchemaError;

const ZSRE: &str = r#"[
  {"subject": "Danielle Darrieux", "src": "What is the native language of Danielle Darrieux?", "alt": "English",
   "answers": ["French"], "rephrase": "Which language does Danielle Darrieux speak natively?",
   "loc": "nq question: who sings love will keep us alive by the eagles", "loc_ans": "Timothy B. Schmit"},
  {"subject": "Edwin of Northumbria", "src": "What is the religion of Edwin of Northumbria?", "alt": "Islam",
   "answers": ["Christianity"], "rephrase": "Which religion did Edwin of Northumbria follow?",
   "loc": "nq question: who wrote moby dick", "loc_ans": "Herman Melville"},
  {"subject": "Toko Yasuda", "src": "What instrument does Toko Yasuda play?", "alt": "piano",
   "answers": ["guitar"]}
]"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn zsre_three_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "zsre.json", ZSRE);
    let items = load_dataset(DatasetKind::Zsre, &path, &LoadOptions::default()).unwrap();
    assert_eq!(items.len(), 3);
    assert_eq!(items[0].prompt, "What is the native language of Danielle Darrieux?");
    assert_eq!(items[0].target_new, "English");
    assert_eq!(items[0].target_old.as_deref(), Some("French"));
    assert_eq!(items[0].rephrases, vec!["Which language does Danielle Darrieux speak natively?"]);
    assert_eq!(items[0].locality[0].prompt, "who sings love will keep us alive by the eagles");
    assert_eq!(items[0].locality[0].expected, "Timothy B. Schmit");
    assert!(matches!(items[0].edit, MemoryPayload::Fact(_)));
    assert!(items[2].rephrases.is_empty() && items[2].locality.is_empty());

    let sliced = load_dataset(
        DatasetKind::Zsre,
        &path,
        &LoadOptions {
            slice: Some((1, 10)),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(sliced.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["zsre-1", "zsre-2"]);
}

#[test]
fn schema_error_names_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let broken = ZSRE.replacen(r#""alt": "Islam""#, r#""alt": 7"#, 1);
    let path = write(dir.path(), "bad.json", &broken);
    match load_dataset(DatasetKind::Zsre, &path, &LoadOptions::default()) {
        Err(EvalError::Schema(e @ SchemaError::Field { .. })) => {
            assert_eq!(e.field_path(), Some("[1].alt"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn mquake_exclusion_drops_training_overlap() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/tests/fixtures/pipeline/mquake.json");
    let all = load_dataset(DatasetKind::Mquake, &fixture, &LoadOptions::default()).unwrap();
    assert_eq!(all.len(), 3);
    assert_eq!(all[0].hops, 2);
    assert_eq!(all[0].multihop.as_ref().unwrap().answer, "Milan");
    assert_eq!(all[0].support_facts.len(), 2);

    let training = load_mquake(&fixture).unwrap();
    let exclude: HashSet<(String, String)> = training[1].entity_relations().into_iter().collect();
    assert_eq!(
        exclude,
        HashSet::from([("association football".to_string(), "The sport was created in".to_lowercase())])
    );
    let kept = load_dataset(
        DatasetKind::Mquake,
        &fixture,
        &LoadOptions {
            exclude,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(kept.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), ["mquake-0", "mquake-2"]);
}
