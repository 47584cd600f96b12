use proptest::prelude::*;

use formparse::corpus::{parse_dataset, serialize_dataset, validate};
use formparse::syngen::{generate, SynSpec};
use formparse::{Dataset, LabelSet, Split};

fn syn_dataset(labels: LabelSet, seed: u64, docs: usize, one_to_many: f64) -> Dataset {
    let mut spec = SynSpec::new(labels);
    spec.seed = seed;
    spec.num_docs = docs;
    spec.one_to_many_frac = one_to_many;
    Dataset::new("en", Split::Train, generate(&spec).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialize_then_parse_is_identity(seed in any::<u64>(), docs in 1usize..5, otm in 0.0f64..1.0, indform in any::<bool>()) {
        let labels = if indform { LabelSet::indform() } else { LabelSet::xfund() };
        let ds = syn_dataset(labels.clone(), seed, docs, otm);
        for doc in &ds.documents {
            prop_assert!(validate(doc, &labels).is_empty());
        }
        let bytes = serialize_dataset(&ds);
        let back = parse_dataset(&bytes, &labels).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(serialize_dataset(&back), bytes);
    }
}

#[test]
fn document_level_relations_merge_with_cell_links() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let ds = parse_dataset(&std::fs::read(dir.join("indform_style.json")).unwrap(), &LabelSet::indform()).unwrap();
    let doc = ds.documents.iter().find(|d| d.id == "indform_hr_004").unwrap();
    let pairs: Vec<(u32, u32)> = doc.relations.iter().map(|r| (r.head_id, r.tail_id)).collect();
    assert_eq!(pairs, [(10, 11), (12, 13)]);
    let text = String::from_utf8(serialize_dataset(&ds)).unwrap();
    assert!(!text.contains("\"relations\""));
    assert!(text.contains("\"label\":\"answernum\""));
}

#[test]
fn one_to_many_links_survive() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let ds = parse_dataset(&std::fs::read(dir.join("funsd_style.json")).unwrap(), &LabelSet::xfund()).unwrap();
    let doc = &ds.documents[0];
    let from_3 = doc.relations.iter().filter(|r| r.head_id == 3).count();
    assert_eq!(from_3, 2);
    assert_eq!(doc.relations.len(), 4);
}
