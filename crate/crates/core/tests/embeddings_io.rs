use knnformer::data::{generate_synthetic, GenConfig};
use knnformer::embedder::{hash_ngram_embed, load_embeddings, write_embeddings, EmbeddingTable, TextSource};
use knnformer::Error;
use proptest::prelude::*;

fn write(text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.jsonl");
    std::fs::write(&p, text).unwrap();
    (dir, p)
}

#[test]
fn round_trip_is_exact() {
    let cfg = GenConfig { templates: 2, docs_per_template: 2, ..GenConfig::default() };
    let docs = generate_synthetic(&cfg, 5).unwrap().documents;
    let t = EmbeddingTable::hashed(&docs, 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.jsonl");
    write_embeddings(&p, &t).unwrap();
    let back = load_embeddings(&p).unwrap();
    assert_eq!(t, back);
    let bytes = std::fs::read(&p).unwrap();
    write_embeddings(&p, &back).unwrap();
    assert_eq!(bytes, std::fs::read(&p).unwrap());
    let src = TextSource::Table(back);
    assert_eq!(src.features(&docs[0]).unwrap(), TextSource::Hashed { dim: 32 }.features(&docs[0]).unwrap());
}

#[test]
fn malformed_files_are_rejected() {
    for (text, needle) in [
        ("", "empty"),
        ("{\"dim\": 2}\n{\"doc\": \"a\", \"idx\": 0, \"vec\": [1.0]}\n", "dimension"),
        (
            "{\"dim\": 1}\n{\"doc\": \"a\", \"idx\": 0, \"vec\": [1.0]}\n{\"doc\": \"a\", \"idx\": 0, \"vec\": [2.0]}\n",
            "duplicate",
        ),
        ("{\"dim\": 0}\n", "positive"),
    ] {
        let (_d, p) = write(text);
        let err = load_embeddings(&p).unwrap_err();
        assert!(matches!(err, Error::Embeddings(_)), "{err}");
        assert!(err.to_string().contains(needle), "{err}");
    }
    let (_d, p) = write("not json\n");
    assert!(load_embeddings(&p).is_err());
}

#[test]
fn lookup_lists_missing_entities() {
    let cfg = GenConfig { templates: 1, docs_per_template: 1, ..GenConfig::default() };
    let doc = &generate_synthetic(&cfg, 1).unwrap().documents[0];
    let mut t = EmbeddingTable::new(8);
    t.insert(&doc.id, 0, vec![0.0; 8]).unwrap();
    let msg = t.lookup(doc).unwrap_err().to_string();
    assert!(msg.contains(&format!("({}, 1)", doc.id)), "{msg}");
    assert!(t.insert(&doc.id, 1, vec![f64::NAN; 8]).is_err());
}

proptest! {
    #[test]
    fn hashed_vectors_are_unit_and_stable(s in "\\PC{0,40}", dim in 8usize..64) {
        let a = hash_ngram_embed(&s, dim).unwrap();
        prop_assert_eq!(a.len(), dim);
        let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        prop_assert_eq!(&a, &hash_ngram_embed(&s, dim).unwrap());
    }

    #[test]
    fn hashing_ignores_ascii_case(s in "[a-zA-Z0-9 ]{0,30}") {
        prop_assert_eq!(hash_ngram_embed(&s, 16).unwrap(), hash_ngram_embed(&s.to_ascii_uppercase(), 16).unwrap());
    }
}
