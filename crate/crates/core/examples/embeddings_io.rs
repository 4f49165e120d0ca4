//! Writes hashed text vectors for a corpus to a JSON-lines file, reads them
//! back and shows what lookups return.

use knnformer::data::{generate_synthetic, GenConfig};
use knnformer::embedder::{hash_ngram_embed, load_embeddings, write_embeddings, EmbeddingTable, TextSource};

fn main() -> knnformer::Result<()> {
    let gen = GenConfig {
        templates: 2,
        docs_per_template: 3,
        ..GenConfig::default()
    };
    let docs = generate_synthetic(&gen, 4)?.documents;
    let table = EmbeddingTable::hashed(&docs, 32)?;
    let path = std::env::temp_dir().join("knnformer_embeddings.jsonl");
    write_embeddings(&path, &table)?;
    let back = load_embeddings(&path)?;
    println!("{} vectors of width {} written to {}", back.len(), back.dim(), path.display());
    assert_eq!(table, back);

    let source = TextSource::Table(back);
    let feats = source.features(&docs[0])?;
    println!("features for {}: {:?}", docs[0].id, feats.shape());

    let a = hash_ngram_embed("Date of birth", 32)?;
    let b = hash_ngram_embed("DATE OF BIRTH", 32)?;
    let c = hash_ngram_embed("Passport No", 32)?;
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    println!("cos(dob, DOB) = {:.3}, cos(dob, passport) = {:.3}", dot(&a, &b), dot(&a, &c));

    let mut partial = EmbeddingTable::new(32);
    partial.insert(&docs[0].id, 0, a)?;
    match partial.lookup(&docs[0]) {
        Ok(_) => println!("unexpected success"),
        Err(e) => println!("incomplete table: {}", e.to_string().chars().take(80).collect::<String>()),
    }
    std::fs::remove_file(&path).ok();
    Ok(())
}
