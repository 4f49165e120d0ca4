//! Generates a synthetic corpus, prints its statistics and writes it out.
//!
//!     cargo run --example synth_corpus -- out.json [seed]

use std::path::PathBuf;

use knnformer::data::{generate_synthetic, write_annotations, CorpusStats, GenConfig};
use knnformer::matching::LabelSchema;

fn main() -> knnformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let cfg = GenConfig::default();
    let corpus = generate_synthetic(&cfg, seed)?;
    let stats = CorpusStats::of(&corpus.documents);
    let planted = corpus.planted.iter().flatten().count();
    println!("{stats:?}");
    println!("{planted} documents carry a hop-sensitive field");

    let schema = LabelSchema::poi();
    let doc = &corpus.documents[0];
    println!("\n{} ({}):", doc.id, doc.tag.as_deref().unwrap_or("-"));
    for e in doc.entities.iter().take(12) {
        let cat = e.category.map_or("?", |c| schema.name(c));
        println!(
            "  {:<16} ({:>7.1},{:>7.1})-({:>7.1},{:>7.1}) {:?}",
            cat, e.bbox.x0, e.bbox.y0, e.bbox.x1, e.bbox.y1, e.text
        );
    }
    if let Some(p) = &corpus.planted[0] {
        println!("planted value {} key {} decoy {}", p.value, p.key, p.decoy);
    }
    if let Some(path) = out {
        write_annotations(&path, &corpus.documents, &schema)?;
        println!("\nwrote {}", path.display());
    }
    Ok(())
}
