//! Attention weights of an untrained model, with and without the hop mask.

use knnformer::data::{generate_synthetic, GenConfig};
use knnformer::embedder::TextSource;
use knnformer::model::{Model, ModelConfig, SpatialBundle};

fn main() -> knnformer::Result<()> {
    let gen = GenConfig {
        templates: 1,
        docs_per_template: 1,
        ..GenConfig::default()
    };
    let doc = &generate_synthetic(&gen, 0)?.documents[0];
    for local in [true, false] {
        let cfg = ModelConfig {
            layers: 2,
            heads: 4,
            hidden: 32,
            text_dim: 64,
            use_local_mask: local,
            ..ModelConfig::default()
        };
        let model = Model::new(&cfg, 0)?;
        let bundle = SpatialBundle::from_document(doc, &cfg)?;
        let text = TextSource::Hashed { dim: cfg.text_dim }.features(doc)?;
        let weights = model.attention_weights(&bundle, &text)?;
        let n = doc.len();
        println!("local mask {local}:");
        for (i, w) in weights.iter().enumerate() {
            let nonzero = w.data().iter().filter(|&&x| x > 0.0).count();
            let peak = w.data().iter().cloned().fold(0.0, f64::max);
            println!(
                "  layer {} head {}: {nonzero:>4}/{} nonzero, peak {peak:.3}",
                i / cfg.heads,
                i % cfg.heads,
                n * n
            );
        }
        let row: Vec<String> = (0..n).map(|j| format!("{:.2}", weights[0].at(0, j))).collect();
        println!("  first row of layer 0 head 0: {}\n", row.join(" "));
    }
    Ok(())
}
