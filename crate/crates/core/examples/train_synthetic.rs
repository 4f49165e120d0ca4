//! Trains the full model and ablated variants on a synthetic corpus and
//! compares macro F1 under argmax and one-to-one decoding.
//!
//!     cargo run --release --example train_synthetic -- [epochs] [seed] [ablation...]
//!
//! Ablations: hop, local, sigma, matching, abspos. Without any, `hop` is used.

use std::time::Instant;

use knnformer::data::{generate_synthetic, split, GenConfig, SplitStrategy};
use knnformer::embedder::TextSource;
use knnformer::matching::LabelSchema;
use knnformer::model::{Ablation, Model, ModelConfig};
use knnformer::train::{evaluate_both, prepare, train, TrainConfig};

fn main() -> knnformer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(60, |s| s.parse().expect("epochs"));
    let seed: u64 = args.get(1).map_or(0, |s| s.parse().expect("seed"));
    let mut ablations: Vec<Ablation> = args.iter().skip(2).map(|s| s.parse()).collect::<knnformer::Result<_>>()?;
    if ablations.is_empty() {
        ablations.push(Ablation::Hop);
    }

    let gen = GenConfig {
        templates: 25,
        docs_per_template: 10,
        ..GenConfig::default()
    };
    let corpus = generate_synthetic(&gen, seed)?.documents;
    let (tr, te) = split(&corpus, &SplitStrategy::Random { seed, ratio: 0.8 })?;
    let schema = LabelSchema::poi();
    let base = ModelConfig {
        layers: 2,
        heads: 4,
        hidden: 32,
        text_dim: 64,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let mut variants = vec![("full".to_string(), base.clone())];
    for a in &ablations {
        let mut c = base.clone();
        c.ablate(*a);
        variants.push((format!("no {a:?}").to_lowercase(), c));
    }

    println!("{} train / {} test documents, {epochs} epochs\n", tr.len(), te.len());
    println!("{:<14} {:>8} {:>8} {:>10} {:>8}", "variant", "params", "argmax", "one-to-one", "time");
    for (name, cfg) in variants {
        let text = TextSource::Hashed { dim: cfg.text_dim };
        let train_set = prepare(&tr, &text, &cfg)?;
        let test_set = prepare(&te, &text, &cfg)?;
        let mut model = Model::new(&cfg, seed)?;
        let t = Instant::now();
        train(&mut model, &train_set, &schema, &tc, seed)?;
        let (a, o) = evaluate_both(&model, &test_set, &schema)?;
        println!(
            "{name:<14} {:>8} {:>8.4} {:>10.4} {:>7.1?}",
            model.param_count(),
            a.macro_f1,
            o.macro_f1,
            t.elapsed()
        );
    }
    Ok(())
}
