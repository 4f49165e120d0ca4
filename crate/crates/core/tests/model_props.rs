mod common;

use knnformer::data::{generate_synthetic, Document, GenConfig};
use knnformer::embedder::TextSource;
use knnformer::matching::LabelSchema;
use knnformer::model::{Model, ModelConfig, SpatialBundle};
use knnformer::numerics::{load_checkpoint, save_checkpoint};
use knnformer::train::{prepare, train, TrainConfig};
use proptest::prelude::*;

fn small() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        text_dim: 16,
        size_dim: 4,
        ..ModelConfig::default()
    }
}

fn corpus(docs: usize, seed: u64) -> Vec<Document> {
    let g = GenConfig {
        templates: 4,
        docs_per_template: docs.div_ceil(4),
        ..GenConfig::default()
    };
    let mut d = generate_synthetic(&g, seed).unwrap().documents;
    d.truncate(docs);
    d
}

#[test]
fn weights_beyond_threshold_are_exactly_zero() {
    let docs = corpus(20, 5);
    for t in 1..=3 {
        let cfg = ModelConfig {
            hop_threshold: t,
            ..small()
        };
        let model = Model::new(&cfg, 1).unwrap();
        for d in &docs {
            let b = SpatialBundle::from_document(d, &cfg).unwrap();
            let text = TextSource::Hashed { dim: 16 }.features(d).unwrap();
            let ws = model.attention_weights(&b, &text).unwrap();
            assert_eq!(ws.len(), cfg.layers * cfg.heads);
            let n = d.len();
            for w in &ws {
                for i in 0..n {
                    for j in 0..n {
                        let far = b.hops.get(i, j).is_none_or(|h| h > t);
                        if far {
                            assert_eq!(w.at(i, j), 0.0);
                        } else {
                            assert!(w.at(i, j) > 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn two_epochs_lower_the_loss_on_most_seeds() {
    let schema = LabelSchema::poi();
    let mut decreased = 0;
    for seed in 0..3 {
        let cfg = small();
        let data = prepare(&corpus(20, seed), &TextSource::Hashed { dim: 16 }, &cfg).unwrap();
        let mut m = Model::new(&cfg, seed).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &data, &schema, &tc, seed).unwrap();
        if r.epochs[1].loss < r.epochs[0].loss {
            decreased += 1;
        }
    }
    assert!(decreased >= 2, "loss fell on {decreased} of 3 seeds");
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let cfg = small();
    let m = Model::new(&cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, m.params(), serde_json::json!({})).unwrap();
    let back = Model::from_params(&cfg, load_checkpoint(&path).unwrap().to_store().unwrap()).unwrap();
    let d = &corpus(1, 0)[0];
    let b = SpatialBundle::from_document(d, &cfg).unwrap();
    let text = TextSource::Hashed { dim: 16 }.features(d).unwrap();
    assert_eq!(m.logits(&b, &text).unwrap(), back.logits(&b, &text).unwrap());
}

fn permuted(d: &Document, perm: &[usize]) -> Document {
    let mut out = d.clone();
    out.entities = perm.iter().map(|&i| d.entities[i].clone()).collect();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logits_follow_entity_order(seed in 0u64..1000, rot in 1usize..29) {
        let cfg = small();
        let d = &corpus(1, seed)[0];
        let n = d.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let p = permuted(d, &perm);
        let m = Model::new(&cfg, seed).unwrap();
        let src = TextSource::Hashed { dim: 16 };
        let a = m.logits(&SpatialBundle::from_document(d, &cfg).unwrap(), &src.features(d).unwrap()).unwrap();
        let b = m.logits(&SpatialBundle::from_document(&p, &cfg).unwrap(), &src.features(&p).unwrap()).unwrap();
        // equal up to ties in the neighbor ordering, which random jitter avoids
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..cfg.num_classes {
                prop_assert!((a.at(old, c) - b.at(new, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn probabilities_are_distributions(seed in 0u64..1000) {
        let cfg = small();
        let d = &corpus(1, seed)[0];
        let m = Model::new(&cfg, seed).unwrap();
        let p = m.probs(&SpatialBundle::from_document(d, &cfg).unwrap(), &TextSource::Hashed { dim: 16 }.features(d).unwrap()).unwrap();
        for i in 0..p.rows() {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
