//! Trains briefly, saves a checkpoint, reloads it and confirms identical
//! predictions. Also shows the error for a mismatched architecture.

use knnformer::data::{generate_synthetic, GenConfig};
use knnformer::embedder::TextSource;
use knnformer::matching::LabelSchema;
use knnformer::model::{Model, ModelConfig};
use knnformer::numerics::{load_checkpoint, save_checkpoint};
use knnformer::train::{predict_all, prepare, train, TrainConfig};
use serde_json::json;

fn main() -> knnformer::Result<()> {
    let gen = GenConfig {
        templates: 3,
        docs_per_template: 4,
        ..GenConfig::default()
    };
    let docs = generate_synthetic(&gen, 6)?.documents;
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        text_dim: 32,
        ..ModelConfig::default()
    };
    let schema = LabelSchema::poi();
    let data = prepare(&docs, &TextSource::Hashed { dim: 32 }, &cfg)?;
    let mut model = Model::new(&cfg, 0)?;
    let tc = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &schema, &tc, 0)?;

    let path = std::env::temp_dir().join("knnformer_checkpoint.json");
    save_checkpoint(&path, model.params(), json!({"model": cfg}))?;
    let ck = load_checkpoint(&path)?;
    let restored = Model::from_params(&cfg, ck.to_store()?)?;
    let a = predict_all(&model, &data, &schema)?;
    let b = predict_all(&restored, &data, &schema)?;
    println!(
        "{} parameters, {} bytes on disk, predictions identical: {}",
        restored.param_count(),
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        a == b
    );

    let wider = ModelConfig { hidden: 24, ..cfg };
    match Model::from_params(&wider, ck.to_store()?) {
        Ok(_) => println!("unexpected success"),
        Err(e) => println!("loading into hidden = 24: {e}"),
    }
    std::fs::remove_file(&path).ok();
    Ok(())
}
