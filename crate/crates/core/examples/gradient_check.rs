//! Backpropagated gradients of a small model against central differences.

use knnformer::data::{generate_synthetic, GenConfig};
use knnformer::embedder::TextSource;
use knnformer::matching::{LabelSchema, LossMode};
use knnformer::model::{Model, ModelConfig, SpatialBundle};

const STEP: f64 = 1e-5;

fn main() -> knnformer::Result<()> {
    let gen = GenConfig {
        templates: 1,
        docs_per_template: 1,
        entities_per_doc: 12,
        ..GenConfig::default()
    };
    let doc = &generate_synthetic(&gen, 2)?.documents[0];
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        text_dim: 16,
        size_dim: 4,
        ..ModelConfig::default()
    };
    let schema = LabelSchema::poi();
    let labels = doc.labels().expect("labeled");
    let bundle = SpatialBundle::from_document(doc, &cfg)?;
    let text = TextSource::Hashed { dim: 16 }.features(doc)?;
    let mut model = Model::new(&cfg, 7)?;
    let mode = LossMode::MatchedCe;
    let (loss, grads) = model.loss_and_grads(&bundle, &text, &labels, &schema, mode)?;
    println!("loss {loss:.6}, {} tensors\n", grads.len());

    let ids: Vec<_> = model.params().ids().collect();
    for (id, g) in ids.into_iter().zip(&grads) {
        let base = model.params().get(id).data().to_vec();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for k in 0..base.len() {
            let mut at = |d: f64| {
                model.params_mut().get_mut(id).data_mut()[k] = base[k] + d;
                let l = model.loss(&bundle, &text, &labels, &schema, mode);
                model.params_mut().get_mut(id).data_mut()[k] = base[k];
                l
            };
            let num = (at(STEP)? - at(-STEP)?) / (2.0 * STEP);
            diff += (g.data()[k] - num).powi(2);
            norm += g.data()[k].powi(2) + num.powi(2);
        }
        let rel = diff.sqrt() / norm.sqrt().max(1e-6);
        println!("{:<28} {:>5} values  rel error {rel:.2e}", model.params().name(id), base.len());
    }
    Ok(())
}
