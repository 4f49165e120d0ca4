//! Minimum-cost matching and one-to-one decoding against plain argmax.

use knnformer::matching::{argmax_decode, decode_one_to_one, hungarian, LabelSchema};
use knnformer::numerics::{softmax_rows, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> knnformer::Result<()> {
    let cost = [
        4.0, 1.0, 3.0, //
        2.0, 0.0, 5.0, //
        3.0, 2.0, 2.0,
    ];
    let a = hungarian(&cost, 3)?;
    println!("assignment {:?}, cost {}", a.columns, a.cost);

    // Ten entities where two of them both look most like last_name.
    let schema = LabelSchema::poi();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut logits: Vec<f64> = (0..10 * schema.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (row, cat) in [(0, 0), (1, 0), (2, 2), (3, 3), (4, 4), (5, 5)] {
        logits[row * schema.len() + cat] += 4.0;
    }
    logits[schema.len() + 1] += 3.5;
    let probs = softmax_rows(&Tensor::matrix(10, schema.len(), logits)?);

    let arg = argmax_decode(&probs);
    let one = decode_one_to_one(&probs, &schema)?;
    println!("\n{:>3} {:>15} {:>15}", "idx", "argmax", "one-to-one");
    for i in 0..10 {
        println!("{i:>3} {:>15} {:>15}", schema.name(arg[i]), schema.name(one[i]));
    }
    Ok(())
}
