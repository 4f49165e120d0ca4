//! Per-category scores for hand-written predictions.

use knnformer::matching::LabelSchema;
use knnformer::metrics::entity_f1;

fn main() -> knnformer::Result<()> {
    let schema = LabelSchema::poi();
    let gold = vec![vec![0, 1, 2, 3, 4, 5, 6, 7, 7], vec![0, 1, 2, 3, 4, 5, 7]];
    let pred = vec![vec![0, 1, 3, 2, 4, 5, 6, 7, 6], vec![0, 0, 2, 3, 4, 5, 7]];
    let r = entity_f1(&gold, &pred, &schema)?;
    println!("{:<16} {:>7} {:>7} {:>7} {:>9} {:>9}", "category", "support", "pred", "correct", "precision", "f1");
    for c in &r.per_category {
        println!(
            "{:<16} {:>7} {:>7} {:>7} {:>9.3} {:>9.3}{}",
            c.name,
            c.support,
            c.predicted,
            c.correct,
            c.precision,
            c.f1,
            if c.unique { "" } else { "  (not averaged)" }
        );
    }
    println!(
        "\nmacro F1 {:.4}, accuracy {:.4}, uniqueness violations {}",
        r.macro_f1, r.accuracy, r.uniqueness_violations
    );
    Ok(())
}
