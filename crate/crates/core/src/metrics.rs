//! Entity-level precision, recall and F1 per category, macro-averaged over
//! the unique categories.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::LabelSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub name: String,
    pub unique: bool,
    pub support: usize,
    pub predicted: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    /// Mean F1 over unique categories with non-zero support.
    pub macro_f1: f64,
    pub accuracy: f64,
    pub documents: usize,
    pub entities: usize,
    /// `(document, unique category)` pairs predicted more than once.
    pub uniqueness_violations: usize,
    pub per_category: Vec<CategoryScore>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn entity_f1(gold: &[Vec<usize>], pred: &[Vec<usize>], schema: &LabelSchema) -> Result<F1Report> {
    if gold.len() != pred.len() {
        return Err(Error::InvalidShape(format!(
            "{} gold documents, {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let c = schema.len();
    let mut support = vec![0usize; c];
    let mut predicted = vec![0usize; c];
    let mut correct = vec![0usize; c];
    let mut violations = 0;
    let mut entities = 0;
    for (d, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::InvalidShape(format!(
                "document {d}: {} gold labels, {} predicted",
                g.len(),
                p.len()
            )));
        }
        if let Some(bad) = g.iter().chain(p).find(|&&x| x >= c) {
            return Err(Error::InvalidGold(format!("category {bad} outside schema of {c}")));
        }
        let mut per_doc = vec![0usize; c];
        for (&gi, &pi) in g.iter().zip(p) {
            support[gi] += 1;
            predicted[pi] += 1;
            per_doc[pi] += 1;
            if gi == pi {
                correct[gi] += 1;
            }
        }
        violations += schema
            .unique_indices()
            .into_iter()
            .filter(|&u| per_doc[u] > 1)
            .count();
        entities += g.len();
    }
    let per_category: Vec<CategoryScore> = schema
        .categories()
        .iter()
        .enumerate()
        .map(|(i, cat)| {
            let precision = ratio(correct[i], predicted[i]);
            let recall = ratio(correct[i], support[i]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            CategoryScore {
                name: cat.name.clone(),
                unique: cat.unique,
                support: support[i],
                predicted: predicted[i],
                correct: correct[i],
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let scored: Vec<f64> = per_category
        .iter()
        .filter(|s| s.unique && s.support > 0)
        .map(|s| s.f1)
        .collect();
    let macro_f1 = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(F1Report {
        macro_f1,
        accuracy: ratio(correct.iter().sum(), entities),
        documents: gold.len(),
        entities,
        uniqueness_violations: violations,
        per_category,
    })
}
