//! Training loop, inference and evaluation over prepared documents.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Document;
use crate::embedder::TextSource;
use crate::error::{Error, Result};
use crate::matching::{argmax_decode, decode_one_to_one, LabelSchema, LossMode};
use crate::metrics::{entity_f1, F1Report};
use crate::model::{Model, ModelConfig, SpatialBundle};
use crate::numerics::{adam_step, AdamConfig, AdamState, NonFinitePolicy, StepOutcome, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Documents whose gradients are averaged per optimizer step.
    pub batch_docs: usize,
    pub loss_mode: LossMode,
    pub adam: AdamConfig,
    pub non_finite: NonFinitePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            epochs: 400,
            batch_docs: 8,
            loss_mode: LossMode::PerEntityCe,
            adam: AdamConfig::default(),
            non_finite: NonFinitePolicy::Skip,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_docs == 0 {
            return Err(Error::Config("batch_docs must be positive".into()));
        }
        Ok(())
    }
}

/// A document with its layout inputs and text features computed.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub bundle: SpatialBundle,
    pub text: Tensor,
    pub labels: Option<Vec<usize>>,
}

pub fn prepare(docs: &[Document], text: &TextSource, cfg: &ModelConfig) -> Result<Vec<Example>> {
    if text.dim() != cfg.text_dim {
        return Err(Error::Config(format!(
            "text features have dimension {}, model expects {}",
            text.dim(),
            cfg.text_dim
        )));
    }
    docs.par_iter()
        .map(|d| {
            Ok(Example {
                id: d.id.clone(),
                bundle: SpatialBundle::from_document(d, cfg)?,
                text: text.features(d)?,
                labels: d.labels(),
            })
        })
        .collect()
}

fn gold(ex: &Example) -> Result<&[usize]> {
    ex.labels
        .as_deref()
        .ok_or_else(|| Error::InvalidGold(format!("document {} has unlabeled entities", ex.id)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Mean document loss, measured while the epoch ran.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
    pub skipped_steps: u64,
    /// Epoch whose parameters were kept, when evaluating during training.
    pub best_epoch: Option<usize>,
    pub best_macro_f1: Option<f64>,
    pub stopped_early: bool,
}

/// Periodic evaluation during training. The model ends with the parameters
/// of the best evaluated epoch (earliest on ties).
#[derive(Debug, Clone, Copy)]
pub struct EvalPlan<'a> {
    pub data: &'a [Example],
    pub every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: Option<usize>,
}

pub fn train(
    model: &mut Model,
    data: &[Example],
    schema: &LabelSchema,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    train_eval(model, data, schema, cfg, seed, None)
}

/// Runs up to `cfg.epochs` passes. The document order of each epoch is drawn
/// from `seed`; per-document gradients are summed in a fixed order.
pub fn train_eval(
    model: &mut Model,
    data: &[Example],
    schema: &LabelSchema,
    cfg: &TrainConfig,
    seed: u64,
    plan: Option<EvalPlan<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no training documents".into()));
    }
    if schema.len() != model.config().num_classes {
        return Err(Error::Config(format!(
            "schema has {} categories, model {}",
            schema.len(),
            model.config().num_classes
        )));
    }
    for ex in data {
        gold(ex)?;
    }
    if let Some(p) = &plan {
        if p.data.is_empty() {
            return Err(Error::InvalidInput("empty evaluation set".into()));
        }
        if p.every == 0 {
            return Err(Error::Config("evaluation interval must be positive".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(model.params(), cfg.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        steps: 0,
        skipped_steps: 0,
        best_epoch: None,
        best_macro_f1: None,
        stopped_early: false,
    };
    let mut best_params = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_docs) {
            let m: &Model = model;
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| {
                    let ex = &data[i];
                    m.loss_and_grads(&ex.bundle, &ex.text, gold(ex)?, schema, cfg.loss_mode)
                })
                .collect::<Result<_>>()?;
            let mut iter = results.into_iter();
            let (l0, mut acc) = iter.next().expect("non-empty batch");
            total += l0;
            for (l, g) in iter {
                total += l;
                for (a, b) in acc.iter_mut().zip(&g) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for a in &mut acc {
                for x in a.data_mut() {
                    *x *= inv;
                }
            }
            match adam_step(model.params_mut(), &acc, &mut state, cfg.lr, cfg.non_finite)? {
                StepOutcome::Applied => report.steps += 1,
                StepOutcome::Skipped => report.skipped_steps += 1,
            }
        }
        let mut log = EpochLog {
            epoch,
            loss: total / data.len() as f64,
            eval_macro_f1: None,
        };
        if let Some(p) = &plan {
            if epoch % p.every == 0 || epoch == cfg.epochs {
                let f1 = evaluate(model, p.data, schema)?.macro_f1;
                log.eval_macro_f1 = Some(f1);
                if report.best_macro_f1.is_none_or(|b| f1 > b) {
                    report.best_macro_f1 = Some(f1);
                    report.best_epoch = Some(epoch);
                    best_params = Some(model.params().clone());
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
        }
        report.epochs.push(log);
        if plan.and_then(|p| p.patience).is_some_and(|pat| stale >= pat) {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(best) = best_params {
        model.params_mut().assign_from(&best)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Tensor,
    pub labels: Vec<usize>,
}

/// Class probabilities and decoded labels; one-to-one decoding when the
/// model is configured for matching, argmax otherwise.
pub fn predict(model: &Model, ex: &Example, schema: &LabelSchema) -> Result<Prediction> {
    let probs = model.probs(&ex.bundle, &ex.text)?;
    let labels = if model.config().use_matching {
        decode_one_to_one(&probs, schema).map_err(|e| match e {
            Error::Infeasible { .. } => Error::InvalidInput(format!("document {}: {e}", ex.id)),
            other => other,
        })?
    } else {
        argmax_decode(&probs)
    };
    Ok(Prediction { probs, labels })
}

pub fn predict_all(model: &Model, data: &[Example], schema: &LabelSchema) -> Result<Vec<Prediction>> {
    data.par_iter().map(|ex| predict(model, ex, schema)).collect()
}

pub fn evaluate(model: &Model, data: &[Example], schema: &LabelSchema) -> Result<F1Report> {
    let preds = predict_all(model, data, schema)?;
    let gold: Vec<Vec<usize>> = data.iter().map(|e| gold(e).map(<[usize]>::to_vec)).collect::<Result<_>>()?;
    let pred: Vec<Vec<usize>> = preds.into_iter().map(|p| p.labels).collect();
    entity_f1(&gold, &pred, schema)
}

/// Macro F1 of argmax and one-to-one decoding from a single forward pass.
pub fn evaluate_both(model: &Model, data: &[Example], schema: &LabelSchema) -> Result<(F1Report, F1Report)> {
    let probs: Vec<Tensor> = data
        .par_iter()
        .map(|ex| model.probs(&ex.bundle, &ex.text))
        .collect::<Result<_>>()?;
    let gold: Vec<Vec<usize>> = data.iter().map(|e| gold(e).map(<[usize]>::to_vec)).collect::<Result<_>>()?;
    let arg: Vec<Vec<usize>> = probs.iter().map(argmax_decode).collect();
    let one: Vec<Vec<usize>> = probs
        .iter()
        .map(|p| decode_one_to_one(p, schema))
        .collect::<Result<_>>()?;
    Ok((entity_f1(&gold, &arg, schema)?, entity_f1(&gold, &one, schema)?))
}
