//! Command implementations behind the `knnformer` binary. Each returns the
//! JSON value the binary prints; files named by the configuration are
//! written as side effects.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{
    generate_synthetic, load_schema, parse_annotations, split, write_annotations, CorpusStats, Document,
    GenConfig, SplitStrategy,
};
use crate::embedder::{load_embeddings, TextSource};
use crate::error::{Error, Result};
use crate::matching::LabelSchema;
use crate::metrics::F1Report;
use crate::model::{Ablation, Model, ModelConfig};
use crate::numerics::{load_checkpoint, save_checkpoint};
use crate::train::{evaluate, predict_all, prepare, train_eval, EvalPlan, Example, TrainConfig};

/// Hyper-parameter lists searched by `grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lr: Vec<f64>,
    pub layers: Vec<usize>,
    pub hop_threshold: Vec<u32>,
    pub heads: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            lr: vec![5e-3, 1e-3, 5e-4],
            layers: vec![4, 8],
            hop_threshold: vec![1, 2, 3],
            heads: vec![4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    /// Category schema; the POI set when absent.
    pub schema: Option<PathBuf>,
    /// Precomputed text vectors; hashed n-grams of width `model.text_dim`
    /// when absent.
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: SplitStrategy,
    /// Evaluate on the test split every this many epochs and keep the best.
    pub eval_every: usize,
    pub early_stopping_patience: Option<usize>,
    pub synth: GenConfig,
    pub grid: GridConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            corpus: None,
            schema: None,
            embeddings: None,
            checkpoint: None,
            out: None,
            split: SplitStrategy::default(),
            eval_every: 10,
            early_stopping_patience: None,
            synth: GenConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub no_matching: bool,
    pub ablate: Vec<Ablation>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::json(p, e))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        set(&mut self.corpus, &o.corpus);
        set(&mut self.embeddings, &o.embeddings);
        set(&mut self.checkpoint, &o.checkpoint);
        set(&mut self.out, &o.out);
        if o.no_matching {
            self.model.use_matching = false;
        }
        for a in &o.ablate {
            self.model.ablate(*a);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    fn schema(&self) -> Result<LabelSchema> {
        match &self.schema {
            Some(p) => load_schema(p),
            None => Ok(LabelSchema::poi()),
        }
    }

    fn text_source(&self) -> Result<TextSource> {
        match &self.embeddings {
            Some(p) => Ok(TextSource::Table(load_embeddings(p)?)),
            None => Ok(TextSource::Hashed {
                dim: self.model.text_dim,
            }),
        }
    }
}

fn need<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} path given")))
}

fn must_exist(p: &Option<PathBuf>, what: &str) -> Result<()> {
    if let Some(p) = p {
        if !p.is_file() {
            return Err(Error::Config(format!("{what} {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn writable(p: &Path) -> Result<()> {
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Error::Config(format!("cannot write {}: no directory {}", p.display(), parent.display())));
    }
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

struct Loaded {
    schema: LabelSchema,
    corpus: Vec<Document>,
    text: TextSource,
}

/// Validates every input path before reading any of them.
fn load_inputs(cfg: &RunConfig) -> Result<Loaded> {
    cfg.validate()?;
    let corpus_path = need(&cfg.corpus, "corpus")?;
    must_exist(&cfg.corpus, "corpus")?;
    must_exist(&cfg.embeddings, "embeddings")?;
    must_exist(&cfg.schema, "schema")?;
    let schema = cfg.schema()?;
    if schema.len() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "schema has {} categories but num_classes is {}",
            schema.len(),
            cfg.model.num_classes
        )));
    }
    let corpus = parse_annotations(corpus_path, &schema)?;
    let text = cfg.text_source()?;
    Ok(Loaded { schema, corpus, text })
}

fn checkpoint_meta(cfg: &RunConfig, extra: Value) -> Value {
    json!({
        "model": to_value(&cfg.model),
        "train": to_value(&cfg.train),
        "seed": cfg.seed,
        "run": extra,
    })
}

/// Trains on the train side of the split, evaluating on the test side, and
/// saves the best evaluated parameters.
pub fn cmd_train(cfg: &RunConfig) -> Result<Value> {
    let ckpt = need(&cfg.checkpoint, "checkpoint")?.to_path_buf();
    writable(&ckpt)?;
    if let Some(o) = &cfg.out {
        writable(o)?;
    }
    let inp = load_inputs(cfg)?;
    let (train_docs, test_docs) = split(&inp.corpus, &cfg.split)?;
    let train_set = prepare(&train_docs, &inp.text, &cfg.model)?;
    let test_set = prepare(&test_docs, &inp.text, &cfg.model)?;
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    let plan = EvalPlan {
        data: &test_set,
        every: cfg.eval_every,
        patience: cfg.early_stopping_patience,
    };
    let report = train_eval(&mut model, &train_set, &inp.schema, &cfg.train, cfg.seed, Some(plan))?;
    let final_eval = evaluate(&model, &test_set, &inp.schema)?;
    save_checkpoint(
        &ckpt,
        model.params(),
        checkpoint_meta(cfg, json!({"best_epoch": report.best_epoch})),
    )?;
    let out = json!({
        "command": "train",
        "param_count": model.param_count(),
        "train_documents": train_set.len(),
        "test_documents": test_set.len(),
        "log": to_value(&report),
        "final_eval": to_value(&final_eval),
        "checkpoint": ckpt.display().to_string(),
    });
    if let Some(o) = &cfg.out {
        write_json(o, &out)?;
    }
    Ok(out)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = need(&cfg.checkpoint, "checkpoint")?;
    must_exist(&cfg.checkpoint, "checkpoint")?;
    let ck = load_checkpoint(path)?;
    Model::from_params(&cfg.model, ck.to_store()?)
}

/// Evaluates a checkpoint on the test side of the split.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Value> {
    if let Some(o) = &cfg.out {
        writable(o)?;
    }
    let inp = load_inputs(cfg)?;
    let model = load_model(cfg)?;
    let (_, test_docs) = split(&inp.corpus, &cfg.split)?;
    let test_set = prepare(&test_docs, &inp.text, &cfg.model)?;
    let report: F1Report = evaluate(&model, &test_set, &inp.schema)?;
    let out = to_value(&report);
    if let Some(o) = &cfg.out {
        write_json(o, &out)?;
    }
    Ok(out)
}

/// Category assignments for every document of the corpus; labels in the
/// corpus are ignored.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Value> {
    if let Some(o) = &cfg.out {
        writable(o)?;
    }
    let inp = load_inputs(cfg)?;
    let model = load_model(cfg)?;
    let unique = inp.schema.unique_indices().len();
    if cfg.model.use_matching {
        if let Some(d) = inp.corpus.iter().find(|d| d.len() < unique) {
            return Err(Error::InvalidInput(format!(
                "document {}: {}",
                d.id,
                Error::Infeasible {
                    entities: d.len(),
                    unique
                }
            )));
        }
    }
    let set: Vec<Example> = prepare(&inp.corpus, &inp.text, &cfg.model)?;
    let preds = predict_all(&model, &set, &inp.schema)?;
    let docs: Vec<Value> = set
        .iter()
        .zip(&preds)
        .map(|(ex, p)| {
            let ents: Vec<Value> = p
                .labels
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    json!({
                        "idx": i,
                        "category": inp.schema.name(c),
                        "prob": p.probs.at(i, c),
                    })
                })
                .collect();
            json!({"id": ex.id, "entities": ents})
        })
        .collect();
    let out = json!({
        "command": "predict",
        "decoding": if cfg.model.use_matching { "one_to_one" } else { "argmax" },
        "documents": docs,
    });
    if let Some(o) = &cfg.out {
        write_json(o, &out)?;
    }
    Ok(out)
}

/// Writes a synthetic annotation file and reports corpus statistics.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Value> {
    let out = need(&cfg.out, "output")?;
    writable(out)?;
    let corpus = generate_synthetic(&cfg.synth, cfg.seed)?;
    write_annotations(out, &corpus.documents, &LabelSchema::poi())?;
    let stats = CorpusStats::of(&corpus.documents);
    Ok(json!({
        "command": "synth",
        "out": out.display().to_string(),
        "stats": to_value(&stats),
        "hop_sensitive_documents": corpus.planted.iter().filter(|p| p.is_some()).count(),
    }))
}

/// Trains every combination of the grid lists and ranks them by test macro
/// F1 (ties keep grid order).
pub fn cmd_grid(cfg: &RunConfig) -> Result<Value> {
    if let Some(o) = &cfg.out {
        writable(o)?;
    }
    let inp = load_inputs(cfg)?;
    let (train_docs, test_docs) = split(&inp.corpus, &cfg.split)?;
    let g = &cfg.grid;
    if g.lr.is_empty() || g.layers.is_empty() || g.hop_threshold.is_empty() || g.heads.is_empty() {
        return Err(Error::Config("every grid list needs at least one value".into()));
    }
    let mut runs = Vec::new();
    for &lr in &g.lr {
        for &layers in &g.layers {
            for &hop_threshold in &g.hop_threshold {
                for &heads in &g.heads {
                    let model_cfg = ModelConfig {
                        layers,
                        heads,
                        hop_threshold,
                        ..cfg.model.clone()
                    };
                    model_cfg.validate()?;
                    let train_cfg = TrainConfig {
                        lr,
                        ..cfg.train.clone()
                    };
                    let tr = prepare(&train_docs, &inp.text, &model_cfg)?;
                    let te = prepare(&test_docs, &inp.text, &model_cfg)?;
                    let mut model = Model::new(&model_cfg, cfg.seed)?;
                    let plan = EvalPlan {
                        data: &te,
                        every: cfg.eval_every,
                        patience: cfg.early_stopping_patience,
                    };
                    let rep = train_eval(&mut model, &tr, &inp.schema, &train_cfg, cfg.seed, Some(plan))?;
                    runs.push(json!({
                        "lr": lr,
                        "layers": layers,
                        "hop_threshold": hop_threshold,
                        "heads": heads,
                        "param_count": model.param_count(),
                        "best_epoch": rep.best_epoch,
                        "macro_f1": rep.best_macro_f1,
                    }));
                }
            }
        }
    }
    let best = runs
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            let f = |v: &Value| v["macro_f1"].as_f64().unwrap_or(f64::NEG_INFINITY);
            f(a).total_cmp(&f(b)).then(ib.cmp(ia))
        })
        .map(|(_, v)| v.clone());
    let out = json!({"command": "grid", "runs": runs, "best": best});
    if let Some(o) = &cfg.out {
        write_json(o, &out)?;
    }
    Ok(out)
}
