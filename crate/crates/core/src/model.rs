//! The transformer: input embedder, pre-norm encoder layers whose attention
//! is biased by KNN hop buckets and by relative distance/angle, and a linear
//! classifier over entity categories.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Document;
use crate::embedder::{EmbedderDims, InputEmbedder};
use crate::error::{Error, Result};
use crate::geometry::{normalize_document, pairwise_sigma, SigmaEncoding, SigmaMatrix};
use crate::graph::{attention_mask, bucket_hops, build_knn_graph, hop_distances, HopMatrix, KnnGraph};
use crate::matching::{set_loss_on_tape, LabelSchema, LossMode};
use crate::numerics::{
    softmax_rows, AffineVars, Init, Mask, PairFeatures, ParamBuilder, ParamId, ParamStore, ScoreBias,
    Tape, Tensor, ValueBias, Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_ratio: usize,
    pub num_classes: usize,
    pub text_dim: usize,
    pub size_dim: usize,
    /// Neighbors per entity in the KNN graph.
    pub k: usize,
    /// Pairs further than this many hops are masked out.
    pub hop_threshold: u32,
    /// Hop distances are clipped to this bucket; unreachable pairs get the
    /// next one.
    pub max_bucket: u32,
    pub sigma_encoding: SigmaEncoding,
    pub use_hop_bias: bool,
    pub use_local_mask: bool,
    pub use_sigma_bias: bool,
    /// One-to-one decoding of unique categories at inference.
    pub use_matching: bool,
    pub use_abs_pos: bool,
    /// Position-to-content term reads the key of `j` instead of `i`.
    pub p2c_uses_key_row: bool,
    /// One set of hop tables and distance/angle maps for all layers.
    pub share_spatial_across_layers: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 8,
            heads: 8,
            hidden: 80,
            ffn_ratio: 2,
            num_classes: 8,
            text_dim: 384,
            size_dim: 16,
            k: 4,
            hop_threshold: 2,
            max_bucket: 4,
            sigma_encoding: SigmaEncoding::Raw,
            use_hop_bias: true,
            use_local_mask: true,
            use_sigma_bias: true,
            use_matching: true,
            use_abs_pos: false,
            p2c_uses_key_row: false,
            share_spatial_across_layers: false,
        }
    }
}

/// Switches a single component off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Hop,
    Local,
    Sigma,
    Matching,
    /// Adds absolute-position embeddings.
    Abspos,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hop" => Ablation::Hop,
            "local" => Ablation::Local,
            "sigma" => Ablation::Sigma,
            "matching" => Ablation::Matching,
            "abspos" => Ablation::Abspos,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected hop, local, sigma, matching or abspos"
                )))
            }
        })
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.ffn_ratio == 0 || self.size_dim == 0 || self.text_dim == 0 {
            return bad("ffn_ratio, size_dim and text_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} below 2", self.num_classes));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.hop_threshold == 0 {
            return bad("hop_threshold must be at least 1".into());
        }
        if self.max_bucket == 0 {
            return bad("max_bucket must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Rows of each hop table.
    pub fn buckets(&self) -> usize {
        self.max_bucket as usize + 2
    }

    pub fn ablate(&mut self, a: Ablation) {
        match a {
            Ablation::Hop => self.use_hop_bias = false,
            Ablation::Local => self.use_local_mask = false,
            Ablation::Sigma => self.use_sigma_bias = false,
            Ablation::Matching => self.use_matching = false,
            Ablation::Abspos => self.use_abs_pos = true,
        }
    }

    fn embedder_dims(&self) -> EmbedderDims {
        EmbedderDims {
            text_dim: self.text_dim,
            size_dim: self.size_dim,
            hidden: self.hidden,
            abs_pos: self.use_abs_pos,
        }
    }
}

/// Layout-derived inputs of one document.
#[derive(Debug, Clone)]
pub struct SpatialBundle {
    /// Boxes on the unit page.
    pub normalized: Document,
    pub sigma: SigmaMatrix,
    pub graph: KnnGraph,
    pub hops: HopMatrix,
    /// `None` when local masking is off.
    pub mask: Option<Arc<Mask>>,
    pub pairs: Arc<PairFeatures>,
}

impl SpatialBundle {
    pub fn from_document(doc: &Document, cfg: &ModelConfig) -> Result<Self> {
        if doc.is_empty() {
            return Err(Error::InvalidInput(format!("document {} has no entities", doc.id)));
        }
        let normalized = normalize_document(doc, doc.page.w, doc.page.h)?;
        let sigma = pairwise_sigma(&normalized)?;
        let n = normalized.len();
        let graph = build_knn_graph(sigma.dist_matrix(), n, cfg.k)?;
        let hops = hop_distances(&graph);
        let mask = if cfg.use_local_mask {
            Some(Arc::new(attention_mask(&hops, cfg.hop_threshold)?))
        } else {
            None
        };
        let buckets = bucket_hops(&hops, cfg.max_bucket)?;
        let width = cfg.sigma_encoding.width();
        let pairs = Arc::new(PairFeatures::new(n, buckets, sigma.features(cfg.sigma_encoding), width)?);
        Ok(SpatialBundle {
            normalized,
            sigma,
            graph,
            hops,
            mask,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    weight: ParamId,
    bias: ParamId,
}

/// Hop tables and distance/angle maps of one head.
#[derive(Debug, Clone, Copy)]
struct HeadSpatial {
    hop: Option<[ParamId; 3]>,
    sigma: Option<[Affine; 3]>,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: Affine,
    ln2: (ParamId, ParamId),
    ff1: Affine,
    ff2: Affine,
    heads: Vec<HeadSpatial>,
}

/// Model parameters with their configuration.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    embedder: InputEmbedder,
    layers: Vec<LayerIds>,
    final_ln: Option<(ParamId, ParamId)>,
    classifier: Affine,
}

fn affine<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Result<Affine> {
    Ok(Affine {
        weight: b.param(
            &format!("{name}.w"),
            &[fan_in, fan_out],
            Init::Normal((fan_in as f64).sqrt().recip()),
        )?,
        bias: b.param(&format!("{name}.b"), &[fan_out], Init::Zeros)?,
    })
}

fn layer_norm<R: Rng>(b: &mut ParamBuilder<'_, R>, name: &str, width: usize) -> Result<(ParamId, ParamId)> {
    Ok((
        b.param(&format!("{name}.g"), &[width], Init::Ones)?,
        b.param(&format!("{name}.b"), &[width], Init::Zeros)?,
    ))
}

fn head_spatial<R: Rng>(b: &mut ParamBuilder<'_, R>, prefix: &str, cfg: &ModelConfig) -> Result<HeadSpatial> {
    let d = cfg.head_dim();
    let hop = if cfg.use_hop_bias {
        let mut t = |s: &str| b.param(&format!("{prefix}.hop_{s}"), &[cfg.buckets(), d], Init::Normal(0.1));
        Some([t("q")?, t("k")?, t("v")?])
    } else {
        None
    };
    let sigma = if cfg.use_sigma_bias {
        let w = cfg.sigma_encoding.width();
        let mut r = |s: &str| affine(b, &format!("{prefix}.rel_{s}"), w, d);
        Some([r("q")?, r("k")?, r("v")?])
    } else {
        None
    };
    Ok(HeadSpatial { hop, sigma })
}

fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, cfg: &ModelConfig) -> Result<Model> {
    let embedder = InputEmbedder::build(b, cfg.embedder_dims())?;
    let h = cfg.hidden;
    let shared = if cfg.share_spatial_across_layers {
        Some(
            (0..cfg.heads)
                .map(|hd| head_spatial(b, &format!("spatial.head{hd}"), cfg))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("layer{l}");
        let std = (h as f64).sqrt().recip();
        let ln1 = layer_norm(b, &format!("{p}.ln1"), h)?;
        let wq = b.param(&format!("{p}.attn.wq"), &[h, h], Init::Normal(std))?;
        let wk = b.param(&format!("{p}.attn.wk"), &[h, h], Init::Normal(std))?;
        let wv = b.param(&format!("{p}.attn.wv"), &[h, h], Init::Normal(std))?;
        let wo = affine(b, &format!("{p}.attn.wo"), h, h)?;
        let heads = match &shared {
            Some(s) => s.clone(),
            None => (0..cfg.heads)
                .map(|hd| head_spatial(b, &format!("{p}.head{hd}"), cfg))
                .collect::<Result<Vec<_>>>()?,
        };
        let ln2 = layer_norm(b, &format!("{p}.ln2"), h)?;
        let ff1 = affine(b, &format!("{p}.ffn1"), h, h * cfg.ffn_ratio)?;
        let ff2 = affine(b, &format!("{p}.ffn2"), h * cfg.ffn_ratio, h)?;
        layers.push(LayerIds {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            ff1,
            ff2,
            heads,
        });
    }
    let final_ln = if cfg.layers > 0 {
        Some(layer_norm(b, "final_ln", h)?)
    } else {
        None
    };
    let classifier = affine(b, "classifier", h, cfg.num_classes)?;
    Ok(Model {
        config: cfg.clone(),
        params: ParamStore::new(),
        embedder,
        layers,
        final_ln,
        classifier,
    })
}

impl Model {
    /// Fresh parameters drawn from a seeded stream.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::create(&mut store, &mut rng);
        let mut m = build(&mut b, config)?;
        b.finish()?;
        m.params = store;
        Ok(m)
    }

    /// Wraps existing parameters, checking that they match `config`.
    pub fn from_params(config: &ModelConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut b: ParamBuilder<'_, ChaCha8Rng> = ParamBuilder::bind(&mut store);
        let mut m = build(&mut b, config)?;
        b.finish()?;
        m.params = store;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn affine_vars(&self, tape: &mut Tape, a: Affine) -> AffineVars {
        AffineVars {
            weight: tape.param(&self.params, a.weight),
            bias: tape.param(&self.params, a.bias),
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, a: Affine) -> Result<Var> {
        let v = self.affine_vars(tape, a);
        let y = tape.matmul(x, v.weight)?;
        tape.add_row(y, v.bias)
    }

    fn norm(&self, tape: &mut Tape, x: Var, ln: (ParamId, ParamId)) -> Result<Var> {
        let g = tape.param(&self.params, ln.0);
        let b = tape.param(&self.params, ln.1);
        tape.layer_norm(x, g, b)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        x: Var,
        layer: &LayerIds,
        bundle: &SpatialBundle,
        weights: &mut Vec<Var>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.head_dim();
        let wq = tape.param(&self.params, layer.wq);
        let wk = tape.param(&self.params, layer.wk);
        let wv = tape.param(&self.params, layer.wv);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let scale = (d as f64).sqrt().recip();
        let mut outs = Vec::with_capacity(cfg.heads);
        for (hd, sp) in layer.heads.iter().enumerate() {
            let qh = tape.slice_cols(q, hd * d, d)?;
            let kh = tape.slice_cols(k, hd * d, d)?;
            let vh = tape.slice_cols(v, hd * d, d)?;
            let hop = sp.hop.map(|ids| ids.map(|id| tape.param(&self.params, id)));
            let sig = sp.sigma.map(|a| a.map(|a| self.affine_vars(tape, a)));
            let sbias = ScoreBias {
                hop: hop.map(|h| (h[0], h[1])),
                sigma: sig.map(|s| (s[0], s[1])),
                p2c_key_row: cfg.p2c_uses_key_row,
            };
            let vbias = ValueBias {
                hop: hop.map(|h| h[2]),
                sigma: sig.map(|s| s[2]),
            };
            let e = tape.rel_scores(qh, kh, sbias, bundle.pairs.clone(), bundle.mask.clone(), scale)?;
            let a = tape.row_softmax(e, bundle.mask.clone())?;
            weights.push(a);
            outs.push(tape.rel_values(a, vh, vbias, bundle.pairs.clone(), bundle.mask.clone())?);
        }
        let z = tape.concat(&outs)?;
        self.linear(tape, z, layer.wo)
    }

    /// Records the forward pass and returns the `n × num_classes` logits.
    pub fn logits_on_tape(&self, tape: &mut Tape, bundle: &SpatialBundle, text: &Tensor) -> Result<Var> {
        self.forward(tape, bundle, text, &mut Vec::new())
    }

    /// Attention weights of every head, layer-major.
    pub fn attention_weights(&self, bundle: &SpatialBundle, text: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut w = Vec::new();
        self.forward(&mut tape, bundle, text, &mut w)?;
        Ok(w.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    fn forward(&self, tape: &mut Tape, bundle: &SpatialBundle, text: &Tensor, weights: &mut Vec<Var>) -> Result<Var> {
        let mut x = self.embedder.forward(tape, &self.params, &bundle.normalized, text)?;
        for layer in &self.layers {
            let h = self.norm(tape, x, layer.ln1)?;
            let a = self.attention(tape, h, layer, bundle, weights)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, x, layer.ln2)?;
            let f = self.linear(tape, h, layer.ff1)?;
            let f = tape.gelu(f);
            let f = self.linear(tape, f, layer.ff2)?;
            x = tape.add(x, f)?;
        }
        if let Some(ln) = self.final_ln {
            x = self.norm(tape, x, ln)?;
        }
        self.linear(tape, x, self.classifier)
    }

    pub fn logits(&self, bundle: &SpatialBundle, text: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let l = self.logits_on_tape(&mut tape, bundle, text)?;
        Ok(tape.value(l).clone())
    }

    pub fn probs(&self, bundle: &SpatialBundle, text: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(bundle, text)?))
    }

    /// Loss and one gradient tensor per parameter, in store order.
    pub fn loss_and_grads(
        &self,
        bundle: &SpatialBundle,
        text: &Tensor,
        labels: &[usize],
        schema: &LabelSchema,
        mode: LossMode,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let logits = self.logits_on_tape(&mut tape, bundle, text)?;
        let loss = set_loss_on_tape(&mut tape, logits, labels, schema, mode)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads.param_tensors(&self.params)))
    }

    /// Loss only.
    pub fn loss(
        &self,
        bundle: &SpatialBundle,
        text: &Tensor,
        labels: &[usize],
        schema: &LabelSchema,
        mode: LossMode,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let logits = self.logits_on_tape(&mut tape, bundle, text)?;
        let loss = set_loss_on_tape(&mut tape, logits, labels, schema, mode)?;
        Ok(tape.value(loss).item())
    }
}
