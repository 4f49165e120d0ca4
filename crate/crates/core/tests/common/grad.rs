//! Finite-difference gradient checks for tape ops and the full model.

use std::sync::Arc;

use knnformer::data::{Document, Entity, PageSize};
use knnformer::embedder::TextSource;
use knnformer::geometry::{BBox, SigmaEncoding};
use knnformer::matching::{LabelSchema, LossMode};
use knnformer::model::{Model, ModelConfig, SpatialBundle};
use knnformer::numerics::{AffineVars, Mask, PairFeatures, ScoreBias, Tape, Tensor, ValueBias, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{numeric_grad, random_head, random_vec, rel_error, tape_head, HeadFlags};

pub const STEP: f64 = 1e-5;

fn t(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, random_vec(rng, rows * cols, 1.0)).unwrap()
}

/// Scalar loss: the op's output projected on a fixed random direction.
fn reduce(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let v = tape.value(out);
    if v.is_scalar() {
        return out;
    }
    let cols = v.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = tape.constant(Tensor::matrix(cols, 1, random_vec(&mut rng, cols, 1.0)).unwrap());
    let p = tape.matmul(out, r).unwrap();
    tape.sum(p)
}

/// Largest relative error over the op's inputs.
pub fn check_op(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let run = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let loss = reduce(&mut tape, out, 1);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = run(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (idx, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[idx])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()]);
        let numeric = numeric_grad(x.data(), STEP, |p| {
            let mut vals = inputs.to_vec();
            vals[idx] = Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap();
            let (tp, _, l) = run(&vals);
            tp.value(l).item()
        });
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// `(op name, worst relative error)` for every differentiable op.
pub fn all_op_checks() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    push("matmul", check_op(&[t(3, 4, &mut rng), t(4, 2, &mut rng)], &|tp, v| tp.matmul(v[0], v[1]).unwrap()));
    push("add", check_op(&[t(3, 4, &mut rng), t(3, 4, &mut rng)], &|tp, v| tp.add(v[0], v[1]).unwrap()));
    push("add_row", check_op(&[t(3, 4, &mut rng), t(1, 4, &mut rng)], &|tp, v| tp.add_row(v[0], v[1]).unwrap()));
    push("scale", check_op(&[t(3, 4, &mut rng)], &|tp, v| tp.scale(v[0], -0.7)));
    push("concat", check_op(&[t(3, 2, &mut rng), t(3, 3, &mut rng)], &|tp, v| tp.concat(&[v[0], v[1]]).unwrap()));
    push("slice_cols", check_op(&[t(3, 5, &mut rng)], &|tp, v| tp.slice_cols(v[0], 1, 3).unwrap()));
    push("row_softmax", check_op(&[t(4, 4, &mut rng)], &|tp, v| tp.row_softmax(v[0], None).unwrap()));
    let mask = Arc::new(
        Mask::new(4, vec![true, false, true, false, false, true, true, true, true, false, true, false, false, false, false, true]).unwrap(),
    );
    push("row_softmax_masked", check_op(&[t(4, 4, &mut rng)], &move |tp, v| tp.row_softmax(v[0], Some(mask.clone())).unwrap()));
    push(
        "layer_norm",
        check_op(&[t(3, 5, &mut rng), t(1, 5, &mut rng), t(1, 5, &mut rng)], &|tp, v| tp.layer_norm(v[0], v[1], v[2]).unwrap()),
    );
    push("gelu", check_op(&[t(3, 4, &mut rng)], &|tp, v| tp.gelu(v[0])));
    push("embedding", check_op(&[t(5, 3, &mut rng)], &|tp, v| tp.embedding(v[0], &[0, 2, 2, 4]).unwrap()));
    push("cross_entropy", check_op(&[t(4, 5, &mut rng)], &|tp, v| tp.cross_entropy(v[0], &[1, 0, 4, 4]).unwrap()));
    push("sum", check_op(&[t(3, 4, &mut rng)], &|tp, v| tp.sum(v[0])));

    // relative scores without a mask, every bias combination
    let (n, d, w, nb) = (5, 3, 2, 4);
    let buckets: Vec<usize> = (0..n * n).map(|_| rng.random_range(0..nb)).collect();
    let sigma = random_vec(&mut rng, n * n * w, 1.0);
    let pairs = Arc::new(PairFeatures::new(n, buckets, sigma, w).unwrap());
    for hop in [false, true] {
        for sig in [false, true] {
            for p2c in [false, true] {
                let inputs = [
                    t(n, d, &mut rng),
                    t(n, d, &mut rng),
                    t(nb, d, &mut rng),
                    t(nb, d, &mut rng),
                    t(w, d, &mut rng),
                    t(1, d, &mut rng),
                    t(w, d, &mut rng),
                    t(1, d, &mut rng),
                ];
                let pairs = pairs.clone();
                let e = check_op(&inputs, &move |tp, v| {
                    let bias = ScoreBias {
                        hop: hop.then_some((v[2], v[3])),
                        sigma: sig.then_some((
                            AffineVars { weight: v[4], bias: v[5] },
                            AffineVars { weight: v[6], bias: v[7] },
                        )),
                        p2c_key_row: p2c,
                    };
                    tp.rel_scores(v[0], v[1], bias, pairs.clone(), None, 0.6).unwrap()
                });
                push(&format!("rel_scores[hop={hop},sigma={sig},p2c_key_row={p2c}]"), e);
            }
        }
    }
    // relative values with a mask
    for hop in [false, true] {
        for sig in [false, true] {
            let a = Tensor::matrix(n, n, (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let inputs = [a, t(n, d, &mut rng), t(nb, d, &mut rng), t(w, d, &mut rng), t(1, d, &mut rng)];
            let allowed: Vec<bool> = (0..n * n).map(|i| i % 3 != 1 || i / n == i % n).collect();
            let m = Arc::new(Mask::new(n, allowed).unwrap());
            let pairs = pairs.clone();
            let e = check_op(&inputs, &move |tp, v| {
                let bias = ValueBias {
                    hop: hop.then_some(v[2]),
                    sigma: sig.then_some(AffineVars { weight: v[3], bias: v[4] }),
                };
                tp.rel_values(v[0], v[1], bias, pairs.clone(), Some(m.clone())).unwrap()
            });
            push(&format!("rel_values[hop={hop},sigma={sig}]"), e);
        }
    }
    // a whole masked head: projections, scores, softmax, values
    for seed in 0..4u64 {
        let fl = HeadFlags {
            hop: seed & 1 == 1,
            sigma: seed & 2 == 2,
            p2c_key_row: seed == 3,
            masked: true,
        };
        let mut r2 = ChaCha8Rng::seed_from_u64(100 + seed);
        let h = random_head(&mut r2, 5, 2, 2, 6, 0.5);
        let base = h.clone();
        let leaves: Vec<Tensor> = {
            let mut tape = Tape::new();
            let hv = tape_head(&mut tape, &base, fl);
            hv.leaves.iter().map(|v| tape.value(*v).clone()).collect()
        };
        let e = check_op(&leaves, &move |tp, v| {
            let mut h = base.clone();
            let get = |i: usize| tp.value(v[i]).data().to_vec();
            h.x = get(0);
            h.wq = get(1);
            h.wk = get(2);
            h.wv = get(3);
            h.hq = get(4);
            h.hk = get(5);
            h.hv = get(6);
            h.rq = (get(7), get(8));
            h.rk = (get(9), get(10));
            h.rv = (get(11), get(12));
            // rebuild on the same tape from the given leaves
            head_from_leaves(tp, &h, v, fl)
        });
        push(&format!("attention_head[{fl:?}]"), e);
    }
    out
}

fn head_from_leaves(tape: &mut Tape, h: &super::HeadInputs, v: &[Var], fl: HeadFlags) -> Var {
    let q = tape.matmul(v[0], v[1]).unwrap();
    let k = tape.matmul(v[0], v[2]).unwrap();
    let val = tape.matmul(v[0], v[3]).unwrap();
    let pairs = Arc::new(PairFeatures::new(h.n, h.buckets.clone(), h.sigma.clone(), h.w).unwrap());
    let mask = Some(Arc::new(Mask::new(h.n, h.allowed.clone()).unwrap()));
    let sb = ScoreBias {
        hop: fl.hop.then_some((v[4], v[5])),
        sigma: fl.sigma.then_some((
            AffineVars { weight: v[7], bias: v[8] },
            AffineVars { weight: v[9], bias: v[10] },
        )),
        p2c_key_row: fl.p2c_key_row,
    };
    let vb = ValueBias {
        hop: fl.hop.then_some(v[6]),
        sigma: fl.sigma.then_some(AffineVars { weight: v[11], bias: v[12] }),
    };
    let e = tape.rel_scores(q, k, sb, pairs.clone(), mask.clone(), 1.0 / (h.d as f64).sqrt()).unwrap();
    let a = tape.row_softmax(e, mask.clone()).unwrap();
    tape.rel_values(a, val, vb, pairs, mask).unwrap()
}

/// Five entities laid out so that a 1-NN graph has two components.
pub fn five_entity_doc() -> Document {
    let boxes = [
        (10.0, 10.0, 60.0, 22.0),
        (70.0, 12.0, 130.0, 24.0),
        (15.0, 80.0, 50.0, 95.0),
        (150.0, 150.0, 190.0, 165.0),
        (155.0, 175.0, 185.0, 190.0),
    ];
    let texts = ["Surname", "SMITH", "12.03.1990", "Given names", "ANNA"];
    let cats = [6, 0, 2, 6, 1];
    Document {
        id: "grad".into(),
        tag: None,
        page: PageSize { w: 200.0, h: 200.0 },
        entities: boxes
            .iter()
            .zip(texts)
            .zip(cats)
            .map(|((b, t), c)| Entity {
                bbox: BBox::new(b.0, b.1, b.2, b.3),
                text: t.into(),
                category: Some(c),
            })
            .collect(),
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        ffn_ratio: 2,
        text_dim: 8,
        size_dim: 4,
        k: 1,
        hop_threshold: 1,
        max_bucket: 2,
        ..ModelConfig::default()
    }
}

/// Every parameter of the model against central differences of its loss.
pub fn check_model(cfg: &ModelConfig, seed: u64) -> f64 {
    let schema = LabelSchema::poi();
    let doc = five_entity_doc();
    let labels = doc.labels().unwrap();
    let bundle = SpatialBundle::from_document(&doc, cfg).unwrap();
    let text = TextSource::Hashed { dim: cfg.text_dim }.features(&doc).unwrap();
    let mode = if cfg.use_matching {
        LossMode::MatchedCe
    } else {
        LossMode::PerEntityCe
    };
    let mut model = Model::new(cfg, seed).unwrap();
    let (_, analytic) = model.loss_and_grads(&bundle, &text, &labels, &schema, mode).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst: f64 = 0.0;
    for (id, a) in ids.into_iter().zip(&analytic) {
        let base = model.params().get(id).data().to_vec();
        let mut numeric = Vec::with_capacity(base.len());
        for k in 0..base.len() {
            let mut eval = |delta: f64| {
                model.params_mut().get_mut(id).data_mut()[k] = base[k] + delta;
                let l = model.loss(&bundle, &text, &labels, &schema, mode).unwrap();
                model.params_mut().get_mut(id).data_mut()[k] = base[k];
                l
            };
            numeric.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP));
        }
        worst = worst.max(rel_error(a.data(), &numeric));
    }
    worst
}

/// Every combination of the five ablation switches, plus the variant flags.
pub fn model_configs() -> Vec<(String, ModelConfig)> {
    let mut out = Vec::new();
    for bits in 0..32u32 {
        let cfg = ModelConfig {
            use_hop_bias: bits & 1 != 0,
            use_local_mask: bits & 2 != 0,
            use_sigma_bias: bits & 4 != 0,
            use_matching: bits & 8 != 0,
            use_abs_pos: bits & 16 != 0,
            ..tiny_config()
        };
        let name = format!(
            "hop={} local={} sigma={} matching={} abspos={}",
            cfg.use_hop_bias, cfg.use_local_mask, cfg.use_sigma_bias, cfg.use_matching, cfg.use_abs_pos
        );
        out.push((name, cfg));
    }
    out.push((
        "p2c_uses_key_row".into(),
        ModelConfig {
            p2c_uses_key_row: true,
            ..tiny_config()
        },
    ));
    out.push((
        "share_spatial_across_layers".into(),
        ModelConfig {
            share_spatial_across_layers: true,
            ..tiny_config()
        },
    ));
    out.push((
        "sin_cos".into(),
        ModelConfig {
            sigma_encoding: SigmaEncoding::SinCos,
            ..tiny_config()
        },
    ));
    out
}
