//! Reverse-mode tape. Every op appends a node holding its value and enough
//! context to push gradients back to its inputs.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{axpy, dot, matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{Mask, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Per-document pair features shared by every attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeatures {
    n: usize,
    buckets: Vec<usize>,
    sigma: Vec<f64>,
    width: usize,
}

impl PairFeatures {
    /// `buckets` is `n × n`; `sigma` is `n × n × width`.
    pub fn new(n: usize, buckets: Vec<usize>, sigma: Vec<f64>, width: usize) -> Result<Self> {
        if buckets.len() != n * n || sigma.len() != n * n * width {
            return Err(Error::InvalidShape(format!(
                "pair features for n={n}: {} buckets, {} sigma values (width {width})",
                buckets.len(),
                sigma.len()
            )));
        }
        Ok(PairFeatures {
            n,
            buckets,
            sigma,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bucket(&self, i: usize, j: usize) -> usize {
        self.buckets[i * self.n + j]
    }

    pub fn sigma(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.n + j) * self.width;
        &self.sigma[o..o + self.width]
    }

    pub fn max_bucket(&self) -> usize {
        self.buckets.iter().copied().max().unwrap_or(0)
    }
}

/// Affine map `σ ↦ σ·W + b` with `W` of shape `width × d` and `b` of length `d`.
#[derive(Debug, Clone, Copy)]
pub struct AffineVars {
    pub weight: Var,
    pub bias: Var,
}

/// Optional relative terms of the attention score.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreBias {
    /// Hop lookup tables `(H^Q, H^K)`, each `buckets × d`.
    pub hop: Option<(Var, Var)>,
    /// Distance/angle maps `(R^Q, R^K)`.
    pub sigma: Option<(AffineVars, AffineVars)>,
    /// Use `x_j W^K` instead of `x_i W^K` in the position-to-content term.
    pub p2c_key_row: bool,
}

/// Optional relative terms added to the values.
#[derive(Debug, Clone, Copy, Default)]
pub struct ValueBias {
    pub hop: Option<Var>,
    pub sigma: Option<AffineVars>,
}

#[derive(Debug)]
struct ScoresNode {
    q: Var,
    k: Var,
    bias: ScoreBias,
    pairs: Arc<PairFeatures>,
    mask: Option<Arc<Mask>>,
    scale: f64,
}

#[derive(Debug)]
struct ValuesNode {
    a: Var,
    v: Var,
    bias: ValueBias,
    pairs: Arc<PairFeatures>,
    mask: Option<Arc<Mask>>,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Softmax { x: Var, mask: Option<Arc<Mask>> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Embedding { table: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Scores(Box<ScoresNode>),
    Values(Box<ValuesNode>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    nodes: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    /// Gradient with respect to any recorded node, `None` if unreached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// One tensor per stored parameter, zeros for parameters the loss did
    /// not touch.
    pub fn param_tensors(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                let mut t = Tensor::zeros(store.get(id).shape());
                if let Some(g) = self.param(id) {
                    t.data_mut().copy_from_slice(g);
                }
                t
            })
            .collect()
    }
}

fn shape_err(what: &str, detail: String) -> Error {
    Error::InvalidShape(format!("{what}: {detail}"))
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so each parameter receives one accumulated gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(bias).len() != n {
            return Err(shape_err(
                "add_row",
                format!("{m}x{n} + bias of {}", self.value(bias).len()),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, s))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs".into()));
        };
        let m = self.dims(first).0;
        if let Some(bad) = parts.iter().find(|p| self.dims(**p).0 != m) {
            return Err(shape_err(
                "concat",
                format!("row mismatch {m} vs {}", self.dims(*bad).0),
            ));
        }
        let n: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&self.value(x).row(r)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { x, start }))
    }

    /// Row softmax. Disallowed entries come out exactly zero and their input
    /// values are never read.
    pub fn row_softmax(&mut self, x: Var, mask: Option<Arc<Mask>>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(mask) = &mask {
            if mask.rows() != m || mask.cols() != n {
                return Err(shape_err(
                    "row_softmax",
                    format!("mask {}x{} for {m}x{n}", mask.rows(), mask.cols()),
                ));
            }
        }
        let allowed = |i: usize, j: usize| mask.as_ref().is_none_or(|mk| mk.allowed(i, j));
        let xs = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for j in 0..n {
                if allowed(i, j) {
                    any = true;
                    max = max.max(xs[i * n + j]);
                }
            }
            if !any {
                return Err(Error::InvalidMask { row: i });
            }
            let mut total = 0.0;
            for j in 0..n {
                if allowed(i, j) {
                    let e = (xs[i * n + j] - max).exp();
                    out[i * n + j] = e;
                    total += e;
                }
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= total;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax { x, mask }))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", format!("width {n}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mean) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Gelu(x))
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table);
        if indices.is_empty() {
            return Err(shape_err("embedding", "no indices".into()));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err(
                "embedding",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(self.value(table).row(i));
        }
        let t = Tensor::matrix(indices.len(), d, out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of each row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, c) = self.dims(logits);
        if targets.len() != m {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("class {bad} of {c}")));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for r in 0..m {
            let row = &xs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            loss += lse - row[targets[r]];
        }
        let t = Tensor::scalar(loss / m as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Relative attention scores for one head:
    ///
    /// `e_ij = [q_i·(k_j + H^Q[b_ij] + R^Q(σ_ij)) + (H^K[b_ij] + R^K(σ_ij))·k_p] · scale`
    ///
    /// where `k_p` is `k_i` (or `k_j` when `p2c_key_row` is set). Pairs outside
    /// `mask` are not evaluated and hold `-inf`.
    pub fn rel_scores(
        &mut self,
        q: Var,
        k: Var,
        bias: ScoreBias,
        pairs: Arc<PairFeatures>,
        mask: Option<Arc<Mask>>,
        scale: f64,
    ) -> Result<Var> {
        let (n, d) = self.dims(q);
        if self.dims(k) != (n, d) || pairs.n != n {
            return Err(shape_err(
                "rel_scores",
                format!("q {n}x{d}, k {:?}, pairs {}", self.dims(k), pairs.n),
            ));
        }
        if let Some(mk) = &mask {
            if mk.rows() != n || mk.cols() != n {
                return Err(shape_err("rel_scores", format!("mask {}x{}", mk.rows(), mk.cols())));
            }
        }
        self.check_bias_shapes(d, &pairs, bias.hop.map(|(a, b)| [a, b]).as_ref().map(|v| &v[..]))?;
        if let Some((rq, rk)) = bias.sigma {
            self.check_affine(rq, pairs.width, d)?;
            self.check_affine(rk, pairs.width, d)?;
        }

        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let hop = bias.hop.map(|(hq, hk)| (self.value(hq).data(), self.value(hk).data()));
        let sig = bias.sigma.map(|(rq, rk)| {
            (
                self.value(rq.weight).data(),
                self.value(rq.bias).data(),
                self.value(rk.weight).data(),
                self.value(rk.bias).data(),
            )
        });
        let has_p2c = hop.is_some() || sig.is_some();
        let w = pairs.width;
        let mut out = vec![f64::NEG_INFINITY; n * n];
        let mut t = vec![0.0; d];
        let mut u = vec![0.0; d];
        for i in 0..n {
            let qi = &qs[i * d..(i + 1) * d];
            for j in 0..n {
                if let Some(mk) = &mask {
                    if !mk.allowed(i, j) {
                        continue;
                    }
                }
                t.copy_from_slice(&ks[j * d..(j + 1) * d]);
                let b = pairs.bucket(i, j);
                if let Some((hq, _)) = hop {
                    for (tv, hv) in t.iter_mut().zip(&hq[b * d..(b + 1) * d]) {
                        *tv += hv;
                    }
                }
                if let Some((wq, bq, _, _)) = sig {
                    affine_add(pairs.sigma(i, j), wq, bq, w, d, &mut t);
                }
                let mut s = dot(qi, &t);
                if has_p2c {
                    u.fill(0.0);
                    if let Some((_, hk)) = hop {
                        u.copy_from_slice(&hk[b * d..(b + 1) * d]);
                    }
                    if let Some((_, _, wk, bk)) = sig {
                        affine_add(pairs.sigma(i, j), wk, bk, w, d, &mut u);
                    }
                    let p = if bias.p2c_key_row { j } else { i };
                    s += dot(&u, &ks[p * d..(p + 1) * d]);
                }
                out[i * n + j] = s * scale;
            }
        }
        let t = Tensor::matrix(n, n, out)?;
        Ok(self.push(
            t,
            Op::Scores(Box::new(ScoresNode {
                q,
                k,
                bias,
                pairs,
                mask,
                scale,
            })),
        ))
    }

    /// `z_i = Σ_j a_ij (v_j + H^V[b_ij] + R^V(σ_ij))`, skipping pairs outside
    /// `mask`.
    pub fn rel_values(
        &mut self,
        a: Var,
        v: Var,
        bias: ValueBias,
        pairs: Arc<PairFeatures>,
        mask: Option<Arc<Mask>>,
    ) -> Result<Var> {
        let (n, d) = self.dims(v);
        if self.dims(a) != (n, n) || pairs.n != n {
            return Err(shape_err(
                "rel_values",
                format!("a {:?}, v {n}x{d}, pairs {}", self.dims(a), pairs.n),
            ));
        }
        self.check_bias_shapes(d, &pairs, bias.hop.map(|h| [h]).as_ref().map(|v| &v[..]))?;
        if let Some(rv) = bias.sigma {
            self.check_affine(rv, pairs.width, d)?;
        }
        let av = self.value(a).data();
        let vs = self.value(v).data();
        let hv = bias.hop.map(|h| self.value(h).data());
        let rv = bias
            .sigma
            .map(|r| (self.value(r.weight).data(), self.value(r.bias).data()));
        let w = pairs.width;
        let mut out = vec![0.0; n * d];
        let mut t = vec![0.0; d];
        for i in 0..n {
            for j in 0..n {
                if let Some(mk) = &mask {
                    if !mk.allowed(i, j) {
                        continue;
                    }
                }
                let aij = av[i * n + j];
                t.copy_from_slice(&vs[j * d..(j + 1) * d]);
                if let Some(hv) = hv {
                    let b = pairs.bucket(i, j);
                    for (tv, h) in t.iter_mut().zip(&hv[b * d..(b + 1) * d]) {
                        *tv += h;
                    }
                }
                if let Some((wv, bv)) = rv {
                    affine_add(pairs.sigma(i, j), wv, bv, w, d, &mut t);
                }
                axpy(aij, &t, &mut out[i * d..(i + 1) * d]);
            }
        }
        let t = Tensor::matrix(n, d, out)?;
        Ok(self.push(
            t,
            Op::Values(Box::new(ValuesNode {
                a,
                v,
                bias,
                pairs,
                mask,
            })),
        ))
    }

    fn check_bias_shapes(&self, d: usize, pairs: &PairFeatures, tables: Option<&[Var]>) -> Result<()> {
        for &tab in tables.unwrap_or(&[]) {
            let (rows, cols) = self.dims(tab);
            if cols != d || rows <= pairs.max_bucket() {
                return Err(shape_err(
                    "hop table",
                    format!("{rows}x{cols} for width {d} and bucket {}", pairs.max_bucket()),
                ));
            }
        }
        Ok(())
    }

    fn check_affine(&self, r: AffineVars, width: usize, d: usize) -> Result<()> {
        if self.dims(r.weight) != (width, d) || self.value(r.bias).len() != d {
            return Err(shape_err(
                "sigma map",
                format!(
                    "weight {:?}, bias {} for {width}->{d}",
                    self.dims(r.weight),
                    self.value(r.bias).len()
                ),
            ));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidInput(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads {
            nodes: grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                matmul_bt_acc(g, bv, slot(grads, *a, m * k), m, n, k);
                matmul_at_acc(av, g, slot(grads, *b, k * n), m, k, n);
            }
            Op::Add(a, b) => {
                axpy(1.0, g, slot(grads, *a, g.len()));
                axpy(1.0, g, slot(grads, *b, g.len()));
            }
            Op::AddRow(a, b) => {
                axpy(1.0, g, slot(grads, *a, g.len()));
                let n = self.value(*b).len();
                let gb = slot(grads, *b, n);
                for row in g.chunks(n) {
                    axpy(1.0, row, gb);
                }
            }
            Op::Scale(a, s) => axpy(*s, g, slot(grads, *a, g.len())),
            Op::Concat(parts) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let mut off = 0;
                for p in parts {
                    let w = self.dims(*p).1;
                    let gp = slot(grads, *p, m * w);
                    for r in 0..m {
                        axpy(1.0, &g[r * n + off..r * n + off + w], &mut gp[r * w..(r + 1) * w]);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let w = node.value.cols();
                let gx = slot(grads, *x, m * n);
                for r in 0..m {
                    axpy(1.0, &g[r * w..(r + 1) * w], &mut gx[r * n + start..r * n + start + w]);
                }
            }
            Op::Softmax { x, mask } => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let y = node.value.data();
                let gx = slot(grads, *x, m * n);
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let inner = dot(yr, gr);
                    for j in 0..n {
                        if mask.as_ref().is_none_or(|mk| mk.allowed(i, j)) {
                            gx[i * n + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gain).data();
                {
                    let gg = slot(grads, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                {
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        axpy(1.0, row, gb);
                    }
                }
                let gx = slot(grads, *x, m * n);
                let nf = n as f64;
                for r in 0..m {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for c in 0..n {
                        let dh = g[r * n + c] * gv[c];
                        s1 += dh;
                        s2 += dh * xhat[r * n + c];
                    }
                    for c in 0..n {
                        let dh = g[r * n + c] * gv[c];
                        gx[r * n + c] += inv_std[r] / nf * (nf * dh - s1 - xhat[r * n + c] * s2);
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let gx = slot(grads, *x, xs.len());
                for (i, &v) in xs.iter().enumerate() {
                    let inner = GELU_C * (v + GELU_A * v * v * v);
                    let th = inner.tanh();
                    let d = 0.5 * (1.0 + th)
                        + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gx[i] += g[i] * d;
                }
            }
            Op::Embedding { table, indices } => {
                let (rows, d) = self.dims(*table);
                let gt = slot(grads, *table, rows * d);
                for (r, &i) in indices.iter().enumerate() {
                    axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, c) = self.dims(*logits);
                let scale = g[0] / m as f64;
                let gl = slot(grads, *logits, m * c);
                for r in 0..m {
                    for j in 0..c {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                let gx = slot(grads, *x, len);
                for v in gx.iter_mut() {
                    *v += g[0];
                }
            }
            Op::Scores(sn) => self.backprop_scores(sn, g, grads),
            Op::Values(vn) => self.backprop_values(vn, g, grads),
        }
    }

    fn backprop_scores(&self, sn: &ScoresNode, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, d) = self.dims(sn.q);
        let w = sn.pairs.width;
        let qs = self.value(sn.q).data();
        let ks = self.value(sn.k).data();
        let hop = sn.bias.hop;
        let sig = sn.bias.sigma;
        let has_p2c = hop.is_some() || sig.is_some();

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let hop_rows = hop.map_or(0, |(hq, _)| self.dims(hq).0);
        let mut dhq = vec![0.0; hop_rows * d];
        let mut dhk = vec![0.0; hop_rows * d];
        let mut dwq = vec![0.0; w * d];
        let mut dbq = vec![0.0; d];
        let mut dwk = vec![0.0; w * d];
        let mut dbk = vec![0.0; d];

        let mut t = vec![0.0; d];
        let mut u = vec![0.0; d];
        for i in 0..n {
            let qi = &qs[i * d..(i + 1) * d];
            for j in 0..n {
                if let Some(mk) = &sn.mask {
                    if !mk.allowed(i, j) {
                        continue;
                    }
                }
                let gij = g[i * n + j] * sn.scale;
                if gij == 0.0 {
                    continue;
                }
                let b = sn.pairs.bucket(i, j);
                let sigma = sn.pairs.sigma(i, j);
                // content-to-content and content-to-position
                t.copy_from_slice(&ks[j * d..(j + 1) * d]);
                if let Some((hq, _)) = hop {
                    let hqv = self.value(hq).data();
                    axpy(1.0, &hqv[b * d..(b + 1) * d], &mut t);
                    axpy(gij, qi, &mut dhq[b * d..(b + 1) * d]);
                }
                if let Some((rq, _)) = sig {
                    affine_add(
                        sigma,
                        self.value(rq.weight).data(),
                        self.value(rq.bias).data(),
                        w,
                        d,
                        &mut t,
                    );
                    for (s, sv) in sigma.iter().enumerate() {
                        axpy(gij * sv, qi, &mut dwq[s * d..(s + 1) * d]);
                    }
                    axpy(gij, qi, &mut dbq);
                }
                axpy(gij, &t, &mut dq[i * d..(i + 1) * d]);
                axpy(gij, qi, &mut dk[j * d..(j + 1) * d]);

                // position-to-content
                if has_p2c {
                    let p = if sn.bias.p2c_key_row { j } else { i };
                    let kp = &ks[p * d..(p + 1) * d];
                    u.fill(0.0);
                    if let Some((_, hk)) = hop {
                        let hkv = self.value(hk).data();
                        u.copy_from_slice(&hkv[b * d..(b + 1) * d]);
                        axpy(gij, kp, &mut dhk[b * d..(b + 1) * d]);
                    }
                    if let Some((_, rk)) = sig {
                        affine_add(
                            sigma,
                            self.value(rk.weight).data(),
                            self.value(rk.bias).data(),
                            w,
                            d,
                            &mut u,
                        );
                        for (s, sv) in sigma.iter().enumerate() {
                            axpy(gij * sv, kp, &mut dwk[s * d..(s + 1) * d]);
                        }
                        axpy(gij, kp, &mut dbk);
                    }
                    axpy(gij, &u, &mut dk[p * d..(p + 1) * d]);
                }
            }
        }
        axpy(1.0, &dq, slot(grads, sn.q, n * d));
        axpy(1.0, &dk, slot(grads, sn.k, n * d));
        if let Some((hq, hk)) = hop {
            axpy(1.0, &dhq, slot(grads, hq, hop_rows * d));
            axpy(1.0, &dhk, slot(grads, hk, hop_rows * d));
        }
        if let Some((rq, rk)) = sig {
            axpy(1.0, &dwq, slot(grads, rq.weight, w * d));
            axpy(1.0, &dbq, slot(grads, rq.bias, d));
            axpy(1.0, &dwk, slot(grads, rk.weight, w * d));
            axpy(1.0, &dbk, slot(grads, rk.bias, d));
        }
    }

    fn backprop_values(&self, vn: &ValuesNode, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (n, d) = self.dims(vn.v);
        let w = vn.pairs.width;
        let av = self.value(vn.a).data();
        let vs = self.value(vn.v).data();
        let hv = vn.bias.hop.map(|h| self.value(h).data());
        let rv = vn
            .bias
            .sigma
            .map(|r| (self.value(r.weight).data(), self.value(r.bias).data()));
        let hop_rows = vn.bias.hop.map_or(0, |h| self.dims(h).0);

        let mut da = vec![0.0; n * n];
        let mut dv = vec![0.0; n * d];
        let mut dh = vec![0.0; hop_rows * d];
        let mut dw = vec![0.0; w * d];
        let mut db = vec![0.0; d];
        let mut t = vec![0.0; d];
        for i in 0..n {
            let gi = &g[i * d..(i + 1) * d];
            for j in 0..n {
                if let Some(mk) = &vn.mask {
                    if !mk.allowed(i, j) {
                        continue;
                    }
                }
                let aij = av[i * n + j];
                let b = vn.pairs.bucket(i, j);
                let sigma = vn.pairs.sigma(i, j);
                t.copy_from_slice(&vs[j * d..(j + 1) * d]);
                if let Some(hv) = hv {
                    axpy(1.0, &hv[b * d..(b + 1) * d], &mut t);
                    axpy(aij, gi, &mut dh[b * d..(b + 1) * d]);
                }
                if let Some((wv, bv)) = rv {
                    affine_add(sigma, wv, bv, w, d, &mut t);
                    for (s, sv) in sigma.iter().enumerate() {
                        axpy(aij * sv, gi, &mut dw[s * d..(s + 1) * d]);
                    }
                    axpy(aij, gi, &mut db);
                }
                da[i * n + j] = dot(gi, &t);
                axpy(aij, gi, &mut dv[j * d..(j + 1) * d]);
            }
        }
        axpy(1.0, &da, slot(grads, vn.a, n * n));
        axpy(1.0, &dv, slot(grads, vn.v, n * d));
        if let Some(h) = vn.bias.hop {
            axpy(1.0, &dh, slot(grads, h, hop_rows * d));
        }
        if let Some(r) = vn.bias.sigma {
            axpy(1.0, &dw, slot(grads, r.weight, w * d));
            axpy(1.0, &db, slot(grads, r.bias, d));
        }
    }
}

/// `out += σ·W + b`.
#[inline]
fn affine_add(sigma: &[f64], weight: &[f64], bias: &[f64], w: usize, d: usize, out: &mut [f64]) {
    for (o, b) in out.iter_mut().zip(bias) {
        *o += b;
    }
    for s in 0..w {
        axpy(sigma[s], &weight[s * d..(s + 1) * d], out);
    }
}
