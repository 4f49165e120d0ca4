//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use knnformer::numerics::Tensor;

/// `‖a − b‖ / max(‖a‖ + ‖b‖, 1e-6)`; the floor keeps rounding noise on
/// vanishing gradients from reading as a large relative error.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-6)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum assignment cost by enumerating every permutation.
pub fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
    permutations(n)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// All-pairs hop counts; `u32::MAX` for unreachable pairs.
pub fn floyd_warshall(adj: &[bool], n: usize) -> Vec<u32> {
    const INF: u64 = u64::MAX / 4;
    let mut d = vec![INF; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                d[i * n + j] = 0;
            } else if adj[i * n + j] {
                d[i * n + j] = 1;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i * n + k] + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d.into_iter().map(|v| if v >= INF { u32::MAX } else { v as u32 }).collect()
}

/// Indices of the `k` nearest other points, ties to the lower index, by
/// sorting full rows.
pub fn knn_lists(points: &[(f64, f64)], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = points[j].0 - points[i].0;
                    let dy = points[j].1 - points[i].1;
                    ((dx * dx + dy * dy).sqrt(), j)
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Inputs of one attention head written out as plain arrays.
#[derive(Debug, Clone)]
pub struct HeadInputs {
    pub n: usize,
    pub d: usize,
    pub w: usize,
    /// Token features `n × f` and projections `f × d`.
    pub x: Vec<f64>,
    pub f: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    /// Hop tables `buckets × d`.
    pub hq: Vec<f64>,
    pub hk: Vec<f64>,
    pub hv: Vec<f64>,
    /// Distance/angle maps: weights `w × d`, biases `d`.
    pub rq: (Vec<f64>, Vec<f64>),
    pub rk: (Vec<f64>, Vec<f64>),
    pub rv: (Vec<f64>, Vec<f64>),
    pub buckets: Vec<usize>,
    pub sigma: Vec<f64>,
    pub allowed: Vec<bool>,
}

fn row_times(x: &[f64], row: usize, f: usize, m: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| (0..f).map(|t| x[row * f + t] * m[t * d + c]).sum())
        .collect()
}

fn affine(s: &[f64], r: &(Vec<f64>, Vec<f64>), d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| r.1[c] + s.iter().enumerate().map(|(t, sv)| sv * r.0[t * d + c]).sum::<f64>())
        .collect()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl HeadInputs {
    pub fn sigma_at(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.n + j) * self.w;
        &self.sigma[o..o + self.w]
    }

    /// `e_ij` straight from the formula, `-inf` where masked.
    pub fn scores(&self, hop: bool, sig: bool, p2c_key_row: bool) -> Vec<f64> {
        let (n, d) = (self.n, self.d);
        let mut e = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            let qi = row_times(&self.x, i, self.f, &self.wq, d);
            let ki = row_times(&self.x, i, self.f, &self.wk, d);
            for j in 0..n {
                if !self.allowed[i * n + j] {
                    continue;
                }
                let kj = row_times(&self.x, j, self.f, &self.wk, d);
                let b = self.buckets[i * n + j];
                let s = self.sigma_at(i, j);
                let zero = vec![0.0; d];
                let hq = if hop { self.hq[b * d..(b + 1) * d].to_vec() } else { zero.clone() };
                let hk = if hop { self.hk[b * d..(b + 1) * d].to_vec() } else { zero.clone() };
                let rq = if sig { affine(s, &self.rq, d) } else { zero.clone() };
                let rk = if sig { affine(s, &self.rk, d) } else { zero.clone() };
                let c2c_and_c2p: Vec<f64> = (0..d).map(|c| kj[c] + hq[c] + rq[c]).collect();
                let pos: Vec<f64> = (0..d).map(|c| hk[c] + rk[c]).collect();
                let kp = if p2c_key_row { &kj } else { &ki };
                let mut v = dotp(&qi, &c2c_and_c2p);
                if hop || sig {
                    v += dotp(&pos, kp);
                }
                e[i * n + j] = v / (d as f64).sqrt();
            }
        }
        e
    }

    /// Row softmax over allowed entries.
    pub fn weights(&self, e: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            let mut den = 0.0;
            for j in 0..n {
                if self.allowed[i * n + j] {
                    den += e[i * n + j].exp();
                }
            }
            for j in 0..n {
                if self.allowed[i * n + j] {
                    a[i * n + j] = e[i * n + j].exp() / den;
                }
            }
        }
        a
    }

    pub fn output(&self, a: &[f64], hop: bool, sig: bool) -> Vec<f64> {
        let (n, d) = (self.n, self.d);
        let mut z = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..n {
                if !self.allowed[i * n + j] {
                    continue;
                }
                let vj = row_times(&self.x, j, self.f, &self.wv, d);
                let b = self.buckets[i * n + j];
                let rv = affine(self.sigma_at(i, j), &self.rv, d);
                for c in 0..d {
                    let mut t = vj[c];
                    if hop {
                        t += self.hv[b * d + c];
                    }
                    if sig {
                        t += rv[c];
                    }
                    z[i * d + c] += a[i * n + j] * t;
                }
            }
        }
        z
    }
}

pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).unwrap()
}

use std::sync::Arc;

use knnformer::numerics::{AffineVars, Mask, PairFeatures, ScoreBias, Tape, ValueBias};
use rand::Rng;

pub fn random_vec<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Random head inputs; `mask_density` below 1 knocks out off-diagonal pairs.
pub fn random_head<R: Rng>(rng: &mut R, n: usize, d: usize, w: usize, buckets: usize, mask_density: f64) -> HeadInputs {
    let f = d + 1;
    let allowed = (0..n * n)
        .map(|idx| idx / n == idx % n || rng.random_bool(mask_density))
        .collect();
    HeadInputs {
        n,
        d,
        w,
        f,
        x: random_vec(rng, n * f, 1.0),
        wq: random_vec(rng, f * d, 1.0),
        wk: random_vec(rng, f * d, 1.0),
        wv: random_vec(rng, f * d, 1.0),
        hq: random_vec(rng, buckets * d, 1.0),
        hk: random_vec(rng, buckets * d, 1.0),
        hv: random_vec(rng, buckets * d, 1.0),
        rq: (random_vec(rng, w * d, 1.0), random_vec(rng, d, 1.0)),
        rk: (random_vec(rng, w * d, 1.0), random_vec(rng, d, 1.0)),
        rv: (random_vec(rng, w * d, 1.0), random_vec(rng, d, 1.0)),
        buckets: (0..n * n).map(|_| rng.random_range(0..buckets)).collect(),
        sigma: random_vec(rng, n * n * w, 1.0),
        allowed,
    }
}

/// Which relative terms a head uses.
#[derive(Debug, Clone, Copy)]
pub struct HeadFlags {
    pub hop: bool,
    pub sigma: bool,
    pub p2c_key_row: bool,
    pub masked: bool,
}

/// Leaf variables of a head recorded on a tape, in a fixed order.
pub struct HeadVars {
    pub leaves: Vec<knnformer::numerics::Var>,
    pub scores: knnformer::numerics::Var,
    pub weights: knnformer::numerics::Var,
    pub output: knnformer::numerics::Var,
}

/// The head through the library's tape ops. `leaves` order: x, wq, wk, wv,
/// hq, hk, hv, rq.w, rq.b, rk.w, rk.b, rv.w, rv.b.
pub fn tape_head(tape: &mut Tape, h: &HeadInputs, fl: HeadFlags) -> HeadVars {
    let (n, d, w, f) = (h.n, h.d, h.w, h.f);
    let buckets = h.hq.len() / d;
    let mut c = |rows: usize, cols: usize, v: &Vec<f64>| tape.constant(matrix(rows, cols, v.clone()));
    let x = c(n, f, &h.x);
    let wq = c(f, d, &h.wq);
    let wk = c(f, d, &h.wk);
    let wv = c(f, d, &h.wv);
    let hq = c(buckets, d, &h.hq);
    let hk = c(buckets, d, &h.hk);
    let hv = c(buckets, d, &h.hv);
    let rqw = c(w, d, &h.rq.0);
    let rqb = c(1, d, &h.rq.1);
    let rkw = c(w, d, &h.rk.0);
    let rkb = c(1, d, &h.rk.1);
    let rvw = c(w, d, &h.rv.0);
    let rvb = c(1, d, &h.rv.1);
    let q = tape.matmul(x, wq).unwrap();
    let k = tape.matmul(x, wk).unwrap();
    let v = tape.matmul(x, wv).unwrap();
    let pairs = Arc::new(PairFeatures::new(n, h.buckets.clone(), h.sigma.clone(), w).unwrap());
    let mask = fl
        .masked
        .then(|| Arc::new(Mask::new(n, h.allowed.clone()).unwrap()));
    let rq = AffineVars { weight: rqw, bias: rqb };
    let rk = AffineVars { weight: rkw, bias: rkb };
    let rv = AffineVars { weight: rvw, bias: rvb };
    let sb = ScoreBias {
        hop: fl.hop.then_some((hq, hk)),
        sigma: fl.sigma.then_some((rq, rk)),
        p2c_key_row: fl.p2c_key_row,
    };
    let vb = ValueBias {
        hop: fl.hop.then_some(hv),
        sigma: fl.sigma.then_some(rv),
    };
    let scale = 1.0 / (d as f64).sqrt();
    let scores = tape.rel_scores(q, k, sb, pairs.clone(), mask.clone(), scale).unwrap();
    let weights = tape.row_softmax(scores, mask.clone()).unwrap();
    let output = tape.rel_values(weights, v, vb, pairs, mask).unwrap();
    HeadVars {
        leaves: vec![x, wq, wk, wv, hq, hk, hv, rqw, rqb, rkw, rkb, rvw, rvb],
        scores,
        weights,
        output,
    }
}
