//! KNN graph over entity centroids, all-pairs hop distances, and the
//! local-attention mask derived from them.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::numerics::Mask;

/// Undirected KNN graph with self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    n: usize,
    k: usize,
    adjacency: Vec<bool>,
    saturated: bool,
}

impl KnnGraph {
    /// Builds a graph directly from an adjacency matrix. The matrix is
    /// symmetrized and self-loops are added.
    pub fn from_adjacency(n: usize, adjacency: &[bool]) -> Result<Self> {
        if adjacency.len() != n * n {
            return Err(Error::InvalidShape(format!(
                "adjacency has {} entries, expected {}",
                adjacency.len(),
                n * n
            )));
        }
        let mut adj = adjacency.to_vec();
        for i in 0..n {
            adj[i * n + i] = true;
            for j in 0..i {
                let e = adj[i * n + j] || adj[j * n + i];
                adj[i * n + j] = e;
                adj[j * n + i] = e;
            }
        }
        Ok(KnnGraph {
            n,
            k: 0,
            adjacency: adj,
            saturated: false,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// True when `k >= n` forced a fully connected graph.
    pub fn saturated(&self) -> bool {
        self.saturated
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n + j]
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| j != i && self.has_edge(i, j))
    }
}

/// Connects every entity to its `k` nearest neighbors (ties go to the lower
/// index), symmetrizes, and adds self-loops.
pub fn build_knn_graph(dist: &[f64], n: usize, k: usize) -> Result<KnnGraph> {
    if dist.len() != n * n {
        return Err(Error::InvalidShape(format!(
            "distance matrix has {} entries, expected {n}x{n}",
            dist.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if let Some(bad) = dist.iter().position(|d| !d.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite distance at ({}, {})",
            bad / n.max(1),
            bad % n.max(1)
        )));
    }
    let saturated = k >= n;
    let mut adjacency = vec![false; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| dist[i * n + a].total_cmp(&dist[i * n + b]).then(a.cmp(&b)));
        for &j in order.iter().take(k) {
            adjacency[i * n + j] = true;
            adjacency[j * n + i] = true;
        }
        adjacency[i * n + i] = true;
    }
    Ok(KnnGraph {
        n,
        k,
        adjacency,
        saturated,
    })
}

/// Hop count sentinel for pairs with no connecting path.
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopMatrix {
    n: usize,
    hops: Vec<u32>,
}

impl HopMatrix {
    pub fn from_raw(n: usize, hops: Vec<u32>) -> Result<Self> {
        if hops.len() != n * n {
            return Err(Error::InvalidShape(format!(
                "hop matrix has {} entries, expected {}",
                hops.len(),
                n * n
            )));
        }
        Ok(HopMatrix { n, hops })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `None` when the pair is disconnected.
    pub fn get(&self, i: usize, j: usize) -> Option<u32> {
        match self.hops[i * self.n + j] {
            UNREACHABLE => None,
            h => Some(h),
        }
    }

    pub fn raw(&self) -> &[u32] {
        &self.hops
    }

    /// Largest finite hop count.
    pub fn diameter(&self) -> u32 {
        self.hops
            .iter()
            .copied()
            .filter(|&h| h != UNREACHABLE)
            .max()
            .unwrap_or(0)
    }
}

/// Breadth-first search from every node.
pub fn hop_distances(g: &KnnGraph) -> HopMatrix {
    let n = g.n;
    let mut hops = vec![UNREACHABLE; n * n];
    let mut queue = VecDeque::with_capacity(n);
    for src in 0..n {
        let row = &mut hops[src * n..(src + 1) * n];
        row[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            let next = row[u] + 1;
            for v in 0..n {
                if v != u && g.adjacency[u * n + v] && row[v] == UNREACHABLE {
                    row[v] = next;
                    queue.push_back(v);
                }
            }
        }
    }
    HopMatrix { n, hops }
}

/// Pairs within `threshold` hops are allowed; the diagonal always is.
pub fn attention_mask(hops: &HopMatrix, threshold: u32) -> Result<Mask> {
    if threshold == 0 {
        return Err(Error::InvalidInput("hop threshold must be at least 1".into()));
    }
    let n = hops.n;
    let allowed = hops
        .hops
        .iter()
        .enumerate()
        .map(|(idx, &h)| idx / n == idx % n || (h != UNREACHABLE && h <= threshold))
        .collect();
    Mask::new(n, allowed)
}

/// Clips hop counts to `max_bucket`; disconnected pairs map to `max_bucket + 1`.
pub fn bucket_hops(hops: &HopMatrix, max_bucket: u32) -> Result<Vec<usize>> {
    if max_bucket == 0 {
        return Err(Error::InvalidInput("max_bucket must be at least 1".into()));
    }
    Ok(hops
        .hops
        .iter()
        .map(|&h| {
            if h == UNREACHABLE {
                max_bucket as usize + 1
            } else {
                h.min(max_bucket) as usize
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist_of(points: &[(f64, f64)]) -> Vec<f64> {
        let n = points.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = (points[i].0 - points[j].0).hypot(points[i].1 - points[j].1);
            }
        }
        d
    }

    fn edges(g: &KnnGraph) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                if g.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn collinear_k1() {
        let d = dist_of(&[(0.0, 0.0), (1.0, 0.0), (3.0, 0.0)]);
        let g = build_knn_graph(&d, 3, 1).unwrap();
        assert_eq!(edges(&g), vec![(0, 1), (1, 2)]);
        assert!((0..3).all(|i| g.has_edge(i, i)));
        assert!(!g.saturated());
    }

    #[test]
    fn two_nodes_any_k() {
        let d = dist_of(&[(0.0, 0.0), (5.0, 5.0)]);
        for k in 1..4 {
            let g = build_knn_graph(&d, 2, k).unwrap();
            assert_eq!(edges(&g), vec![(0, 1)]);
            assert_eq!(g.saturated(), k >= 2);
        }
    }

    #[test]
    fn square_k2_excludes_diagonals() {
        // corners in cyclic order 0-1-2-3
        let d = dist_of(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);
        let g = build_knn_graph(&d, 4, 2).unwrap();
        assert_eq!(edges(&g), vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        // node 0 is equidistant from 1 and 2
        let d = dist_of(&[(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0)]);
        let g = build_knn_graph(&d, 3, 1).unwrap();
        assert!(g.has_edge(0, 1));
        // 2 picks 0 as its nearest, so 0-2 exists through symmetrization
        assert!(g.has_edge(0, 2));
        assert!(!g.has_edge(1, 2));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(build_knn_graph(&[0.0; 4], 2, 0).is_err());
        assert!(build_knn_graph(&[0.0; 3], 2, 1).is_err());
        assert!(build_knn_graph(&[0.0, f64::NAN, f64::NAN, 0.0], 2, 1).is_err());
    }

    #[test]
    fn path_hops_and_mask() {
        let g = KnnGraph::from_adjacency(3, &[false, true, false, false, false, true, false, false, false])
            .unwrap();
        let h = hop_distances(&g);
        assert_eq!(h.get(0, 2), Some(2));
        assert_eq!(h.get(2, 0), Some(2));
        assert_eq!(h.get(1, 1), Some(0));

        let m = attention_mask(&h, 1).unwrap();
        assert!(!m.allowed(0, 2) && !m.allowed(2, 0));
        assert!(m.allowed(0, 1) && m.allowed(1, 0) && m.allowed(1, 2) && m.allowed(2, 1));

        let wide = attention_mask(&h, h.diameter()).unwrap();
        assert!((0..3).all(|i| (0..3).all(|j| wide.allowed(i, j))));
    }

    #[test]
    fn disconnected_components() {
        let mut adj = vec![false; 16];
        adj[1] = true; // 0-1
        adj[2 * 4 + 3] = true; // 2-3
        let g = KnnGraph::from_adjacency(4, &adj).unwrap();
        let h = hop_distances(&g);
        assert_eq!(h.get(0, 2), None);
        assert_eq!(h.raw()[3], UNREACHABLE);
        let m = attention_mask(&h, 100).unwrap();
        assert!(!m.allowed(0, 3));
        assert!(m.allowed(3, 3));

        let b = bucket_hops(&h, 4).unwrap();
        assert_eq!(b[2], 5);
        assert_eq!(b[0], 0);
        assert_eq!(b[1], 1);
    }

    #[test]
    fn bucket_clips() {
        let h = HopMatrix::from_raw(2, vec![0, 9, 9, 0]).unwrap();
        assert_eq!(bucket_hops(&h, 4).unwrap(), vec![0, 4, 4, 0]);
        assert!(bucket_hops(&h, 0).is_err());
        assert!(attention_mask(&h, 0).is_err());
    }
}
