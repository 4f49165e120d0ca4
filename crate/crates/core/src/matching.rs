//! One-to-one assignment between entities and field categories.
//!
//! Costs are negated class probabilities. The solver is the O(n³) shortest
//! augmenting path form of the Hungarian method; among optimal assignments it
//! returns the lexicographically smallest one (by column of row 0, then row
//! 1, ...).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub unique: bool,
}

/// Ordered field categories. Unique categories occur exactly once per
/// document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    categories: Vec<Category>,
    pad: usize,
}

/// Category used to fill padded label columns.
pub const PAD_CATEGORY: &str = "others";

impl LabelSchema {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::Config("schema needs at least two categories".into()));
        }
        for (i, c) in categories.iter().enumerate() {
            if categories[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Config(format!("duplicate category {}", c.name)));
            }
        }
        let pad = categories
            .iter()
            .position(|c| c.name == PAD_CATEGORY && !c.unique)
            .or_else(|| categories.iter().rposition(|c| !c.unique))
            .ok_or_else(|| Error::Config("schema needs a non-unique category".into()))?;
        Ok(LabelSchema { categories, pad })
    }

    /// Last name, first name, three dates, ID number (all unique), then key
    /// and others.
    pub fn poi() -> Self {
        let cat = |name: &str, unique| Category {
            name: name.into(),
            unique,
        };
        LabelSchema::new(vec![
            cat("last_name", true),
            cat("first_name", true),
            cat("date_of_birth", true),
            cat("date_of_issue", true),
            cat("date_of_expiry", true),
            cat("id_number", true),
            cat("key", false),
            cat(PAD_CATEGORY, false),
        ])
        .expect("valid built-in schema")
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.categories[idx].name
    }

    pub fn is_unique(&self, idx: usize) -> bool {
        self.categories[idx].unique
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn unique_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_unique(i)).collect()
    }

    pub fn non_unique_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_unique(i)).collect()
    }

    pub fn pad_category(&self) -> usize {
        self.pad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `columns[row]` is the column assigned to `row`.
    pub columns: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching on a square, row-major cost matrix.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Assignment> {
    if cost.len() != n * n {
        return Err(Error::InvalidInput(format!(
            "cost matrix has {} entries, expected {n}x{n}",
            cost.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            columns: Vec::new(),
            cost: 0.0,
        });
    }
    let a = |i: usize, j: usize| cost[(i - 1) * n + (j - 1)];

    // 1-based arrays; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[owner[j] - 1] = j - 1;
    }
    let scale = cost.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| (cost[i * n + j] - u[i + 1] - v[j + 1]).abs() <= tol;
    lexicographic_refine(n, &mut col_of, tight);

    let total = col_of.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(Assignment {
        columns: col_of,
        cost: total,
    })
}

/// Walks rows in order and moves each to the smallest tight column that
/// still admits a perfect matching on the tight subgraph.
fn lexicographic_refine(n: usize, col_of: &mut [usize], tight: impl Fn(usize, usize) -> bool) {
    let mut row_of = vec![0usize; n];
    for (r, &c) in col_of.iter().enumerate() {
        row_of[c] = r;
    }
    let mut prev = vec![usize::MAX; n];
    for i in 0..n {
        for c in 0..col_of[i] {
            if !tight(i, c) || row_of[c] < i {
                continue;
            }
            // alternating path from the current holder of `c` to `col_of[i]`
            let target = col_of[i];
            let start = row_of[c];
            prev.fill(usize::MAX);
            let mut queue = std::collections::VecDeque::from([start]);
            let mut found = false;
            'bfs: while let Some(x) = queue.pop_front() {
                for y in 0..n {
                    if y == c || prev[y] != usize::MAX || y == col_of[x] || !tight(x, y) {
                        continue;
                    }
                    let holder = row_of[y];
                    if holder < i {
                        continue;
                    }
                    prev[y] = x;
                    if y == target {
                        found = true;
                        break 'bfs;
                    }
                    if holder != i {
                        queue.push_back(holder);
                    }
                }
            }
            if !found {
                continue;
            }
            // rotate: each row on the path takes the column it reached
            let mut y = target;
            loop {
                let x = prev[y];
                let old = col_of[x];
                col_of[x] = y;
                row_of[y] = x;
                if x == start {
                    break;
                }
                y = old;
            }
            col_of[i] = c;
            row_of[c] = i;
            break;
        }
    }
}

fn check_probs(probs: &Tensor, schema: &LabelSchema) -> Result<()> {
    if probs.shape().len() != 2 || probs.cols() != schema.len() {
        return Err(Error::InvalidShape(format!(
            "probabilities {:?} for {} categories",
            probs.shape(),
            schema.len()
        )));
    }
    for r in 0..probs.rows() {
        let s: f64 = probs.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 || probs.row(r).iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(format!(
                "row {r} is not a probability distribution (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Padded cost for matching `N` predictions against the gold label
/// multiset. Returns the `N × N` cost and the category of every column.
pub fn build_padded_cost(
    probs: &Tensor,
    labels: &[usize],
    schema: &LabelSchema,
) -> Result<(Vec<f64>, Vec<usize>)> {
    check_probs(probs, schema)?;
    let n = probs.rows();
    if labels.len() > n {
        return Err(Error::InvalidGold(format!(
            "{} labels for {n} predictions",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= schema.len()) {
        return Err(Error::InvalidGold(format!("unknown category index {bad}")));
    }
    for &u in &schema.unique_indices() {
        if labels.iter().filter(|&&l| l == u).count() > 1 {
            return Err(Error::InvalidGold(format!(
                "unique category {} appears more than once",
                schema.name(u)
            )));
        }
    }
    let mut columns = labels.to_vec();
    columns.resize(n, schema.pad_category());
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for (j, &c) in columns.iter().enumerate() {
            cost[i * n + j] = -probs.at(i, c);
        }
    }
    Ok((cost, columns))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Each entity against its own gold label.
    #[default]
    PerEntityCe,
    /// Each entity against the label column it is matched to.
    MatchedCe,
}

/// Training targets for each entity under `mode`.
pub fn loss_targets(
    logits: &Tensor,
    labels: &[usize],
    schema: &LabelSchema,
    mode: LossMode,
) -> Result<Vec<usize>> {
    if labels.len() != logits.rows() {
        return Err(Error::InvalidShape(format!(
            "{} labels for {} entities",
            labels.len(),
            logits.rows()
        )));
    }
    match mode {
        LossMode::PerEntityCe => Ok(labels.to_vec()),
        LossMode::MatchedCe => {
            let probs = softmax_rows(logits);
            let (cost, columns) = build_padded_cost(&probs, labels, schema)?;
            let a = hungarian(&cost, logits.rows())?;
            Ok(a.columns.iter().map(|&c| columns[c]).collect())
        }
    }
}

/// Scalar loss value.
pub fn set_loss(logits: &Tensor, labels: &[usize], schema: &LabelSchema, mode: LossMode) -> Result<f64> {
    let targets = loss_targets(logits, labels, schema, mode)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.cross_entropy(l, &targets)?;
    Ok(tape.value(loss).item())
}

/// Differentiable loss on a tape; the assignment itself is treated as
/// constant.
pub fn set_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    schema: &LabelSchema,
    mode: LossMode,
) -> Result<Var> {
    let targets = loss_targets(tape.value(logits), labels, schema, mode)?;
    tape.cross_entropy(logits, &targets)
}

pub fn argmax_decode(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| argmax(probs.row(r).iter().copied().enumerate()))
        .collect()
}

fn argmax(it: impl Iterator<Item = (usize, f64)>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Assigns every unique category to exactly one entity; the rest take their
/// most probable non-unique category.
pub fn decode_one_to_one(probs: &Tensor, schema: &LabelSchema) -> Result<Vec<usize>> {
    check_probs(probs, schema)?;
    let n = probs.rows();
    let uniques = schema.unique_indices();
    let free = schema.non_unique_indices();
    if n < uniques.len() || (n > uniques.len() && free.is_empty()) {
        return Err(Error::Infeasible {
            entities: n,
            unique: uniques.len(),
        });
    }
    let best_free: Vec<(usize, f64)> = (0..n)
        .map(|i| {
            let c = argmax(free.iter().map(|&c| (c, probs.at(i, c))));
            (c, probs.at(i, c))
        })
        .collect();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = match uniques.get(j) {
                Some(&u) => -probs.at(i, u),
                None => -best_free[i].1,
            };
        }
    }
    let a = hungarian(&cost, n)?;
    Ok(a.columns
        .iter()
        .enumerate()
        .map(|(i, &j)| uniques.get(j).copied().unwrap_or(best_free[i].0))
        .collect())
}
