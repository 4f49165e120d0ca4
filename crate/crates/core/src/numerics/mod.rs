//! Small dense-tensor engine: a reverse-mode tape, named parameter storage,
//! Adam, and a JSON checkpoint format.

mod adam;
mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, NonFinitePolicy, StepOutcome};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use params::{Init, ParamBuilder, ParamId, ParamStore};
pub use tape::{AffineVars, Grads, PairFeatures, ScoreBias, Tape, ValueBias, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Boolean matrix of allowed `(row, col)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    /// Square mask.
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self> {
        Mask::rect(n, n, allowed)
    }

    pub fn rect(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "mask of {} entries for {rows}x{cols}",
                allowed.len()
            )));
        }
        Ok(Mask {
            rows,
            cols,
            allowed,
        })
    }

    pub fn full(n: usize) -> Self {
        Mask {
            rows: n,
            cols: n,
            allowed: vec![true; n * n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }
}

/// Row-wise softmax of a plain matrix, outside any tape.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}
