//! Entity input features: precomputed text embeddings (or a hashed n-gram
//! fallback) concatenated with an embedding of the box size, then projected
//! to the model width.
//!
//! Embedding file: JSON lines. The first line is a header `{"dim": 384}`, each
//! following line a record `{"doc": "<id>", "idx": <entity>, "vec": [...]}`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Document;
use crate::error::{Error, Result};
use crate::geometry::{centroid, size_features};
use crate::numerics::{Init, ParamBuilder, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    doc: String,
    idx: usize,
    vec: Vec<f64>,
}

/// Text vectors keyed by `(document id, entity index)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<(String, usize), Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, doc: &str, idx: usize, vec: Vec<f64>) -> Result<()> {
        if vec.len() != self.dim {
            return Err(Error::Embeddings(format!(
                "({doc}, {idx}) has dimension {}, expected {}",
                vec.len(),
                self.dim
            )));
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::Embeddings(format!("({doc}, {idx}) has non-finite values")));
        }
        if self.vectors.insert((doc.to_string(), idx), vec).is_some() {
            return Err(Error::Embeddings(format!("duplicate key ({doc}, {idx})")));
        }
        Ok(())
    }

    pub fn get(&self, doc: &str, idx: usize) -> Option<&[f64]> {
        self.vectors.get(&(doc.to_string(), idx)).map(Vec::as_slice)
    }

    /// `n × dim` matrix for a document. Fails listing every missing key.
    pub fn lookup(&self, doc: &Document) -> Result<Tensor> {
        let mut missing = Vec::new();
        let mut data = Vec::with_capacity(doc.len() * self.dim);
        for i in 0..doc.len() {
            match self.get(&doc.id, i) {
                Some(v) => data.extend_from_slice(v),
                None => missing.push(format!("({}, {i})", doc.id)),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Embeddings(format!("missing {}", missing.join(", "))));
        }
        Tensor::matrix(doc.len(), self.dim, data)
    }

    /// Hashed n-gram vectors for every entity of `docs`.
    pub fn hashed(docs: &[Document], dim: usize) -> Result<Self> {
        let mut t = EmbeddingTable::new(dim);
        for d in docs {
            for (i, e) in d.entities.iter().enumerate() {
                t.insert(&d.id, i, hash_ngram_embed(&e.text, dim)?)?;
            }
        }
        Ok(t)
    }

    /// Records in `(doc, idx)` order.
    fn sorted(&self) -> Vec<(&(String, usize), &Vec<f64>)> {
        let mut v: Vec<_> = self.vectors.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Embeddings(format!("{}: empty file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&header).map_err(|e| Error::json(path, e))?;
    if header.dim == 0 {
        return Err(Error::Embeddings("dim must be positive".into()));
    }
    let mut table = EmbeddingTable::new(header.dim);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        table.insert(&r.doc, r.idx, r.vec)?;
    }
    Ok(table)
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header = serde_json::to_string(&Header { dim: table.dim }).map_err(|e| Error::json(path, e))?;
    writeln!(w, "{header}").map_err(io)?;
    for ((doc, idx), vec) in table.sorted() {
        let r = Record {
            doc: doc.clone(),
            idx: *idx,
            vec: vec.clone(),
        };
        let line = serde_json::to_string(&r).map_err(|e| Error::json(path, e))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed hashing of character 1- to 3-grams of the lowercased text,
/// L2-normalized. Empty text maps to zeros.
pub fn hash_ngram_embed(text: &str, dim: usize) -> Result<Vec<f64>> {
    if dim < 8 {
        return Err(Error::Config(format!("hash embedding dim {dim} below 8")));
    }
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut v = vec![0.0; dim];
    let mut buf = String::new();
    for n in 1..=3 {
        for w in chars.windows(n) {
            buf.clear();
            buf.extend(w);
            let h = fnv1a(buf.as_bytes());
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[(h % dim as u64) as usize] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    Ok(v)
}

/// Where per-entity text vectors come from.
#[derive(Debug, Clone, PartialEq)]
pub enum TextSource {
    Table(EmbeddingTable),
    Hashed { dim: usize },
}

impl TextSource {
    pub fn dim(&self) -> usize {
        match self {
            TextSource::Table(t) => t.dim(),
            TextSource::Hashed { dim } => *dim,
        }
    }

    /// `n × dim` text features of a document.
    pub fn features(&self, doc: &Document) -> Result<Tensor> {
        match self {
            TextSource::Table(t) => t.lookup(doc),
            TextSource::Hashed { dim } => {
                let mut data = Vec::with_capacity(doc.len() * dim);
                for e in &doc.entities {
                    data.extend(hash_ngram_embed(&e.text, *dim)?);
                }
                Tensor::matrix(doc.len(), *dim, data)
            }
        }
    }
}

/// Quantization bins per axis for absolute-position embeddings.
pub const POS_BINS: usize = 16;

/// Widths of the input embedder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedderDims {
    pub text_dim: usize,
    pub size_dim: usize,
    pub hidden: usize,
    pub abs_pos: bool,
}

/// Parameters of `x_i = [t_i ; s_i W_s + b_s] W_p + b_p`, plus optional
/// absolute-position tables added after the projection.
#[derive(Debug, Clone)]
pub struct InputEmbedder {
    dims: EmbedderDims,
    size_w: ParamId,
    size_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    pos: Option<(ParamId, ParamId)>,
}

impl InputEmbedder {
    pub fn build<R: Rng>(b: &mut ParamBuilder<'_, R>, dims: EmbedderDims) -> Result<Self> {
        let EmbedderDims {
            text_dim,
            size_dim,
            hidden,
            ..
        } = dims;
        let fan_in = (text_dim + size_dim) as f64;
        let size_w = b.param("embed.size.w", &[2, size_dim], Init::Normal(0.5f64.sqrt()))?;
        let size_b = b.param("embed.size.b", &[size_dim], Init::Zeros)?;
        let proj_w = b.param(
            "embed.proj.w",
            &[text_dim + size_dim, hidden],
            Init::Normal(fan_in.sqrt().recip()),
        )?;
        let proj_b = b.param("embed.proj.b", &[hidden], Init::Zeros)?;
        let pos = if dims.abs_pos {
            Some((
                b.param("embed.pos.x", &[POS_BINS, hidden], Init::Normal(0.02))?,
                b.param("embed.pos.y", &[POS_BINS, hidden], Init::Normal(0.02))?,
            ))
        } else {
            None
        };
        Ok(InputEmbedder {
            dims,
            size_w,
            size_b,
            proj_w,
            proj_b,
            pos,
        })
    }

    pub fn dims(&self) -> EmbedderDims {
        self.dims
    }

    /// `text` is `n × text_dim`; `doc` must already be normalized to the unit
    /// page.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, doc: &Document, text: &Tensor) -> Result<Var> {
        let n = doc.len();
        if text.shape() != [n, self.dims.text_dim] {
            return Err(Error::InvalidShape(format!(
                "text features {:?} for {n} entities of width {}",
                text.shape(),
                self.dims.text_dim
            )));
        }
        let mut sizes = Vec::with_capacity(2 * n);
        for e in &doc.entities {
            let (w, h) = size_features(&e.bbox);
            sizes.extend([w, h]);
        }
        let s = tape.constant(Tensor::matrix(n, 2, sizes)?);
        let sw = tape.param(store, self.size_w);
        let sb = tape.param(store, self.size_b);
        let s = tape.matmul(s, sw)?;
        let s = tape.add_row(s, sb)?;
        let t = tape.constant(text.clone());
        let x = tape.concat(&[t, s])?;
        let pw = tape.param(store, self.proj_w);
        let pb = tape.param(store, self.proj_b);
        let x = tape.matmul(x, pw)?;
        let mut x = tape.add_row(x, pb)?;
        if let Some((px, py)) = self.pos {
            let bin = |v: f64| ((v * POS_BINS as f64) as usize).min(POS_BINS - 1);
            let (bx, by): (Vec<usize>, Vec<usize>) = doc
                .entities
                .iter()
                .map(|e| {
                    let (cx, cy) = centroid(&e.bbox);
                    (bin(cx.clamp(0.0, 1.0)), bin(cy.clamp(0.0, 1.0)))
                })
                .unzip();
            let tx = tape.param(store, px);
            let ty = tape.param(store, py);
            let ex = tape.embedding(tx, &bx)?;
            let ey = tape.embedding(ty, &by)?;
            x = tape.add(x, ex)?;
            x = tape.add(x, ey)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_embedding_is_unit_and_stable() {
        let a = hash_ngram_embed("Surname", 32).unwrap();
        let b = hash_ngram_embed("surname", 32).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(hash_ngram_embed("", 16).unwrap(), vec![0.0; 16]);
        assert!(hash_ngram_embed("x", 4).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn table_rejects_bad_records() {
        let mut t = EmbeddingTable::new(2);
        t.insert("d", 0, vec![1.0, 2.0]).unwrap();
        assert!(t.insert("d", 0, vec![1.0, 2.0]).is_err());
        assert!(t.insert("d", 1, vec![1.0]).is_err());
    }
}
