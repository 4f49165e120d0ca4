//! Documents, the annotation and schema file formats, train/test splits, and
//! the synthetic ID-document generator.
//!
//! Annotation file: a top-level JSON array, one object per document.
//!
//! ```json
//! [
//!   {
//!     "format_version": 1,
//!     "id": "tpl03-0007",
//!     "tag": "tpl03",
//!     "page": {"w": 1200.0, "h": 756.0},
//!     "entities": [
//!       {"bbox": [402.5, 130.0, 520.0, 160.2], "text": "Surname", "category": "key"}
//!     ]
//!   }
//! ]
//! ```
//!
//! Coordinates are absolute pixels. `category` may be omitted for unlabeled
//! data. Schema file: a JSON array of `{"name": ..., "unique": ...}`.

mod synth;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matching::{Category, LabelSchema};

pub use synth::{generate_synthetic, CorpusStats, GenConfig, PlantedPair, SyntheticCorpus};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PageSize {
    pub w: f64,
    pub h: f64,
}

impl PageSize {
    pub const UNIT: PageSize = PageSize { w: 1.0, h: 1.0 };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub bbox: BBox,
    pub text: String,
    /// Index into the label schema.
    pub category: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    /// Template or country tag used by held-out splits.
    pub tag: Option<String>,
    pub page: PageSize,
    pub entities: Vec<Entity>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Gold categories, if every entity is labeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.entities.iter().map(|e| e.category).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntityRecord {
    bbox: Vec<f64>,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DocumentRecord {
    #[serde(default = "default_version")]
    format_version: u32,
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag: Option<String>,
    page: PageSize,
    entities: Vec<EntityRecord>,
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum AnnotationFile {
    Array(Vec<DocumentRecord>),
    Wrapped {
        format_version: u32,
        documents: Vec<DocumentRecord>,
    },
}

fn annotation_err(doc: &str, entity: usize, reason: impl Into<String>) -> Error {
    Error::Annotation {
        doc: doc.to_string(),
        entity,
        reason: reason.into(),
    }
}

fn check_version(v: u32, what: &str) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{what}: unsupported format_version {v} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn validate_record(rec: DocumentRecord, schema: &LabelSchema) -> Result<Document> {
    check_version(rec.format_version, &format!("document {}", rec.id))?;
    let id = rec.id;
    if !(rec.page.w > 0.0 && rec.page.h > 0.0 && rec.page.w.is_finite() && rec.page.h.is_finite()) {
        return Err(annotation_err(&id, 0, "page dimensions must be positive"));
    }
    if rec.entities.is_empty() {
        return Err(annotation_err(&id, 0, "document has no entities"));
    }
    let mut entities = Vec::with_capacity(rec.entities.len());
    for (idx, e) in rec.entities.into_iter().enumerate() {
        let [x0, y0, x1, y1] = e.bbox[..] else {
            return Err(annotation_err(&id, idx, format!("malformed box {:?}", e.bbox)));
        };
        let bbox = BBox::new(x0, y0, x1, y1);
        if !bbox.is_valid() {
            return Err(annotation_err(&id, idx, format!("malformed box {:?}", e.bbox)));
        }
        let category = match e.category {
            None => None,
            Some(name) => Some(
                schema
                    .index_of(&name)
                    .ok_or_else(|| annotation_err(&id, idx, format!("unknown category {name:?}")))?,
            ),
        };
        entities.push(Entity {
            bbox,
            text: e.text,
            category,
        });
    }
    let mut seen = HashSet::new();
    for (idx, e) in entities.iter().enumerate() {
        if let Some(c) = e.category {
            if schema.is_unique(c) && !seen.insert(c) {
                return Err(annotation_err(
                    &id,
                    idx,
                    format!("duplicate unique field {}", schema.name(c)),
                ));
            }
        }
    }
    Ok(Document {
        id,
        tag: rec.tag,
        page: rec.page,
        entities,
    })
}

/// Parses and validates an annotation document from a JSON string.
pub fn parse_annotations_str(text: &str, schema: &LabelSchema) -> Result<Vec<Document>> {
    let file: AnnotationFile = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("annotation file: {e}")))?;
    let records = match file {
        AnnotationFile::Array(r) => r,
        AnnotationFile::Wrapped {
            format_version,
            documents,
        } => {
            check_version(format_version, "annotation file")?;
            documents
        }
    };
    let mut ids = HashSet::new();
    let mut docs = Vec::with_capacity(records.len());
    for rec in records {
        if !ids.insert(rec.id.clone()) {
            return Err(annotation_err(&rec.id, 0, "duplicate document id"));
        }
        docs.push(validate_record(rec, schema)?);
    }
    Ok(docs)
}

pub fn parse_annotations(path: &Path, schema: &LabelSchema) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text, schema)
}

pub fn annotations_to_string(docs: &[Document], schema: &LabelSchema) -> String {
    let records: Vec<DocumentRecord> = docs
        .iter()
        .map(|d| DocumentRecord {
            format_version: FORMAT_VERSION,
            id: d.id.clone(),
            tag: d.tag.clone(),
            page: d.page,
            entities: d
                .entities
                .iter()
                .map(|e| EntityRecord {
                    bbox: vec![e.bbox.x0, e.bbox.y0, e.bbox.x1, e.bbox.y1],
                    text: e.text.clone(),
                    category: e.category.map(|c| schema.name(c).to_string()),
                })
                .collect(),
        })
        .collect();
    serde_json::to_string_pretty(&records).expect("documents serialize")
}

pub fn write_annotations(path: &Path, docs: &[Document], schema: &LabelSchema) -> Result<()> {
    fs::write(path, annotations_to_string(docs, schema)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
struct SchemaRecord {
    name: String,
    unique: bool,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SchemaFile {
    Array(Vec<SchemaRecord>),
    Wrapped {
        format_version: u32,
        categories: Vec<SchemaRecord>,
    },
}

pub fn parse_schema_str(text: &str) -> Result<LabelSchema> {
    let file: SchemaFile =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("schema file: {e}")))?;
    let records = match file {
        SchemaFile::Array(r) => r,
        SchemaFile::Wrapped {
            format_version,
            categories,
        } => {
            check_version(format_version, "schema file")?;
            categories
        }
    };
    LabelSchema::new(
        records
            .into_iter()
            .map(|r| Category {
                name: r.name,
                unique: r.unique,
            })
            .collect(),
    )
}

pub fn load_schema(path: &Path) -> Result<LabelSchema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_schema_str(&text)
}

pub fn schema_to_string(schema: &LabelSchema) -> String {
    let records: Vec<_> = schema
        .categories()
        .iter()
        .map(|c| serde_json::json!({"name": c.name, "unique": c.unique}))
        .collect();
    serde_json::to_string_pretty(&records).expect("schema serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitStrategy {
    Random { seed: u64, ratio: f64 },
    ByTag { held_out: Vec<String> },
}

impl Default for SplitStrategy {
    fn default() -> Self {
        SplitStrategy::Random {
            seed: 0,
            ratio: 0.8,
        }
    }
}

/// Disjoint, exhaustive train/test partition. Both sides keep corpus order.
pub fn split(corpus: &[Document], strategy: &SplitStrategy) -> Result<(Vec<Document>, Vec<Document>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty corpus".into()));
    }
    let in_test: Vec<bool> = match strategy {
        SplitStrategy::Random { seed, ratio } => {
            if !(0.0..=1.0).contains(ratio) {
                return Err(Error::InvalidInput(format!("split ratio {ratio} outside [0, 1]")));
            }
            let n = corpus.len();
            let n_train = (ratio * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let mut flags = vec![true; n];
            for &i in &order[..n_train] {
                flags[i] = false;
            }
            flags
        }
        SplitStrategy::ByTag { held_out } => {
            if let Some(d) = corpus.iter().find(|d| d.tag.is_none()) {
                return Err(Error::InvalidInput(format!("document {} has no tag", d.id)));
            }
            let tags: BTreeSet<&str> = corpus.iter().filter_map(|d| d.tag.as_deref()).collect();
            if let Some(t) = held_out.iter().find(|t| !tags.contains(t.as_str())) {
                return Err(Error::InvalidInput(format!("unknown tag {t:?}")));
            }
            corpus
                .iter()
                .map(|d| held_out.iter().any(|t| Some(t.as_str()) == d.tag.as_deref()))
                .collect()
        }
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (d, t) in corpus.iter().zip(in_test) {
        if t {
            test.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    if test.is_empty() {
        return Err(Error::InvalidInput("split leaves the test set empty".into()));
    }
    if train.is_empty() {
        return Err(Error::InvalidInput("split leaves the training set empty".into()));
    }
    Ok((train, test))
}
