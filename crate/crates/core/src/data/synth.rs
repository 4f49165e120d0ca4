//! Synthetic ID-document corpora.
//!
//! Each template fixes a page size, a key/value arrangement (key left of the
//! value, or key above it), slot positions, key wording and a date format.
//! Documents jitter the layout and draw fresh values. Dates share one format
//! and year range and names share one pool, so a value's field is only
//! recoverable from its key.
//!
//! A fraction of documents are hop-sensitive: one ambiguous value is moved
//! next to a decoy key of a sibling field that is nearer in Euclidean terms
//! than the true key, with filler tokens around both so that the decoy sits
//! two hops away on the KNN graph while the true key stays one hop away.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Document, Entity, PageSize};
use crate::error::{Error, Result};
use crate::geometry::{normalize_document, pairwise_sigma, BBox};
use crate::graph::{build_knn_graph, hop_distances};
use crate::matching::LabelSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub templates: usize,
    pub docs_per_template: usize,
    pub entities_per_doc: usize,
    pub hop_sensitive_fraction: f64,
    /// Neighbor count used to verify hop-sensitive layouts.
    pub k: usize,
    /// Uniform positional jitter, in page fractions.
    pub jitter: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            templates: 20,
            docs_per_template: 13,
            entities_per_doc: 30,
            hop_sensitive_fraction: 0.5,
            k: 4,
            jitter: 0.004,
        }
    }
}

/// Entity indices of a planted value, its true key and the decoy key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub value: usize,
    pub key: usize,
    pub decoy: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub planted: Vec<Option<PlantedPair>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub entities: usize,
    pub avg_entities_per_doc: f64,
}

impl CorpusStats {
    pub fn of(docs: &[Document]) -> Self {
        let entities: usize = docs.iter().map(Document::len).sum();
        CorpusStats {
            documents: docs.len(),
            entities,
            avg_entities_per_doc: if docs.is_empty() {
                0.0
            } else {
                entities as f64 / docs.len() as f64
            },
        }
    }
}

// POI schema order
const LAST: usize = 0;
const FIRST: usize = 1;
const DOB: usize = 2;
const DOI: usize = 3;
const DOE: usize = 4;
const KEY: usize = 6;
const OTHERS: usize = 7;
const FIELDS: usize = 6;

const KEY_TEXT: [[&str; 5]; FIELDS] = [
    ["Surname", "Last name", "Nom", "Apellidos", "Family name"],
    ["Given names", "First name", "Prenoms", "Nombre", "Forename"],
    ["Date of birth", "Birth date", "Date de naissance", "Fecha de nacimiento", "DOB"],
    ["Date of issue", "Issued on", "Date de delivrance", "Fecha de expedicion", "Issue date"],
    ["Date of expiry", "Expires", "Date d'expiration", "Fecha de caducidad", "Valid until"],
    ["Passport No.", "Document number", "ID No.", "Numero", "Card number"],
];

const NAMES: &[&str] = &[
    "SMITH", "MARIA", "JOHN", "GARCIA", "ANNA", "MULLER", "LEE", "CHEN", "SOFIA", "IVANOV",
    "PETER", "ROSSI", "ELENA", "NGUYEN", "DAVID", "SILVA", "LAURA", "KOWALSKI", "JAMES", "HANSEN",
    "OLGA", "TANAKA", "LUCAS", "DUBOIS", "EMMA", "SATO", "NOAH", "JENSEN", "MIA", "COHEN",
    "ALI", "KHAN", "SARA", "NOVAK", "LEO", "MARTIN", "ZOE", "HORVATH", "OMAR", "PEREZ",
];

const FILLER_LABELS: [&str; 6] = [
    "Nationality",
    "Sex",
    "Place of birth",
    "Authority",
    "Height",
    "Personal code",
];

const NATIONALITIES: &[&str] = &["UTOPIAN", "FRA", "USA", "DEU", "ESP", "ITA", "JPN", "BRA"];
const PLACES: &[&str] = &["LONDON", "PARIS", "MADRID", "OSLO", "LIMA", "KYOTO", "CAIRO", "QUITO"];
const AUTHORITIES: &[&str] = &["MINISTRY", "POLICE DEPT", "PREFECTURE", "CITY HALL"];
const TITLES: &[&str] = &[
    "PASSPORT",
    "IDENTITY CARD",
    "DRIVING LICENCE",
    "RESIDENCE PERMIT",
    "TRAVEL DOCUMENT",
];
const COUNTRIES: &[&str] = &[
    "REPUBLIC OF UTOPIA",
    "KINGDOM OF ARCADIA",
    "FEDERATION OF ERewhon",
    "STATE OF LILLIPUT",
    "UNITED PROVINCES",
];
const FILLER_TOKENS: &[&str] = &["*", "<<", "01", "A3", "§", "::", "07", "X", "#2", "~"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    KeyLeft,
    KeyAbove,
}

#[derive(Debug, Clone)]
struct Template {
    tag: String,
    page: PageSize,
    style: Style,
    /// Key anchor (left edge, vertical center) of each pair slot.
    slots: Vec<(f64, f64)>,
    /// Slot per pair kind: 0..6 target fields, 6..12 filler labels.
    slot_of: Vec<usize>,
    key_variant: [usize; FIELDS],
    date_format: usize,
    font_h: f64,
    kv_gap: f64,
    title: [&'static str; 2],
}

const CHAR_W: f64 = 0.0105;

fn text_width(text: &str) -> f64 {
    (text.chars().count() as f64 * CHAR_W).clamp(0.02, 0.26)
}

fn make_template(idx: usize, rng: &mut ChaCha8Rng) -> Template {
    let style = if rng.random_bool(0.5) {
        Style::KeyLeft
    } else {
        Style::KeyAbove
    };
    let w = rng.random_range(900.0..1500.0f64).round();
    let aspect = *[1.586, 1.42, 1.5].choose(rng).expect("non-empty");
    let page = PageSize {
        w,
        h: (w / aspect).round(),
    };
    let mut slots = Vec::new();
    match style {
        Style::KeyLeft => {
            let rs = rng.random_range(0.085..0.095);
            for r in 0..6 {
                for &x in &[0.31, 0.64] {
                    slots.push((x, 0.17 + r as f64 * rs));
                }
            }
        }
        Style::KeyAbove => {
            let rs = rng.random_range(0.11..0.125);
            for r in 0..4 {
                for &x in &[0.31, 0.53, 0.75] {
                    slots.push((x, 0.17 + r as f64 * rs));
                }
            }
        }
    }
    let mut slot_of: Vec<usize> = (0..slots.len()).collect();
    slot_of.shuffle(rng);
    let mut key_variant = [0; FIELDS];
    for v in &mut key_variant {
        *v = rng.random_range(0..5);
    }
    Template {
        tag: format!("tpl{idx:02}"),
        page,
        style,
        slots,
        slot_of,
        key_variant,
        date_format: rng.random_range(0..4),
        font_h: rng.random_range(0.035..0.045),
        kv_gap: match style {
            Style::KeyLeft => rng.random_range(0.015..0.02),
            Style::KeyAbove => rng.random_range(0.044..0.05),
        },
        title: [
            *COUNTRIES.choose(rng).expect("non-empty"),
            *TITLES.choose(rng).expect("non-empty"),
        ],
    }
}

fn date_text(fmt: usize, rng: &mut ChaCha8Rng) -> String {
    const MONTHS: [&str; 12] = [
        "JAN", "FEB", "MAR", "APR", "MAY", "JUN", "JUL", "AUG", "SEP", "OCT", "NOV", "DEC",
    ];
    let d = rng.random_range(1..=28);
    let m = rng.random_range(1..=12);
    let y = rng.random_range(1960..=2035);
    match fmt {
        0 => format!("{d:02}.{m:02}.{y}"),
        1 => format!("{d:02}/{m:02}/{y}"),
        2 => format!("{d:02} {} {y}", MONTHS[m - 1]),
        _ => format!("{y}-{m:02}-{d:02}"),
    }
}

fn digits(n: usize, rng: &mut ChaCha8Rng) -> String {
    (0..n)
        .map(|_| char::from(b'0' + rng.random_range(0..10u8)))
        .collect()
}

fn field_value(field: usize, t: &Template, rng: &mut ChaCha8Rng) -> String {
    match field {
        LAST | FIRST => NAMES.choose(rng).expect("non-empty").to_string(),
        DOB | DOI | DOE => date_text(t.date_format, rng),
        _ => {
            let letter = char::from(b'A' + rng.random_range(0..26u8));
            format!("{letter}{}", digits(rng.random_range(7..9), rng))
        }
    }
}

fn filler_value(kind: usize, rng: &mut ChaCha8Rng) -> String {
    match kind {
        0 => NATIONALITIES.choose(rng).expect("non-empty").to_string(),
        1 => ["M", "F"].choose(rng).expect("non-empty").to_string(),
        2 => PLACES.choose(rng).expect("non-empty").to_string(),
        3 => AUTHORITIES.choose(rng).expect("non-empty").to_string(),
        4 => format!("{} cm", rng.random_range(150..200)),
        _ => digits(rng.random_range(6..10), rng),
    }
}

struct Builder<'a> {
    entities: Vec<Entity>,
    font_h: f64,
    jitter: f64,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    /// Places a box by its centre.
    fn centered(&mut self, cx: f64, cy: f64, text: String, w: f64, h: f64, category: usize) -> usize {
        let j = self.jitter;
        let cx = cx + self.rng.random_range(-j..=j);
        let cy = cy + self.rng.random_range(-j..=j);
        self.entities.push(Entity {
            bbox: BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0),
            text,
            category: Some(category),
        });
        self.entities.len() - 1
    }

    /// Places a box by its left edge and vertical centre.
    fn left(&mut self, x: f64, cy: f64, text: String, category: usize) -> (usize, f64) {
        let w = text_width(&text);
        let h = self.font_h;
        (self.centered(x + w / 2.0, cy, text, w, h, category), w)
    }

    /// Key/value pair; field names of target fields are labeled `key`.
    fn pair(&mut self, t: &Template, slot: (f64, f64), key: String, value: String, value_cat: usize) -> (usize, usize) {
        let key_cat = if value_cat < FIELDS { KEY } else { OTHERS };
        let (k, wk) = self.left(slot.0, slot.1, key, key_cat);
        let v = match t.style {
            Style::KeyLeft => self.left(slot.0 + wk + t.kv_gap, slot.1, value, value_cat).0,
            Style::KeyAbove => self.left(slot.0, slot.1 + t.kv_gap, value, value_cat).0,
        };
        (k, v)
    }
}

struct Budget {
    title: usize,
    mrz: usize,
    keys: usize,
    filler_pairs: usize,
    singles: usize,
}

fn budget(total: usize, planted_extra: usize) -> Budget {
    let mut left = total.saturating_sub(FIELDS + planted_extra);
    let keys = left.min(FIELDS);
    left -= keys;
    let title = left.min(2);
    left -= title;
    let mrz = left.min(4);
    left -= mrz;
    let filler_pairs = (left / 2).min(FILLER_LABELS.len());
    left -= 2 * filler_pairs;
    Budget {
        title,
        mrz,
        keys,
        filler_pairs,
        singles: left,
    }
}

/// Decoy plus six filler tokens.
const PLANTED_EXTRA: usize = 7;
const PLANT_ATTEMPTS: usize = 24;

fn build_document(
    t: &Template,
    id: String,
    cfg: &GenConfig,
    plant: bool,
    rng: &mut ChaCha8Rng,
) -> (Document, Option<PlantedPair>) {
    let plant = plant && budget(cfg.entities_per_doc, PLANTED_EXTRA).keys == FIELDS;
    let b = budget(cfg.entities_per_doc, if plant { PLANTED_EXTRA } else { 0 });
    let planted_field = plant.then(|| *[LAST, FIRST, DOB, DOI, DOE].choose(rng).expect("non-empty"));

    let mut bld = Builder {
        entities: Vec::with_capacity(cfg.entities_per_doc),
        font_h: t.font_h,
        jitter: cfg.jitter,
        rng,
    };

    for (i, text) in t.title.iter().take(b.title).enumerate() {
        let x = if i == 0 { 0.08 } else { 0.62 };
        bld.left(x, 0.065, text.to_string(), OTHERS);
    }

    for f in 0..FIELDS {
        if Some(f) == planted_field {
            continue;
        }
        let value = field_value(f, t, bld.rng);
        let slot = t.slots[t.slot_of[f]];
        if f < b.keys {
            let key = KEY_TEXT[f][t.key_variant[f]].to_string();
            bld.pair(t, slot, key, value, f);
        } else {
            let x = match t.style {
                Style::KeyLeft => slot.0 + 0.13,
                Style::KeyAbove => slot.0,
            };
            bld.left(x, slot.1, value, f);
        }
    }

    let mut kinds: Vec<usize> = (0..FILLER_LABELS.len()).collect();
    kinds.shuffle(bld.rng);
    for &kind in kinds.iter().take(b.filler_pairs) {
        let slot = t.slots[t.slot_of[FIELDS + kind]];
        let value = filler_value(kind, bld.rng);
        bld.pair(t, slot, FILLER_LABELS[kind].to_string(), value, OTHERS);
    }

    for _ in 0..b.singles {
        let x = bld.rng.random_range(0.06..0.2);
        let y = bld.rng.random_range(0.2..0.7);
        let tok = FILLER_TOKENS.choose(bld.rng).expect("non-empty").to_string();
        bld.left(x, y, tok, OTHERS);
    }

    for i in 0..b.mrz {
        let y = if i < 2 { 0.84 } else { 0.91 };
        let x = if i % 2 == 0 { 0.06 } else { 0.52 };
        let tok = format!("P<{}<<{}", digits(6, bld.rng), "<".repeat(bld.rng.random_range(4..9)));
        let w = 0.42;
        let h = t.font_h;
        bld.centered(x + w / 2.0, y, tok, w, h, OTHERS);
    }

    let base = std::mem::take(&mut bld.entities);
    let rng = bld.rng;
    let mut doc = Document {
        id,
        tag: Some(t.tag.clone()),
        page: t.page,
        entities: base,
    };

    let planted = match planted_field {
        None => None,
        Some(field) => {
            let base = doc.entities.clone();
            let mut found = None;
            for _ in 0..PLANT_ATTEMPTS {
                doc.entities = base.clone();
                let pp = plant_cluster(&mut doc, t, field, cfg.jitter, rng);
                let pixel = to_pixels(&doc, t.page);
                if planted_ok(&pixel, pp, cfg.k) {
                    found = Some(pp);
                    break;
                }
            }
            if found.is_none() {
                return build_document(t, doc.id, cfg, false, rng);
            }
            found
        }
    };
    (to_pixels(&doc, t.page), planted)
}

fn plant_cluster(
    doc: &mut Document,
    t: &Template,
    field: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> PlantedPair {
    let siblings: &[usize] = match field {
        LAST => &[FIRST],
        FIRST => &[LAST],
        DOB => &[DOI, DOE],
        DOI => &[DOB, DOE],
        _ => &[DOB, DOI],
    };
    let decoy_field = *siblings.choose(rng).expect("non-empty");
    let mut bld = Builder {
        entities: std::mem::take(&mut doc.entities),
        font_h: t.font_h,
        jitter,
        rng,
    };
    let vx = bld.rng.random_range(0.47..0.52);
    let vy = bld.rng.random_range(0.69..0.71);
    let d_key = bld.rng.random_range(0.13..0.15);
    let d_decoy = bld.rng.random_range(0.1..0.112);
    let h = t.font_h;
    let tok_h = h * 0.8;

    let value_text = field_value(field, t, bld.rng);
    let vw = text_width(&value_text);
    let value = bld.centered(vx, vy, value_text, vw, h, field);
    let key_text = KEY_TEXT[field][t.key_variant[field]].to_string();
    let kw = text_width(&key_text);
    let key = match t.style {
        Style::KeyLeft => bld.centered(vx - d_key, vy, key_text, kw, h, KEY),
        Style::KeyAbove => bld.centered(vx, vy - d_key, key_text, kw, h, KEY),
    };
    let decoy_text = KEY_TEXT[decoy_field][bld.rng.random_range(0..5)].to_string();
    let dw = text_width(&decoy_text);
    let decoy = bld.centered(vx + d_decoy, vy, decoy_text, dw, h, KEY);
    let spots = [
        (vx + d_decoy / 3.0, vy),
        (vx + 2.0 * d_decoy / 3.0, vy),
        (vx + d_decoy + 0.035, vy),
        (vx + d_decoy + 0.07, vy),
        (vx, vy - 0.05),
        (vx, vy + 0.05),
    ];
    for (x, y) in spots {
        let tok = FILLER_TOKENS.choose(bld.rng).expect("non-empty").to_string();
        bld.centered(x, y, tok, 0.02, tok_h, OTHERS);
    }
    doc.entities = bld.entities;
    PlantedPair { value, key, decoy }
}

/// Rounds normalized coordinates to hundredths of a pixel.
fn to_pixels(doc: &Document, page: PageSize) -> Document {
    let mut out = doc.clone();
    let r = |v: f64, s: f64| ((v.clamp(0.0, 1.0) * s) * 100.0).round() / 100.0;
    for e in &mut out.entities {
        let b = e.bbox;
        e.bbox = BBox::new(r(b.x0, page.w), r(b.y0, page.h), r(b.x1, page.w), r(b.y1, page.h));
    }
    out.page = page;
    out
}

/// The decoy is the value's nearest key yet not a KNN neighbor, and the true
/// key is a neighbor.
pub(crate) fn planted_ok(doc: &Document, pp: PlantedPair, k: usize) -> bool {
    let Ok(norm) = normalize_document(doc, doc.page.w, doc.page.h) else {
        return false;
    };
    let Ok(sigma) = pairwise_sigma(&norm) else {
        return false;
    };
    let n = norm.len();
    let Ok(g) = build_knn_graph(sigma.dist_matrix(), n, k) else {
        return false;
    };
    let hops = hop_distances(&g);
    let v = pp.value;
    let nearest_key = (0..n)
        .filter(|&j| j != v && norm.entities[j].category == Some(KEY))
        .min_by(|&a, &b| sigma.dist(v, a).total_cmp(&sigma.dist(v, b)));
    nearest_key == Some(pp.decoy)
        && hops.get(v, pp.decoy) == Some(2)
        && hops.get(v, pp.key) == Some(1)
}

/// Deterministic corpus for a seed. Labels follow [`LabelSchema::poi`].
pub fn generate_synthetic(cfg: &GenConfig, seed: u64) -> Result<SyntheticCorpus> {
    let unique = LabelSchema::poi().unique_indices().len();
    if cfg.entities_per_doc < unique {
        return Err(Error::Config(format!(
            "entities_per_doc {} is below the {unique} unique fields",
            cfg.entities_per_doc
        )));
    }
    if cfg.templates == 0 || cfg.docs_per_template == 0 {
        return Err(Error::Config("need at least one template and one document".into()));
    }
    if !(0.0..=1.0).contains(&cfg.hop_sensitive_fraction) {
        return Err(Error::Config(format!(
            "hop_sensitive_fraction {} outside [0, 1]",
            cfg.hop_sensitive_fraction
        )));
    }
    if cfg.k == 0 || !(0.0..0.05).contains(&cfg.jitter) {
        return Err(Error::Config("k must be positive and jitter in [0, 0.05)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Template> = (0..cfg.templates).map(|i| make_template(i, &mut rng)).collect();
    let mut documents = Vec::new();
    let mut planted = Vec::new();
    for t in &templates {
        for d in 0..cfg.docs_per_template {
            let plant = rng.random_bool(cfg.hop_sensitive_fraction);
            let (doc, pp) = build_document(t, format!("{}-{d:04}", t.tag), cfg, plant, &mut rng);
            documents.push(doc);
            planted.push(pp);
        }
    }
    Ok(SyntheticCorpus { documents, planted })
}
