//! Bounding-box normalization and the pairwise distance/angle features fed to
//! attention.
//!
//! All pairwise features are measured between box centroids on the unit page.
//! Distances are divided by the page diagonal (`√2`) so they stay in `[0, 1]`,
//! and angles use image coordinates (y grows downward) as returned by `atan2`.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::data::{Document, PageSize};
use crate::error::{Error, Result};

/// Axis-aligned box, `(x0, y0)` top-left and `(x1, y1)` bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite())
            && self.x0 <= self.x1
            && self.y0 <= self.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }
}

/// How a `(dist, angle)` pair is presented to the learnable maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaEncoding {
    /// `[dist, angle]` with the angle in radians.
    #[default]
    Raw,
    /// `[dist, sin angle, cos angle]`.
    SinCos,
}

impl SigmaEncoding {
    pub fn width(self) -> usize {
        match self {
            SigmaEncoding::Raw => 2,
            SigmaEncoding::SinCos => 3,
        }
    }
}

/// Pairwise relative distance and angle between entity centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaMatrix {
    n: usize,
    dist: Vec<f64>,
    angle: Vec<f64>,
}

impl SigmaMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    pub fn angle(&self, i: usize, j: usize) -> f64 {
        self.angle[i * self.n + j]
    }

    /// Row-major distance matrix, `n * n` entries.
    pub fn dist_matrix(&self) -> &[f64] {
        &self.dist
    }

    /// Flattened `n × n × width` feature block in the requested encoding.
    pub fn features(&self, encoding: SigmaEncoding) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * self.n * encoding.width());
        for (d, a) in self.dist.iter().zip(&self.angle) {
            match encoding {
                SigmaEncoding::Raw => out.extend_from_slice(&[*d, *a]),
                SigmaEncoding::SinCos => out.extend_from_slice(&[*d, a.sin(), a.cos()]),
            }
        }
        out
    }
}

/// Scales every box by the page size, clamping to the page first.
pub fn normalize_document(doc: &Document, page_w: f64, page_h: f64) -> Result<Document> {
    if !(page_w > 0.0 && page_h > 0.0 && page_w.is_finite() && page_h.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "page dimensions must be positive, got {page_w}x{page_h}"
        )));
    }
    let mut out = doc.clone();
    for e in &mut out.entities {
        let b = e.bbox;
        let cx = |v: f64| v.clamp(0.0, page_w) / page_w;
        let cy = |v: f64| v.clamp(0.0, page_h) / page_h;
        e.bbox = BBox::new(cx(b.x0), cy(b.y0), cx(b.x1), cy(b.y1));
    }
    out.page = PageSize::UNIT;
    Ok(out)
}

pub fn centroid(b: &BBox) -> (f64, f64) {
    ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0)
}

pub fn size_features(b: &BBox) -> (f64, f64) {
    (b.x1 - b.x0, b.y1 - b.y0)
}

/// Pairwise `σ(i, j)` over a normalized document.
pub fn pairwise_sigma(doc: &Document) -> Result<SigmaMatrix> {
    let centers: Vec<(f64, f64)> = doc.entities.iter().map(|e| centroid(&e.bbox)).collect();
    sigma_from_centroids(&centers)
}

pub fn sigma_from_centroids(centers: &[(f64, f64)]) -> Result<SigmaMatrix> {
    let n = centers.len();
    if n == 0 {
        return Err(Error::InvalidInput("document has no entities".into()));
    }
    let mut dist = vec![0.0; n * n];
    let mut angle = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dx = centers[j].0 - centers[i].0;
            let dy = centers[j].1 - centers[i].1;
            dist[i * n + j] = dx.hypot(dy) / SQRT_2;
            // coincident centroids keep angle 0
            if dx != 0.0 || dy != 0.0 {
                angle[i * n + j] = dy.atan2(dx);
            }
        }
    }
    Ok(SigmaMatrix { n, dist, angle })
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Entity;

    fn doc(boxes: &[BBox], page: PageSize) -> Document {
        Document {
            id: "d".into(),
            tag: None,
            page,
            entities: boxes
                .iter()
                .map(|b| Entity {
                    bbox: *b,
                    text: String::new(),
                    category: None,
                })
                .collect(),
        }
    }

    fn page(w: f64, h: f64) -> PageSize {
        PageSize { w, h }
    }

    #[test]
    fn normalize_examples() {
        let d = doc(
            &[
                BBox::new(0.0, 0.0, 200.0, 100.0),
                BBox::new(50.0, 25.0, 150.0, 75.0),
            ],
            page(200.0, 100.0),
        );
        let n = normalize_document(&d, 200.0, 100.0).unwrap();
        assert_eq!(n.entities[0].bbox, BBox::new(0.0, 0.0, 1.0, 1.0));
        assert_eq!(n.entities[1].bbox, BBox::new(0.25, 0.25, 0.75, 0.75));

        let d = doc(&[BBox::new(-5.0, 0.0, 10.0, 10.0)], page(100.0, 100.0));
        let n = normalize_document(&d, 100.0, 100.0).unwrap();
        assert_eq!(n.entities[0].bbox, BBox::new(0.0, 0.0, 0.1, 0.1));

        // second pass over a unit page is a no-op
        let again = normalize_document(&n, n.page.w, n.page.h).unwrap();
        assert_eq!(again, n);
    }

    #[test]
    fn normalize_rejects_bad_page() {
        let d = doc(&[BBox::new(0.0, 0.0, 1.0, 1.0)], page(1.0, 1.0));
        assert!(matches!(
            normalize_document(&d, 0.0, 10.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(normalize_document(&d, 10.0, -1.0).is_err());
    }

    #[test]
    fn centroid_and_size() {
        assert_eq!(centroid(&BBox::new(0.0, 0.0, 2.0, 2.0)), (1.0, 1.0));
        assert_eq!(centroid(&BBox::new(0.0, 0.0, 0.0, 0.0)), (0.0, 0.0));
        let (cx, cy) = centroid(&BBox::new(0.2, 0.4, 0.4, 0.8));
        assert!((cx - 0.3).abs() < 1e-15 && (cy - 0.6).abs() < 1e-15);

        assert_eq!(size_features(&BBox::new(0.0, 0.0, 1.0, 1.0)), (1.0, 1.0));
        assert_eq!(size_features(&BBox::new(0.25, 0.25, 0.75, 0.75)), (0.5, 0.5));
        assert_eq!(size_features(&BBox::new(0.3, 0.3, 0.3, 0.3)), (0.0, 0.0));
    }

    #[test]
    fn sigma_closed_form() {
        let s = sigma_from_centroids(&[(0.0, 0.0), (0.3, 0.4), (0.5, 0.0)]).unwrap();
        // 0.5 / √2 and atan2(0.4, 0.3)
        assert!((s.dist(0, 1) - 0.353_553_390_593_273_7).abs() < 1e-12);
        assert!((s.angle(0, 1) - 0.927_295_218_001_612_2).abs() < 1e-12);
        assert_eq!(s.dist(1, 1), 0.0);
        assert_eq!(s.angle(1, 1), 0.0);
        assert_eq!(s.angle(0, 2), 0.0);
    }

    #[test]
    fn sigma_coincident_and_empty() {
        let s = sigma_from_centroids(&[(0.5, 0.5), (0.5, 0.5)]).unwrap();
        assert_eq!(s.dist(0, 1), 0.0);
        assert_eq!(s.angle(0, 1), 0.0);
        let empty = doc(&[], page(1.0, 1.0));
        assert!(pairwise_sigma(&empty).is_err());
    }

    #[test]
    fn sincos_features() {
        let s = sigma_from_centroids(&[(0.0, 0.0), (0.0, 0.5)]).unwrap();
        let f = s.features(SigmaEncoding::SinCos);
        assert_eq!(f.len(), 12);
        // pair (0, 1): straight down in image coordinates
        assert!((f[3 + 1] - 1.0).abs() < 1e-15);
        assert!(f[3 + 2].abs() < 1e-15);
    }
}
