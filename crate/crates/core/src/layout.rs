//! Layout domain types, the flat per-query encoding, and the layout JSON codec.
//!
//! A layout element flattens to nine scalars: a one-hot block over the five
//! categories followed by `(cx, cy, w, h)`. Element `i` always lands on row
//! `i`, which is what binds a partial-layout element to generator query `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of elements in a layout, and the number of generator queries.
pub const Q_MAX: usize = 10;
/// Number of categories including `None`.
pub const NUM_CATEGORIES: usize = 5;
/// Scalars per flattened element.
pub const FLAT_WIDTH: usize = 9;
/// Column of the first box scalar in a flat row.
pub const BOX_OFFSET: usize = NUM_CATEGORIES;

/// Reference canvas size in pixels.
pub const CANVAS_W: u32 = 240;
pub const CANVAS_H: u32 = 350;

/// Slack allowed on normalized coordinates before ingest rejects them.
const INGEST_TOLERANCE: f64 = 1e-6;

pub type FlatRow = [f64; FLAT_WIDTH];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Text,
    Logo,
    Underlay,
    Embellishment,
    None,
}

impl Category {
    pub const ALL: [Category; NUM_CATEGORIES] = [
        Category::Text,
        Category::Logo,
        Category::Underlay,
        Category::Embellishment,
        Category::None,
    ];

    /// The four categories a real element can have.
    pub const REAL: [Category; 4] = [
        Category::Text,
        Category::Logo,
        Category::Underlay,
        Category::Embellishment,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Category> {
        Category::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Text => "text",
            Category::Logo => "logo",
            Category::Underlay => "underlay",
            Category::Embellishment => "embellishment",
            Category::None => "none",
        }
    }

    pub fn from_name(name: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box in center/size form, normalized to the canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Validates the four scalars and clamps the box edges to the canvas.
    ///
    /// Scalars within `1e-6` of the unit interval are clamped into it; anything
    /// further out is rejected. Boxes that overhang the canvas are cropped.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<BBox> {
        let cx = unit_scalar("cx", cx)?;
        let cy = unit_scalar("cy", cy)?;
        let w = unit_scalar("w", w)?;
        let h = unit_scalar("h", h)?;
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Validation(format!(
                "box size must be positive, got w={w}, h={h}"
            )));
        }
        let (cx, w) = clamp_span(cx, w);
        let (cy, h) = clamp_span(cy, h);
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Validation("box lies outside the canvas".into()));
        }
        Ok(BBox { cx, cy, w, h })
    }

    pub fn from_edges(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<BBox> {
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        // edge differences can exceed the true extent by rounding; a box
        // contained in another must intersect it in exactly its own area
        let iw = (self.right().min(other.right()) - self.left().max(other.left()))
            .min(self.w)
            .min(other.w);
        let ih = (self.bottom().min(other.bottom()) - self.top().max(other.top()))
            .min(self.h)
            .min(other.h);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.left() && x <= self.right() && y >= self.top() && y <= self.bottom()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

fn unit_scalar(name: &str, v: f64) -> Result<f64> {
    if !v.is_finite() || v < -INGEST_TOLERANCE || v > 1.0 + INGEST_TOLERANCE {
        return Err(Error::Validation(format!("{name}={v} is outside [0, 1]")));
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Crops a 1-D span to [0, 1]; untouched spans are returned bit-for-bit.
fn clamp_span(center: f64, size: f64) -> (f64, f64) {
    let lo = center - size / 2.0;
    let hi = center + size / 2.0;
    if lo >= 0.0 && hi <= 1.0 {
        return (center, size);
    }
    let lo = lo.max(0.0);
    let hi = hi.min(1.0);
    ((lo + hi) / 2.0, hi - lo)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Element {
    pub category: Category,
    pub bbox: BBox,
}

impl Element {
    pub fn new(category: Category, bbox: BBox) -> Result<Element> {
        if category == Category::None {
            return Err(Error::Validation(
                "category \"none\" cannot be stored in a layout".into(),
            ));
        }
        Ok(Element { category, bbox })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub canvas_w: u32,
    pub canvas_h: u32,
    elements: Vec<Element>,
}

impl Layout {
    pub fn new(canvas_w: u32, canvas_h: u32, elements: Vec<Element>) -> Result<Layout> {
        if elements.len() > Q_MAX {
            return Err(Error::Validation(format!(
                "layout has {} elements, at most {Q_MAX} allowed",
                elements.len()
            )));
        }
        if canvas_w == 0 || canvas_h == 0 {
            return Err(Error::Validation("canvas dimensions must be positive".into()));
        }
        if let Some(e) = elements.iter().find(|e| e.category == Category::None) {
            return Err(Error::Validation(format!(
                "element with category {} is not allowed",
                e.category
            )));
        }
        Ok(Layout {
            canvas_w,
            canvas_h,
            elements,
        })
    }

    pub fn empty() -> Layout {
        Layout {
            canvas_w: CANVAS_W,
            canvas_h: CANVAS_H,
            elements: Vec::new(),
        }
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn count(&self, category: Category) -> usize {
        self.elements.iter().filter(|e| e.category == category).count()
    }

    pub fn contains(&self, category: Category) -> bool {
        self.elements.iter().any(|e| e.category == category)
    }

    /// Flattens into `q_total` rows of nine scalars; row `i` holds element `i`
    /// and rows past the element count are `None` padding with a zero box.
    pub fn flatten(&self, q_total: usize) -> Result<Vec<FlatRow>> {
        if self.elements.len() > q_total {
            return Err(Error::Capacity {
                got: self.elements.len(),
                capacity: q_total,
            });
        }
        let mut rows = vec![padding_row(); q_total];
        for (row, e) in rows.iter_mut().zip(&self.elements) {
            *row = flat_element(e);
        }
        Ok(rows)
    }

    /// Inverse of [`Layout::flatten`]: rows whose category argmax is `None` are dropped.
    pub fn unflatten(rows: &[FlatRow], canvas_w: u32, canvas_h: u32) -> Result<Layout> {
        let mut elements = Vec::new();
        for row in rows {
            let category = Category::from_index(argmax(&row[..NUM_CATEGORIES])).unwrap();
            if category == Category::None {
                continue;
            }
            let b = &row[BOX_OFFSET..];
            elements.push(Element::new(category, BBox::new(b[0], b[1], b[2], b[3])?)?);
        }
        Layout::new(canvas_w, canvas_h, elements)
    }

    pub fn from_json(text: &str) -> Result<Layout> {
        let raw: RawLayout =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        raw.into_layout()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RawLayout::from(self)).expect("layout serializes")
    }
}

pub fn flat_element(e: &Element) -> FlatRow {
    let mut row = [0.0; FLAT_WIDTH];
    row[e.category.index()] = 1.0;
    row[BOX_OFFSET..].copy_from_slice(&e.bbox.to_array());
    row
}

pub fn padding_row() -> FlatRow {
    let mut row = [0.0; FLAT_WIDTH];
    row[Category::None.index()] = 1.0;
    row
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCanvas {
    w: u32,
    h: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawElement {
    category: String,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    canvas: RawCanvas,
    elements: Vec<RawElement>,
}

impl RawLayout {
    fn into_layout(self) -> Result<Layout> {
        let elements = self
            .elements
            .into_iter()
            .map(|e| {
                let category = match Category::from_name(&e.category) {
                    Some(Category::None) | None => {
                        return Err(Error::Validation(format!(
                            "unknown element category {:?}",
                            e.category
                        )))
                    }
                    Some(c) => c,
                };
                Element::new(category, BBox::new(e.cx, e.cy, e.w, e.h)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Layout::new(self.canvas.w, self.canvas.h, elements)
    }
}

impl From<&Layout> for RawLayout {
    fn from(layout: &Layout) -> Self {
        RawLayout {
            canvas: RawCanvas {
                w: layout.canvas_w,
                h: layout.canvas_h,
            },
            elements: layout
                .elements
                .iter()
                .map(|e| RawElement {
                    category: e.category.name().to_string(),
                    cx: e.bbox.cx,
                    cy: e.bbox.cy,
                    w: e.bbox.w,
                    h: e.bbox.h,
                })
                .collect(),
        }
    }
}

/// Generator output: one category distribution and one box per query.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    probs: Vec<[f64; NUM_CATEGORIES]>,
    boxes: Vec<[f64; 4]>,
    logits: Option<Vec<[f64; NUM_CATEGORIES]>>,
}

impl PredictionBatch {
    pub fn new(
        probs: Vec<[f64; NUM_CATEGORIES]>,
        boxes: Vec<[f64; 4]>,
        logits: Option<Vec<[f64; NUM_CATEGORIES]>>,
    ) -> Result<PredictionBatch> {
        if probs.len() != boxes.len() {
            return Err(Error::Shape(format!(
                "{} probability rows but {} boxes",
                probs.len(),
                boxes.len()
            )));
        }
        if let Some(z) = &logits {
            if z.len() != probs.len() {
                return Err(Error::Shape("logit rows do not match queries".into()));
            }
            if z.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("prediction logits".into()));
            }
        }
        for p in &probs {
            let s: f64 = p.iter().sum();
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!(
                    "probability row {p:?} is not a distribution"
                )));
            }
        }
        if boxes.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("box coordinates must lie in [0, 1]".into()));
        }
        Ok(PredictionBatch {
            probs,
            boxes,
            logits,
        })
    }

    /// Builds a batch from logits, deriving probabilities by a softmax.
    pub fn from_logits(logits: Vec<[f64; NUM_CATEGORIES]>, boxes: Vec<[f64; 4]>) -> Result<Self> {
        let probs = logits.iter().map(softmax_row).collect();
        PredictionBatch::new(probs, boxes, Some(logits))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[[f64; NUM_CATEGORIES]] {
        &self.probs
    }

    pub fn boxes(&self) -> &[[f64; 4]] {
        &self.boxes
    }

    pub fn logits(&self) -> Option<&[[f64; NUM_CATEGORIES]]> {
        self.logits.as_deref()
    }

    /// Logits if present, otherwise log-probabilities (which softmax back to `probs`).
    pub fn logits_or_log_probs(&self) -> Vec<[f64; NUM_CATEGORIES]> {
        match &self.logits {
            Some(z) => z.clone(),
            None => self
                .probs
                .iter()
                .map(|p| p.map(|v| v.max(1e-300).ln()))
                .collect(),
        }
    }

    /// Probabilities followed by the box, one row per query.
    pub fn flatten(&self) -> Vec<FlatRow> {
        self.probs
            .iter()
            .zip(&self.boxes)
            .map(|(p, b)| {
                let mut row = [0.0; FLAT_WIDTH];
                row[..NUM_CATEGORIES].copy_from_slice(p);
                row[BOX_OFFSET..].copy_from_slice(b);
                row
            })
            .collect()
    }

    pub fn hard_counts(&self) -> [usize; NUM_CATEGORIES] {
        let mut counts = [0; NUM_CATEGORIES];
        for p in &self.probs {
            counts[argmax(p)] += 1;
        }
        counts
    }

    /// Argmax decoding: `None` predictions and boxes with area below
    /// `min_area` are dropped; remaining boxes are cropped to the canvas.
    pub fn decode(&self, min_area: f64) -> Layout {
        let mut elements = Vec::new();
        for (p, b) in self.probs.iter().zip(&self.boxes) {
            let category = Category::from_index(argmax(p)).unwrap();
            if category == Category::None || b[2] * b[3] < min_area {
                continue;
            }
            if let Ok(bbox) = BBox::new(b[0], b[1], b[2], b[3]) {
                elements.push(Element { category, bbox });
            }
        }
        elements.truncate(Q_MAX);
        Layout::new(CANVAS_W, CANVAS_H, elements).expect("decoded layout is valid")
    }
}

pub fn softmax_row(z: &[f64; NUM_CATEGORIES]) -> [f64; NUM_CATEGORIES] {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}
