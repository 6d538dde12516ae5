//! Deterministic synthetic posters: layouts with realistic category
//! statistics, paired saliency/attention grids, attribute labels and partial
//! layouts, plus dataset and grid file I/O.

mod io;
mod pgm;

pub use io::{read_dataset, read_sample, write_dataset, write_sample};
pub use pgm::{load_grid, parse_pgm, save_grid, to_pgm};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::constraints::{AttributeConstraint, PartialLayout};
use crate::error::{Error, Result};
use crate::layout::{BBox, Category, Element, Layout, CANVAS_H, CANVAS_W, Q_MAX};
use crate::metrics::Grid;

/// Target share of each real category among all generated elements, in
/// `Category::REAL` order (text, logo, underlay, embellishment).
pub const TARGET_PROPORTIONS: [f64; 4] = [0.6112, 0.1289, 0.2276, 0.0323];

pub const DEFAULT_GRID_W: usize = 64;
pub const DEFAULT_GRID_H: usize = 93;

/// Stream offset separating partial-layout draws from sample draws.
const PARTIAL_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub seed: u64,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Shares of text, logo, underlay and embellishment elements.
    pub proportions: [f64; 4],
    pub min_elements: usize,
    pub max_elements: usize,
}

impl DatasetSpec {
    pub fn new(n_samples: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_samples,
            seed,
            grid_w: DEFAULT_GRID_W,
            grid_h: DEFAULT_GRID_H,
            proportions: TARGET_PROPORTIONS,
            min_elements: 1,
            max_elements: Q_MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Validation("n_samples must be at least 1".into()));
        }
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(Error::Validation("grid dimensions must be positive".into()));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-4 || self.proportions.iter().any(|p| *p < 0.0) {
            return Err(Error::Validation(format!(
                "category proportions must be non-negative and sum to 1, got {total}"
            )));
        }
        // every underlay comes paired with a text
        if self.proportions[2] > self.proportions[0] {
            return Err(Error::Validation("underlay share cannot exceed text share".into()));
        }
        if self.min_elements < 1 || self.min_elements > self.max_elements || self.max_elements > Q_MAX {
            return Err(Error::Validation(format!(
                "element range [{}, {}] must lie within [1, {Q_MAX}]",
                self.min_elements, self.max_elements
            )));
        }
        Ok(())
    }

    /// Probabilities of the four placement units: an underlay with its text,
    /// a lone text, a logo, an embellishment. A pair contributes two elements,
    /// so unit odds are element shares rescaled by `1 / (1 + p_underlay)`.
    fn unit_probabilities(&self) -> [f64; 4] {
        let [text, logo, underlay, emb] = self.proportions;
        let z = 1.0 - underlay;
        [underlay / z, (text - underlay) / z, logo / z, emb / z]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub layout: Layout,
    pub saliency: Grid,
    pub attention: Grid,
    pub attribute: AttributeConstraint,
    pub partial: PartialLayout,
}

/// Generates `spec.n_samples` samples; sample `i` depends only on
/// `(spec, i)`, so the work is split across threads without affecting output.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.n_samples)
        .into_par_iter()
        .map(|i| generate_one(spec, i))
        .collect()
}

/// The `index`-th sample of the dataset described by `spec`.
pub fn generate_one(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let blobs = sample_blobs(&mut rng);
    let saliency = render_blobs(&blobs, spec.grid_h, spec.grid_w);
    let attention = render_blobs(&blobs[..1], spec.grid_h, spec.grid_w);
    let layout = sample_layout(spec, &blobs, &mut rng)?;
    let attribute = AttributeConstraint::label_for(&layout);
    let partial = extract_partial(&layout, spec.seed ^ (PARTIAL_STREAM + index as u64))?;
    Ok(Sample {
        layout,
        saliency,
        attention,
        attribute,
        partial,
    })
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    peak: f64,
}

fn sample_blobs(rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let n = rng.gen_range(1..=3);
    (0..n)
        .map(|k| Blob {
            cx: rng.gen_range(0.2..0.8),
            cy: rng.gen_range(0.2..0.8),
            sx: rng.gen_range(0.06..0.18),
            sy: rng.gen_range(0.05..0.15),
            // the first blob is the product and is always the brightest
            peak: if k == 0 { 1.0 } else { rng.gen_range(0.5..0.9) },
        })
        .collect()
}

fn render_blobs(blobs: &[Blob], h: usize, w: usize) -> Grid {
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        let py = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let px = (x as f64 + 0.5) / w as f64;
            let v = blobs
                .iter()
                .map(|b| {
                    let dx = (px - b.cx) / b.sx;
                    let dy = (py - b.cy) / b.sy;
                    b.peak * (-0.5 * (dx * dx + dy * dy)).exp()
                })
                .fold(0.0, f64::max);
            values.push(v.clamp(0.0, 1.0));
        }
    }
    Grid::new(h, w, values).expect("blob values lie in [0, 1]")
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unit {
    UnderlayText,
    Text,
    Logo,
    Embellishment,
}

fn sample_unit(probs: &[f64; 4], rng: &mut ChaCha8Rng) -> Unit {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (p, unit) in probs
        .iter()
        .zip([Unit::UnderlayText, Unit::Text, Unit::Logo, Unit::Embellishment])
    {
        acc += p;
        if u < acc {
            return unit;
        }
    }
    Unit::Embellishment
}

/// Width and height ranges by category.
fn size_range(cat: Category) -> ((f64, f64), (f64, f64)) {
    match cat {
        Category::Text => ((0.3, 0.8), (0.04, 0.1)),
        Category::Logo => ((0.1, 0.25), (0.04, 0.1)),
        Category::Embellishment => ((0.05, 0.2), (0.03, 0.12)),
        Category::Underlay | Category::None => ((0.3, 0.8), (0.05, 0.12)),
    }
}

fn sample_layout(spec: &DatasetSpec, blobs: &[Blob], rng: &mut ChaCha8Rng) -> Result<Layout> {
    let probs = spec.unit_probabilities();
    let mut elements: Vec<Element> = Vec::new();
    // units are drawn until the element budget is met; a pair that would
    // overflow the budget is redrawn
    let target = rng.gen_range(spec.min_elements..=spec.max_elements);
    while elements.len() < target {
        let mut unit = sample_unit(&probs, rng);
        while unit == Unit::UnderlayText && elements.len() + 2 > spec.max_elements {
            unit = sample_unit(&probs, rng);
        }
        let avoid = rng.gen_bool(0.9);
        match unit {
            Unit::UnderlayText => {
                let ((w0, w1), (h0, h1)) = size_range(Category::Text);
                let (tw, th) = (rng.gen_range(w0..w1), rng.gen_range(h0..h1));
                let (mx, my) = (rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.03));
                let (uw, uh) = (tw + 2.0 * mx, th + 2.0 * my);
                let (cx, cy) = place(uw, uh, blobs, avoid, rng);
                elements.push(Element::new(Category::Underlay, BBox::new(cx, cy, uw, uh)?)?);
                elements.push(Element::new(Category::Text, BBox::new(cx, cy, tw, th)?)?);
            }
            Unit::Text | Unit::Logo | Unit::Embellishment => {
                let cat = match unit {
                    Unit::Text => Category::Text,
                    Unit::Logo => Category::Logo,
                    _ => Category::Embellishment,
                };
                let ((w0, w1), (h0, h1)) = size_range(cat);
                let (w, h) = (rng.gen_range(w0..w1), rng.gen_range(h0..h1));
                let (cx, cy) = place(w, h, blobs, avoid, rng);
                elements.push(Element::new(cat, BBox::new(cx, cy, w, h)?)?);
            }
        }
    }
    Layout::new(CANVAS_W, CANVAS_H, elements)
}

/// A center keeping a `w x h` box inside the canvas; when `avoid` is set,
/// up to 50 tries are spent looking for a box covering no blob peak.
fn place(w: f64, h: f64, blobs: &[Blob], avoid: bool, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let draw = |rng: &mut ChaCha8Rng| {
        (
            rng.gen_range(w / 2.0..=1.0 - w / 2.0),
            rng.gen_range(h / 2.0..=1.0 - h / 2.0),
        )
    };
    let mut pos = draw(rng);
    if avoid {
        for _ in 0..50 {
            let (cx, cy) = pos;
            let covers_peak = blobs
                .iter()
                .any(|b| (b.cx - cx).abs() <= w / 2.0 && (b.cy - cy).abs() <= h / 2.0);
            if !covers_peak {
                break;
            }
            pos = draw(rng);
        }
    }
    pos
}

/// Constrains `round(0.25 * 4n)` of the `4n` box scalars of an `n`-element
/// layout, chosen uniformly. An element whose four box scalars are all chosen
/// also has its category constrained.
pub fn extract_partial(layout: &Layout, seed: u64) -> Result<PartialLayout> {
    if layout.is_empty() {
        return Err(Error::EmptyLayout);
    }
    let n_slots = 4 * layout.len();
    let k = crate::constraints::masked_count(n_slots);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample_indices(&mut rng, n_slots, k).into_vec();
    chosen.sort_unstable();
    let mut pl = PartialLayout::unconstrained(Q_MAX);
    let mut per_element = vec![0usize; layout.len()];
    for slot in chosen {
        let (e, coord) = (slot / 4, slot % 4);
        pl.set_box(e, coord, layout.elements()[e].bbox.to_array()[coord])?;
        per_element[e] += 1;
    }
    for (e, &count) in per_element.iter().enumerate() {
        if count == 4 {
            pl.set_category(e, layout.elements()[e].category);
        }
    }
    Ok(pl)
}

/// Constrains all four box scalars, but not the category, of a uniformly
/// chosen non-empty subset of elements.
pub fn coordinates_only_partial(layout: &Layout, seed: u64) -> Result<PartialLayout> {
    if layout.is_empty() {
        return Err(Error::EmptyLayout);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=layout.len());
    let mut chosen = sample_indices(&mut rng, layout.len(), k).into_vec();
    chosen.sort_unstable();
    let mut pl = PartialLayout::unconstrained(Q_MAX);
    for e in chosen {
        for (coord, v) in layout.elements()[e].bbox.to_array().into_iter().enumerate() {
            pl.set_box(e, coord, v)?;
        }
    }
    Ok(pl)
}

/// Constrains category and box of a uniformly chosen non-empty subset of
/// elements.
pub fn whole_element_partial(layout: &Layout, seed: u64) -> Result<PartialLayout> {
    if layout.is_empty() {
        return Err(Error::EmptyLayout);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=layout.len());
    let mut chosen = sample_indices(&mut rng, layout.len(), k).into_vec();
    chosen.sort_unstable();
    let mut pl = PartialLayout::unconstrained(Q_MAX);
    for e in chosen {
        let el = &layout.elements()[e];
        pl.set_category(e, el.category);
        for (coord, v) in el.bbox.to_array().into_iter().enumerate() {
            pl.set_box(e, coord, v)?;
        }
    }
    Ok(pl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::BOX_OFFSET;

    fn layout_with(n: usize) -> Layout {
        let els = (0..n)
            .map(|i| {
                Element::new(
                    Category::Text,
                    BBox::new(0.5, 0.05 + 0.09 * i as f64, 0.5, 0.05).unwrap(),
                )
                .unwrap()
            })
            .collect();
        Layout::new(CANVAS_W, CANVAS_H, els).unwrap()
    }

    #[test]
    fn unit_probabilities_reproduce_element_shares() {
        let spec = DatasetSpec::new(1, 0);
        let [pair, text, logo, emb] = spec.unit_probabilities();
        assert!((pair + text + logo + emb - 1.0).abs() < 1e-12);
        let per_unit = 1.0 + pair;
        assert!(((pair + text) / per_unit - 0.6112).abs() < 1e-12);
        assert!((pair / per_unit - 0.2276).abs() < 1e-12);
        assert!((logo / per_unit - 0.1289).abs() < 1e-12);
        assert!((emb / per_unit - 0.0323).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(DatasetSpec::new(0, 1).validate().is_err());
        let mut s = DatasetSpec::new(3, 1);
        s.proportions = [0.5, 0.5, 0.5, 0.0];
        assert!(s.validate().is_err());
        assert!(generate(&s).is_err());
    }

    #[test]
    fn extract_partial_counts() {
        for (n, expected) in [(1, 1), (5, 5), (10, 10)] {
            let pl = extract_partial(&layout_with(n), 3).unwrap();
            let box_slots: usize = pl
                .presence()
                .iter()
                .map(|p| p[BOX_OFFSET..].iter().filter(|&&b| b).count())
                .sum();
            assert_eq!(box_slots, expected);
        }
        assert!(matches!(extract_partial(&Layout::empty(), 3), Err(Error::EmptyLayout)));
    }

    #[test]
    fn samples_are_consistent() {
        let samples = generate(&DatasetSpec::new(50, 9)).unwrap();
        for s in &samples {
            assert!(!s.layout.is_empty() && s.layout.len() <= Q_MAX);
            assert_eq!(s.attribute, AttributeConstraint::label_for(&s.layout));
            if s.attribute != AttributeConstraint::Unspecified {
                assert!(s.attribute.is_satisfied_by(&s.layout).unwrap());
            }
            // each underlay directly precedes the text it contains
            for (i, e) in s.layout.elements().iter().enumerate() {
                if e.category == Category::Underlay {
                    let t = &s.layout.elements()[i + 1];
                    assert_eq!(t.category, Category::Text);
                    assert!(e.bbox.left() <= t.bbox.left() && t.bbox.right() <= e.bbox.right());
                    assert!(e.bbox.top() <= t.bbox.top() && t.bbox.bottom() <= e.bbox.bottom());
                }
            }
            assert_eq!((s.saliency.h, s.saliency.w), (DEFAULT_GRID_H, DEFAULT_GRID_W));
        }
    }
}
