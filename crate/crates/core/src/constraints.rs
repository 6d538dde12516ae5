//! User constraints: layout attributes with their Gaussian noise encoding, and
//! partial layouts with explicit per-slot presence plus the 25% random mask.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{
    Category, FlatRow, Layout, BOX_OFFSET, FLAT_WIDTH, NUM_CATEGORIES, Q_MAX,
};

/// Fraction of constrained slots zeroed by the random mask.
pub const MASK_RATE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttributeConstraint {
    /// Texts but no other class of element.
    TextOnly,
    /// Underlays but no logos or embellishments.
    UnderlayNoLogoEmb,
    /// Logos but no embellishments.
    LogoNoEmb,
    /// At least one embellishment.
    WithEmbellishment,
    Unspecified,
}

impl AttributeConstraint {
    pub const ALL: [AttributeConstraint; 5] = [
        AttributeConstraint::TextOnly,
        AttributeConstraint::UnderlayNoLogoEmb,
        AttributeConstraint::LogoNoEmb,
        AttributeConstraint::WithEmbellishment,
        AttributeConstraint::Unspecified,
    ];

    /// The four attributes that actually constrain a layout, from most to
    /// least restrictive.
    pub const SPECIFIED: [AttributeConstraint; 4] = [
        AttributeConstraint::TextOnly,
        AttributeConstraint::UnderlayNoLogoEmb,
        AttributeConstraint::LogoNoEmb,
        AttributeConstraint::WithEmbellishment,
    ];

    pub fn attribute_category(self) -> Option<Category> {
        match self {
            AttributeConstraint::TextOnly => Some(Category::Text),
            AttributeConstraint::UnderlayNoLogoEmb => Some(Category::Underlay),
            AttributeConstraint::LogoNoEmb => Some(Category::Logo),
            AttributeConstraint::WithEmbellishment => Some(Category::Embellishment),
            AttributeConstraint::Unspecified => None,
        }
    }

    pub fn undesired(self) -> &'static [Category] {
        match self {
            AttributeConstraint::TextOnly => {
                &[Category::Underlay, Category::Logo, Category::Embellishment]
            }
            AttributeConstraint::UnderlayNoLogoEmb => &[Category::Logo, Category::Embellishment],
            AttributeConstraint::LogoNoEmb => &[Category::Embellishment],
            AttributeConstraint::WithEmbellishment | AttributeConstraint::Unspecified => &[],
        }
    }

    /// Mean of the four-channel noise that encodes this attribute.
    pub fn mean(self) -> [f64; 4] {
        match self {
            AttributeConstraint::TextOnly => [1.0, -1.0, -1.0, 1.0],
            AttributeConstraint::UnderlayNoLogoEmb => [1.0, -1.0, 1.0, -1.0],
            AttributeConstraint::LogoNoEmb => [1.0, 1.0, -1.0, -1.0],
            AttributeConstraint::WithEmbellishment => [1.0, 1.0, 1.0, 1.0],
            AttributeConstraint::Unspecified => [0.0; 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeConstraint::TextOnly => "text",
            AttributeConstraint::UnderlayNoLogoEmb => "underlay",
            AttributeConstraint::LogoNoEmb => "logo",
            AttributeConstraint::WithEmbellishment => "embellishment",
            AttributeConstraint::Unspecified => "unspecified",
        }
    }

    pub fn from_name(name: &str) -> Option<AttributeConstraint> {
        AttributeConstraint::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(name.trim()))
    }

    /// Whether `layout` has an attribute element and no undesired element.
    pub fn is_satisfied_by(self, layout: &Layout) -> Result<bool> {
        let a = self.attribute_category().ok_or(Error::UnspecifiedAttribute)?;
        Ok(layout.contains(a) && self.undesired().iter().all(|&u| !layout.contains(u)))
    }

    /// Most restrictive attribute the layout satisfies; `Unspecified` when none does.
    pub fn label_for(layout: &Layout) -> AttributeConstraint {
        AttributeConstraint::SPECIFIED
            .into_iter()
            .find(|a| a.is_satisfied_by(layout).unwrap_or(false))
            .unwrap_or(AttributeConstraint::Unspecified)
    }
}

impl std::fmt::Display for AttributeConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub mean: [f64; 4],
    pub grid_h: usize,
    pub grid_w: usize,
}

impl NoiseSpec {
    pub fn new(attr: AttributeConstraint, grid_h: usize, grid_w: usize) -> NoiseSpec {
        NoiseSpec {
            mean: attr.mean(),
            grid_h,
            grid_w,
        }
    }
}

/// Four-channel noise laid out channel-major: `data[(c * h + y) * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<f64>,
}

impl NoiseField {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.grid_h * self.grid_w;
        &self.data[c * n..(c + 1) * n]
    }

    /// The four channel values at cell `cell = y * w + x`.
    pub fn cell(&self, cell: usize) -> [f64; 4] {
        let n = self.grid_h * self.grid_w;
        [0, 1, 2, 3].map(|c| self.data[c * n + cell])
    }
}

/// Unit-variance Gaussian noise around `spec.mean`, deterministic in `seed`.
pub fn sample_noise(spec: &NoiseSpec, seed: u64) -> NoiseField {
    assert!(spec.grid_h >= 1 && spec.grid_w >= 1, "noise grid must be non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.grid_h * spec.grid_w;
    let mut data = Vec::with_capacity(4 * n);
    for mean in spec.mean {
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(mean + z);
        }
    }
    NoiseField {
        grid_h: spec.grid_h,
        grid_w: spec.grid_w,
        data,
    }
}

/// Per-slot constraint values with explicit presence flags, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialLayout {
    values: Vec<FlatRow>,
    presence: Vec<[bool; FLAT_WIDTH]>,
}

impl PartialLayout {
    pub fn new(values: Vec<FlatRow>, presence: Vec<[bool; FLAT_WIDTH]>) -> Result<PartialLayout> {
        if values.len() != presence.len() {
            return Err(Error::Shape(format!(
                "{} value rows but {} presence rows",
                values.len(),
                presence.len()
            )));
        }
        for (row, pres) in values.iter().zip(&presence) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("partial layout values".into()));
            }
            for j in BOX_OFFSET..FLAT_WIDTH {
                if pres[j] && !(0.0..=1.0).contains(&row[j]) {
                    return Err(Error::Validation(format!(
                        "constrained box value {} outside [0, 1]",
                        row[j]
                    )));
                }
            }
        }
        Ok(PartialLayout { values, presence })
    }

    /// A partial layout with no constrained slots.
    pub fn unconstrained(q_total: usize) -> PartialLayout {
        PartialLayout {
            values: vec![[0.0; FLAT_WIDTH]; q_total],
            presence: vec![[false; FLAT_WIDTH]; q_total],
        }
    }

    /// Constrains a whole category block of `row` to one-hot `category`.
    pub fn set_category(&mut self, row: usize, category: Category) {
        for k in 0..NUM_CATEGORIES {
            self.values[row][k] = if k == category.index() { 1.0 } else { 0.0 };
            self.presence[row][k] = true;
        }
    }

    /// Constrains box scalar `coord` (0..4 for cx, cy, w, h) of `row`.
    pub fn set_box(&mut self, row: usize, coord: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Validation(format!("box value {value} outside [0, 1]")));
        }
        self.values[row][BOX_OFFSET + coord] = value;
        self.presence[row][BOX_OFFSET + coord] = true;
        Ok(())
    }

    pub fn q_total(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[FlatRow] {
        &self.values
    }

    pub fn presence(&self) -> &[[bool; FLAT_WIDTH]] {
        &self.presence
    }

    pub fn constrained_slots(&self) -> usize {
        self.presence.iter().flatten().filter(|&&p| p).count()
    }

    pub fn row_has_presence(&self, row: usize) -> bool {
        self.presence[row].iter().any(|&p| p)
    }

    pub fn category_constrained(&self, row: usize) -> bool {
        self.presence[row][..NUM_CATEGORIES].iter().all(|&p| p)
    }

    /// Values with every unconstrained slot zeroed; this is what the generator sees.
    pub fn input_rows(&self) -> Vec<FlatRow> {
        self.values
            .iter()
            .zip(&self.presence)
            .map(|(row, pres)| {
                let mut out = [0.0; FLAT_WIDTH];
                for j in 0..FLAT_WIDTH {
                    if pres[j] {
                        out[j] = row[j];
                    }
                }
                out
            })
            .collect()
    }

    /// Same values with presence restricted to slots the mask keeps.
    pub fn masked(&self, mask: &RandomMask) -> Result<PartialLayout> {
        if mask.keep.len() != self.presence.len() {
            return Err(Error::Shape("mask rows do not match partial layout".into()));
        }
        let presence = self
            .presence
            .iter()
            .zip(&mask.keep)
            .map(|(p, k)| std::array::from_fn(|j| p[j] && k[j]))
            .collect();
        Ok(PartialLayout {
            values: self.values.clone(),
            presence,
        })
    }

    /// Presence inferred from nonzero values, the convention where zero means
    /// "not given". A legitimate coordinate of exactly 0 is lost.
    pub fn from_zero_convention(values: Vec<FlatRow>) -> Result<PartialLayout> {
        let presence = values.iter().map(|row| row.map(|v| v != 0.0)).collect();
        PartialLayout::new(values, presence)
    }

    pub fn from_json(text: &str) -> Result<PartialLayout> {
        let raw: RawPartial = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut pl = PartialLayout::unconstrained(Q_MAX);
        for e in raw.elements {
            if e.index >= Q_MAX {
                return Err(Error::Capacity {
                    got: e.index + 1,
                    capacity: Q_MAX,
                });
            }
            if let Some(name) = &e.category {
                match Category::from_name(name) {
                    Some(Category::None) | None => {
                        return Err(Error::Validation(format!("unknown category {name:?}")))
                    }
                    Some(c) => pl.set_category(e.index, c),
                }
            }
            for (coord, v) in [e.cx, e.cy, e.w, e.h].into_iter().enumerate() {
                if let Some(v) = v {
                    pl.set_box(e.index, coord, v)?;
                }
            }
        }
        Ok(pl)
    }

    /// Serializes constrained rows; a category block is written only when
    /// fully constrained and one-hot.
    pub fn to_json(&self) -> String {
        let mut elements = Vec::new();
        for (i, (row, pres)) in self.values.iter().zip(&self.presence).enumerate() {
            if !pres.iter().any(|&p| p) {
                continue;
            }
            let category = if self.category_constrained(i) {
                let hot: Vec<_> = (0..NUM_CATEGORIES).filter(|&k| row[k] == 1.0).collect();
                match hot.as_slice() {
                    [k] => Some(Category::from_index(*k).unwrap().name().to_string()),
                    _ => None,
                }
            } else {
                None
            };
            let slot = |j: usize| pres[BOX_OFFSET + j].then_some(row[BOX_OFFSET + j]);
            elements.push(RawPartialElement {
                index: i,
                category,
                cx: slot(0),
                cy: slot(1),
                w: slot(2),
                h: slot(3),
            });
        }
        serde_json::to_string_pretty(&RawPartial { elements }).expect("partial serializes")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartialElement {
    index: usize,
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    cx: Option<f64>,
    #[serde(default)]
    cy: Option<f64>,
    #[serde(default)]
    w: Option<f64>,
    #[serde(default)]
    h: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPartial {
    elements: Vec<RawPartialElement>,
}

/// Keep flags over the slots of a partial layout; `false` is a masked (zero) slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMask {
    keep: Vec<[bool; FLAT_WIDTH]>,
}

impl RandomMask {
    pub fn all_ones(q_total: usize) -> RandomMask {
        RandomMask {
            keep: vec![[true; FLAT_WIDTH]; q_total],
        }
    }

    pub fn from_keep(keep: Vec<[bool; FLAT_WIDTH]>) -> RandomMask {
        RandomMask { keep }
    }

    pub fn keep(&self) -> &[[bool; FLAT_WIDTH]] {
        &self.keep
    }

    /// Number of slots in `pl`'s support that the mask zeroes.
    pub fn zeros_on(&self, pl: &PartialLayout) -> usize {
        pl.presence()
            .iter()
            .zip(&self.keep)
            .map(|(p, k)| (0..FLAT_WIDTH).filter(|&j| p[j] && !k[j]).count())
            .sum()
    }
}

/// `round(0.25 * n)` with halves rounded up.
pub fn masked_count(n: usize) -> usize {
    (MASK_RATE * n as f64 + 0.5).floor() as usize
}

/// Zeroes exactly `round(0.25 * n)` of the `n` constrained slots, chosen
/// uniformly without replacement.
pub fn sample_random_mask(pl: &PartialLayout, seed: u64) -> Result<RandomMask> {
    let slots: Vec<(usize, usize)> = pl
        .presence()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..FLAT_WIDTH).filter(move |&j| p[j]).map(move |j| (i, j)))
        .collect();
    if slots.is_empty() {
        return Err(Error::EmptyConstraint);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![[true; FLAT_WIDTH]; pl.q_total()];
    for idx in sample_indices(&mut rng, slots.len(), masked_count(slots.len())) {
        let (i, j) = slots[idx];
        keep[i][j] = false;
    }
    Ok(RandomMask { keep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{BBox, Element};

    fn dist(a: [f64; 4], b: [f64; 4]) -> f64 {
        a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn tabulated_attributes() {
        use AttributeConstraint::*;
        assert_eq!(LogoNoEmb.mean(), [1.0, 1.0, -1.0, -1.0]);
        assert_eq!(Unspecified.mean(), [0.0; 4]);
        assert_eq!(TextOnly.mean(), [1.0, -1.0, -1.0, 1.0]);
        assert_eq!(UnderlayNoLogoEmb.mean(), [1.0, -1.0, 1.0, -1.0]);
        assert_eq!(WithEmbellishment.mean(), [1.0; 4]);

        assert_eq!(TextOnly.attribute_category(), Some(Category::Text));
        assert_eq!(
            TextOnly.undesired(),
            &[Category::Underlay, Category::Logo, Category::Embellishment]
        );
        assert_eq!(UnderlayNoLogoEmb.undesired(), &[Category::Logo, Category::Embellishment]);
        assert_eq!(LogoNoEmb.undesired(), &[Category::Embellishment]);
        assert!(WithEmbellishment.undesired().is_empty());
        assert_eq!(Unspecified.attribute_category(), None);

        let means: std::collections::HashSet<_> = AttributeConstraint::ALL
            .iter()
            .map(|a| a.mean().map(|v| v as i64))
            .collect();
        assert_eq!(means.len(), 5);
    }

    #[test]
    fn attribute_mean_geometry() {
        let specified = AttributeConstraint::SPECIFIED.map(|a| a.mean());
        for i in 0..4 {
            assert!((dist(specified[i], [0.0; 4]) - 2.0).abs() < 1e-12);
            for j in i + 1..4 {
                assert!((dist(specified[i], specified[j]) - 8f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_is_deterministic_and_centered() {
        let spec = NoiseSpec {
            mean: [1.0; 4],
            grid_h: 100,
            grid_w: 1000,
        };
        let a = sample_noise(&spec, 7);
        let b = sample_noise(&spec, 7);
        assert_eq!(a, b);
        for c in 0..4 {
            let m = a.channel(c).iter().sum::<f64>() / 1e5;
            assert!((m - 1.0).abs() < 0.02, "channel {c} mean {m}");
        }
        assert_ne!(a, sample_noise(&spec, 8));
    }

    #[test]
    fn zero_convention_presence() {
        let pl = PartialLayout::from_zero_convention(vec![[0.0; 9]; 3]).unwrap();
        assert_eq!(pl.constrained_slots(), 0);

        let pl = PartialLayout::from_zero_convention(vec![[0.0, 0.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.2, 0.1]]).unwrap();
        let on: Vec<_> = (0..9).filter(|&j| pl.presence()[0][j]).collect();
        assert_eq!(on, vec![2, 5, 6, 7, 8]);

        let pl = PartialLayout::from_zero_convention(vec![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.2, 0.1]]).unwrap();
        assert!(!pl.presence()[0][BOX_OFFSET]);
    }

    #[test]
    fn zero_convention_marks_flattened_layout() {
        let l = Layout::new(
            240,
            350,
            vec![Element::new(Category::Logo, BBox::new(0.3, 0.4, 0.2, 0.1).unwrap()).unwrap()],
        )
        .unwrap();
        let pl = PartialLayout::from_zero_convention(l.flatten(2).unwrap()).unwrap();
        assert!(pl.presence()[0][Category::Logo.index()]);
        assert!((BOX_OFFSET..FLAT_WIDTH).all(|j| pl.presence()[0][j]));
    }

    #[test]
    fn mask_counts() {
        assert_eq!(masked_count(8), 2);
        assert_eq!(masked_count(6), 2);
        assert_eq!(masked_count(2), 1);
        assert_eq!(masked_count(1), 0);
        let mut pl = PartialLayout::unconstrained(Q_MAX);
        for i in 0..2 {
            for c in 0..4 {
                pl.set_box(i, c, 0.5).unwrap();
            }
        }
        let m = sample_random_mask(&pl, 3).unwrap();
        assert_eq!(m.zeros_on(&pl), 2);
        assert_eq!(m, sample_random_mask(&pl, 3).unwrap());
        // masked slots stay inside the support
        for (i, k) in m.keep().iter().enumerate() {
            for j in 0..FLAT_WIDTH {
                if !k[j] {
                    assert!(pl.presence()[i][j]);
                }
            }
        }
        assert!(matches!(
            sample_random_mask(&PartialLayout::unconstrained(4), 0),
            Err(Error::EmptyConstraint)
        ));
    }

    #[test]
    fn partial_json_round_trip() {
        let text = r#"{"elements":[{"index":0,"category":"text","cx":0.5,"cy":null,"w":0.3,"h":null},{"index":3,"cx":0.25}]}"#;
        let pl = PartialLayout::from_json(text).unwrap();
        assert_eq!(pl.q_total(), Q_MAX);
        assert_eq!(pl.constrained_slots(), 5 + 2 + 1);
        assert!(pl.category_constrained(0));
        assert!(!pl.row_has_presence(1));
        assert_eq!(PartialLayout::from_json(&pl.to_json()).unwrap(), pl);
        assert!(PartialLayout::from_json(r#"{"elements":[{"index":10,"cx":0.1}]}"#).is_err());
        assert!(PartialLayout::from_json(r#"{"elements":[{"index":0,"cx":1.5}]}"#).is_err());
    }

    #[test]
    fn labels_follow_restrictiveness_order() {
        let el = |c| Element::new(c, BBox::new(0.5, 0.5, 0.1, 0.1).unwrap()).unwrap();
        let mk = |cs: &[Category]| Layout::new(240, 350, cs.iter().map(|&c| el(c)).collect()).unwrap();
        use AttributeConstraint::*;
        assert_eq!(AttributeConstraint::label_for(&mk(&[Category::Text])), TextOnly);
        assert_eq!(
            AttributeConstraint::label_for(&mk(&[Category::Text, Category::Underlay])),
            UnderlayNoLogoEmb
        );
        assert_eq!(
            AttributeConstraint::label_for(&mk(&[Category::Logo, Category::Underlay, Category::Text])),
            LogoNoEmb
        );
        assert_eq!(
            AttributeConstraint::label_for(&mk(&[Category::Logo, Category::Embellishment])),
            WithEmbellishment
        );
        assert_eq!(AttributeConstraint::label_for(&Layout::empty()), Unspecified);
        assert!(Unspecified.is_satisfied_by(&Layout::empty()).is_err());
    }
}
