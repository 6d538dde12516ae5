//! Layout quality metrics: graphic metrics on the boxes alone, composition
//! metrics against raster grids, and constraint-satisfaction ratios.
//!
//! A pixel `(x, y)` belongs to a box when its center
//! `((x + 0.5) / w, (y + 0.5) / h)` lies in the closed box.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::constraints::{AttributeConstraint, PartialLayout};
use crate::error::{Error, Result};
use crate::layout::{BBox, Category, Element, FlatRow, Layout, FLAT_WIDTH};

/// Row-major raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Grid> {
        if values.len() != h * w {
            return Err(Error::Shape(format!(
                "grid {h}x{w} needs {} values, got {}",
                h * w,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("grid value {v} outside [0, 1]")));
        }
        Ok(Grid { h, w, values })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Grid {
        Grid {
            h,
            w,
            values: vec![value; h * w],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.w + x]
    }

    fn pixel_center(&self, x: usize, y: usize) -> (f64, f64) {
        ((x as f64 + 0.5) / self.w as f64, (y as f64 + 0.5) / self.h as f64)
    }

    /// Pixel indices whose centers fall inside `b`.
    pub fn pixels_in(&self, b: &BBox) -> impl Iterator<Item = (usize, usize)> + '_ {
        let b = *b;
        // candidate index range with one pixel of slack; the exact test is the filter
        let span = |lo: f64, hi: f64, n: usize| {
            let first = (lo * n as f64 - 1.5).floor().max(0.0) as usize;
            let last = ((hi * n as f64 + 0.5).ceil().max(0.0) as usize).min(n);
            first.min(n)..last
        };
        let xs = span(b.left(), b.right(), self.w);
        let ys = span(b.top(), b.bottom(), self.h);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
            .filter(move |&(x, y)| {
                let (px, py) = self.pixel_center(x, y);
                b.contains_point(px, py)
            })
    }

    /// Mean-pools onto a `gh x gw` grid; pixel `(x, y)` feeds cell
    /// `(x * gw / w, y * gh / h)`.
    pub fn downsample(&self, gh: usize, gw: usize) -> Grid {
        let mut sums = vec![0.0; gh * gw];
        let mut counts = vec![0usize; gh * gw];
        for y in 0..self.h {
            let cy = y * gh / self.h;
            for x in 0..self.w {
                let cell = cy * gw + x * gw / self.w;
                sums[cell] += self.get(x, y);
                counts[cell] += 1;
            }
        }
        let values = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect();
        Grid { h: gh, w: gw, values }
    }
}

/// Mean pairwise IoU over non-underlay elements; 0 with fewer than two.
pub fn r_ove(layout: &Layout) -> f64 {
    let boxes: Vec<&BBox> = layout
        .elements()
        .iter()
        .filter(|e| e.category != Category::Underlay)
        .map(|e| &e.bbox)
        .collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            sum += boxes[i].iou(boxes[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// For each underlay, the best fraction of a non-underlay element it covers,
/// averaged over underlays. `None` when the layout has no underlay.
pub fn r_und(layout: &Layout) -> Option<f64> {
    let (underlays, others): (Vec<&Element>, Vec<&Element>) = layout
        .elements()
        .iter()
        .partition(|e| e.category == Category::Underlay);
    if underlays.is_empty() {
        return None;
    }
    let total: f64 = underlays
        .iter()
        .map(|u| {
            others
                .iter()
                .map(|e| u.bbox.intersection_area(&e.bbox) / e.bbox.area())
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / underlays.len() as f64)
}

fn alignment_axes(b: &BBox) -> [f64; 6] {
    [b.left(), b.cx, b.right(), b.top(), b.cy, b.bottom()]
}

/// For each element, the smallest coordinate gap to any other element on any
/// of the six alignment axes, averaged over elements.
pub fn r_ali(layout: &Layout) -> f64 {
    let els = layout.elements();
    if els.len() < 2 {
        return 0.0;
    }
    let axes: Vec<[f64; 6]> = els.iter().map(|e| alignment_axes(&e.bbox)).collect();
    let total: f64 = (0..els.len())
        .map(|i| {
            let mut best = f64::INFINITY;
            for j in (0..els.len()).filter(|&j| j != i) {
                for a in 0..6 {
                    best = best.min((axes[i][a] - axes[j][a]).abs());
                }
            }
            best
        })
        .sum();
    total / els.len() as f64
}

/// Fraction of layouts with at least one element.
pub fn r_occ(layouts: &[Layout]) -> Result<f64> {
    if layouts.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(layouts.iter().filter(|l| !l.is_empty()).count() as f64 / layouts.len() as f64)
}

/// Fraction of layouts satisfying `attr`.
pub fn r_lac(layouts: &[Layout], attr: AttributeConstraint) -> Result<f64> {
    if attr == AttributeConstraint::Unspecified {
        return Err(Error::UnspecifiedAttribute);
    }
    if layouts.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut ok = 0usize;
    for l in layouts {
        if attr.is_satisfied_by(l)? {
            ok += 1;
        }
    }
    Ok(ok as f64 / layouts.len() as f64)
}

/// Sum of `|pred - PL|` over constrained slots, and the number of those slots.
pub fn plc_terms(pred: &[FlatRow], pl: &PartialLayout) -> Result<(f64, usize)> {
    if pred.len() != pl.q_total() {
        return Err(Error::Shape(format!(
            "{} prediction rows for a partial layout of {}",
            pred.len(),
            pl.q_total()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for ((p, v), pres) in pred.iter().zip(pl.values()).zip(pl.presence()) {
        for j in 0..FLAT_WIDTH {
            if pres[j] {
                sum += (p[j] - v[j]).abs();
                n += 1;
            }
        }
    }
    Ok((sum, n))
}

/// Mean absolute deviation over every constrained slot of the set; 0 when
/// nothing is constrained.
pub fn r_plc(preds: &[Vec<FlatRow>], pls: &[PartialLayout]) -> Result<f64> {
    if preds.len() != pls.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} partial layouts",
            preds.len(),
            pls.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (p, pl) in preds.iter().zip(pls) {
        let (s, k) = plc_terms(p, pl)?;
        sum += s;
        n += k;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Sobel gradient magnitude at every pixel, kernels scaled by 1/8 and the
/// border replicated.
pub fn sobel_magnitude(grid: &Grid) -> Result<Vec<f64>> {
    if grid.h < 3 || grid.w < 3 {
        return Err(Error::GridTooSmall { h: grid.h, w: grid.w });
    }
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, grid.w as isize - 1) as usize;
        let y = y.clamp(0, grid.h as isize - 1) as usize;
        grid.get(x, y)
    };
    let mut out = Vec::with_capacity(grid.h * grid.w);
    for y in 0..grid.h as isize {
        for x in 0..grid.w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out.push((gx / 8.0).hypot(gy / 8.0));
        }
    }
    Ok(out)
}

/// Background complexity under text: mean Sobel magnitude inside each text
/// box, averaged over text boxes that cover at least one pixel.
pub fn r_com(layout: &Layout, gray: &Grid) -> Result<f64> {
    let mag = sobel_magnitude(gray)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for e in layout.elements().iter().filter(|e| e.category == Category::Text) {
        let (s, n) = gray
            .pixels_in(&e.bbox)
            .fold((0.0, 0usize), |(s, n), (x, y)| (s + mag[y * gray.w + x], n + 1));
        if n > 0 {
            total += s / n as f64;
            counted += 1;
        }
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// Mean grid value over the union of pixels covered by any element.
pub fn covered_mean(layout: &Layout, grid: &Grid) -> f64 {
    let mut covered = vec![false; grid.h * grid.w];
    for e in layout.elements() {
        for (x, y) in grid.pixels_in(&e.bbox) {
            covered[y * grid.w + x] = true;
        }
    }
    let (s, n) = covered
        .iter()
        .zip(grid.values())
        .filter(|(c, _)| **c)
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Subject occlusion against a saliency grid.
pub fn r_shm(layout: &Layout, saliency: &Grid) -> f64 {
    covered_mean(layout, saliency)
}

/// Product occlusion against an attention grid.
pub fn r_sub(layout: &Layout, attention: &Grid) -> f64 {
    covered_mean(layout, attention)
}

mod absent {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("absent"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Str(s) if s == "absent" => Ok(None),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unexpected metric value {s:?}"))),
        }
    }
}

/// Metric values over a set of generated layouts. `None` means the metric
/// does not apply (no underlays, or no attribute/partial protocol).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r_com: f64,
    pub r_shm: f64,
    pub r_sub: f64,
    pub r_ove: f64,
    #[serde(with = "absent")]
    pub r_und: Option<f64>,
    pub r_ali: f64,
    pub r_occ: f64,
    #[serde(with = "absent")]
    pub r_lac: Option<f64>,
    #[serde(with = "absent")]
    pub r_plc: Option<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Rows of `(name, value)` with absent metrics rendered as "−".
    pub fn table(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format!("{v:.4}");
        let o = |v: Option<f64>| v.map_or("\u{2212}".to_string(), f);
        vec![
            ("R_com", f(self.r_com)),
            ("R_shm", f(self.r_shm)),
            ("R_sub", f(self.r_sub)),
            ("R_ove", f(self.r_ove)),
            ("R_und", o(self.r_und)),
            ("R_ali", f(self.r_ali)),
            ("R_occ", f(self.r_occ)),
            ("R_lac", o(self.r_lac)),
            ("R_plc", o(self.r_plc)),
        ]
    }
}

/// Running sums behind a [`MetricReport`]; partial accumulators merge exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricAccumulator {
    layouts: usize,
    non_empty: usize,
    com: f64,
    shm: f64,
    sub: f64,
    ove: f64,
    ali: f64,
    und: f64,
    und_count: usize,
    lac: Option<(AttributeConstraint, usize)>,
    plc_sum: f64,
    plc_slots: usize,
    plc_seen: bool,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_attribute(attr: AttributeConstraint) -> Result<Self> {
        if attr == AttributeConstraint::Unspecified {
            return Err(Error::UnspecifiedAttribute);
        }
        Ok(MetricAccumulator {
            lac: Some((attr, 0)),
            ..Self::default()
        })
    }

    /// Adds one generated layout; `saliency` doubles as the background image
    /// for the complexity metric.
    pub fn add(&mut self, layout: &Layout, saliency: &Grid, attention: &Grid) -> Result<()> {
        self.layouts += 1;
        if !layout.is_empty() {
            self.non_empty += 1;
        }
        self.com += r_com(layout, saliency)?;
        self.shm += r_shm(layout, saliency);
        self.sub += r_sub(layout, attention);
        self.ove += r_ove(layout);
        self.ali += r_ali(layout);
        if let Some(u) = r_und(layout) {
            self.und += u;
            self.und_count += 1;
        }
        if let Some((attr, ok)) = &mut self.lac {
            if attr.is_satisfied_by(layout)? {
                *ok += 1;
            }
        }
        Ok(())
    }

    pub fn add_partial(&mut self, pred: &[FlatRow], pl: &PartialLayout) -> Result<()> {
        let (s, n) = plc_terms(pred, pl)?;
        self.plc_sum += s;
        self.plc_slots += n;
        self.plc_seen = true;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.layouts += other.layouts;
        self.non_empty += other.non_empty;
        self.com += other.com;
        self.shm += other.shm;
        self.sub += other.sub;
        self.ove += other.ove;
        self.ali += other.ali;
        self.und += other.und;
        self.und_count += other.und_count;
        if let (Some((_, a)), Some((_, b))) = (&mut self.lac, &other.lac) {
            *a += b;
        }
        self.plc_sum += other.plc_sum;
        self.plc_slots += other.plc_slots;
        self.plc_seen |= other.plc_seen;
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.layouts == 0 {
            return Err(Error::EmptySet);
        }
        let n = self.layouts as f64;
        Ok(MetricReport {
            r_com: self.com / n,
            r_shm: self.shm / n,
            r_sub: self.sub / n,
            r_ove: self.ove / n,
            r_und: (self.und_count > 0).then(|| self.und / self.und_count as f64),
            r_ali: self.ali / n,
            r_occ: self.non_empty as f64 / n,
            r_lac: self.lac.map(|(_, ok)| ok as f64 / n),
            r_plc: self.plc_seen.then(|| {
                if self.plc_slots == 0 {
                    0.0
                } else {
                    self.plc_sum / self.plc_slots as f64
                }
            }),
        })
    }
}
