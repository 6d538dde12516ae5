//! Training objectives built on the autodiff tape.
//!
//! The batched functions take predictions for `B` samples stacked as
//! `[B * Q, ·]` matrices and return the *sum* of per-sample losses; the
//! single-sample wrappers are the same code with `B = 1`.

use serde::{Deserialize, Serialize};

use crate::constraints::{AttributeConstraint, PartialLayout, RandomMask};
use crate::error::{Error, Result};
use crate::layout::{softmax_row, Category, Layout, PredictionBatch, FLAT_WIDTH, NUM_CATEGORIES};
use crate::matching::{cost_from_parts, hungarian, COST_BOX_WEIGHT};
use crate::numerics::{Tape, Tensor, Var};

/// Weights of the total objective and the soft-count sharpness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 1.0,
            gamma: 0.1,
            eta: 1.0,
            epsilon: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.beta, self.gamma, self.eta].iter().any(|w| !(*w >= 0.0)) || !(self.epsilon > 0.0) {
            return Err(Error::Validation(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Soft category counts for each sample: `[B * queries, 5]` logits to `[B, 5]`.
pub fn soft_counts(tape: &mut Tape, logits: Var, queries: usize, epsilon: f64) -> Result<Var> {
    let sharp = tape.scale(logits, epsilon)?;
    let probs = tape.softmax(sharp)?;
    tape.group_sum_rows(probs, queries)
}

/// `N_c` for one sample with logits `[Q, 5]`.
pub fn soft_count(tape: &mut Tape, logits: Var, category: Category, epsilon: f64) -> Result<Var> {
    let q = tape.value(logits).dims2()?.0;
    let counts = soft_counts(tape, logits, q, epsilon)?;
    let n = tape.gather(counts, &[category.index()])?;
    tape.sum(n)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Sum over samples of `max(1 - N_a, 0)`; `Unspecified` samples contribute 0.
pub fn attribute_consistent_batch(
    tape: &mut Tape,
    counts: Var,
    attrs: &[AttributeConstraint],
) -> Result<Var> {
    check_rows(tape, counts, attrs.len())?;
    let indices: Vec<usize> = attrs
        .iter()
        .enumerate()
        .filter_map(|(b, a)| a.attribute_category().map(|c| b * NUM_CATEGORIES + c.index()))
        .collect();
    if indices.is_empty() {
        return Ok(zero(tape));
    }
    let n_a = tape.gather(counts, &indices)?;
    let deficit = tape.scale(n_a, -1.0)?;
    let deficit = tape.add_scalar(deficit, 1.0)?;
    let hinge = tape.max_scalar(deficit, 0.0)?;
    tape.sum(hinge)
}

/// Sum over samples of `sum_{u in S*} N_u`.
pub fn attribute_disentangled_batch(
    tape: &mut Tape,
    counts: Var,
    attrs: &[AttributeConstraint],
) -> Result<Var> {
    check_rows(tape, counts, attrs.len())?;
    let mut mask = vec![0.0; attrs.len() * NUM_CATEGORIES];
    for (b, a) in attrs.iter().enumerate() {
        for u in a.undesired() {
            mask[b * NUM_CATEGORIES + u.index()] = 1.0;
        }
    }
    if mask.iter().all(|&m| m == 0.0) {
        return Ok(zero(tape));
    }
    let mask = tape.constant(Tensor::matrix(attrs.len(), NUM_CATEGORIES, mask)?);
    let picked = tape.mul(counts, mask)?;
    tape.sum(picked)
}

fn check_rows(tape: &Tape, counts: Var, batch: usize) -> Result<()> {
    let (rows, cols) = tape.value(counts).dims2()?;
    if rows != batch || cols != NUM_CATEGORIES {
        return Err(Error::Shape(format!(
            "counts [{rows},{cols}] for {batch} attributes"
        )));
    }
    Ok(())
}

/// `L_Ac = max(1 - N_a, 0)` for one sample.
pub fn attribute_consistent_loss(
    tape: &mut Tape,
    logits: Var,
    attr: AttributeConstraint,
    epsilon: f64,
) -> Result<Var> {
    if attr == AttributeConstraint::Unspecified {
        return Err(Error::UnspecifiedAttribute);
    }
    let q = tape.value(logits).dims2()?.0;
    let counts = soft_counts(tape, logits, q, epsilon)?;
    attribute_consistent_batch(tape, counts, &[attr])
}

/// `L_Ad = sum of N_u over the undesired set` for one sample.
pub fn attribute_disentangled_loss(
    tape: &mut Tape,
    logits: Var,
    attr: AttributeConstraint,
    epsilon: f64,
) -> Result<Var> {
    if attr == AttributeConstraint::Unspecified {
        return Err(Error::UnspecifiedAttribute);
    }
    let q = tape.value(logits).dims2()?.0;
    let counts = soft_counts(tape, logits, q, epsilon)?;
    attribute_disentangled_batch(tape, counts, &[attr])
}

/// Sum of `|pred - PL|` over every slot selected by `weights`, where
/// `targets` is the stacked partial layouts and `weights` is 0/1.
fn weighted_l1(tape: &mut Tape, pred_flat: Var, targets: Tensor, weights: Tensor) -> Result<Var> {
    if tape.value(pred_flat).shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs partial layout {:?}",
            tape.value(pred_flat).shape(),
            targets.shape()
        )));
    }
    let t = tape.constant(targets);
    let w = tape.constant(weights);
    let diff = tape.sub(pred_flat, t)?;
    let abs = tape.abs(diff)?;
    let sel = tape.mul(abs, w)?;
    tape.sum(sel)
}

/// Masked partial-constraint loss summed over samples. `pred_flat` is
/// `[B * Q, 9]` with probabilities in the category block; a `None` mask
/// keeps every constrained slot.
pub fn masked_partial_batch(
    tape: &mut Tape,
    pred_flat: Var,
    partials: &[(&PartialLayout, Option<&RandomMask>)],
) -> Result<Var> {
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (pl, mask) in partials {
        if let Some(m) = mask {
            if m.keep().len() != pl.q_total() {
                return Err(Error::Shape("mask rows do not match partial layout".into()));
            }
        }
        for i in 0..pl.q_total() {
            targets.extend_from_slice(&pl.values()[i]);
            for j in 0..FLAT_WIDTH {
                let keep = mask.map_or(true, |m| m.keep()[i][j]);
                weights.push(if pl.presence()[i][j] && keep { 1.0 } else { 0.0 });
            }
        }
    }
    let rows = targets.len() / FLAT_WIDTH;
    let targets = Tensor::matrix(rows, FLAT_WIDTH, targets)?;
    let weights = Tensor::matrix(rows, FLAT_WIDTH, weights)?;
    weighted_l1(tape, pred_flat, targets, weights)
}

/// `L_P`: L1 over the constrained slots, row `i` against query `i`.
pub fn partial_loss(tape: &mut Tape, pred_flat: Var, pl: &PartialLayout) -> Result<Var> {
    masked_partial_batch(tape, pred_flat, &[(pl, None)])
}

/// `L_PL_rm`: like [`partial_loss`] but only over slots the mask keeps.
pub fn masked_partial_loss(
    tape: &mut Tape,
    pred_flat: Var,
    pl: &PartialLayout,
    mask: &RandomMask,
) -> Result<Var> {
    masked_partial_batch(tape, pred_flat, &[(pl, Some(mask))])
}

/// Probabilities next to boxes, the layout of a flattened prediction.
pub fn flat_prediction(tape: &mut Tape, logits: Var, boxes: Var) -> Result<Var> {
    let probs = tape.softmax(logits)?;
    tape.concat_cols(&[probs, boxes])
}

/// Set-matching reconstruction loss summed over samples.
///
/// Each sample's queries are matched to its padded ground truth with the
/// current prediction values; the assignment is then held fixed. Per sample
/// the loss is the mean negative log-probability of the matched category
/// over all queries, plus `5 *` the mean L1 box distance over matched real
/// elements.
pub fn reconstruction_batch(
    tape: &mut Tape,
    logits: Var,
    boxes: Var,
    gts: &[&Layout],
) -> Result<Var> {
    let (rows, cols) = tape.value(logits).dims2()?;
    if cols != NUM_CATEGORIES || gts.is_empty() || rows % gts.len() != 0 {
        return Err(Error::Shape(format!(
            "logits [{rows},{cols}] for {} samples",
            gts.len()
        )));
    }
    if tape.value(boxes).shape() != [rows, 4] {
        return Err(Error::Shape(format!("boxes {:?}", tape.value(boxes).shape())));
    }
    let q = rows / gts.len();

    let mut nll_indices = Vec::with_capacity(rows);
    let mut box_targets = vec![0.0; rows * 4];
    let mut box_weights = vec![0.0; rows * 4];
    for (b, gt) in gts.iter().enumerate() {
        let probs: Vec<[f64; NUM_CATEGORIES]> = (0..q)
            .map(|i| {
                let z = tape.value(logits).row(b * q + i);
                softmax_row(&std::array::from_fn(|k| z[k]))
            })
            .collect();
        let bx: Vec<[f64; 4]> = (0..q)
            .map(|i| {
                let r = tape.value(boxes).row(b * q + i);
                [r[0], r[1], r[2], r[3]]
            })
            .collect();
        let cost = cost_from_parts(&probs, &bx, gt)?;
        let assignment = hungarian(&cost)?;
        let n_real = gt.len();
        for (i, &t) in assignment.target_of.iter().enumerate() {
            let row = b * q + i;
            match gt.elements().get(t) {
                Some(e) => {
                    nll_indices.push(row * NUM_CATEGORIES + e.category.index());
                    let w = COST_BOX_WEIGHT / n_real as f64;
                    for (k, v) in e.bbox.to_array().into_iter().enumerate() {
                        box_targets[row * 4 + k] = v;
                        box_weights[row * 4 + k] = w;
                    }
                }
                None => nll_indices.push(row * NUM_CATEGORIES + Category::None.index()),
            }
        }
    }

    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, &nll_indices)?;
    let nll = tape.sum(picked)?;
    let nll = tape.scale(nll, -1.0 / q as f64)?;
    let box_term = weighted_l1(
        tape,
        boxes,
        Tensor::matrix(rows, 4, box_targets)?,
        Tensor::matrix(rows, 4, box_weights)?,
    )?;
    tape.add(nll, box_term)
}

/// `L_rec` for one sample with logits `[Q, 5]` and boxes `[Q, 4]`.
pub fn reconstruction_loss(tape: &mut Tape, logits: Var, boxes: Var, gt: &Layout) -> Result<Var> {
    reconstruction_batch(tape, logits, boxes, &[gt])
}

/// `L = L_rec + beta L_Ac + gamma L_Ad + eta L_PL_rm`; absent parts count as 0.
pub fn total_loss(
    tape: &mut Tape,
    l_rec: Var,
    l_ac: Option<Var>,
    l_ad: Option<Var>,
    l_plrm: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let mut total = l_rec;
    for (part, w) in [(l_ac, weights.beta), (l_ad, weights.gamma), (l_plrm, weights.eta)] {
        if let Some(p) = part {
            let scaled = tape.scale(p, w)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Loss components as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_ac: f64,
    pub l_ad: f64,
    pub l_plrm: f64,
    pub total: f64,
}

impl LossReport {
    /// Combines components with `weights`; `None` components are disabled.
    pub fn combine(
        l_rec: f64,
        l_ac: Option<f64>,
        l_ad: Option<f64>,
        l_plrm: Option<f64>,
        weights: &LossWeights,
    ) -> LossReport {
        let (l_ac, l_ad, l_plrm) = (l_ac.unwrap_or(0.0), l_ad.unwrap_or(0.0), l_plrm.unwrap_or(0.0));
        LossReport {
            l_rec,
            l_ac,
            l_ad,
            l_plrm,
            total: l_rec + weights.beta * l_ac + weights.gamma * l_ad + weights.eta * l_plrm,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Evaluates every loss component for one prediction without keeping gradients.
pub fn evaluate_losses(
    pred: &PredictionBatch,
    gt: &Layout,
    attr: AttributeConstraint,
    partial: Option<(&PartialLayout, &RandomMask)>,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::from_rows(&pred.logits_or_log_probs()));
    let boxes = tape.constant(Tensor::from_rows(pred.boxes()));
    let l_rec = reconstruction_loss(&mut tape, logits, boxes, gt)?;
    let (l_ac, l_ad) = if attr == AttributeConstraint::Unspecified {
        (None, None)
    } else {
        let ac = attribute_consistent_loss(&mut tape, logits, attr, weights.epsilon)?;
        let ad = attribute_disentangled_loss(&mut tape, logits, attr, weights.epsilon)?;
        (Some(tape.scalar(ac)), Some(tape.scalar(ad)))
    };
    let l_plrm = match partial {
        Some((pl, mask)) => {
            let flat = tape.constant(Tensor::from_rows(&pred.flatten()));
            let v = masked_partial_loss(&mut tape, flat, pl, mask)?;
            Some(tape.scalar(v))
        }
        None => None,
    };
    Ok(LossReport::combine(tape.scalar(l_rec), l_ac, l_ad, l_plrm, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{BBox, Element};

    fn logits(rows: &[[f64; 5]]) -> (Tape, Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_rows(rows));
        (tape, v)
    }

    #[test]
    fn uniform_logits_count_one_each() {
        let (mut tape, z) = logits(&[[0.3; 5]; 5]);
        for c in Category::ALL {
            let n = soft_count(&mut tape, z, c, 100.0).unwrap();
            assert!((tape.scalar(n) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sharp_single_query() {
        let (mut tape, z) = logits(&[[1.0, 0.0, 0.0, 0.0, 0.0]]);
        let n = soft_count(&mut tape, z, Category::Text, 100.0).unwrap();
        let closed = 1f64.exp().powi(100) / (1f64.exp().powi(100) + 4.0);
        assert!((tape.scalar(n) - closed).abs() < 1e-12);
        assert!((tape.scalar(n) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attribute_consistent_values() {
        // N_text = 0.3 with Q = 1 and eps = 1: logits picked so softmax[0] = 0.3
        let p = [0.3, 0.175, 0.175, 0.175, 0.175];
        let (mut tape, z) = logits(&[p.map(f64::ln)]);
        let l = attribute_consistent_loss(&mut tape, z, AttributeConstraint::TextOnly, 1.0).unwrap();
        assert!((tape.scalar(l) - 0.7).abs() < 1e-12);

        // two queries at 0.75 text each: N_text = 1.5
        let p = [0.75, 0.0625, 0.0625, 0.0625, 0.0625];
        let (mut tape, z) = logits(&[p.map(f64::ln), p.map(f64::ln)]);
        let l = attribute_consistent_loss(&mut tape, z, AttributeConstraint::TextOnly, 1.0).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let (mut tape, z) = logits(&[[0.0; 5]; 5]);
        let l = attribute_consistent_loss(&mut tape, z, AttributeConstraint::LogoNoEmb, 100.0).unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);

        let (mut tape, z) = logits(&[[0.0; 5]]);
        assert!(matches!(
            attribute_consistent_loss(&mut tape, z, AttributeConstraint::Unspecified, 100.0),
            Err(Error::UnspecifiedAttribute)
        ));
        assert!(matches!(
            attribute_disentangled_loss(&mut tape, z, AttributeConstraint::Unspecified, 100.0),
            Err(Error::UnspecifiedAttribute)
        ));
    }

    #[test]
    fn attribute_disentangled_values() {
        let (mut tape, z) = logits(&[[0.4, -1.0, 2.0, 0.5, 0.1]; 3]);
        let l = attribute_disentangled_loss(&mut tape, z, AttributeConstraint::WithEmbellishment, 100.0).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let (mut tape, z) = logits(&[[0.0; 5]; 3]);
        let l = attribute_disentangled_loss(&mut tape, z, AttributeConstraint::LogoNoEmb, 100.0).unwrap();
        assert!((tape.scalar(l) - 0.6).abs() < 1e-12);

        let (mut tape, z) = logits(&[[1.0, 0.0, 0.0, 0.0, 0.0]; 4]);
        let l = attribute_disentangled_loss(&mut tape, z, AttributeConstraint::TextOnly, 100.0).unwrap();
        assert!(tape.scalar(l) < 1e-6);
    }

    fn flat_leaf(rows: &[[f64; 9]]) -> (Tape, Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::from_rows(rows));
        (tape, v)
    }

    #[test]
    fn partial_loss_examples() {
        let mut pl = PartialLayout::unconstrained(2);
        pl.set_category(0, Category::Text);
        pl.set_box(0, 0, 0.5).unwrap();
        pl.set_box(1, 2, 0.3).unwrap();

        let exact = [[1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.9, 0.9, 0.9], [0.3; 9]];
        let (mut tape, p) = flat_leaf(&exact);
        let l = partial_loss(&mut tape, p, &pl).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let mut off = exact;
        off[0][5] = 0.6;
        let (mut tape, p) = flat_leaf(&off);
        let l = partial_loss(&mut tape, p, &pl).unwrap();
        assert!((tape.scalar(l) - 0.1).abs() < 1e-12);

        let mut soft = exact;
        soft[0][..5].copy_from_slice(&[0.6, 0.1, 0.1, 0.1, 0.1]);
        let (mut tape, p) = flat_leaf(&soft);
        let l = partial_loss(&mut tape, p, &pl).unwrap();
        assert!((tape.scalar(l) - 0.8).abs() < 1e-12);

        let (mut tape, p) = flat_leaf(&exact[..1]);
        assert!(matches!(partial_loss(&mut tape, p, &pl), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_partial_examples() {
        let mut pl = PartialLayout::unconstrained(1);
        pl.set_box(0, 0, 0.5).unwrap();
        pl.set_box(0, 1, 0.5).unwrap();
        let pred = [[0.2, 0.2, 0.2, 0.2, 0.2, 0.7, 0.5, 0.1, 0.1]];

        let (mut tape, p) = flat_leaf(&pred);
        let full = partial_loss(&mut tape, p, &pl).unwrap();
        let ones = masked_partial_loss(&mut tape, p, &pl, &RandomMask::all_ones(1)).unwrap();
        assert_eq!(tape.scalar(full), tape.scalar(ones));

        let mut keep = [[true; 9]];
        keep[0][5] = false;
        let (mut tape, p) = flat_leaf(&pred);
        let l = masked_partial_loss(&mut tape, p, &pl, &RandomMask::from_keep(keep.to_vec())).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    fn gt_layout() -> Layout {
        Layout::new(
            240,
            350,
            vec![
                Element::new(Category::Text, BBox::new(0.5, 0.2, 0.4, 0.1).unwrap()).unwrap(),
                Element::new(Category::Logo, BBox::new(0.2, 0.8, 0.1, 0.1).unwrap()).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn reconstruction_zero_on_exact_prediction() {
        let gt = gt_layout();
        // queries in reverse order to exercise the matching
        let pred = PredictionBatch::new(
            vec![[0.0, 0.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0]],
            vec![[0.5; 4], [0.2, 0.8, 0.1, 0.1], [0.5, 0.2, 0.4, 0.1]],
            None,
        )
        .unwrap();
        let r = evaluate_losses(&pred, &gt, AttributeConstraint::Unspecified, None, &LossWeights::default()).unwrap();
        assert_eq!(r.l_rec, 0.0);

        let empty = PredictionBatch::new(vec![[0.0, 0.0, 0.0, 0.0, 1.0]; 3], vec![[0.3; 4]; 3], None).unwrap();
        let r = evaluate_losses(&empty, &Layout::empty(), AttributeConstraint::Unspecified, None, &LossWeights::default()).unwrap();
        assert_eq!(r.l_rec, 0.0);
    }

    #[test]
    fn reconstruction_box_sensitivity() {
        // finite-difference check of d L_rec / d box = 5 / |matched|
        let gt = gt_layout();
        let z = [[3.0, 0.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 3.0]];
        let base = [[0.52, 0.2, 0.4, 0.1], [0.2, 0.8, 0.1, 0.1], [0.5; 4]];
        let eval = |bx: [[f64; 4]; 3]| {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::from_rows(&z));
            let b = tape.constant(Tensor::from_rows(&bx));
            let r = reconstruction_loss(&mut tape, l, b, &gt).unwrap();
            tape.scalar(r)
        };
        let delta = 1e-4;
        let mut moved = base;
        moved[0][0] += delta;
        let slope = (eval(moved) - eval(base)) / delta;
        assert!((slope - 5.0 / 2.0).abs() < 1e-6, "{slope}");
    }

    #[test]
    fn total_loss_combination() {
        let w = LossWeights::default();
        let r = LossReport::combine(1.0, Some(0.5), Some(2.0), Some(0.1), &w);
        assert!((r.total - 1.8).abs() < 1e-12);
        assert_eq!(LossReport::combine(0.0, Some(0.0), Some(0.0), Some(0.0), &w).total, 0.0);
        assert_eq!(LossReport::combine(1.0, None, None, Some(0.1), &w).total, 1.1);

        let mut tape = Tape::new();
        let vals = [1.0, 0.5, 2.0, 0.1].map(|v| tape.constant(Tensor::scalar(v)));
        let t = total_loss(&mut tape, vals[0], Some(vals[1]), Some(vals[2]), Some(vals[3]), &w).unwrap();
        assert!((tape.scalar(t) - 1.8).abs() < 1e-12);
        let t = total_loss(&mut tape, vals[0], None, None, Some(vals[3]), &w).unwrap();
        assert!((tape.scalar(t) - 1.1).abs() < 1e-12);
        assert!(LossWeights { beta: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn report_json_keys() {
        let r = LossReport::combine(1.0, None, None, None, &LossWeights::default());
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for k in ["l_rec", "l_ac", "l_ad", "l_plrm", "total"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
