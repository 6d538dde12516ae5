//! Gradient checks of every training loss at random points away from the
//! non-differentiable kinks of `abs`, `max` and the matching.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::constraints::{sample_random_mask, AttributeConstraint, PartialLayout, RandomMask};
use crate::error::Result;
use crate::layout::{
    softmax_row, BBox, Category, Element, Layout, BOX_OFFSET, CANVAS_H, CANVAS_W, FLAT_WIDTH,
    NUM_CATEGORIES, Q_MAX,
};
use crate::losses::{
    attribute_consistent_loss, attribute_disentangled_loss, flat_prediction, masked_partial_loss,
    partial_loss, reconstruction_loss, soft_count, soft_counts, total_loss, LossWeights,
};
use crate::matching::{cost_from_parts, hungarian};
use crate::numerics::{gradcheck, Tape, Tensor, DEFAULT_STEP};

/// Minimum distance from every kink at an accepted point.
pub const KINK_MARGIN: f64 = 1e-3;

/// Losses covered by [`gradcheck_losses`], in report order.
pub const CHECKED_LOSSES: [&str; 7] = ["soft_count", "l_ac", "l_ad", "l_p", "l_plrm", "l_rec", "total"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckResult {
    pub loss: String,
    pub points: usize,
    pub max_rel_error: f64,
}

fn random_logits(rng: &mut ChaCha8Rng, scale: f64) -> Vec<[f64; NUM_CATEGORIES]> {
    let normal = Normal::new(0.0, scale).expect("valid scale");
    (0..Q_MAX)
        .map(|_| std::array::from_fn(|_| normal.sample(rng)))
        .collect()
}

fn random_boxes(rng: &mut ChaCha8Rng) -> Vec<[f64; 4]> {
    (0..Q_MAX)
        .map(|_| std::array::from_fn(|_| rng.gen_range(0.05..0.95)))
        .collect()
}

fn random_attribute(rng: &mut ChaCha8Rng) -> AttributeConstraint {
    *AttributeConstraint::SPECIFIED.choose(rng).expect("non-empty")
}

fn flat_values(logits: &[[f64; NUM_CATEGORIES]], boxes: &[[f64; 4]]) -> Vec<[f64; FLAT_WIDTH]> {
    logits
        .iter()
        .zip(boxes)
        .map(|(z, b)| {
            let p = softmax_row(z);
            std::array::from_fn(|j| if j < BOX_OFFSET { p[j] } else { b[j - BOX_OFFSET] })
        })
        .collect()
}

/// A partial layout with random constrained slots, whose constrained values
/// all differ from `flat` by more than the kink margin.
fn random_partial(rng: &mut ChaCha8Rng, flat: &[[f64; FLAT_WIDTH]]) -> Result<PartialLayout> {
    let mut pl = PartialLayout::unconstrained(Q_MAX);
    let rows = rng.gen_range(1..=Q_MAX);
    for row in 0..rows {
        if rng.gen_bool(0.4) {
            let cat = Category::from_index(rng.gen_range(0..NUM_CATEGORIES)).expect("in range");
            pl.set_category(row, cat);
        }
        for coord in 0..4 {
            if rng.gen_bool(0.5) {
                let v = loop {
                    let v: f64 = rng.gen_range(0.0..=1.0);
                    if (v - flat[row][BOX_OFFSET + coord]).abs() > KINK_MARGIN {
                        break v;
                    }
                };
                pl.set_box(row, coord, v)?;
            }
        }
    }
    if pl.constrained_slots() == 0 {
        pl.set_box(0, 0, if flat[0][BOX_OFFSET] > 0.5 { 0.1 } else { 0.9 })?;
    }
    Ok(pl)
}

fn category_off_kink(pl: &PartialLayout, flat: &[[f64; FLAT_WIDTH]]) -> bool {
    pl.values().iter().zip(pl.presence()).zip(flat).all(|((v, p), f)| {
        (0..BOX_OFFSET).all(|j| !p[j] || (v[j] - f[j]).abs() > KINK_MARGIN)
    })
}

/// A ground truth of 1 to 5 elements and predictions close to it under a
/// random query permutation, so the optimal matching is unambiguous.
fn matched_instance(
    rng: &mut ChaCha8Rng,
) -> Result<(Layout, Vec<[f64; NUM_CATEGORIES]>, Vec<[f64; 4]>)> {
    let n = rng.gen_range(1..=5);
    let mut elements = Vec::with_capacity(n);
    for i in 0..n {
        let cat = *Category::REAL.choose(rng).expect("non-empty");
        let cy = (i as f64 + 0.5) / n as f64;
        let bbox = BBox::new(rng.gen_range(0.3..0.7), cy, rng.gen_range(0.2..0.5), 0.5 / n as f64)?;
        elements.push(Element::new(cat, bbox)?);
    }
    let gt = Layout::new(CANVAS_W, CANVAS_H, elements)?;
    let mut slots: Vec<usize> = (0..Q_MAX).collect();
    slots.shuffle(rng);
    let mut logits = random_logits(rng, 0.5);
    let mut boxes = random_boxes(rng);
    for (q, &t) in slots.iter().enumerate() {
        match gt.elements().get(t) {
            Some(e) => {
                logits[q][e.category.index()] += 3.0;
                let target = e.bbox.to_array();
                for k in 0..4 {
                    let d = rng.gen_range(0.002..0.02) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    boxes[q][k] = target[k] + d;
                }
            }
            None => logits[q][Category::None.index()] += 3.0,
        }
    }
    Ok((gt, logits, boxes))
}

/// Whether every matched box coordinate is away from its target.
fn reconstruction_off_kink(gt: &Layout, logits: &[[f64; NUM_CATEGORIES]], boxes: &[[f64; 4]]) -> Result<bool> {
    let probs: Vec<_> = logits.iter().map(softmax_row).collect();
    let a = hungarian(&cost_from_parts(&probs, boxes, gt)?)?;
    Ok(a.target_of.iter().enumerate().all(|(q, &t)| match gt.elements().get(t) {
        Some(e) => (0..4).all(|k| (boxes[q][k] - e.bbox.to_array()[k]).abs() > KINK_MARGIN),
        None => true,
    }))
}

/// Max relative gradcheck error of each loss over `points` random points.
pub fn gradcheck_losses(points: usize, seed: u64) -> Result<Vec<GradcheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = LossWeights::default().epsilon;
    let mut worst = [0.0f64; 7];
    let mut record = |k: usize, e: f64| worst[k] = worst[k].max(e);

    for _ in 0..points {
        // soft count and the attribute losses see logits only; small logits
        // keep the eps-sharpened softmax away from saturation
        let logits = Tensor::from_rows(&random_logits(&mut rng, 0.02));
        let cat = Category::from_index(rng.gen_range(0..NUM_CATEGORIES)).expect("in range");
        record(0, gradcheck(|t, v| soft_count(t, v[0], cat, eps), &[logits.clone()], DEFAULT_STEP)?);

        let attr = random_attribute(&mut rng);
        let a = attr.attribute_category().expect("specified");
        let logits = loop {
            let l = Tensor::from_rows(&random_logits(&mut rng, 0.02));
            let mut tape = Tape::new();
            let v = tape.constant(l.clone());
            let n = soft_count(&mut tape, v, a, eps)?;
            if (tape.scalar(n) - 1.0).abs() > KINK_MARGIN {
                break l;
            }
        };
        record(1, gradcheck(|t, v| attribute_consistent_loss(t, v[0], attr, eps), &[logits], DEFAULT_STEP)?);
        let attr = random_attribute(&mut rng);
        let logits = Tensor::from_rows(&random_logits(&mut rng, 0.02));
        record(2, gradcheck(|t, v| attribute_disentangled_loss(t, v[0], attr, eps), &[logits], DEFAULT_STEP)?);

        // partial losses on probabilities next to boxes
        let (logits, boxes, pl, mask) = loop {
            let logits = random_logits(&mut rng, 1.0);
            let boxes = random_boxes(&mut rng);
            let flat = flat_values(&logits, &boxes);
            let pl = random_partial(&mut rng, &flat)?;
            if category_off_kink(&pl, &flat) {
                let mask = sample_random_mask(&pl, rng.gen())?;
                break (logits, boxes, pl, mask);
            }
        };
        let point = [Tensor::from_rows(&logits), Tensor::from_rows(&boxes)];
        record(3, gradcheck(|t, v| {
            let flat = flat_prediction(t, v[0], v[1])?;
            partial_loss(t, flat, &pl)
        }, &point, DEFAULT_STEP)?);
        record(4, gradcheck(|t, v| {
            let flat = flat_prediction(t, v[0], v[1])?;
            masked_partial_loss(t, flat, &pl, &mask)
        }, &point, DEFAULT_STEP)?);

        // reconstruction and the total objective
        let (gt, logits, boxes) = loop {
            let inst = matched_instance(&mut rng)?;
            if reconstruction_off_kink(&inst.0, &inst.1, &inst.2)? {
                break inst;
            }
        };
        let point = [Tensor::from_rows(&logits), Tensor::from_rows(&boxes)];
        record(5, gradcheck(|t, v| reconstruction_loss(t, v[0], v[1], &gt), &point, DEFAULT_STEP)?);

        let flat = flat_values(&logits, &boxes);
        let pl = loop {
            let pl = random_partial(&mut rng, &flat)?;
            if category_off_kink(&pl, &flat) {
                break pl;
            }
        };
        let mask: RandomMask = sample_random_mask(&pl, rng.gen())?;
        let attr = random_attribute(&mut rng);
        let weights = LossWeights::default();
        record(6, gradcheck(|t, v| {
            let l_rec = reconstruction_loss(t, v[0], v[1], &gt)?;
            let counts = soft_counts(t, v[0], Q_MAX, weights.epsilon)?;
            let l_ac = crate::losses::attribute_consistent_batch(t, counts, &[attr])?;
            let l_ad = crate::losses::attribute_disentangled_batch(t, counts, &[attr])?;
            let flat = flat_prediction(t, v[0], v[1])?;
            let l_pl = masked_partial_loss(t, flat, &pl, &mask)?;
            total_loss(t, l_rec, Some(l_ac), Some(l_ad), Some(l_pl), &weights)
        }, &point, DEFAULT_STEP)?);
    }
    Ok(CHECKED_LOSSES
        .iter()
        .zip(worst)
        .map(|(name, e)| GradcheckResult {
            loss: name.to_string(),
            points,
            max_rel_error: e,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_passes() {
        let report = gradcheck_losses(3, 1).unwrap();
        assert_eq!(report.len(), CHECKED_LOSSES.len());
        for r in &report {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
