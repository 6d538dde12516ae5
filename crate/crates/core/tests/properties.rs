//! Property tests of the invariants tying the modules together.

use proptest::prelude::*;

use iucl_core::constraints::{
    masked_count, sample_random_mask, AttributeConstraint, PartialLayout,
};
use iucl_core::layout::{BBox, Category, Element, Layout, PredictionBatch, CANVAS_H, CANVAS_W, Q_MAX};
use iucl_core::losses::{flat_prediction, masked_partial_loss, partial_loss, soft_counts};
use iucl_core::matching::{hungarian, CostMatrix};
use iucl_core::metrics::{r_ali, r_lac, r_ove, r_plc, r_shm, r_und, Grid};
use iucl_core::numerics::{Tape, Tensor};
use iucl_core::synthdata::{extract_partial, parse_pgm, to_pgm};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.5, 0.01f64..0.5).prop_map(|(cx, cy, w, h)| {
        let w = w.min(2.0 * cx.min(1.0 - cx));
        let h = h.min(2.0 * cy.min(1.0 - cy));
        BBox::new(cx, cy, w, h).unwrap()
    })
}

fn element() -> impl Strategy<Value = Element> {
    (0usize..4, bbox()).prop_map(|(c, b)| Element::new(Category::REAL[c], b).unwrap())
}

fn layout(min: usize, max: usize) -> impl Strategy<Value = Layout> {
    prop::collection::vec(element(), min..=max).prop_map(|els| Layout::new(CANVAS_W, CANVAS_H, els).unwrap())
}

fn brute_force(c: &CostMatrix) -> f64 {
    fn rec(c: &CostMatrix, row: usize, used: &mut [bool]) -> f64 {
        if row == c.size() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..c.size() {
            if !used[j] {
                used[j] = true;
                best = best.min(c.get(row, j) + rec(c, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    rec(c, 0, &mut vec![false; c.size()])
}

proptest! {
    #[test]
    fn flatten_round_trips(l in layout(0, Q_MAX)) {
        let rows = l.flatten(Q_MAX).unwrap();
        prop_assert_eq!(Layout::unflatten(&rows, CANVAS_W, CANVAS_H).unwrap(), l.clone());
        let zc = PartialLayout::from_zero_convention(rows).unwrap();
        for i in 0..l.len() {
            let b = l.elements()[i].bbox.to_array();
            prop_assert!(zc.presence()[i][l.elements()[i].category.index()]);
            for k in 0..4 {
                prop_assert_eq!(zc.presence()[i][5 + k], b[k] != 0.0);
            }
        }
    }

    #[test]
    fn json_round_trips(l in layout(0, Q_MAX)) {
        prop_assert_eq!(Layout::from_json(&l.to_json()).unwrap(), l);
    }

    #[test]
    fn soft_counts_sum_to_queries(z in prop::collection::vec(-5.0f64..5.0, Q_MAX * 5)) {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(Q_MAX, 5, z).unwrap());
        let counts = soft_counts(&mut tape, logits, Q_MAX, 100.0).unwrap();
        prop_assert!((tape.value(counts).sum() - Q_MAX as f64).abs() < 1e-12);
    }

    #[test]
    fn hungarian_is_optimal(n in 1usize..=6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c = CostMatrix::new(n, (0..n * n).map(|_| rng.gen_range(0.0..5.0)).collect()).unwrap();
        let a = hungarian(&c).unwrap();
        let mut cols = a.target_of.clone();
        cols.sort_unstable();
        prop_assert_eq!(cols, (0..n).collect::<Vec<_>>());
        prop_assert!((c.total(&a) - brute_force(&c)).abs() < 1e-9);
    }

    #[test]
    fn mask_zero_count_is_exact(l in layout(1, Q_MAX), seed in any::<u64>()) {
        let pl = PartialLayout::from_zero_convention(l.flatten(Q_MAX).unwrap()).unwrap();
        let n = pl.constrained_slots();
        let mask = sample_random_mask(&pl, seed).unwrap();
        prop_assert_eq!(mask.zeros_on(&pl), masked_count(n));
        prop_assert_eq!(mask, sample_random_mask(&pl, seed).unwrap());
    }

    #[test]
    fn extracted_partials_are_consistent(l in layout(1, Q_MAX), seed in any::<u64>()) {
        let pl = extract_partial(&l, seed).unwrap();
        let rows = l.flatten(Q_MAX).unwrap();
        let (sum, n) = iucl_core::metrics::plc_terms(&rows, &pl).unwrap();
        prop_assert_eq!(sum, 0.0);
        prop_assert!(n > 0);
        for i in l.len()..Q_MAX {
            prop_assert!(!pl.row_has_presence(i));
        }
    }

    #[test]
    fn masked_partial_loss_is_bounded(
        z in prop::collection::vec(-3.0f64..3.0, Q_MAX * 5),
        b in prop::collection::vec(0.0f64..1.0, Q_MAX * 4),
        l in layout(1, Q_MAX),
        seed in any::<u64>(),
    ) {
        let pl = extract_partial(&l, seed).unwrap();
        let mask = sample_random_mask(&pl, seed ^ 1).unwrap();
        let mut tape = Tape::new();
        let zl = tape.constant(Tensor::matrix(Q_MAX, 5, z).unwrap());
        let bx = tape.constant(Tensor::matrix(Q_MAX, 4, b).unwrap());
        let flat = flat_prediction(&mut tape, zl, bx).unwrap();
        let full = partial_loss(&mut tape, flat, &pl).unwrap();
        let masked = masked_partial_loss(&mut tape, flat, &pl, &mask).unwrap();
        prop_assert!(tape.scalar(masked) <= tape.scalar(full) + 1e-15);
        // the mean-normalized metric is the loss over the slot count
        let rows: Vec<[f64; 9]> = (0..Q_MAX).map(|i| std::array::from_fn(|j| tape.value(flat).row(i)[j])).collect();
        let r = r_plc(&[rows], &[pl.clone()]).unwrap();
        prop_assert!((r * pl.constrained_slots() as f64 - tape.scalar(full)).abs() < 1e-12);
    }

    #[test]
    fn labels_satisfy_their_attribute(l in layout(0, Q_MAX)) {
        let label = AttributeConstraint::label_for(&l);
        if label != AttributeConstraint::Unspecified {
            prop_assert_eq!(r_lac(&[l.clone()], label).unwrap(), 1.0);
            // no more restrictive attribute holds
            for a in AttributeConstraint::SPECIFIED.iter().take_while(|&&a| a != label) {
                prop_assert!(!a.is_satisfied_by(&l).unwrap());
            }
        } else {
            for a in AttributeConstraint::SPECIFIED {
                prop_assert!(!a.is_satisfied_by(&l).unwrap());
            }
        }
    }

    #[test]
    fn metric_bounds_and_order_invariance(l in layout(0, Q_MAX), s in 0.0f64..=1.0) {
        let ove = r_ove(&l);
        let ali = r_ali(&l);
        prop_assert!((0.0..=1.0).contains(&ove) && (0.0..=1.0).contains(&ali));
        if let Some(u) = r_und(&l) {
            prop_assert!((0.0..=1.0).contains(&u));
        }
        let grid = Grid::filled(31, 23, s);
        let shm = r_shm(&l, &grid);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&shm));
        let mut rev = l.elements().to_vec();
        rev.reverse();
        let rev = Layout::new(CANVAS_W, CANVAS_H, rev).unwrap();
        prop_assert!((r_ove(&rev) - ove).abs() < 1e-12);
        prop_assert!((r_ali(&rev) - ali).abs() < 1e-12);
    }

    #[test]
    fn pgm_round_trip_error_is_bounded(v in prop::collection::vec(0.0f64..=1.0, 12)) {
        let g = Grid::new(3, 4, v).unwrap();
        let back = parse_pgm(&to_pgm(&g)).unwrap();
        for (a, b) in g.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
        }
    }

    #[test]
    fn one_hot_predictions_decode_and_reflatten(l in layout(0, Q_MAX)) {
        let rows = l.flatten(Q_MAX).unwrap();
        let probs = rows.iter().map(|r| [r[0], r[1], r[2], r[3], r[4]]).collect();
        let boxes = rows.iter().map(|r| [r[5], r[6], r[7], r[8]]).collect();
        let pred = PredictionBatch::new(probs, boxes, None).unwrap();
        let decoded = pred.decode(0.0);
        prop_assert_eq!(decoded.flatten(Q_MAX).unwrap(), rows);
    }
}
