//! Set matching between generator queries and ground-truth elements.

use crate::error::{Error, Result};
use crate::layout::{Category, Layout, PredictionBatch, NUM_CATEGORIES};

pub const COST_CLASS_WEIGHT: f64 = 1.0;
pub const COST_BOX_WEIGHT: f64 = 5.0;

/// Square cost matrix, rows are queries and columns are target slots.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<CostMatrix> {
        if data.len() != n * n {
            return Err(Error::Shape(format!(
                "cost matrix of size {n} needs {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(CostMatrix { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<CostMatrix> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("cost matrix must be square".into()));
        }
        CostMatrix::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn total(&self, assignment: &Assignment) -> f64 {
        assignment
            .target_of
            .iter()
            .enumerate()
            .map(|(q, &t)| self.get(q, t))
            .sum()
    }
}

/// Bijection from query index to target slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub target_of: Vec<usize>,
}

/// DETR-style matching cost against `gt` padded to the query count with
/// `None` targets. Real targets cost `1 - p[cat] + 5 * L1(box)`, padding
/// targets cost `1 - p[None]`.
pub fn build_cost(pred: &PredictionBatch, gt: &Layout) -> Result<CostMatrix> {
    cost_from_parts(pred.probs(), pred.boxes(), gt)
}

/// [`build_cost`] on raw probability rows and boxes.
pub fn cost_from_parts(
    probs: &[[f64; NUM_CATEGORIES]],
    boxes: &[[f64; 4]],
    gt: &Layout,
) -> Result<CostMatrix> {
    let q = probs.len();
    if boxes.len() != q {
        return Err(Error::Shape(format!("{q} probability rows but {} boxes", boxes.len())));
    }
    if gt.len() > q {
        return Err(Error::Shape(format!(
            "{} ground-truth elements for {q} queries",
            gt.len()
        )));
    }
    let mut data = Vec::with_capacity(q * q);
    for (p, b) in probs.iter().zip(boxes) {
        for t in 0..q {
            let c = match gt.elements().get(t) {
                Some(e) => {
                    let l1: f64 = b
                        .iter()
                        .zip(e.bbox.to_array())
                        .map(|(x, y)| (x - y).abs())
                        .sum();
                    COST_CLASS_WEIGHT * (1.0 - p[e.category.index()]) + COST_BOX_WEIGHT * l1
                }
                None => COST_CLASS_WEIGHT * (1.0 - p[Category::None.index()]),
            };
            data.push(c.max(0.0));
        }
    }
    CostMatrix::new(q, data)
}

/// Minimum-cost assignment (shortest augmenting paths with potentials).
///
/// Among optimal assignments the lexicographically smallest `target_of` is
/// returned, so equal-cost ties resolve the same way on every run.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    let n = cost.n;
    let all: Vec<usize> = (0..n).collect();
    let (best, mut current) = solve(cost, &all, &all);
    let tol = 1e-9 * best.abs().max(1.0);

    let mut fixed_cost = 0.0;
    let mut used = vec![false; n];
    let mut result = vec![0; n];
    for row in 0..n {
        let rows: Vec<usize> = (row + 1..n).collect();
        let mut chosen = current[row];
        for col in 0..current[row] {
            if used[col] {
                continue;
            }
            let cols: Vec<usize> = (0..n).filter(|&c| !used[c] && c != col).collect();
            let (rest, sub) = solve(cost, &rows, &cols);
            if fixed_cost + cost.get(row, col) + rest <= best + tol {
                chosen = col;
                for (k, &r) in rows.iter().enumerate() {
                    current[r] = cols[sub[k]];
                }
                break;
            }
        }
        used[chosen] = true;
        result[row] = chosen;
        fixed_cost += cost.get(row, chosen);
    }
    Ok(Assignment { target_of: result })
}

/// Solves the square sub-problem on the given rows and columns. Returns the
/// optimal cost and, for each row position, the chosen column position.
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost.get(rows[i - 1], cols[j - 1]);
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut visited = vec![false; n + 1];
        loop {
            visited[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !visited[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if visited[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[owner[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| cost.get(rows[i], cols[col_of_row[i]])).sum();
    (total, col_of_row)
}
