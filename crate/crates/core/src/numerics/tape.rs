//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`], so node order is already a
//! topological order and the backward pass is a single reverse sweep. Kinks of
//! `abs`, `relu` and `max_scalar` take subgradient 0.

use super::tensor::{matmul, matmul_at, matmul_bt, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    MaxScalar(Var, f64),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GroupSumRows(Var, usize),
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    Gather(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::MaxScalar(..) => "max_scalar",
            Op::Abs(_) => "abs",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GroupSumRows(..) => "group_sum_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::TileRows(..) => "tile_rows",
            Op::Gather(..) => "gather",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when the root does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.adjoints[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    visits: Vec<u32>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// How many times each node's local gradient ran during backward.
    pub fn backward_visits(&self) -> &[u32] {
        &self.visits
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Const, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2()?;
        let (k2, m) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: [{n},{k}] x [{k2},{m}]")));
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::matrix(n, m, data)?, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a row vector `[m]` to every row of `x [n,m]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if self.value(row).len() != m {
            return Err(Error::Shape(format!(
                "add_row: [{n},{m}] + {:?}",
                self.value(row).shape()
            )));
        }
        let r = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (d, b) in chunk.iter_mut().zip(r) {
                *d += b;
            }
        }
        self.push(Tensor::matrix(n, m, data)?, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// Elementwise `max(x, c)`.
    pub fn max_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::MaxScalar(x, c), |v| v.max(c))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let m = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Softmax over the last axis, computed with the row maximum subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let value = rowwise(t, softmax_in_place)?;
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let value = rowwise(t, |row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        })?;
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<_>>()?;
        let n = dims.first().map(|d| d.0).unwrap_or(0);
        if dims.iter().any(|d| d.0 != n) {
            return Err(Error::Shape(format!("concat_cols: row counts {dims:?}")));
        }
        let m: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Tensor::matrix(n, m, data)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if start + len > m {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {m} columns")));
        }
        let t = self.value(x);
        let data = (0..n)
            .flat_map(|i| t.row(i)[start..start + len].iter().copied())
            .collect();
        self.push(Tensor::matrix(n, len, data)?, Op::SliceCols(x, start), &[x])
    }

    /// Sums consecutive groups of `group` rows: `[b*group, m] -> [b, m]`.
    pub fn group_sum_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        if group == 0 || n % group != 0 {
            return Err(Error::Shape(format!("{n} rows not divisible into groups of {group}")));
        }
        let b = n / group;
        let t = self.value(x);
        let mut data = vec![0.0; b * m];
        for i in 0..n {
            let out = &mut data[(i / group) * m..(i / group + 1) * m];
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        self.push(Tensor::matrix(b, m, data)?, Op::GroupSumRows(x, group), &[x])
    }

    /// Repeats every row `times` times in place: `[b, m] -> [b*times, m]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        let t = self.value(x);
        let mut data = Vec::with_capacity(n * times * m);
        for i in 0..n {
            for _ in 0..times {
                data.extend_from_slice(t.row(i));
            }
        }
        self.push(Tensor::matrix(n * times, m, data)?, Op::RepeatRows(x, times), &[x])
    }

    /// Stacks `times` copies of the whole matrix: `[q, m] -> [times*q, m]`.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (n, m) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * times * m);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        self.push(Tensor::matrix(n * times, m, data)?, Op::TileRows(x, times), &[x])
    }

    /// Picks entries by flat (row-major) index into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of {}", t.len())));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        self.push(Tensor::vector(data), Op::Gather(x, indices.to_vec()), &[x])
    }

    /// Runs the reverse sweep from a scalar `root`. The tape can be swept once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeReused);
        }
        let root_shape = self.value(root).shape().to_vec();
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(root_shape));
        }
        self.consumed = true;
        self.visits = vec![0; self.nodes.len()];

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::full(&root_shape, 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf | Op::Const) {
                self.visits[i] += 1;
                for (parent, contribution) in self.local_grads(i, &g)? {
                    if !self.nodes[parent.0].needs_grad {
                        continue;
                    }
                    match &mut adj[parent.0] {
                        Some(acc) => acc.add_assign(&contribution),
                        slot => *slot = Some(contribution),
                    }
                }
            }
            adj[i] = Some(g);
        }

        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf | Op::Const => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |g, y| g * y)),
                (*b, g.zip_map(val(*a), |g, x| g * x)),
            ],
            Op::MatMul(a, b) => {
                let (n, k) = val(*a).dims2()?;
                let (_, m) = val(*b).dims2()?;
                let da = matmul_bt(g.data(), val(*b).data(), n, k, m);
                let db = matmul_at(val(*a).data(), g.data(), n, k, m);
                vec![
                    (*a, Tensor::matrix(n, k, da)?),
                    (*b, Tensor::new(val(*b).shape().to_vec(), db)?),
                ]
            }
            Op::AddRow(x, row) => {
                let (_, m) = g.dims2()?;
                let mut dr = vec![0.0; m];
                for chunk in g.data().chunks(m) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                vec![
                    (*x, g.clone()),
                    (*row, Tensor::new(val(*row).shape().to_vec(), dr)?),
                ]
            }
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Exp(x) => vec![(*x, g.zip_map(y, |g, y| g * y))],
            Op::Log(x) => vec![(*x, g.zip_map(val(*x), |g, x| g / x))],
            Op::MaxScalar(x, c) => {
                vec![(*x, g.zip_map(val(*x), |g, x| if x > *c { g } else { 0.0 }))]
            }
            Op::Abs(x) => vec![(*x, g.zip_map(val(*x), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }))],
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(y, |g, y| g * y * (1.0 - y)))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
            Op::Softmax(x) => {
                let m = *y.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(m).zip(y.data().chunks(m)).zip(g.data().chunks(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), d)?)]
            }
            Op::LogSoftmax(x) => {
                let m = *y.shape().last().unwrap_or(&1);
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(m).zip(y.data().chunks(m)).zip(g.data().chunks(m)) {
                    let gs: f64 = gr.iter().sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = gv - yv.exp() * gs;
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), d)?)]
            }
            Op::ConcatCols(parts) => {
                let (n, m) = g.dims2()?;
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2()?;
                    let data = (0..n)
                        .flat_map(|r| g.data()[r * m + offset..r * m + offset + w].iter().copied())
                        .collect();
                    out.push((p, Tensor::matrix(n, w, data)?));
                    offset += w;
                }
                out
            }
            Op::SliceCols(x, start) => {
                let (n, m) = val(*x).dims2()?;
                let (_, len) = g.dims2()?;
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    d[r * m + start..r * m + start + len].copy_from_slice(g.row(r));
                }
                vec![(*x, Tensor::matrix(n, m, d)?)]
            }
            Op::GroupSumRows(x, group) => {
                let (n, m) = val(*x).dims2()?;
                let mut d = Vec::with_capacity(n * m);
                for r in 0..n {
                    d.extend_from_slice(g.row(r / group));
                }
                vec![(*x, Tensor::matrix(n, m, d)?)]
            }
            Op::RepeatRows(x, times) => {
                let (n, m) = val(*x).dims2()?;
                let mut d = vec![0.0; n * m];
                for r in 0..n * times {
                    let out = &mut d[(r / times) * m..(r / times + 1) * m];
                    for (o, v) in out.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![(*x, Tensor::matrix(n, m, d)?)]
            }
            Op::TileRows(x, times) => {
                let len = val(*x).len();
                let mut d = vec![0.0; len];
                for t in 0..*times {
                    for (o, v) in d.iter_mut().zip(&g.data()[t * len..(t + 1) * len]) {
                        *o += v;
                    }
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), d)?)]
            }
            Op::Gather(x, indices) => {
                let mut d = vec![0.0; val(*x).len()];
                for (&idx, gv) in indices.iter().zip(g.data()) {
                    d[idx] += gv;
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), d)?)]
            }
        })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn rowwise(t: &Tensor, f: impl Fn(&mut [f64])) -> Result<Tensor> {
    let m = *t.shape().last().unwrap_or(&1);
    if m == 0 {
        return Err(Error::Shape("row operation over an empty axis".into()));
    }
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(m) {
        f(row);
    }
    Tensor::new(t.shape().to_vec(), data)
}
