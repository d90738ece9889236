//! Reverse-mode automatic differentiation over dense, row-major `f64`
//! matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the recipe for pushing gradients back to its inputs. Graphs are
//! short-lived; the trainer builds one per batch and drops it after the
//! optimizer step. Nodes created from [`Graph::constant`] never receive
//! gradients, which keeps detached memories cheap.

use std::sync::Arc;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Tensor { rows, cols, data }
    }

    /// `1 x len` matrix.
    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    /// `len x 1` matrix.
    pub fn column(data: Vec<f64>) -> Self {
        let rows = data.len();
        Self::from_vec(rows, 1, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    /// Stacks equally sized rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Cos(Var),
    Sin(Var),
    Concat(Vec<Var>),
    Interleave(Var, Var),
    Gather(Var, Vec<usize>),
    GroupMean(Var, Vec<Vec<usize>>),
    ReplaceRows(Var, Var, Vec<usize>),
    Sum(Var),
    BceLogits(Var, Arc<Vec<f64>>, f64),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Tape of operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// `a (r x k) * b (k x c)`; optionally with `a` or `b` transposed.
fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (br, bc) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(ac, br, "matmul inner dimension mismatch ({ar}x{ac} * {br}x{bc})");
    let mut out = Tensor::zeros(ar, bc);
    for i in 0..ar {
        let orow = &mut out.data[i * bc..(i + 1) * bc];
        for p in 0..ac {
            let av = if ta { a.data[p * a.cols + i] } else { a.data[i * a.cols + p] };
            if av == 0.0 {
                continue;
            }
            if tb {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o += av * b.data[j * b.cols + p];
                }
            } else {
                let brow = &b.data[p * b.cols..(p + 1) * b.cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b), false, false);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::MatMul(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Mul(a, b), t)
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows, 1, "add_row expects a single row");
        assert_eq!(av.cols, bv.cols, "add_row column mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &x) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += x;
            }
        }
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::AddRow(a, b), t)
    }

    /// Scales row `i` of `a` by `s[i]`, `s` being `r x 1`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.cols, 1, "mul_col expects a column");
        assert_eq!(av.rows, sv.rows, "mul_col row mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            let k = sv.data[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= k);
        }
        let t = self.tracked(a) || self.tracked(s);
        self.push(out, Op::MulCol(a, s), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    /// `a * mul + add`.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let out = map(self.value(a), |x| x * mul + add);
        let t = self.tracked(a);
        self.push(out, Op::Affine(a, mul), t)
    }

    /// Scales `a` by element `idx` of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var, idx: usize) -> Var {
        let k = self.value(s).data[idx];
        let out = map(self.value(a), |x| x * k);
        let t = self.tracked(a) || self.tracked(s);
        self.push(out, Op::ScaleBy(a, s, idx), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        let t = self.tracked(a);
        self.push(out, Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        let t = self.tracked(a);
        self.push(out, Op::Tanh(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        let t = self.tracked(a);
        self.push(out, Op::Relu(a), t)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::cos);
        let t = self.tracked(a);
        self.push(out, Op::Cos(a), t)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::sin);
        let t = self.tracked(a);
        self.push(out, Op::Sin(a), t)
    }

    /// Column-wise concatenation of matrices sharing a row count.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat row mismatch");
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(out, Op::Concat(parts.to_vec()), t)
    }

    /// `[a0, b0, a1, b1, ...]` per row.
    pub fn interleave(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "interleave shape mismatch");
        let mut out = Tensor::zeros(av.rows, av.cols * 2);
        for r in 0..av.rows {
            for c in 0..av.cols {
                out.data[r * 2 * av.cols + 2 * c] = av.get(r, c);
                out.data[r * 2 * av.cols + 2 * c + 1] = bv.get(r, c);
            }
        }
        let t = self.tracked(a) || self.tracked(b);
        self.push(out, Op::Interleave(a, b), t)
    }

    /// Selects rows of `a` (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(rows.len(), av.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        let t = self.tracked(a);
        self.push(out, Op::Gather(a, rows), t)
    }

    /// Output row `g` is the mean of the rows of `a` listed in `groups[g]`.
    pub fn group_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Tensor::zeros(groups.len(), av.cols);
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "empty group in group_mean");
            let k = 1.0 / members.len() as f64;
            let orow = out.row_mut(g);
            for &m in members {
                for (o, &x) in orow.iter_mut().zip(av.row(m)) {
                    *o += x;
                }
            }
            orow.iter_mut().for_each(|o| *o *= k);
        }
        let t = self.tracked(a);
        self.push(out, Op::GroupMean(a, groups), t)
    }

    /// Copy of `base` with row `rows[k]` replaced by row `k` of `src`.
    /// Target rows must be distinct.
    pub fn replace_rows(&mut self, base: Var, src: Var, rows: Vec<usize>) -> Var {
        let (bv, sv) = (self.value(base), self.value(src));
        assert_eq!(bv.cols, sv.cols, "replace_rows column mismatch");
        assert_eq!(sv.rows, rows.len(), "replace_rows row count mismatch");
        let mut out = bv.clone();
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(sv.row(k));
        }
        let t = self.tracked(base) || self.tracked(src);
        self.push(out, Op::ReplaceRows(base, src, rows), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let t = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), t)
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// with the probability clamped to `[eps, 1 - eps]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Vec<f64>>, eps: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.data.len(), targets.len(), "bce target length mismatch");
        let bound = ((1.0 - eps) / eps).ln();
        let mut total = 0.0;
        for (&x, &p) in lv.data.iter().zip(targets.iter()) {
            let x = x.clamp(-bound, bound);
            total += p * softplus(-x) + (1.0 - p) * softplus(x);
        }
        let t = self.tracked(logits);
        self.push(Tensor::scalar(total), Op::BceLogits(logits, targets, eps), t)
    }

    /// Gradients of the scalar `out` with respect to every tracked node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).data.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, f: &dyn Fn(&mut Tensor)| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let (r, c) = self.nodes[v.0].value.shape();
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|s| s.add_assign(&matmul(g, bv, false, true)));
                acc(*b, &|s| s.add_assign(&matmul(av, g, true, false)));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*b, &|s| s.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*b, &|s| {
                    for (x, &y) in s.data.iter_mut().zip(&g.data) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &|s| s.add_assign(&zip(g, bv, |x, y| x * y)));
                acc(*b, &|s| s.add_assign(&zip(g, av, |x, y| x * y)));
            }
            Op::AddRow(a, b) => {
                acc(*a, &|s| s.add_assign(g));
                acc(*b, &|s| {
                    for r in 0..g.rows {
                        for (x, &y) in s.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::MulCol(a, sc) => {
                let (av, sv) = (self.value(*a), self.value(*sc));
                acc(*a, &|s| {
                    for r in 0..g.rows {
                        let k = sv.data[r];
                        for (x, &y) in s.row_mut(r).iter_mut().zip(g.row(r)) {
                            *x += y * k;
                        }
                    }
                });
                acc(*sc, &|s| {
                    for r in 0..g.rows {
                        s.data[r] += g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::Affine(a, mul) => {
                acc(*a, &|s| {
                    for (x, &y) in s.data.iter_mut().zip(&g.data) {
                        *x += y * mul;
                    }
                });
            }
            Op::ScaleBy(a, sc, idx) => {
                let (av, sv) = (self.value(*a), self.value(*sc));
                let k = sv.data[*idx];
                acc(*a, &|s| {
                    for (x, &y) in s.data.iter_mut().zip(&g.data) {
                        *x += y * k;
                    }
                });
                acc(*sc, &|s| {
                    s.data[*idx] += g.data.iter().zip(&av.data).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &|s| s.add_assign(&zip(g, out, |gy, y| gy * y * (1.0 - y))));
            }
            Op::Tanh(a) => {
                acc(*a, &|s| s.add_assign(&zip(g, out, |gy, y| gy * (1.0 - y * y))));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &|s| s.add_assign(&zip(g, av, |gy, x| if x > 0.0 { gy } else { 0.0 })));
            }
            Op::Cos(a) => {
                let av = self.value(*a);
                acc(*a, &|s| s.add_assign(&zip(g, av, |gy, x| -gy * x.sin())));
            }
            Op::Sin(a) => {
                let av = self.value(*a);
                acc(*a, &|s| s.add_assign(&zip(g, av, |gy, x| gy * x.cos())));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    acc(p, &|s| {
                        for r in 0..g.rows {
                            let src = &g.row(r)[offset..offset + pc];
                            for (x, &y) in s.row_mut(r).iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::Interleave(a, b) => {
                for (v, parity) in [(*a, 0usize), (*b, 1usize)] {
                    acc(v, &|s| {
                        let cols = s.cols;
                        for r in 0..s.rows {
                            for c in 0..cols {
                                s.data[r * cols + c] += g.data[r * 2 * cols + 2 * c + parity];
                            }
                        }
                    });
                }
            }
            Op::Gather(a, rows) => {
                acc(*a, &|s| {
                    for (i, &r) in rows.iter().enumerate() {
                        for (x, &y) in s.row_mut(r).iter_mut().zip(g.row(i)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::GroupMean(a, groups) => {
                acc(*a, &|s| {
                    for (gi, members) in groups.iter().enumerate() {
                        let k = 1.0 / members.len() as f64;
                        for &m in members {
                            for (x, &y) in s.row_mut(m).iter_mut().zip(g.row(gi)) {
                                *x += y * k;
                            }
                        }
                    }
                });
            }
            Op::ReplaceRows(base, src, rows) => {
                acc(*base, &|s| {
                    let mut masked = g.clone();
                    for &r in rows {
                        masked.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
                    }
                    s.add_assign(&masked);
                });
                acc(*src, &|s| {
                    for (k, &r) in rows.iter().enumerate() {
                        for (x, &y) in s.row_mut(k).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let k = g.data[0];
                acc(*a, &|s| s.data.iter_mut().for_each(|x| *x += k));
            }
            Op::BceLogits(a, targets, eps) => {
                let lv = self.value(*a);
                let bound = ((1.0 - eps) / eps).ln();
                let k = g.data[0];
                acc(*a, &|s| {
                    for ((x, &l), &p) in s.data.iter_mut().zip(&lv.data).zip(targets.iter()) {
                        if l.abs() < bound {
                            *x += k * (sigmoid(l) - p);
                        }
                    }
                });
            }
        }
    }
}

pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}
