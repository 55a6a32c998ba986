//! Define-by-run tape. Every forward op appends one node; `backward` walks
//! the tape in reverse id order, so ids double as a topological order.

use super::tensor::{gemm, Shape, Tensor};
use super::DiffError;

/// Handle to a node on a [`Tape`]. The wrapped id is the node's position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode differentiation tape over dense `f64` matrices.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not reach the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let Shape(r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Borrowed gradient, `None` for unreachable nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Moves the gradient out, zeros when unreachable.
    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let Shape(r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

fn row_broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), DiffError> {
    if b.rows() != 1 || b.cols() != a.cols() {
        return Err(DiffError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn row_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = a.cols();
    let bd = b.data();
    Tensor::new(
        a.rows(),
        cols,
        a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % cols])).collect(),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input, parameter or constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = zip_map(x, y, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `a + b` with the `1 x k` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        row_broadcast("add_row", x, y)?;
        let out = row_map(x, y, |p, q| p + q);
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let out = zip_map(x, y, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let out = zip_map(x, y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise product with the `1 x k` row `b` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        row_broadcast("mul_row", x, y)?;
        let out = row_map(x, y, |p, q| p * q);
        Ok(self.push(out, Op::MulRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(out, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(DiffError::ShapeMismatch { op: "matmul", lhs: x.shape(), rhs: y.shape() });
        }
        let out = x.matmul(y);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Dense layer `x W + b` with `b` a `1 x out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(DiffError::ShapeMismatch { op: "affine", lhs: xv.shape(), rhs: wv.shape() });
        }
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(DiffError::ShapeMismatch { op: "affine", lhs: wv.shape(), rhs: bv.shape() });
        }
        let rows = xv.rows();
        let cols = wv.cols();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(bv.data());
        }
        gemm(xv.data(), xv.shape(), false, wv.data(), wv.shape(), false, &mut data, 1.0);
        Ok(self.push(Tensor::new(rows, cols, data), Op::Affine(x, w, b)))
    }

    /// Column-wise concatenation; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts.first().ok_or(DiffError::Empty { op: "concat_cols" })?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(*first).shape(),
                    rhs: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::new(rows, cols, data), Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        if start >= end || end > x.cols() {
            return Err(DiffError::ShapeMismatch { op: "slice_cols", lhs: x.shape(), rhs: Shape(start, end) });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(x.rows() * width);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let out = Tensor::new(x.rows(), width, data);
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(f64::exp);
        if !out.is_finite() {
            return Err(DiffError::Domain { op: "exp", detail: "result overflows f64".into() });
        }
        Ok(self.push(out, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        if let Some((i, v)) = x.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(DiffError::Domain { op: "log", detail: format!("element {i} is {v}") });
        }
        let out = x.map(f64::ln);
        Ok(self.push(out, Op::Log(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// `|x|`; the derivative at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    /// Sum of every element, index-ascending.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(0.0, |acc, x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(DiffError::Empty { op: "mean" });
        }
        let s = x.data().iter().fold(0.0, |acc, v| acc + v) / x.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    /// Per-row sums: `n x k -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out: Vec<f64> = (0..x.rows()).map(|r| x.row_slice(r).iter().fold(0.0, |acc, v| acc + v)).collect();
        self.push(Tensor::column(out), Op::SumCols(a))
    }

    /// Gradients of the scalar `root` with respect to every node on the tape.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(DiffError::NonScalarRoot { shape: root_value.shape() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(root_value.rows(), root_value.cols(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g, self, |acc, g| acc.add_assign(g));
                accumulate(grads, *b, g, self, |acc, g| acc.add_assign(g));
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g, self, |acc, g| acc.add_assign(g));
                accumulate(grads, *b, g, self, |acc, g| add_column_sums(acc, g));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g, self, |acc, g| acc.add_assign(g));
                accumulate(grads, *b, g, self, |acc, g| {
                    for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g, self, |acc, g| {
                    for ((x, gi), bi) in acc.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gi * bi;
                    }
                });
                accumulate(grads, *b, g, self, |acc, g| {
                    for ((x, gi), ai) in acc.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gi * ai;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = av.cols();
                accumulate(grads, *a, g, self, |acc, g| {
                    let bd = bv.data();
                    for (i, (x, gi)) in acc.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *x += gi * bd[i % cols];
                    }
                });
                accumulate(grads, *b, g, self, |acc, g| {
                    let ad = av.data();
                    let out = acc.data_mut();
                    for (i, gi) in g.data().iter().enumerate() {
                        out[i % cols] += gi * ad[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g, self, |acc, g| {
                    for (x, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *x += c * gi;
                    }
                });
            }
            Op::AddScalar(a) => accumulate(grads, *a, g, self, |acc, g| acc.add_assign(g)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g, self, |acc, g| {
                    gemm(g.data(), g.shape(), false, bv.data(), bv.shape(), true, acc.data_mut(), 1.0)
                });
                accumulate(grads, *b, g, self, |acc, g| {
                    gemm(av.data(), av.shape(), true, g.data(), g.shape(), false, acc.data_mut(), 1.0)
                });
            }
            Op::Affine(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                accumulate(grads, *x, g, self, |acc, g| {
                    gemm(g.data(), g.shape(), false, wv.data(), wv.shape(), true, acc.data_mut(), 1.0)
                });
                accumulate(grads, *w, g, self, |acc, g| {
                    gemm(xv.data(), xv.shape(), true, g.data(), g.shape(), false, acc.data_mut(), 1.0)
                });
                accumulate(grads, *b, g, self, |acc, g| add_column_sums(acc, g));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = self.value(*p).cols();
                    let start = offset;
                    accumulate(grads, *p, g, self, |acc, g| {
                        let gc = g.cols();
                        let out = acc.data_mut();
                        for r in 0..g.rows() {
                            let src = &g.data()[r * gc + start..r * gc + start + width];
                            for (o, s) in out[r * width..(r + 1) * width].iter_mut().zip(src) {
                                *o += s;
                            }
                        }
                    });
                    offset += width;
                }
            }
            Op::SliceCols(a, start) => {
                let start = *start;
                let src_cols = self.value(*a).cols();
                accumulate(grads, *a, g, self, |acc, g| {
                    let w = g.cols();
                    let out = acc.data_mut();
                    for r in 0..g.rows() {
                        for (o, s) in out[r * src_cols + start..r * src_cols + start + w].iter_mut().zip(g.row_slice(r)) {
                            *o += s;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => unary(grads, *a, g, self, &node.value, |_, y| y * (1.0 - y)),
            Op::Tanh(a) => unary(grads, *a, g, self, &node.value, |_, y| 1.0 - y * y),
            Op::Exp(a) => unary(grads, *a, g, self, &node.value, |_, y| y),
            Op::Log(a) => unary(grads, *a, g, self, &node.value, |x, _| 1.0 / x),
            Op::Square(a) => unary(grads, *a, g, self, &node.value, |x, _| 2.0 * x),
            Op::Softplus(a) => unary(grads, *a, g, self, &node.value, |x, _| sigmoid(x)),
            Op::Abs(a) => unary(grads, *a, g, self, &node.value, |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Sum(a) => {
                let gs = g.item();
                accumulate(grads, *a, g, self, |acc, _| {
                    for x in acc.data_mut() {
                        *x += gs;
                    }
                });
            }
            Op::Mean(a) => {
                let gs = g.item() / self.value(*a).len() as f64;
                accumulate(grads, *a, g, self, |acc, _| {
                    for x in acc.data_mut() {
                        *x += gs;
                    }
                });
            }
            Op::SumCols(a) => {
                let cols = self.value(*a).cols();
                accumulate(grads, *a, g, self, |acc, g| {
                    let gd = g.data();
                    for (i, x) in acc.data_mut().iter_mut().enumerate() {
                        *x += gd[i / cols];
                    }
                });
            }
        }
    }
}

/// Applies `f(accumulator, upstream)` to the gradient slot of `target`,
/// allocating a zero slot on first touch.
fn accumulate(
    grads: &mut [Option<Tensor>],
    target: Var,
    upstream: &Tensor,
    tape: &Tape,
    f: impl FnOnce(&mut Tensor, &Tensor),
) {
    let slot = grads[target.0].get_or_insert_with(|| {
        let Shape(r, c) = tape.shape(target);
        Tensor::zeros(r, c)
    });
    f(slot, upstream);
}

/// Elementwise chain rule; `d(x, y)` receives the input and output element.
fn unary(
    grads: &mut [Option<Tensor>],
    target: Var,
    upstream: &Tensor,
    tape: &Tape,
    output: &Tensor,
    d: impl Fn(f64, f64) -> f64,
) {
    let input = tape.value(target);
    accumulate(grads, target, upstream, tape, |acc, g| {
        for (((a, gi), x), y) in acc.data_mut().iter_mut().zip(g.data()).zip(input.data()).zip(output.data()) {
            *a += gi * d(*x, *y);
        }
    });
}

fn add_column_sums(acc: &mut Tensor, g: &Tensor) {
    let cols = g.cols();
    let out = acc.data_mut();
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
}
