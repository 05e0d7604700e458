use super::tensor::{gemm, matmul_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `m x n` plus a `1 x n` row repeated down the rows.
    AddRow(Var, Var),
    /// `m x n` times an `m x 1` column repeated across the columns.
    MulCol(Var, Var),
    /// tensor times a `1 x 1` node
    Scale(Var, Var),
    Affine(Var, f64),
    Matmul(Var, Var, bool, bool),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    SmoothRelu(Var, f64),
    SmoothReluGrad(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColSum(Var),
    Dot(Var, Var),
    NormSq(Var),
    BroadcastScalar(Var),
    BroadcastCols(Var),
    BroadcastRows(Var),
    Concat(Var, Var),
    SliceCols(Var, usize, usize),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulCol(a, b)
            | Scale(a, b) | Matmul(a, b, _, _) | Dot(a, b) | Concat(a, b) => [Some(a), Some(b)],
            Affine(a, ..)
            | Tanh(a)
            | Sigmoid(a)
            | Softplus(a)
            | Relu(a)
            | SmoothRelu(a, _)
            | SmoothReluGrad(a, _)
            | Square(a)
            | Sum(a)
            | Mean(a)
            | RowSum(a)
            | ColSum(a)
            | NormSq(a)
            | BroadcastScalar(a)
            | BroadcastCols(a)
            | BroadcastRows(a)
            | SliceCols(a, ..) => [Some(a), None],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    /// Depends on at least one variable leaf.
    tracked: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so inputs
/// always precede their consumers.
///
/// [`Tape::backward`] computes numeric adjoints. [`Tape::grad`] instead
/// records the adjoint computation on the tape itself, which makes the
/// returned gradients differentiable in turn.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numeric adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros of `shape` if the output does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 2]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// ReLU with a quadratic knee of width `d`: zero for `x <= 0`, `x^2 / 2d`
/// on `(0, d)` and `x - d/2` beyond. Continuously differentiable.
pub(crate) fn smooth_relu(x: f64, d: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < d {
        0.5 * x * x / d
    } else {
        x - 0.5 * d
    }
}

pub(crate) fn smooth_relu_grad(x: f64, d: f64) -> f64 {
    (x / d).clamp(0.0, 1.0)
}

fn smooth_relu_hess(x: f64, d: f64) -> f64 {
    if x > 0.0 && x < d {
        1.0 / d
    } else {
        0.0
    }
}

fn row_sum(t: &Tensor) -> Tensor {
    let c = t.cols();
    Tensor::from_parts(
        t.rows(),
        1,
        t.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect(),
    )
}

fn col_sum(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
            *o += v;
        }
    }
    Tensor::from_parts(1, t.cols(), out)
}

fn broadcast_cols(c: &Tensor, cols: usize) -> Tensor {
    let mut out = Vec::with_capacity(c.rows() * cols);
    for &v in c.data() {
        out.extend(std::iter::repeat(v).take(cols));
    }
    Tensor::from_parts(c.rows(), cols, out)
}

fn broadcast_rows(r: &Tensor, rows: usize) -> Tensor {
    Tensor::from_parts(rows, r.cols(), r.data().repeat(rows))
}

fn mul_col(a: &Tensor, c: &Tensor) -> Tensor {
    let cols = a.cols();
    let mut out = a.data().to_vec();
    for (row, &s) in out.chunks_mut(cols.max(1)).zip(c.data()) {
        for v in row {
            *v *= s;
        }
    }
    Tensor::from_parts(a.rows(), cols, out)
}

fn add_row(a: &Tensor, r: &Tensor) -> Tensor {
    let cols = a.cols();
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(cols.max(1)) {
        for (v, b) in row.iter_mut().zip(r.data()) {
            *v += b;
        }
    }
    Tensor::from_parts(a.rows(), cols, out)
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        out.extend_from_slice(a.row_slice(r));
        out.extend_from_slice(b.row_slice(r));
    }
    Tensor::from_parts(a.rows(), a.cols() + b.cols(), out)
}

fn slice_cols(a: &Tensor, start: usize, len: usize) -> Tensor {
    let mut out = Vec::with_capacity(a.rows() * len);
    for r in 0..a.rows() {
        out.extend_from_slice(&a.row_slice(r)[start..start + len]);
    }
    Tensor::from_parts(a.rows(), len, out)
}

fn pad_cols(g: &Tensor, start: usize, total: usize) -> Tensor {
    let mut out = vec![0.0; g.rows() * total];
    for r in 0..g.rows() {
        out[r * total + start..r * total + start + g.cols()].copy_from_slice(g.row_slice(r));
    }
    Tensor::from_parts(g.rows(), total, out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all nodes, keeping the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf that gradients are never taken with respect to.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or input).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let tracked = op.inputs().iter().flatten().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(())
        } else {
            Err(Error::Shape { op, lhs: sa, rhs: sb })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != [1, sa[1]] {
            return Err(Error::Shape { op: "add_row", lhs: sa, rhs: sr });
        }
        let v = add_row(self.value(a), self.value(row));
        Ok(self.push(Op::AddRow(a, row), v))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != [sa[0], 1] {
            return Err(Error::Shape { op: "mul_col", lhs: sa, rhs: sc });
        }
        let v = mul_col(self.value(a), self.value(col));
        Ok(self.push(Op::MulCol(a, col), v))
    }

    /// Multiplies every element by the `1 x 1` node `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let ss = self.shape(s);
        if ss != [1, 1] {
            return Err(Error::Shape { op: "scale", lhs: self.shape(a), rhs: ss });
        }
        let k = self.value(s).item();
        let v = self.value(a).map(|x| x * k);
        Ok(self.push(Op::Scale(a, s), v))
    }

    /// `mul * a + add`, elementwise, with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let v = self.value(a).map(|x| mul * x + add);
        self.push(Op::Affine(a, mul), v)
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if matmul_shape(sa, ta, sb, tb).is_none() {
            return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let v = gemm(self.value(a), ta, self.value(b), tb);
        Ok(self.push(Op::Matmul(a, b, ta, tb), v))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(Op::Softplus(a), v)
    }

    /// Plain ReLU. Supported by [`Tape::backward`] but not by [`Tape::grad`].
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn smooth_relu(&mut self, a: Var, width: f64) -> Var {
        let v = self.value(a).map(|x| smooth_relu(x, width));
        self.push(Op::SmoothRelu(a, width), v)
    }

    pub fn smooth_relu_grad(&mut self, a: Var, width: f64) -> Var {
        let v = self.value(a).map(|x| smooth_relu_grad(x, width));
        self.push(Op::SmoothReluGrad(a, width), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Sums each row, giving `m x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = row_sum(self.value(a));
        self.push(Op::RowSum(a), v)
    }

    /// Sums each column, giving `1 x n`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let v = col_sum(self.value(a));
        self.push(Op::ColSum(a), v)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(d)))
    }

    pub fn norm_sq(&mut self, a: Var) -> Var {
        let d = self.value(a).data().iter().map(|x| x * x).sum();
        self.push(Op::NormSq(a), Tensor::scalar(d))
    }

    pub fn broadcast_scalar(&mut self, s: Var, shape: [usize; 2]) -> Result<Var> {
        let ss = self.shape(s);
        if ss != [1, 1] {
            return Err(Error::Shape { op: "broadcast_scalar", lhs: ss, rhs: shape });
        }
        let v = Tensor::filled(shape[0], shape[1], self.value(s).item());
        Ok(self.push(Op::BroadcastScalar(s), v))
    }

    /// Repeats an `m x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, c: Var, cols: usize) -> Result<Var> {
        let sc = self.shape(c);
        if sc[1] != 1 {
            return Err(Error::Shape { op: "broadcast_cols", lhs: sc, rhs: [sc[0], cols] });
        }
        let v = broadcast_cols(self.value(c), cols);
        Ok(self.push(Op::BroadcastCols(c), v))
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, r: Var, rows: usize) -> Result<Var> {
        let sr = self.shape(r);
        if sr[0] != 1 {
            return Err(Error::Shape { op: "broadcast_rows", lhs: sr, rhs: [rows, sr[1]] });
        }
        let v = broadcast_rows(self.value(r), rows);
        Ok(self.push(Op::BroadcastRows(r), v))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(Error::Shape { op: "concat", lhs: sa, rhs: sb });
        }
        let v = concat_cols(self.value(a), self.value(b));
        Ok(self.push(Op::Concat(a, b), v))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start + len > sa[1] {
            return Err(Error::Shape { op: "slice_cols", lhs: sa, rhs: [start, len] });
        }
        let v = slice_cols(self.value(a), start, len);
        Ok(self.push(Op::SliceCols(a, start, len), v))
    }

    /// Numeric reverse pass from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let so = self.shape(out);
        if so != [1, 1] {
            return Err(Error::NonScalarOutput(so));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contrib = self.vjp_numeric(i, &g);
            for (input, gi) in node.op.inputs().into_iter().zip(contrib) {
                if let (Some(v), Some(gi)) = (input, gi) {
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&gi),
                        slot => *slot = Some(gi),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp_numeric(&self, i: usize, g: &Tensor) -> [Option<Tensor>; 2] {
        use Op::*;
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].tracked;
        let only = |v: Var, f: &dyn Fn() -> Tensor| want(v).then(f);
        match node.op {
            Leaf => [None, None],
            Add(a, b) => [only(a, &|| g.clone()), only(b, &|| g.clone())],
            Sub(a, b) => [only(a, &|| g.clone()), only(b, &|| g.map(|x| -x))],
            Mul(a, b) => [
                only(a, &|| g.zip_map(val(b), |g, b| g * b)),
                only(b, &|| g.zip_map(val(a), |g, a| g * a)),
            ],
            Div(a, b) => [
                only(a, &|| g.zip_map(val(b), |g, b| g / b)),
                only(b, &|| {
                    let gy = g.zip_map(y, |g, y| -g * y);
                    gy.zip_map(val(b), |t, b| t / b)
                }),
            ],
            AddRow(a, r) => [only(a, &|| g.clone()), only(r, &|| col_sum(g))],
            MulCol(a, c) => [
                only(a, &|| mul_col(g, val(c))),
                only(c, &|| row_sum(&g.zip_map(val(a), |g, a| g * a))),
            ],
            Scale(a, s) => [
                only(a, &|| {
                    let k = val(s).item();
                    g.map(|g| g * k)
                }),
                only(s, &|| Tensor::scalar(g.zip_map(val(a), |g, a| g * a).sum())),
            ],
            Affine(a, m) => [only(a, &|| g.map(|g| g * m)), None],
            Matmul(a, b, ta, tb) => [
                only(a, &|| {
                    if ta {
                        gemm(val(b), tb, g, true)
                    } else {
                        gemm(g, false, val(b), !tb)
                    }
                }),
                only(b, &|| {
                    if tb {
                        gemm(g, true, val(a), ta)
                    } else {
                        gemm(val(a), !ta, g, false)
                    }
                }),
            ],
            Tanh(a) => [only(a, &|| g.zip_map(y, |g, y| g * (1.0 - y * y))), None],
            Sigmoid(a) => [only(a, &|| g.zip_map(y, |g, s| g * s * (1.0 - s))), None],
            Softplus(a) => [only(a, &|| g.zip_map(val(a), |g, x| g * sigmoid(x))), None],
            Relu(a) => [
                only(a, &|| g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })),
                None,
            ],
            SmoothRelu(a, d) => [
                only(a, &|| g.zip_map(val(a), |g, x| g * smooth_relu_grad(x, d))),
                None,
            ],
            SmoothReluGrad(a, d) => [
                only(a, &|| g.zip_map(val(a), |g, x| g * smooth_relu_hess(x, d))),
                None,
            ],
            Square(a) => [only(a, &|| g.zip_map(val(a), |g, x| 2.0 * g * x)), None],
            Sum(a) => [
                only(a, &|| {
                    let s = val(a).shape();
                    Tensor::filled(s[0], s[1], g.item())
                }),
                None,
            ],
            Mean(a) => [
                only(a, &|| {
                    let s = val(a).shape();
                    Tensor::filled(s[0], s[1], g.item() / (s[0] * s[1]) as f64)
                }),
                None,
            ],
            RowSum(a) => [only(a, &|| broadcast_cols(g, val(a).cols())), None],
            ColSum(a) => [only(a, &|| broadcast_rows(g, val(a).rows())), None],
            Dot(a, b) => [
                only(a, &|| {
                    let k = g.item();
                    val(b).map(|x| x * k)
                }),
                only(b, &|| {
                    let k = g.item();
                    val(a).map(|x| x * k)
                }),
            ],
            NormSq(a) => [
                only(a, &|| {
                    let k = 2.0 * g.item();
                    val(a).map(|x| x * k)
                }),
                None,
            ],
            BroadcastScalar(s) => [only(s, &|| Tensor::scalar(g.sum())), None],
            BroadcastCols(c) => [only(c, &|| row_sum(g)), None],
            BroadcastRows(r) => [only(r, &|| col_sum(g)), None],
            Concat(a, b) => {
                let ca = val(a).cols();
                let cb = val(b).cols();
                [
                    only(a, &|| slice_cols(g, 0, ca)),
                    only(b, &|| slice_cols(g, ca, cb)),
                ]
            }
            SliceCols(a, start, _) => [only(a, &|| pad_cols(g, start, val(a).cols())), None],
        }
    }

    /// Gradient of the scalar `out` with respect to each of `wrt`, recorded
    /// as new tape nodes so the result can itself be differentiated.
    ///
    /// Fails with [`Error::UnsupportedSecondDerivative`] if a ReLU lies on a
    /// path from `wrt` to `out`.
    pub fn grad(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let so = self.shape(out);
        if so != [1, 1] {
            return Err(Error::NonScalarOutput(so));
        }
        let Some(lo) = wrt.iter().map(|v| v.0).min() else {
            return Ok(vec![]);
        };
        let n = out.0 + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in lo..n {
            if !relevant[i] {
                relevant[i] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|v| v.0 >= lo && relevant[v.0]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; n];
        if relevant[out.0] {
            adj[out.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for i in (lo..n).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = adj[i] else { continue };
            let op = self.nodes[i].op;
            let inputs = op.inputs();
            let rel = inputs.map(|v| v.is_some_and(|v| v.0 >= lo && relevant[v.0]));
            let contrib = self.vjp_taped(i, g, rel)?;
            for ((input, gi), r) in inputs.into_iter().zip(contrib).zip(rel) {
                if let (Some(v), Some(gi), true) = (input, gi, r) {
                    adj[v.0] = Some(match adj[v.0] {
                        Some(acc) => self.add(acc, gi)?,
                        None => gi,
                    });
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let s = self.shape(*w);
                    self.constant(Tensor::zeros(s[0], s[1]))
                }
            })
            .collect())
    }

    fn vjp_taped(&mut self, i: usize, g: Var, rel: [bool; 2]) -> Result<[Option<Var>; 2]> {
        use Op::*;
        let y = Var(i);
        let op = self.nodes[i].op;
        let [ra, rb] = rel;
        Ok(match op {
            Leaf => [None, None],
            Add(..) => [ra.then_some(g), rb.then_some(g)],
            Sub(..) => [ra.then_some(g), rb.then(|| self.neg(g))],
            Mul(a, b) => [
                if ra { Some(self.mul(g, b)?) } else { None },
                if rb { Some(self.mul(g, a)?) } else { None },
            ],
            Div(_, b) => [
                if ra { Some(self.div(g, b)?) } else { None },
                if rb {
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, b)?;
                    Some(self.neg(q))
                } else {
                    None
                },
            ],
            AddRow(..) => [ra.then_some(g), rb.then(|| self.col_sum(g))],
            MulCol(a, c) => [
                if ra { Some(self.mul_col(g, c)?) } else { None },
                if rb {
                    let ga = self.mul(g, a)?;
                    Some(self.row_sum(ga))
                } else {
                    None
                },
            ],
            Scale(a, s) => [
                if ra { Some(self.scale(g, s)?) } else { None },
                if rb { Some(self.dot(g, a)?) } else { None },
            ],
            Affine(_, m) => [ra.then(|| self.scalar_mul(g, m)), None],
            Matmul(a, b, ta, tb) => [
                if ra {
                    Some(if ta {
                        self.matmul_t(b, tb, g, true)?
                    } else {
                        self.matmul_t(g, false, b, !tb)?
                    })
                } else {
                    None
                },
                if rb {
                    Some(if tb {
                        self.matmul_t(g, true, a, ta)?
                    } else {
                        self.matmul_t(a, !ta, g, false)?
                    })
                } else {
                    None
                },
            ],
            Tanh(_) => {
                let y2 = self.square(y);
                let d = self.affine(y2, -1.0, 1.0);
                [Some(self.mul(g, d)?), None]
            }
            Sigmoid(_) => {
                let one_minus = self.affine(y, -1.0, 1.0);
                let d = self.mul(y, one_minus)?;
                [Some(self.mul(g, d)?), None]
            }
            Softplus(a) => {
                let s = self.sigmoid(a);
                [Some(self.mul(g, s)?), None]
            }
            Relu(_) => return Err(Error::UnsupportedSecondDerivative { op: "relu" }),
            SmoothRelu(a, d) => {
                let s = self.smooth_relu_grad(a, d);
                [Some(self.mul(g, s)?), None]
            }
            SmoothReluGrad(a, d) => {
                let h = self.value(a).map(|x| smooth_relu_hess(x, d));
                let h = self.constant(h);
                [Some(self.mul(g, h)?), None]
            }
            Square(a) => {
                let two_a = self.scalar_mul(a, 2.0);
                [Some(self.mul(g, two_a)?), None]
            }
            Sum(a) => {
                let s = self.shape(a);
                [Some(self.broadcast_scalar(g, s)?), None]
            }
            Mean(a) => {
                let s = self.shape(a);
                let b = self.broadcast_scalar(g, s)?;
                [Some(self.scalar_mul(b, 1.0 / (s[0] * s[1]) as f64)), None]
            }
            RowSum(a) => {
                let c = self.shape(a)[1];
                [Some(self.broadcast_cols(g, c)?), None]
            }
            ColSum(a) => {
                let r = self.shape(a)[0];
                [Some(self.broadcast_rows(g, r)?), None]
            }
            Dot(a, b) => [
                if ra { Some(self.scale(b, g)?) } else { None },
                if rb { Some(self.scale(a, g)?) } else { None },
            ],
            NormSq(a) => {
                let two_a = self.scalar_mul(a, 2.0);
                [Some(self.scale(two_a, g)?), None]
            }
            BroadcastScalar(..) => [Some(self.sum(g)), None],
            BroadcastCols(..) => [Some(self.row_sum(g)), None],
            BroadcastRows(..) => [Some(self.col_sum(g)), None],
            Concat(a, b) => {
                let ca = self.shape(a)[1];
                let cb = self.shape(b)[1];
                [
                    if ra { Some(self.slice_cols(g, 0, ca)?) } else { None },
                    if rb { Some(self.slice_cols(g, ca, cb)?) } else { None },
                ]
            }
            SliceCols(a, start, len) => {
                let [rows, total] = self.shape(a);
                let mut acc = g;
                if start > 0 {
                    let left = self.constant(Tensor::zeros(rows, start));
                    acc = self.concat(left, acc)?;
                }
                if start + len < total {
                    let right = self.constant(Tensor::zeros(rows, total - start - len));
                    acc = self.concat(acc, right)?;
                }
                [Some(acc), None]
            }
        })
    }
}

/// Differentiable gradient of a scalar field at the points in `x`.
///
/// `field` maps an `m x d` batch to an `m x 1` column of values (rows are
/// independent). Returns the input node and the `m x d` gradient node.
pub fn gradient_of_scalar_field<F>(tape: &mut Tape, x: Tensor, field: F) -> Result<(Var, Var)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let xv = tape.variable(x);
    let values = field(tape, xv)?;
    let total = tape.sum(values);
    let g = tape.grad(total, &[xv])?;
    Ok((xv, g[0]))
}
