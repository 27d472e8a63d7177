//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a `1×1` output walks the tape in reverse and
//! accumulates gradients for every node that depends on a trainable leaf.
//! Shape errors are programming errors and panic.

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    NormalizeRows(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    Pick(Var, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds a `1×c` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.rows(), 1, "add_row expects a row vector");
        assert_eq!(am.cols(), rm.cols(), "add_row width");
        let v = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) + rm.get(0, j));
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Scales row `i` of `a` by `col[i]` where `col` is `n×1`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(col));
        assert_eq!(cm.cols(), 1, "mul_col expects a column vector");
        assert_eq!(am.rows(), cm.rows(), "mul_col height");
        let v = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) * cm.get(i, 0));
        let rg = self.rg(a) || self.rg(col);
        self.push(v, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut out = Matrix::zeros(am.rows(), am.cols());
        for i in 0..am.rows() {
            softmax_row(am.row(i), out.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut out = Matrix::zeros(am.rows(), am.cols());
        for i in 0..am.rows() {
            let row = am.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with a learnable `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xm = self.value(x);
        let (n, c) = xm.shape();
        let (gm, bm) = (self.value(gamma), self.value(beta));
        assert_eq!(gm.shape(), (1, c), "layer_norm gamma shape");
        assert_eq!(bm.shape(), (1, c), "layer_norm beta shape");
        let mut xhat = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xm.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (h, &v) in xhat.row_mut(i).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Matrix::from_fn(n, c, |i, j| xhat.get(i, j) * gm.get(0, j) + bm.get(0, j));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    /// Divides each row by its Euclidean norm. Callers must rule out zero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let norms: Vec<f64> = (0..am.rows())
            .map(|i| am.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let v = Matrix::from_fn(am.rows(), am.cols(), |i, j| am.get(i, j) / norms[i]);
        let rg = self.rg(a);
        self.push(v, Op::NormalizeRows(a, norms), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(n, total);
        let mut offset = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.rows(), n, "concat_cols height");
            for i in 0..n {
                out.row_mut(i)[offset..offset + pm.cols()].copy_from_slice(pm.row(i));
            }
            offset += pm.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.cols(), "slice_cols out of range");
        let v = Matrix::from_fn(am.rows(), len, |i, j| am.get(i, start + j));
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.rows(), "slice_rows out of range");
        let v = Matrix::new(
            len,
            am.cols(),
            am.data()[start * am.cols()..(start + len) * am.cols()].to_vec(),
        );
        let rg = self.rg(a);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::new(1, 1, vec![self.value(a).sum()]);
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let count = {
            let (r, c) = self.value(a).shape();
            (r * c) as f64
        };
        let s = self.sum(a);
        self.scale(s, 1.0 / count)
    }

    pub fn pick(&mut self, a: Var, i: usize, j: usize) -> Var {
        let v = Matrix::new(1, 1, vec![self.value(a).get(i, j)]);
        let rg = self.rg(a);
        self.push(v, Op::Pick(a, i, j), rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    acc(*b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    let mut col_sums = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (s, v) in col_sums.row_mut(0).iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    acc(*row, col_sums);
                }
            }
            Op::MulCol(a, col) => {
                let cm = self.value(*col);
                if self.rg(*a) {
                    acc(*a, Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * cm.get(i, 0)));
                }
                if self.rg(*col) {
                    let am = self.value(*a);
                    let gc = Matrix::from_fn(g.rows(), 1, |i, _| {
                        g.row(i).iter().zip(am.row(i)).map(|(x, y)| x * y).sum()
                    });
                    acc(*col, gc);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum();
                    for ((o, &gy), &yy) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yy * (gy - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for ((o, &gy), &ly) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = gy - ly.exp() * total;
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = xhat.shape();
                let gm = self.value(*gamma);
                if self.rg(*beta) || self.rg(*gamma) {
                    let mut gb = Matrix::zeros(1, c);
                    let mut gg = Matrix::zeros(1, c);
                    for i in 0..n {
                        for j in 0..c {
                            gb.data_mut()[j] += g.get(i, j);
                            gg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    acc(*beta, gb);
                    acc(*gamma, gg);
                }
                if self.rg(*x) {
                    let mut gx = Matrix::zeros(n, c);
                    for i in 0..n {
                        let gxhat: Vec<f64> = (0..c).map(|j| g.get(i, j) * gm.get(0, j)).collect();
                        let mean_g = gxhat.iter().sum::<f64>() / c as f64;
                        let mean_gx = gxhat
                            .iter()
                            .zip(xhat.row(i))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / c as f64;
                        for j in 0..c {
                            gx.set(
                                i,
                                j,
                                inv_std[i] * (gxhat[j] - mean_g - xhat.get(i, j) * mean_gx),
                            );
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |gy, x| gy * gelu_grad(x))),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                acc(*a, g.zip_map(self.value(*a), |gy, x| if x > 0.0 { gy } else { s * gy }));
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gy, y| gy * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gy, y| gy * (1.0 - y * y))),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gy, x| {
                    if x > 0.0 {
                        gy
                    } else if x < 0.0 {
                        -gy
                    } else {
                        0.0
                    }
                }),
            ),
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum();
                    for ((o, &gy), &yy) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = (gy - yy * dot) / norms[i];
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        acc(p, Matrix::from_fn(g.rows(), w, |i, j| g.get(i, offset + j)));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, ga);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Pick(a, i, j) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                ga.set(*i, *j, g.get(0, 0));
                acc(*a, ga);
            }
        }
    }
}
