use super::matrix::dot;
use super::{Matrix, TensorError, NORM_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded value together with its accumulated cotangent.
#[derive(Debug, Clone, PartialEq)]
pub struct DualValue {
    pub value: Matrix,
    pub grad: Matrix,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// Adds a 1×c row to every row of an r×c matrix.
    AddRow(Var, Var),
    Hadamard(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSumExpRows { input: Var, exclude_diagonal: bool },
    Sum(Var),
    Mean(Var),
    RowNormalize { input: Var, norms: Vec<f64> },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SelectRows(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a computation, replayed backwards for gradients.
///
/// One tape belongs to one training step. Values recorded with
/// [`Tape::leaf`] receive gradients; values recorded with
/// [`Tape::constant`] do not, and neither does anything computed purely
/// from constants.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn item(&self, v: Var) -> Result<f64, TensorError> {
        self.value(v).item()
    }

    /// Accumulated cotangent, or `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Cotangent with zeros substituted when nothing flowed into `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn dual(&self, v: Var) -> DualValue {
        DualValue {
            value: self.value(v).clone(),
            grad: self.grad_or_zeros(v),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`, the similarity form used by the contrastive losses.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Broadcast-adds the 1×c `row` to every row of `m`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var, TensorError> {
        let (mv, rv) = (self.value(m), self.value(row));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(TensorError::shape("add_row", mv, rv));
        }
        let mut value = mv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(m, row), &[m, row]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Hadamard(a, b), &[a, b]))
    }

    /// Elementwise product with a matrix that carries no gradient.
    pub fn mul_const(&mut self, a: Var, weights: Matrix) -> Result<Var, TensorError> {
        let value = self.value(a).hadamard(&weights)?;
        Ok(self.push(value, Op::MulConst(a, weights), &[a]))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let value = self.value(a).scale(alpha);
        self.push(value, Op::Scale(a, alpha), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let input = self.value(a);
        if let Some((index, &value)) = input.data().iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value,
            });
        }
        let value = input.map(f64::ln);
        Ok(self.push(value, Op::Log(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let input = self.value(a);
        let mut value = input.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Max-shifted `log Σ_j exp(m_ij)` per row, returned as an r×1 column.
    /// With `exclude_diagonal`, term `j = i` is left out of row `i`.
    pub fn log_sum_exp_rows(&mut self, a: Var, exclude_diagonal: bool) -> Result<Var, TensorError> {
        let value = log_sum_exp_rows(self.value(a), exclude_diagonal)?;
        Ok(self.push(
            value,
            Op::LogSumExpRows {
                input: a,
                exclude_diagonal,
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a), &[a])
    }

    /// Scales every row to unit L2 norm.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let input = self.value(a);
        let norms = input.row_norms();
        if let Some((row, &norm)) = norms.iter().enumerate().find(|(_, n)| **n < NORM_EPS) {
            return Err(TensorError::DegenerateRow { row, norm });
        }
        let mut value = input.clone();
        for (r, norm) in norms.iter().enumerate() {
            for v in value.row_mut(r) {
                *v /= norm;
            }
        }
        Ok(self.push(value, Op::RowNormalize { input: a, norms }, &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = Matrix::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Gathers rows by index; repeated indices are allowed and their
    /// gradients add up.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let input = self.value(a);
        if let Some(&index) = indices.iter().find(|&&i| i >= input.rows()) {
            return Err(TensorError::RowIndex {
                index,
                rows: input.rows(),
            });
        }
        let value = input.select_rows(indices);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), &[a]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let indices: Vec<usize> = (start..end).collect();
        self.select_rows(a, &indices)
    }

    /// Seeds `out` (which must be 1×1) with cotangent 1 and propagates.
    /// Gradients from earlier calls are kept and accumulated into.
    pub fn backward(&mut self, out: Var) -> Result<(), TensorError> {
        let shape = self.value(out).shape();
        if shape != (1, 1) {
            return Err(TensorError::NotScalar { shape });
        }
        accumulate(&mut self.nodes[out.0], Matrix::scalar(1.0));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.backward_rule(idx, &grad);
            self.nodes[idx].grad = Some(grad);
            for (target, g) in contributions {
                if self.nodes[target.0].requires_grad {
                    accumulate(&mut self.nodes[target.0], g);
                }
            }
        }
        Ok(())
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_rule(&self, idx: usize, grad: &Matrix) -> Vec<(Var, Matrix)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut contrib = Vec::new();
        // Shapes were validated on the forward pass, so the expects below
        // cannot fire.
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    contrib.push((*a, grad.matmul_t(val(*b)).expect("recorded shapes")));
                }
                if self.wants(*b) {
                    contrib.push((*b, val(*a).t_matmul(grad).expect("recorded shapes")));
                }
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                if self.wants(*a) {
                    contrib.push((*a, grad.matmul(val(*b)).expect("recorded shapes")));
                }
                if self.wants(*b) {
                    contrib.push((*b, grad.t_matmul(val(*a)).expect("recorded shapes")));
                }
            }
            Op::Add(a, b) => {
                contrib.push((*a, grad.clone()));
                contrib.push((*b, grad.clone()));
            }
            Op::Sub(a, b) => {
                contrib.push((*a, grad.clone()));
                contrib.push((*b, grad.scale(-1.0)));
            }
            Op::AddRow(m, row) => {
                contrib.push((*m, grad.clone()));
                if self.wants(*row) {
                    let mut g = Matrix::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (o, v) in g.data_mut().iter_mut().zip(grad.row(r)) {
                            *o += v;
                        }
                    }
                    contrib.push((*row, g));
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    contrib.push((*a, grad.hadamard(val(*b)).expect("recorded shapes")));
                }
                if self.wants(*b) {
                    contrib.push((*b, grad.hadamard(val(*a)).expect("recorded shapes")));
                }
            }
            Op::MulConst(a, w) => {
                contrib.push((*a, grad.hadamard(w).expect("recorded shapes")));
            }
            Op::Scale(a, alpha) => contrib.push((*a, grad.scale(*alpha))),
            Op::AddScalar(a) => contrib.push((*a, grad.clone())),
            Op::Exp(a) => contrib.push((*a, grad.hadamard(out).expect("recorded shapes"))),
            Op::Log(a) => {
                let g = grad.zip_map(val(*a), "log", |g, x| g / x).expect("recorded shapes");
                contrib.push((*a, g));
            }
            Op::Relu(a) => {
                let g = grad
                    .zip_map(val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })
                    .expect("recorded shapes");
                contrib.push((*a, g));
            }
            Op::Tanh(a) => {
                let g = grad
                    .zip_map(out, "tanh", |g, y| g * (1.0 - y * y))
                    .expect("recorded shapes");
                contrib.push((*a, g));
            }
            Op::SoftmaxRows(a) => {
                let mut g = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, dy) = (out.row(r), grad.row(r));
                    let inner = dot(y, dy);
                    for ((o, &yi), &dyi) in g.row_mut(r).iter_mut().zip(y).zip(dy) {
                        *o = yi * (dyi - inner);
                    }
                }
                contrib.push((*a, g));
            }
            Op::LogSumExpRows {
                input,
                exclude_diagonal,
            } => {
                let x = val(*input);
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let lse = out.get(r, 0);
                    let dr = grad.get(r, 0);
                    for c in 0..x.cols() {
                        if *exclude_diagonal && r == c {
                            continue;
                        }
                        g.set(r, c, dr * (x.get(r, c) - lse).exp());
                    }
                }
                contrib.push((*input, g));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                contrib.push((*a, Matrix::filled(r, c, grad.get(0, 0))));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                contrib.push((*a, Matrix::filled(r, c, grad.get(0, 0) / (r * c) as f64)));
            }
            Op::RowNormalize { input, norms } => {
                // dx = (dy - y (y·dy)) / ‖x‖
                let mut g = Matrix::zeros(out.rows(), out.cols());
                for (r, norm) in norms.iter().enumerate() {
                    let (y, dy) = (out.row(r), grad.row(r));
                    let inner = dot(y, dy);
                    for ((o, &yi), &dyi) in g.row_mut(r).iter_mut().zip(y).zip(dy) {
                        *o = (dyi - yi * inner) / norm;
                    }
                }
                contrib.push((*input, g));
            }
            Op::Transpose(a) => contrib.push((*a, grad.transpose())),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for part in parts {
                    let rows = val(*part).rows();
                    contrib.push((*part, grad.slice_rows(start, start + rows)));
                    start += rows;
                }
            }
            Op::ConcatCols(a, b) => {
                let split = val(*a).cols();
                let left = Matrix::from_fn(grad.rows(), split, |r, c| grad.get(r, c));
                let right = Matrix::from_fn(grad.rows(), grad.cols() - split, |r, c| {
                    grad.get(r, split + c)
                });
                contrib.push((*a, left));
                contrib.push((*b, right));
            }
            Op::SelectRows(a, indices) => {
                if self.wants(*a) {
                    let src = val(*a);
                    let mut g = Matrix::zeros(src.rows(), src.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, v) in g.row_mut(i).iter_mut().zip(grad.row(k)) {
                            *o += v;
                        }
                    }
                    contrib.push((*a, g));
                }
            }
        }
        contrib
    }
}

fn accumulate(node: &mut Node, g: Matrix) {
    match &mut node.grad {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Value-only row log-sum-exp, shared by the tape op and plain callers.
pub(crate) fn log_sum_exp_rows(m: &Matrix, exclude_diagonal: bool) -> Result<Matrix, TensorError> {
    if exclude_diagonal {
        if m.rows() != m.cols() {
            return Err(TensorError::NotSquare {
                op: "log_sum_exp_rows",
                shape: m.shape(),
            });
        }
        if m.cols() < 2 {
            return Err(TensorError::EmptySum {
                rows: m.rows(),
                cols: m.cols(),
            });
        }
    } else if m.cols() == 0 {
        return Err(TensorError::EmptySum {
            rows: m.rows(),
            cols: 0,
        });
    }
    let mut out = Matrix::zeros(m.rows(), 1);
    for r in 0..m.rows() {
        let terms = m
            .row(r)
            .iter()
            .enumerate()
            .filter(|(c, _)| !(exclude_diagonal && *c == r))
            .map(|(_, &v)| v);
        let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = terms.map(|v| (v - max).exp()).sum();
        out.set(r, 0, max + total.ln());
    }
    Ok(out)
}
