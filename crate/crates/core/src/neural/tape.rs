//! A small reverse-mode tape over row-major `f64` matrices.
//!
//! Rows are points (or pixels), columns are features. Nodes are appended in
//! evaluation order, so reverse order is a valid topological order and each
//! node is visited exactly once during [`Tape::backward`].

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

pub type Matrix = Array2<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("backward already ran on this tape")]
    AlreadyConsumed,
    #[error("seed gradient shape {seed:?} does not match node shape {node:?}")]
    SeedShape { seed: [usize; 2], node: [usize; 2] },
    #[error("loss node must be 1×1, found {0:?}")]
    NotScalar([usize; 2]),
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Identifier of a trainable tensor. Several nodes may refer to the same
/// parameter; their gradients are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

/// Hand-written backward rule for an operation the tape does not know.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    /// Gradients for each input, given the output gradient. `None` means
    /// the input does not influence the output.
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Vec<Option<Matrix>>;
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// Multiplies every row of the first input by the single column of the second.
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    PosEnc(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    NormalizeRows(Var),
    SumSquares(Var),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: BTreeMap<ParamId, Matrix>,
    nodes: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id)
    }

    /// Gradient of any node, including constants.
    pub fn node(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Matrix> {
        self.params
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
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

/// `[v, sin(2⁰πv), cos(2⁰πv), …, sin(2^{L-1}πv), cos(2^{L-1}πv)]` per row,
/// with each block spanning all input columns.
pub fn positional_encode(v: ArrayView2<f64>, bands: usize) -> Matrix {
    let (rows, cols) = v.dim();
    let mut out = Matrix::zeros((rows, cols * (1 + 2 * bands)));
    out.slice_mut(s![.., 0..cols]).assign(&v);
    for b in 0..bands {
        let freq = (1u64 << b) as f64 * PI;
        let sin_at = cols * (1 + 2 * b);
        let cos_at = sin_at + cols;
        for r in 0..rows {
            for c in 0..cols {
                let (sn, cs) = (freq * v[[r, c]]).sin_cos();
                out[[r, sin_at + c]] = sn;
                out[[r, cos_at + c]] = cs;
            }
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId, value: Matrix) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a + row` with `row` (1×n) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// Scales row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        self.push(value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn positional_encode(&mut self, a: Var, bands: usize) -> Var {
        let value = positional_encode(self.value(a).view(), bands);
        self.push(value, Op::PosEnc(a, bands))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start, len))
    }

    /// Divides each row by its Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        self.push(value, Op::NormalizeRows(a))
    }

    /// `Σ aᵢⱼ²` as a 1×1 node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>();
        self.push(Matrix::from_elem((1, 1), s), Op::SumSquares(a))
    }

    /// `Σ aᵢⱼ` as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::from_elem((1, 1), s), Op::Sum(a))
    }

    pub fn custom(&mut self, inputs: &[Var], value: Matrix, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), op))
    }

    /// Backward from a 1×1 loss node with seed 1.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TapeError> {
        let dim = self.value(loss).dim();
        if dim != (1, 1) {
            return Err(TapeError::NotScalar([dim.0, dim.1]));
        }
        self.backward_from(loss, Matrix::from_elem((1, 1), 1.0))
    }

    /// Backward from an arbitrary node with a caller-supplied seed gradient.
    /// A tape can be differentiated once.
    pub fn backward_from(&mut self, output: Var, seed: Matrix) -> Result<Gradients, TapeError> {
        if self.consumed {
            return Err(TapeError::AlreadyConsumed);
        }
        let node_dim = self.value(output).dim();
        if seed.dim() != node_dim {
            return Err(TapeError::SeedShape {
                seed: [seed.nrows(), seed.ncols()],
                node: [node_dim.0, node_dim.1],
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut params: BTreeMap<ParamId, Matrix> = BTreeMap::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, contribution: Matrix| match &mut grads[v.0] {
                Some(acc) => *acc += &contribution,
                slot @ None => *slot = Some(contribution),
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match params.get_mut(id) {
                    Some(acc) => *acc += &g,
                    None => {
                        params.insert(*id, g.clone());
                    }
                },
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&val(*b).t()));
                    send(*b, val(*a).t().dot(&g));
                }
                Op::AddRow(a, row) => {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*row, summed);
                    send(*a, g.clone());
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g.clone());
                }
                Op::Mul(a, b) => {
                    send(*a, &g * val(*b));
                    send(*b, &g * val(*a));
                }
                Op::MulCol(a, col) => {
                    let dc = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, &g * val(*col));
                    send(*col, dc);
                }
                Op::Scale(a, k) => send(*a, &g * *k),
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    send(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    send(*a, d);
                }
                Op::Exp(a) => send(*a, &g * &node.value),
                Op::PosEnc(a, bands) => {
                    let x = val(*a);
                    let cols = x.ncols();
                    let mut d = g.slice(s![.., 0..cols]).to_owned();
                    for b in 0..*bands {
                        let freq = (1u64 << b) as f64 * PI;
                        let sin_at = cols * (1 + 2 * b);
                        let cos_at = sin_at + cols;
                        for r in 0..x.nrows() {
                            for c in 0..cols {
                                let (sn, cs) = (freq * x[[r, c]]).sin_cos();
                                d[[r, c]] +=
                                    freq * (g[[r, sin_at + c]] * cs - g[[r, cos_at + c]] * sn);
                            }
                        }
                    }
                    send(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        send(*p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        send(*p, g.slice(s![at..at + h, ..]).to_owned());
                        at += h;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let mut d = Matrix::zeros(val(*a).dim());
                    d.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    send(*a, d);
                }
                Op::NormalizeRows(a) => {
                    // d(x/|x|) = (g - y (y·g)) / |x|
                    let x = val(*a);
                    let y = &node.value;
                    let mut d = Matrix::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let n = x.row(r).dot(&x.row(r)).sqrt();
                        let yg = y.row(r).dot(&g.row(r));
                        for c in 0..x.ncols() {
                            d[[r, c]] = (g[[r, c]] - y[[r, c]] * yg) / n;
                        }
                    }
                    send(*a, d);
                }
                Op::SumSquares(a) => send(*a, val(*a) * (2.0 * g[[0, 0]])),
                Op::Sum(a) => send(*a, Matrix::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Custom(inputs, op) => {
                    let ins: Vec<&Matrix> = inputs.iter().map(|v| val(*v)).collect();
                    let outs = op.backward(&ins, &node.value, &g);
                    debug_assert_eq!(outs.len(), inputs.len(), "{} arity", op.name());
                    for (v, d) in inputs.iter().zip(outs) {
                        if let Some(d) = d {
                            send(*v, d);
                        }
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` at `x` for every entry.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            p[[r, c]] += h;
            let mut m = x.clone();
            m[[r, c]] -= h;
            out[[r, c]] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn assert_grad(analytic: &Matrix, numeric: &Matrix) {
        for (a, n) in analytic.iter().zip(numeric) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn single_parameter_loss() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), array![[3.0]]);
        let other = tape.param(ParamId(1), array![[5.0]]);
        let zero = tape.scale(other, 0.0);
        let loss = tape.add(w, zero);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(ParamId(0)).unwrap(), &array![[1.0]]);
        assert_eq!(g.param(ParamId(1)).unwrap(), &array![[0.0]]);
    }

    #[test]
    fn one_layer_sum_of_squares_matches_hand_form() {
        // loss = |W v|², dloss/dW = 2 (W v) vᵀ
        let w0 = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.7]];
        let v0 = array![[0.4], [-0.9], [1.5]];
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), w0.clone());
        let v = tape.constant(v0.clone());
        let y = tape.matmul(w, v);
        let loss = tape.sum_squares(y);
        let g = tape.backward(loss).unwrap();
        let expected = w0.dot(&v0).dot(&v0.t()) * 2.0;
        let got = g.param(ParamId(0)).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_twice_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), array![[1.0]]);
        tape.backward(w).unwrap();
        assert_eq!(tape.backward(w).unwrap_err(), TapeError::AlreadyConsumed);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(ParamId(0), array![[1.0, 2.0]]);
        assert_eq!(tape.backward(w).unwrap_err(), TapeError::NotScalar([1, 2]));
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encode(array![[0.0]].view(), 0);
        assert_eq!(pe, array![[0.0]]);
        let pe = positional_encode(array![[0.0]].view(), 2);
        assert_eq!(pe, array![[0.0, 0.0, 1.0, 0.0, 1.0]]);
        let pe = positional_encode(array![[0.5]].view(), 1);
        assert!((pe[[0, 1]] - 1.0).abs() < 1e-15 && pe[[0, 2]].abs() < 1e-15);
        assert_eq!(pe[[0, 0]], 0.5);
        let wide = positional_encode(array![[0.1, 0.2, 0.3]].view(), 6);
        assert_eq!(wide.ncols(), 3 * 13);
    }

    /// Every op composed into one scalar, checked against central differences.
    fn composite(x: &Matrix) -> (f64, Matrix) {
        let mut tape = Tape::new();
        let xv = tape.param(ParamId(0), x.clone());
        let w = tape.constant(array![[0.5, -0.3, 0.8, 0.1], [0.2, 0.9, -0.4, 0.6], [-0.7, 0.3, 0.2, 0.5]]);
        let bias = tape.constant(array![[0.1, -0.2, 0.05, 0.3]]);
        let pe = tape.positional_encode(xv, 2);
        let head = tape.slice_cols(pe, 0, 3);
        let h = tape.matmul(head, w);
        let h = tape.add_row(h, bias);
        let r = tape.relu(h);
        let sg = tape.sigmoid(h);
        let m = tape.mul(r, sg);
        let n = tape.normalize_rows(m);
        let ex = tape.exp(n);
        let col = tape.slice_cols(sg, 0, 1);
        let scaled = tape.mul_col(ex, col);
        let sc = tape.scale(scaled, 1.7);
        let pe_tail = tape.slice_cols(pe, 3, 4);
        let wide = tape.concat_cols(&[sc, pe_tail]);
        let tall = tape.concat_rows(&[wide, wide]);
        let sum = tape.add(tall, tall);
        let sq = tape.sum_squares(sum);
        let lin = tape.sum(sum);
        let loss = tape.add(sq, lin);
        let value = tape.value(loss)[[0, 0]];
        let g = tape.backward(loss).unwrap();
        (value, g.param(ParamId(0)).unwrap().clone())
    }

    #[test]
    fn composite_matches_central_differences() {
        let x = array![[0.3, -0.2, 0.7], [0.9, 0.4, -0.5]];
        let (_, analytic) = composite(&x);
        let numeric = numeric_grad(&x, |p| composite(p).0);
        assert_grad(&analytic, &numeric);
    }
}
