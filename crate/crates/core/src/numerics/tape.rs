//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every forward computation appends a node holding its value. `backward`
//! walks the tape in reverse and accumulates `d loss / d param` into the
//! matching [`ParameterStore`] entries. Constants and detached values never
//! receive gradient.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::ops::{self, PROB_EPS};
use crate::numerics::{Matrix, ParameterStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    Columns(Var, usize),
    RowSums(Var),
    Sum(Var),
    Mean(Var),
    ReverseGrad(Var, f64),
    CrossEntropy(Var, Matrix),
    Bce(Var, Vec<f64>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf bound to a store entry. Repeated requests for the same name
    /// return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// Adds the `1 x cols` row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.add_row_inplace(self.value(b))?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddRow(x, b), needs))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Multiplies row `i` of `x` by `w[i]`, where `w` is an `n x 1` column.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.cols() != 1 || wv.rows() != xv.rows() {
            return Err(Error::shape("scale_rows", xv.shape(), wv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let k = wv.data()[r];
            value.row_mut(r).iter_mut().for_each(|v| *v *= k);
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::ScaleRows(x, w), needs))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).scale(k);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, k), needs)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v + k);
        let needs = self.needs(x);
        self.push(value, Op::AddScalar(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = ops::sigmoid(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let needs = self.needs(x);
        self.push(value, Op::Exp(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let needs = self.needs(x);
        self.push(value, Op::Square(x), needs)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let needs = self.needs(x);
        self.push(value, Op::Clamp(x, lo, hi), needs)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = ops::softmax_rows(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::SoftmaxRows(x), needs)
    }

    /// Columns `start..end`.
    pub fn columns(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).columns(start, end);
        let needs = self.needs(x);
        self.push(value, Op::Columns(x, start), needs)
    }

    /// `n x 1` column of per-row sums.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let sums: Vec<f64> = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let value = Matrix::column_vector(&sums);
        let needs = self.needs(x);
        self.push(value, Op::RowSums(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    /// Mean of all entries; an empty input yields 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let value = if m.is_empty() {
            0.0
        } else {
            m.sum() / m.len() as f64
        };
        let needs = self.needs(x);
        self.push(Matrix::scalar(value), Op::Mean(x), needs)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-lambda` on the backward pass.
    pub fn reverse_grad(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        let needs = self.needs(x);
        self.push(value, Op::ReverseGrad(x, lambda), needs)
    }

    /// Cross-entropy of row probabilities against (one-hot) targets, mean over rows.
    pub fn cross_entropy(&mut self, probs: Var, targets: &Matrix) -> Result<Var> {
        let loss = ops::cross_entropy(self.value(probs), targets)?;
        let needs = self.needs(probs);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::CrossEntropy(probs, targets.clone()),
            needs,
        ))
    }

    /// Weighted binary cross-entropy over an `n x 1` column of probabilities.
    pub fn bce(&mut self, yhat: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let m = self.value(yhat);
        if m.cols() != 1 && m.rows() > 0 {
            return Err(Error::shape("bce", m.shape(), (targets.len(), 1)));
        }
        let loss = ops::bce(m.data(), targets, weights)?;
        let needs = self.needs(yhat);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::Bce(yhat, targets.to_vec(), weights.to_vec()),
            needs,
        ))
    }

    /// Mean over rows of `‖a_i - b_i‖²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.square(diff);
        let per_row = self.row_sums(sq);
        Ok(self.mean(per_row))
    }

    /// Accumulates `d loss / d param` into `store` for every parameter leaf
    /// that `loss` depends on.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape("backward", lv.shape(), (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => store.accumulate_grad(name, &g)?,
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(&self.value(*b).transpose())?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).transpose().matmul(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(x, b) => {
                    if self.needs(*b) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::ScaleRows(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    if self.needs(*w) {
                        let gw: Vec<f64> = (0..g.rows())
                            .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                            .collect();
                        accumulate(&mut grads, *w, Matrix::column_vector(&gw));
                    }
                    if self.needs(*x) {
                        let mut gx = g;
                        for r in 0..gx.rows() {
                            let k = wv.data()[r];
                            gx.row_mut(r).iter_mut().for_each(|v| *v *= k);
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Scale(x, k) => accumulate(&mut grads, *x, g.scale(*k)),
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), "relu", |g, v| if v > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, "sigmoid", |g, s| g * s * (1.0 - s))?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = g.zip_map(&node.value, "exp", |g, e| g * e)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Square(x) => {
                    let gx = g.zip_map(self.value(*x), "square", |g, v| 2.0 * g * v)?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let gx = g.zip_map(self.value(*x), "clamp", |g, v| {
                        if v < lo || v > hi {
                            0.0
                        } else {
                            g
                        }
                    })?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let p = &node.value;
                    let mut gx = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = pr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Columns(x, start) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowSums(x) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let k = g.data()[r];
                        gx.row_mut(r).iter_mut().for_each(|v| *v = k);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut grads, *x, Matrix::filled(r, c, g.data()[0]));
                }
                Op::Mean(x) => {
                    let (r, c) = self.value(*x).shape();
                    if r * c > 0 {
                        let k = g.data()[0] / (r * c) as f64;
                        accumulate(&mut grads, *x, Matrix::filled(r, c, k));
                    }
                }
                Op::ReverseGrad(x, lambda) => accumulate(&mut grads, *x, g.scale(-*lambda)),
                Op::CrossEntropy(probs, targets) => {
                    let p = self.value(*probs);
                    let n = p.rows().max(1) as f64;
                    let upstream = g.data()[0];
                    let gx = p.zip_map(targets, "cross_entropy", |p, t| {
                        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                        if t == 0.0 || pc != p {
                            0.0
                        } else {
                            -upstream * t / (p * n)
                        }
                    })?;
                    accumulate(&mut grads, *probs, gx);
                }
                Op::Bce(yhat, targets, weights) => {
                    let p = self.value(*yhat);
                    let n = p.rows().max(1) as f64;
                    let upstream = g.data()[0];
                    let gd: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&p, &y), &w)| {
                            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                            if pc != p {
                                0.0
                            } else {
                                -upstream * w * (y / p - (1.0 - y) / (1.0 - p)) / n
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *yhat, Matrix::new(p.rows(), p.cols(), gd)?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => {
            existing
                .add_assign(&g)
                .expect("gradient shape matches node shape");
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_scalar_param_has_unit_gradient() {
        let mut store = ParameterStore::new();
        store.insert("w", Matrix::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.sum(w);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut store = ParameterStore::new();
        store.insert("w", Matrix::scalar(3.0)).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&store, "w").unwrap();
            let sq = tape.square(w);
            let loss = tape.sum(sq);
            tape.backward(loss, &mut store).unwrap();
        }
        assert_eq!(store.grad("w").unwrap().data(), &[12.0]);
        store.zero_grads();
        assert_eq!(store.grad("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut store = ParameterStore::new();
        store.insert("used", Matrix::scalar(1.0)).unwrap();
        store.insert("unused", Matrix::scalar(1.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "used").unwrap();
        let u = tape.param(&store, "unused").unwrap();
        let _ = tape.detach(u);
        let loss = tape.sum(w);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("unused").unwrap().data(), &[0.0]);
    }

    #[test]
    fn reverse_grad_negates_and_scales() {
        let mut store = ParameterStore::new();
        store.insert("w", Matrix::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let r = tape.reverse_grad(w, 0.25);
        assert_eq!(tape.value(r).data(), &[2.0]);
        let sq = tape.square(r);
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[-1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut store = ParameterStore::new();
        store.insert("w", Matrix::zeros(2, 2)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        assert!(tape.backward(w, &mut store).is_err());
    }
}
