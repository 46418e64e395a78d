//! Minimal reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation in evaluation order. Inputs may borrow
//! their values (parameters are never copied onto the tape). Calling
//! [`Graph::backward`] on a 1×1 node walks the record in reverse and returns
//! the gradient of that scalar with respect to every node.

use std::borrow::Cow;

use super::kernels::{
    self, add_column_bias, masked_layer_norm_backward, masked_softmax_backward, normalize_columns_backward,
    relu_backward, row_sums, MaskedNormParams, NormCache,
};
use super::matrix::Matrix;
use crate::error::{PgatError, Result};
use crate::objective;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    MatMul(Var, Var),
    MatMulTN(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SelectColumns(Var, Vec<usize>),
    MaskColumns(Var, Vec<bool>),
    MaskedNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mask: Vec<bool>,
        cache: NormCache,
    },
    MaskedSoftmax(Var),
    NormalizeColumns(Var, Vec<f64>),
    WeightedBce {
        similarity: Var,
        grad: Matrix,
    },
    Sum(Vec<Var>),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one scalar with respect to every node of a [`Graph`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the node does not influence the scalar.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that borrows its value.
    pub fn input(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Input,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that owns its value.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    /// `aᵀ b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul_tn(self.value(b))?;
        Ok(self.push(y, Op::MatMulTN(a, b)))
    }

    /// `a bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(y, Op::MatMulNT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// Adds an `rows × 1` bias to every column of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.shape() != (xv.rows(), 1) {
            return Err(PgatError::dim(format!(
                "bias {:?} for {:?} input",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut y = xv.clone();
        add_column_bias(&mut y, bv);
        Ok(self.push(y, Op::AddBias(x, bias)))
    }

    /// `W x + b` for the weight/bias leaves of a linear layer.
    pub fn linear(&mut self, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let wx = self.matmul(weight, x)?;
        self.add_bias(wx, bias)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).map(|v| v * k);
        self.push(y, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|v| self.value(*v).cols())
            .ok_or_else(|| PgatError::dim("concatenation of zero matrices"))?;
        let rows: usize = parts.iter().map(|v| self.value(*v).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in parts {
            let m = self.value(*v);
            if m.cols() != cols {
                return Err(PgatError::dim(format!(
                    "row concatenation of {} and {} columns",
                    cols,
                    m.cols()
                )));
            }
            data.extend_from_slice(m.as_slice());
        }
        let y = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(y, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let m = self.value(x);
        if start + len > m.rows() {
            return Err(PgatError::dim(format!(
                "rows {start}..{} of a {}-row matrix",
                start + len,
                m.rows()
            )));
        }
        let cols = m.cols();
        let y = Matrix::from_vec(len, cols, m.as_slice()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.push(y, Op::SliceRows(x, start)))
    }

    pub fn select_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let m = self.value(x);
        if let Some(c) = cols.iter().find(|c| **c >= m.cols()) {
            return Err(PgatError::dim(format!("column {c} of {}", m.cols())));
        }
        let y = m.select_columns(cols);
        Ok(self.push(y, Op::SelectColumns(x, cols.to_vec())))
    }

    /// Zeros every column whose mask entry is `false`.
    pub fn mask_columns(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let m = self.value(x);
        if mask.len() != m.cols() {
            return Err(PgatError::dim(format!(
                "mask of length {} for {} columns",
                mask.len(),
                m.cols()
            )));
        }
        let mut y = m.clone();
        zero_masked(&mut y, mask);
        Ok(self.push(y, Op::MaskColumns(x, mask.to_vec())))
    }

    pub fn masked_norm(&mut self, x: Var, gamma: Var, beta: Var, epsilon: f64, mask: &[bool]) -> Result<Var> {
        let params = MaskedNormParams {
            gamma: self.value(gamma).clone(),
            beta: self.value(beta).clone(),
            epsilon,
        };
        let (y, cache) = kernels::masked_layer_norm_cached(self.value(x), mask, &params)?;
        Ok(self.push(
            y,
            Op::MaskedNorm {
                x,
                gamma,
                beta,
                mask: mask.to_vec(),
                cache,
            },
        ))
    }

    pub fn masked_softmax(&mut self, scores: Var, sender_mask: &[bool]) -> Result<Var> {
        let y = kernels::masked_softmax(self.value(scores), sender_mask)?;
        Ok(self.push(y, Op::MaskedSoftmax(scores)))
    }

    pub fn normalize_columns(&mut self, x: Var) -> Result<Var> {
        let (y, norms) = kernels::normalize_columns(self.value(x))?;
        Ok(self.push(y, Op::NormalizeColumns(x, norms)))
    }

    /// Masked BCE on the probabilities `0.5 s + 0.5` of a similarity matrix.
    pub fn weighted_bce(&mut self, similarity: Var, labels: &Matrix, weights: &Matrix) -> Result<Var> {
        let (loss, grad) = objective::bce_from_similarity(self.value(similarity), labels, weights)?;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::WeightedBce { similarity, grad },
        ))
    }

    /// Sum of 1×1 nodes, accumulated in the given order.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for v in parts {
            let m = self.value(*v);
            if m.shape() != (1, 1) {
                return Err(PgatError::dim(format!("sum of a {:?} node", m.shape())));
            }
            total += m[(0, 0)];
        }
        Ok(self.push(Matrix::filled(1, 1, total), Op::Sum(parts.to_vec())))
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).shape() != (1, 1) {
            return Err(PgatError::dim("backward from a non-scalar node"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=out.0).rev() {
            let (earlier, rest) = grads.split_at_mut(idx);
            let Some(dy) = rest[0].as_ref() else { continue };
            let grads = earlier;
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let da = dy.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(dy)?;
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::MatMulTN(a, b) => {
                    // y = aᵀ b: da = b dyᵀ, db = a dy
                    let da = self.value(*b).matmul_nt(dy)?;
                    let db = self.value(*a).matmul(dy)?;
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::MatMulNT(a, b) => {
                    // y = a bᵀ: da = dy b, db = dyᵀ a
                    let da = dy.matmul(self.value(*b))?;
                    let db = dy.matmul_tn(self.value(*a))?;
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(grads, *b, dy.clone());
                    accumulate(grads, *a, dy.clone());
                }
                Op::AddBias(x, b) => {
                    accumulate(grads, *b, row_sums(dy));
                    accumulate(grads, *x, dy.clone());
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    accumulate(grads, *x, dy.map(|v| v * k));
                }
                Op::Relu(x) => {
                    let dx = relu_backward(self.value(*x), dy);
                    accumulate(grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let cols = dy.cols();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        let slice = dy.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(grads, *p, Matrix::from_vec(rows, cols, slice)?);
                        offset += rows;
                    }
                }
                Op::SliceRows(x, start) => {
                    let src = self.value(*x);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    let cols = src.cols();
                    dx.as_mut_slice()[start * cols..(start + dy.rows()) * cols].copy_from_slice(dy.as_slice());
                    accumulate(grads, *x, dx);
                }
                Op::SelectColumns(x, cols) => {
                    let src = self.value(*x);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..dy.rows() {
                        for (k, &c) in cols.iter().enumerate() {
                            dx[(r, c)] += dy[(r, k)];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                Op::MaskColumns(x, mask) => {
                    let mut dx = dy.clone();
                    zero_masked(&mut dx, mask);
                    accumulate(grads, *x, dx);
                }
                Op::MaskedNorm {
                    x,
                    gamma,
                    beta,
                    mask,
                    cache,
                } => {
                    let g = masked_layer_norm_backward(cache, self.value(*gamma), mask, dy);
                    accumulate(grads, *x, g.input);
                    accumulate(grads, *gamma, g.gamma);
                    accumulate(grads, *beta, g.beta);
                }
                Op::MaskedSoftmax(x) => {
                    let dx = masked_softmax_backward(&node.value, dy);
                    accumulate(grads, *x, dx);
                }
                Op::NormalizeColumns(x, norms) => {
                    let dx = normalize_columns_backward(&node.value, norms, dy);
                    accumulate(grads, *x, dx);
                }
                Op::WeightedBce { similarity, grad } => {
                    let k = dy[(0, 0)];
                    accumulate(grads, *similarity, grad.map(|v| v * k));
                }
                Op::Sum(parts) => {
                    let k = dy[(0, 0)];
                    for p in parts {
                        accumulate(grads, *p, Matrix::filled(1, 1, k));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zero_masked(m: &mut Matrix, mask: &[bool]) {
    for r in 0..m.rows() {
        for (v, keep) in m.row_mut(r).iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}
