//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during a forward computation. Inputs
//! enter as leaves; each op appends a node recording its inputs and whatever
//! it saved for the backward rule. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid reverse topological order since
//! an op can only reference nodes that already exist.
//!
//! Everything is generic over [`Real`] so the same graph runs in `f32` for
//! training and `f64` for finite-difference checks.

mod gradcheck;
mod kernels;
mod ops;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

pub use gradcheck::{gradcheck, relative_error, GradcheckReport};
pub use ops::{log_softmax_rows, softmax_rows};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Scalar element type of a [`Tensor`].
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c += a · b` over strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self], sc: (isize, isize));
}

#[allow(clippy::too_many_arguments)]
fn check_strides(m: usize, k: usize, n: usize, la: usize, sa: (isize, isize), lb: usize, sb: (isize, isize), lc: usize, sc: (isize, isize)) {
    let fits = |r: usize, c: usize, len: usize, s: (isize, isize)| {
        r == 0 || c == 0 || (s.0 >= 0 && s.1 >= 0 && (r - 1) * s.0 as usize + (c - 1) * (s.1 as usize) < len)
    };
    assert!(fits(m, k, la, sa) && fits(k, n, lb, sb) && fits(m, n, lc, sc), "gemm operand out of bounds");
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }

    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self], sc: (isize, isize)) {
        check_strides(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc);
        // SAFETY: check_strides proved every strided index lies inside its slice.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), sc.0, sc.1);
        }
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }

    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], sa: (isize, isize), b: &[Self], sb: (isize, isize), c: &mut [Self], sc: (isize, isize)) {
        check_strides(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc);
        // SAFETY: check_strides proved every strided index lies inside its slice.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, c.as_mut_ptr(), sc.0, sc.1);
        }
    }
}

/// Row-major dense tensor. Scalars have shape `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", &[rows.len(), cols], &[]));
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading extent for a 2-D tensor, 1 for a vector.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Select rows of a 2-D tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor<T> {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality including signed zeros and NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor<T>) -> bool {
        let mut a = Vec::new();
        let mut b = Vec::new();
        self.data.iter().for_each(|v| v.write_le(&mut a));
        other.data.iter().for_each(|v| v.write_le(&mut b));
        self.shape == other.shape && a == b
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    AddRow(Var, Var),
    Gelu(Var),
    Exp(Var),
    ClampMin(Var, T),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// Per row: (mean, reciprocal std).
        stats: Vec<(T, T)>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// `heads × n × n` attention weights, zero above the diagonal.
        probs: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    PickCols {
        x: Var,
        cols: Vec<usize>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Gradient of the last `backward` loss with respect to `v`. Always present
    /// for leaves that require grad; `None` for constants and intermediates.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| Tensor {
            shape: self.values[v.0].shape.clone(),
            data: g.to_vec(),
        })
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, requires_grad });
        self.values.push(value);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![T::one()]);
            for idx in (0..=loss.0).rev() {
                if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                    continue;
                }
                let Some(upstream) = self.grads[idx].take() else {
                    continue;
                };
                ops::backward_node(&self.nodes[idx].op, &upstream, idx, &self.values, &self.nodes, &mut self.grads);
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[idx].is_none() {
                self.grads[idx] = Some(vec![T::zero(); self.values[idx].numel()]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[0], vec![]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[5], &[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap());
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::full(&[3], 1.0));
        let unused = tape.param(Tensor::full(&[2, 2], 1.0));
        let c = tape.constant(Tensor::full(&[3], 1.0));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0; 4]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn two_consumers_accumulate() {
        // f = sum(2x) + sum(x*x): df/dx = 2 + 2x
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let a = tape.scale(x, 2.0);
        let b = tape.mul(x, x).unwrap();
        let sa = tape.sum_all(a);
        let sb = tape.sum_all(b);
        let f = tape.add(sa, sb).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 0.0, 6.0]);
    }

    #[test]
    fn constants_block_gradient_flow() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let d = tape.scale(c, 2.0);
        assert!(!tape.requires_grad(d));
        let x = tape.param(Tensor::full(&[2], 1.0));
        let y = tape.mul(x, d).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, 6.0]);
        assert!(tape.grad(d).is_none());
    }
}
