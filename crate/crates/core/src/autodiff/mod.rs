//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built eagerly: every op computes its value as soon as it is
//! recorded, so the forward pass is the construction of the tape itself.
//! [`Graph::backward`] then walks the tape once in reverse order and
//! accumulates gradients additively into every tracked node.
//!
//! Convolution is not a primitive. It is expressed as a matmul over unrolled
//! patches ([`Graph::patches`]), and resampling is a fixed linear reindexing
//! ([`Graph::upsample`], [`Graph::gather`]).
//!
//! Non-finite values are never propagated: any op producing NaN or infinity
//! fails with [`AutodiffError::NonFinite`].

mod check;
mod ops;
mod tensor;

pub use check::{grad_check, value_and_grad};
pub use ops::Unary;
pub use tensor::Tensor;

use std::rc::Rc;

use thiserror::Error;

use ops::{PatchGeom, UpsampleGeom};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("gradients requested before backward was run")]
    BackwardNotRun,
    #[error("grad check: non-finite loss at perturbed point (input {input}, index {index})")]
    NonFiniteProbe { input: usize, index: usize },
    #[error("grad check: eps must be positive, got {0}")]
    BadEpsilon(f64),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Map(Var, Unary),
    Sum(Var),
    Norm(Var),
    RowNorms(Var),
    Softmax(Var),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    Patches(Var, PatchGeom),
    Upsample(Var, UpsampleGeom),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Input => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | ScaleBy(a, b) | MatMul(a, b) => {
                [Some(a), Some(b)]
            }
            Scale(a, _)
            | Offset(a)
            | Map(a, _)
            | Sum(a)
            | Norm(a)
            | RowNorms(a)
            | Softmax(a)
            | Reshape(a)
            | Gather(a, _)
            | Patches(a, _)
            | Upsample(a, _) => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// An eagerly evaluated computation tape.
///
/// Nodes are appended in topological order by construction. Inputs are either
/// tracked parameters ([`Graph::param`]) or constants ([`Graph::constant`]);
/// constants and everything computed only from constants receive no gradient.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
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

    /// Records a tracked input (a leaf that receives a gradient).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Records an untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.grads = None;
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let tracked = op
            .parents()
            .iter()
            .flatten()
            .any(|p| self.nodes[p.0].tracked);
        let value = Tensor::from_parts(shape, data);
        Ok(self.push(value, op, tracked))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`C` vector to every row of an `(N, C)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sr = self.shape(row).to_vec();
        let cols = *sa.last().unwrap_or(&0);
        if sr.iter().product::<usize>() != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sr,
            });
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        self.push_op("add_row", sa, data, Op::AddRow(a, row))
    }

    /// Multiplies every element of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let k = self.scalar(s);
        let data = self.value(a).data().iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("scale_by", shape, data, Op::ScaleBy(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("scale", shape, data, Op::Scale(a, k))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.push_op("offset", shape, data, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Matrix product of `(m, k)` and `(k, n)` nodes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        ops::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), &mut out, false);
        self.push_op("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    /// Applies an elementwise nonlinearity.
    pub fn map(&mut self, a: Var, f: Unary) -> Result<Var> {
        let x = self.value(a).data();
        let data = x.iter().map(|&v| f.eval(v)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(f.name(), shape, data, Op::Map(a, f))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push_op("sum", vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Euclidean norm of the whole tensor.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push_op("norm", vec![1], vec![s], Op::Norm(a))
    }

    /// Euclidean norm of each row of an `(N, C)` matrix, giving `(N)`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::InvalidShape {
                shape,
                reason: "row_norms expects a matrix".into(),
            });
        }
        let data = self
            .value(a)
            .data()
            .chunks(shape[1])
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push_op("row_norms", vec![shape[0]], data, Op::RowNorms(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let mut data = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).data().chunks(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = e.iter().sum();
            data.extend(e.iter().map(|x| x / z));
        }
        self.push_op("softmax", shape, data, Op::Softmax(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        self.push_op("reshape", shape.to_vec(), data, Op::Reshape(a))
    }

    /// Index select over the flattened input: `out[i] = a[indices[i]]`.
    pub fn gather(&mut self, a: Var, indices: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(a).data();
        if n != indices.len() || indices.iter().any(|&i| i >= src.len()) {
            return Err(AutodiffError::InvalidShape {
                shape: shape.to_vec(),
                reason: "gather indices out of range or wrong count".into(),
            });
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        self.push_op("gather", shape.to_vec(), data, Op::Gather(a, indices))
    }

    /// Unrolls `k x k` patches of an NHWC feature map stored as `(n*h*w, c)`
    /// into `(n*ho*wo, k*k*c)`, zero padded.
    #[allow(clippy::too_many_arguments)]
    pub fn patches(&mut self, a: Var, n: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != n * h * w || stride == 0 || k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(AutodiffError::InvalidShape {
                shape,
                reason: format!("patches over {n}x{h}x{w} with k={k} stride={stride} pad={pad}"),
            });
        }
        let geom = PatchGeom::new(n, h, w, shape[1], k, stride, pad);
        let data = geom.forward(self.value(a).data());
        self.push_op("patches", vec![n * geom.ho * geom.wo, k * k * geom.c], data, Op::Patches(a, geom))
    }

    /// Bilinear upsampling (half-pixel centres, clamped borders) of an NHWC
    /// feature map stored as `(n*h*w, c)` by an integer factor.
    pub fn upsample(&mut self, a: Var, n: usize, h: usize, w: usize, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != n * h * w || factor == 0 {
            return Err(AutodiffError::InvalidShape {
                shape,
                reason: format!("upsample over {n}x{h}x{w} by {factor}"),
            });
        }
        let geom = UpsampleGeom::new(n, h, w, shape[1], factor);
        let data = geom.forward(self.value(a).data());
        let rows = n * h * factor * w * factor;
        self.push_op("upsample", vec![rows, geom.c], data, Op::Upsample(a, geom))
    }

    /// Runs the reverse pass from `output`, seeded with `output_grad`.
    pub fn backward_with(&mut self, output: Var, output_grad: &Tensor) -> Result<()> {
        if output_grad.shape() != self.shape(output) {
            return Err(AutodiffError::ShapeMismatch {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: output_grad.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].tracked {
            grads[output.0] = Some(output_grad.data().to_vec());
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            ops::backprop(&self.nodes, idx, &node.op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Reverse pass from a single-element output with unit seed.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let seed = Tensor::from_parts(self.shape(output).to_vec(), vec![1.0; self.value(output).len()]);
        self.backward_with(output, &seed)
    }

    /// Gradient accumulated into `v` by the last backward pass. Nodes that
    /// received nothing (constants, or tracked nodes off the output's path)
    /// report zeros.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let grads = self.grads.as_ref().ok_or(AutodiffError::BackwardNotRun)?;
        let shape = self.shape(v).to_vec();
        Ok(match &grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }
}
