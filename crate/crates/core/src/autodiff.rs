//! Reverse-mode differentiation tape.
//!
//! Every operation is evaluated eagerly and recorded. Backward passes are
//! themselves recorded on the same tape: [`Tape::grad`] returns gradient
//! *nodes*, which can be differentiated again. This is what makes the
//! `J^T u` / `J p` double-backprop trick of the Gauss-Newton solver work:
//! `h = grad(r·u, w)` is a recorded linear function of `u`, so
//! `grad(h·p, u)` evaluates `J p`.
//!
//! Second derivatives are exact for all linear, bilinear and elementwise
//! ops. Batch norm in training mode and precise ROI pooling only support
//! first-order gradients; differentiating their backward nodes again is an
//! [`Error::Unsupported`].

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, ConvParams};
use crate::prpool as pool;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Sum(Var),
    Fill(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        src: Var,
        axis: usize,
        start: usize,
    },
    Modulate {
        x: Var,
        c: Var,
        per_row: bool,
    },
    ReduceMd {
        x: Var,
    },
    ExpandMd {
        c: Var,
        per_row: bool,
    },
    Gather {
        src: Var,
        idx: Rc<Vec<usize>>,
    },
    ScatterAdd {
        src: Var,
        idx: Rc<Vec<usize>>,
    },
    Conv {
        x: Var,
        w: Var,
        p: ConvParams,
    },
    ConvInputGrad {
        gy: Var,
        w: Var,
        p: ConvParams,
    },
    ConvWeightGrad {
        x: Var,
        gy: Var,
        p: ConvParams,
    },
    Relu(Var),
    Pelu {
        x: Var,
        alpha: T,
    },
    PeluDeriv {
        x: Var,
        alpha: T,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Rc<Vec<T>>,
        invstd: Rc<Vec<T>>,
    },
    PrPool {
        map: Var,
        boxes: Var,
        idx: Rc<Vec<usize>>,
        bins: usize,
    },
    /// Value-only node produced by a first-order backward rule.
    Opaque {
        name: &'static str,
        parents: Vec<Var>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _) | Sum(a) | Fill(a) | Reshape(a) | Relu(a) => vec![*a],
            MatMul { a, b, .. } => vec![*a, *b],
            Concat { parts, .. } => parts.clone(),
            Slice { src, .. } | Pad { src, .. } => vec![*src],
            Modulate { x, c, .. } => vec![*x, *c],
            ReduceMd { x, .. } => vec![*x],
            ExpandMd { c, .. } => vec![*c],
            Gather { src, .. } | ScatterAdd { src, .. } => vec![*src],
            Conv { x, w, .. } => vec![*x, *w],
            ConvInputGrad { gy, w, .. } => vec![*gy, *w],
            ConvWeightGrad { x, gy, .. } => vec![*x, *gy],
            Pelu { x, .. } | PeluDeriv { x, .. } => vec![*x],
            BatchNormTrain { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            PrPool { map, boxes, .. } => vec![*map, *boxes],
            Opaque { parents, .. } => parents.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Constant => "constant",
            Add(..) => "add",
            Sub(..) => "sub",
            Scale(..) => "scale",
            Mul(..) => "mul",
            MatMul { .. } => "matmul",
            Sum(..) => "sum",
            Fill(..) => "fill",
            Reshape(..) => "reshape",
            Concat { .. } => "concat",
            Slice { .. } => "slice",
            Pad { .. } => "pad",
            Modulate { .. } => "modulate",
            ReduceMd { .. } => "reduce",
            ExpandMd { .. } => "expand",
            Gather { .. } => "gather",
            ScatterAdd { .. } => "scatter_add",
            Conv { .. } => "conv2d",
            ConvInputGrad { .. } => "conv2d_input_grad",
            ConvWeightGrad { .. } => "conv2d_weight_grad",
            Relu(..) => "relu",
            Pelu { .. } => "pelu",
            PeluDeriv { .. } => "pelu_deriv",
            BatchNormTrain { .. } => "batchnorm",
            PrPool { .. } => "prpool",
            Opaque { name, .. } => name,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch-norm running statistics, updated in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::of(0.1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

/// Records operations for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backprop_calls: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backprop_calls: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node created after `mark` (a previous [`Tape::len`]).
    /// Handles to dropped nodes must not be used afterwards.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// Number of [`Tape::grad`] / [`Tape::backprop`] invocations so far.
    pub fn backprop_calls(&self) -> usize {
        self.backprop_calls
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf).expect("finite leaf value")
    }

    pub fn try_leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// A node that never receives or propagates gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant).expect("finite constant value")
    }

    /// Same value as `v`, cut off from `v`'s ancestors.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b), ta, tb)?;
        self.push(v, Op::MatMul { a, b, ta, tb })
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Broadcast a one-element node to `shape`.
    pub fn fill(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "fill",
                lhs: self.shape(s).to_vec(),
                rhs: vec![1],
            });
        }
        let v = Tensor::full(shape.to_vec(), self.value(s).item());
        self.push(v, Op::Fill(s))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let ab = self.mul(a, b)?;
        self.sum(ab)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(a))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, &[n])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = kernels::concat(&values, axis)?;
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice_axis(self.value(src), axis, start, len)?;
        self.push(v, Op::Slice { src, axis, start })
    }

    fn pad(&mut self, src: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        let v = kernels::pad_axis(self.value(src), axis, start, total)?;
        self.push(v, Op::Pad { src, axis, start })
    }

    /// Channel-wise multiplication: `out[.., d] = x[.., d] * c[d]`, where `c`
    /// is `[D]` or `[M, D]` (one coefficient row per leading index of `x`).
    pub fn modulate(&mut self, x: Var, c: Var) -> Result<Var> {
        let per_row =
            kernels::channel_vector_kind(self.shape(x), self.shape(c)).ok_or_else(|| Error::ShapeMismatch {
                op: "modulate",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(c).to_vec(),
            })?;
        let v = kernels::modulate(self.value(x), self.value(c), per_row);
        self.push(v, Op::Modulate { x, c, per_row })
    }

    /// Sum over every axis but the last (and optionally the first).
    pub fn reduce_channels(&mut self, x: Var, per_row: bool) -> Result<Var> {
        let v = kernels::reduce_md(self.value(x), per_row);
        self.push(v, Op::ReduceMd { x })
    }

    /// Broadcast a channel vector (`[D]` or `[M, D]`) to `shape`.
    pub fn expand_channels(&mut self, c: Var, shape: &[usize]) -> Result<Var> {
        let per_row = kernels::channel_vector_kind(shape, self.shape(c)).ok_or_else(|| Error::ShapeMismatch {
            op: "expand",
            lhs: shape.to_vec(),
            rhs: self.shape(c).to_vec(),
        })?;
        let v = kernels::expand_md(self.value(c), shape, per_row);
        self.push(v, Op::ExpandMd { c, per_row })
    }

    /// `x + b` with `b` broadcast over the channel axis.
    pub fn add_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bb = self.expand_channels(b, &shape)?;
        self.add(x, bb)
    }

    pub fn gather_rows(&mut self, src: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let v = kernels::gather_rows(self.value(src), &idx)?;
        self.push(v, Op::Gather { src, idx })
    }

    fn scatter_add_rows(&mut self, src: Var, idx: Rc<Vec<usize>>, rows: usize) -> Result<Var> {
        let v = kernels::scatter_add_rows(self.value(src), &idx, rows);
        self.push(v, Op::ScatterAdd { src, idx })
    }

    /// Convolution of `N×H×W×Cin` input with a `kh×kw×Cin×Cout` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, p: ConvParams) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(w), p)?;
        let v = kernels::conv2d_forward(self.value(x), self.value(w), &g);
        self.push(v, Op::Conv { x, w, p })
    }

    fn conv2d_input_grad(&mut self, gy: Var, w: Var, p: ConvParams, xshape: &[usize]) -> Result<Var> {
        let g = ConvGeom::new(xshape, self.shape(w), p)?;
        let v = kernels::conv2d_input_grad(self.value(gy), self.value(w), &g);
        self.push(v, Op::ConvInputGrad { gy, w, p })
    }

    fn conv2d_weight_grad(&mut self, x: Var, gy: Var, p: ConvParams, wshape: &[usize]) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), wshape, p)?;
        let v = kernels::conv2d_weight_grad(self.value(x), self.value(gy), &g);
        self.push(v, Op::ConvWeightGrad { x, gy, p })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|t| t.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn pelu(&mut self, x: Var, alpha: T) -> Result<Var> {
        let v = kernels::pelu(self.value(x), alpha)?;
        self.push(v, Op::Pelu { x, alpha })
    }

    fn pelu_deriv(&mut self, x: Var, alpha: T) -> Result<Var> {
        let v = self.value(x).map(|t| kernels::pelu_deriv_scalar(t, alpha));
        self.push(v, Op::PeluDeriv { x, alpha })
    }

    /// Batch normalization over the last axis. Training mode normalizes by
    /// batch statistics and updates `stats`; eval mode is the affine map
    /// given by `stats`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        for (p, name) in [(gamma, "batchnorm scale"), (beta, "batchnorm shift")] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if stats.mean.len() != d || stats.var.len() != d {
            return Err(Error::invalid(format!(
                "running stats have {} channels, input has {d}",
                stats.mean.len()
            )));
        }
        let eps = T::of(BN_EPS);
        match mode {
            BnMode::Eval => {
                let inv: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let inv = self.constant(Tensor::vector(inv));
                let mean = self.constant(Tensor::vector(stats.mean.clone()));
                let a = self.mul(gamma, inv)?;
                let ma = self.mul(mean, a)?;
                let b = self.sub(beta, ma)?;
                let y = self.modulate(x, a)?;
                self.add_channels(y, b)
            }
            BnMode::Train => {
                let xv = self.value(x);
                let rows = xv.len() / d.max(1);
                let cs = kernels::channel_stats(xv);
                let invstd: Vec<T> = cs.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
                let mut out = xv.clone();
                for row in out.data_mut().chunks_mut(d) {
                    for c in 0..d {
                        row[c] = (row[c] - cs.mean[c]) * invstd[c] * gv[c] + bv[c];
                    }
                }
                let m = stats.momentum;
                let unbias = if rows > 1 {
                    T::of(rows as f64 / (rows - 1) as f64)
                } else {
                    T::one()
                };
                for c in 0..d {
                    stats.mean[c] = (T::one() - m) * stats.mean[c] + m * cs.mean[c];
                    stats.var[c] = (T::one() - m) * stats.var[c] + m * cs.var[c] * unbias;
                }
                self.push(
                    out,
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        mean: Rc::new(cs.mean),
                        invstd: Rc::new(invstd),
                    },
                )
            }
        }
    }

    /// Precise ROI pooling of `map` (`N×H×W×D`) over `boxes` (`M×4`
    /// corners `x1, y1, x2, y2` in feature-map coordinates); `idx[m]` picks
    /// the image of box `m`. Output `M×bins×bins×D`.
    pub fn prpool(&mut self, map: Var, boxes: Var, idx: Rc<Vec<usize>>, bins: usize) -> Result<Var> {
        let v = pool::prpool_forward(self.value(map), self.value(boxes), &idx, bins)?;
        self.push(v, Op::PrPool { map, boxes, idx, bins })
    }

    fn opaque(&mut self, value: Tensor<T>, name: &'static str, parents: Vec<Var>) -> Result<Var> {
        self.push(value, Op::Opaque { name, parents })
    }

    fn zeros_like(&mut self, v: Var) -> Var {
        let z = Tensor::zeros(self.shape(v).to_vec());
        self.constant(z)
    }

    /// Gradients of the scalar `s` with respect to `wrt`, as nodes on this
    /// tape. Nodes `s` does not depend on receive a zero constant.
    pub fn grad(&mut self, s: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(s).len() != 1 {
            return Err(Error::invalid(format!(
                "backprop needs a scalar output, got shape {:?}",
                self.shape(s)
            )));
        }
        self.backprop_calls += 1;
        let n = s.0 + 1;
        let lo = wrt.iter().map(|v| v.0).min().unwrap_or(n);
        let mut needed = vec![false; n];
        for v in wrt {
            if v.0 < n {
                needed[v.0] = true;
            }
        }
        for i in lo..n {
            if !needed[i] {
                needed[i] = self.nodes[i].op.parents().iter().any(|p| p.0 >= lo && needed[p.0]);
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if needed[s.0] {
            let one = self.constant(Tensor::ones(self.shape(s).to_vec()));
            grads[s.0] = Some(one);
        }
        for i in (lo..n).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let contribs = self.backward_rule(Var(i), &op, g, &needed)?;
            for (p, gp) in contribs {
                grads[p.0] = Some(match grads[p.0] {
                    None => gp,
                    Some(prev) => self.add(prev, gp)?,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|v| match grads.get(v.0).copied().flatten() {
                Some(g) => g,
                None => self.zeros_like(*v),
            })
            .collect::<Vec<_>>())
    }

    /// Gradient values of the scalar `s` with respect to `wrt`.
    pub fn backprop(&mut self, s: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let g = self.grad(s, wrt)?;
        Ok(g.into_iter().map(|v| self.value(v).clone()).collect())
    }

    fn backward_rule(&mut self, node: Var, op: &Op<T>, g: Var, needed: &[bool]) -> Result<Vec<(Var, Var)>> {
        let need = |v: &Var| needed.get(v.0).copied().unwrap_or(false);
        let mut out = Vec::new();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if need(a) {
                    out.push((*a, g));
                }
                if need(b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((*a, g));
                }
                if need(b) {
                    out.push((*b, self.scale(g, -T::one())?));
                }
            }
            Op::Scale(a, c) => {
                if need(a) {
                    out.push((*a, self.scale(g, *c)?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    out.push((*a, self.mul(g, *b)?));
                }
                if need(b) {
                    out.push((*b, self.mul(g, *a)?));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if need(&a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    out.push((a, ga));
                }
                if need(&b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    out.push((b, gb));
                }
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                out.push((*a, self.fill(g, &shape)?));
            }
            Op::Fill(a) => {
                let sg = self.sum(g)?;
                let shape = self.shape(*a).to_vec();
                out.push((*a, self.reshape(sg, &shape)?));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                out.push((*a, self.reshape(g, &shape)?));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if need(p) {
                        out.push((*p, self.slice(g, *axis, start, len)?));
                    }
                    start += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let total = self.shape(*src)[*axis];
                out.push((*src, self.pad(g, *axis, *start, total)?));
            }
            Op::Pad { src, axis, start } => {
                let len = self.shape(*src)[*axis];
                out.push((*src, self.slice(g, *axis, *start, len)?));
            }
            Op::Modulate { x, c, per_row } => {
                if need(x) {
                    out.push((*x, self.modulate(g, *c)?));
                }
                if need(c) {
                    let gx = self.mul(g, *x)?;
                    out.push((*c, self.reduce_channels(gx, *per_row)?));
                }
            }
            Op::ReduceMd { x, .. } => {
                let shape = self.shape(*x).to_vec();
                out.push((*x, self.expand_channels(g, &shape)?));
            }
            Op::ExpandMd { c, per_row } => {
                out.push((*c, self.reduce_channels(g, *per_row)?));
            }
            Op::Gather { src, idx } => {
                let rows = self.shape(*src)[0];
                out.push((*src, self.scatter_add_rows(g, idx.clone(), rows)?));
            }
            Op::ScatterAdd { src, idx } => {
                out.push((*src, self.gather_rows(g, idx.clone())?));
            }
            Op::Conv { x, w, p } => {
                if need(x) {
                    let xs = self.shape(*x).to_vec();
                    out.push((*x, self.conv2d_input_grad(g, *w, *p, &xs)?));
                }
                if need(w) {
                    let ws = self.shape(*w).to_vec();
                    out.push((*w, self.conv2d_weight_grad(*x, g, *p, &ws)?));
                }
            }
            Op::ConvInputGrad { gy, w, p } => {
                // node = d<conv(X, w), gy>/dX, a bilinear function of (gy, w).
                if need(gy) {
                    out.push((*gy, self.conv2d(g, *w, *p)?));
                }
                if need(w) {
                    let ws = self.shape(*w).to_vec();
                    out.push((*w, self.conv2d_weight_grad(g, *gy, *p, &ws)?));
                }
            }
            Op::ConvWeightGrad { x, gy, p } => {
                if need(x) {
                    let xs = self.shape(*x).to_vec();
                    out.push((*x, self.conv2d_input_grad(*gy, g, *p, &xs)?));
                }
                if need(gy) {
                    out.push((*gy, self.conv2d(*x, g, *p)?));
                }
            }
            Op::Relu(x) => {
                let mask = self.value(*x).map(|t| if t > T::zero() { T::one() } else { T::zero() });
                let mask = self.constant(mask);
                out.push((*x, self.mul(g, mask)?));
            }
            Op::Pelu { x, alpha } => {
                let d = self.pelu_deriv(*x, *alpha)?;
                out.push((*x, self.mul(g, d)?));
            }
            Op::PeluDeriv { x, alpha } => {
                let second = self.value(*x).map(|t| kernels::pelu_second_scalar(t, *alpha));
                let second = self.opaque(second, "pelu_second", vec![*x])?;
                out.push((*x, self.mul(g, second)?));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let (gx, ggamma, gbeta) = self.batchnorm_backward(*x, *gamma, mean, invstd, g);
                let parents = vec![*x, *gamma, g];
                if need(x) {
                    out.push((*x, self.opaque(gx, "batchnorm_backward", parents.clone())?));
                }
                if need(gamma) {
                    out.push((*gamma, self.opaque(ggamma, "batchnorm_backward", parents.clone())?));
                }
                if need(beta) {
                    out.push((*beta, self.opaque(gbeta, "batchnorm_backward", vec![g])?));
                }
            }
            Op::PrPool { map, boxes, idx, bins } => {
                let (gmap, gboxes) =
                    pool::prpool_backward(self.value(*map), self.value(*boxes), idx, *bins, self.value(g))?;
                if need(map) {
                    out.push((*map, self.opaque(gmap, "prpool_backward", vec![*boxes, g])?));
                }
                if need(boxes) {
                    out.push((*boxes, self.opaque(gboxes, "prpool_backward", vec![*map, *boxes, g])?));
                }
            }
            Op::Opaque { name, .. } => {
                return Err(Error::Unsupported(format!(
                    "node {} ({name}) has no gradient rule",
                    node.0
                )));
            }
        }
        Ok(out)
    }

    fn batchnorm_backward(
        &self,
        x: Var,
        gamma: Var,
        mean: &[T],
        invstd: &[T],
        g: Var,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let xv = self.value(x);
        let gv = self.value(g);
        let gam = self.value(gamma).data();
        let d = mean.len();
        let rows = xv.len() / d.max(1);
        let mut sum_g = vec![T::zero(); d];
        let mut sum_gx = vec![T::zero(); d];
        for (xr, gr) in xv.data().chunks(d).zip(gv.data().chunks(d)) {
            for c in 0..d {
                let xhat = (xr[c] - mean[c]) * invstd[c];
                sum_g[c] = sum_g[c] + gr[c];
                sum_gx[c] = sum_gx[c] + gr[c] * xhat;
            }
        }
        let rn = T::of(rows as f64);
        let mut gx = xv.clone();
        for (xr, gr) in gx.data_mut().chunks_mut(d).zip(gv.data().chunks(d)) {
            for c in 0..d {
                let xhat = (xr[c] - mean[c]) * invstd[c];
                xr[c] = gam[c] * invstd[c] / rn * (rn * gr[c] - sum_g[c] - xhat * sum_gx[c]);
            }
        }
        (gx, Tensor::vector(sum_gx), Tensor::vector(sum_g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.dot(x, x).unwrap();
        let g = tape.backprop(s, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_w_dot_w() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1], &[3.0]));
        let s = tape.dot(w, w).unwrap();
        assert_eq!(tape.backprop(s, &[w]).unwrap()[0].data(), &[6.0]);
    }

    #[test]
    fn detach_freezes_one_factor() {
        let mut tape = Tape::new();
        let u = tape.leaf(t(&[1], &[2.0]));
        let du = tape.detach(u);
        let s = tape.mul(du, u).unwrap();
        assert_eq!(tape.backprop(s, &[u]).unwrap()[0].data(), &[2.0]);
    }

    #[test]
    fn detached_branch_gets_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, -1.0]));
        let b = tape.scale(a, 3.0).unwrap();
        let d = tape.detach(b);
        let s = tape.dot(d, d).unwrap();
        assert_eq!(tape.backprop(s, &[a]).unwrap()[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_backprop_is_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(tape.backprop(a, &[a]).is_err());
    }

    #[test]
    fn linear_residual_gives_transpose_times_u() {
        // r(w) = A w - b, s = r^T u  =>  ds/dw = A^T u
        let a_val = t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 3.0, 1.0]);
        let mut tape = Tape::new();
        let a = tape.constant(a_val.clone());
        let w = tape.leaf(t(&[2, 1], &[0.3, -0.7]));
        let b = tape.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        let aw = tape.matmul(a, w).unwrap();
        let r = tape.sub(aw, b).unwrap();
        let u = tape.constant(t(&[3, 1], &[0.5, -2.0, 1.5]));
        let s = tape.dot(r, u).unwrap();
        let g = tape.backprop(s, &[w]).unwrap();
        // A^T u computed by hand.
        let expect = [1.0 * 0.5 + -1.0 * -2.0 + 3.0 * 1.5, 2.0 * 0.5 + 0.5 * -2.0 + 1.0 * 1.5];
        for (got, want) in g[0].data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3, 3, 2], &(0..18).map(|i| (i as f64).sin()).collect::<Vec<_>>()));
        let w = tape.leaf(t(&[2, 2, 2, 1], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]));
        let y = tape.conv2d(x, w, ConvParams::same(2)).unwrap();
        let y = tape.pelu(y, 0.05).unwrap();
        let s = tape.dot(y, y).unwrap();
        let g1 = tape.backprop(s, &[x, w]).unwrap();
        let g2 = tape.backprop(s, &[x, w]).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(tape.backprop_calls(), 2);
    }

    #[test]
    fn opaque_second_order_is_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4, 1], &[1.0, 2.0, 4.0, -1.0]));
        let gamma = tape.leaf(t(&[1], &[1.0]));
        let beta = tape.leaf(t(&[1], &[0.0]));
        let mut stats = RunningStats::new(1);
        let y = tape.batchnorm(x, gamma, beta, &mut stats, BnMode::Train).unwrap();
        let y2 = tape.mul(y, y).unwrap();
        let s = tape.sum(y2).unwrap();
        let gx = tape.grad(s, &[x]).unwrap()[0];
        let s2 = tape.sum(gx).unwrap();
        assert!(matches!(tape.grad(s2, &[x]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn truncate_discards_tail() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[1.0]));
        let mark = tape.len();
        let _ = tape.scale(x, 2.0).unwrap();
        tape.truncate(mark);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[1e300]));
        assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { .. })));
    }
}
