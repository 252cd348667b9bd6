//! Reverse-mode differentiation over real tensors.
//!
//! Every operation appends a node holding its forward value. Nodes only ever
//! reference earlier nodes, so the node vector is already in topological
//! order and `backward` is a single reverse sweep.

use super::gemm::gemm;
use super::tensor::{split_axis, RealTensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for reporting and for fault injection in tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddBias,
    MatMul,
    MatMulNT,
    Relu,
    Tanh,
    Exp,
    Log,
    Softplus,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    MeanAxis,
    LayerNorm,
    Reshape,
    SwapLastTwo,
    BroadcastCols,
    SliceCols,
    Detach,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Leaf,
        OpKind::Constant,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::AddBias,
        OpKind::MatMul,
        OpKind::MatMulNT,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softplus,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanAxis,
        OpKind::LayerNorm,
        OpKind::Reshape,
        OpKind::SwapLastTwo,
        OpKind::BroadcastCols,
        OpKind::SliceCols,
        OpKind::Detach,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::AddBias => "add_bias",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNT => "matmul_nt",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softplus => "softplus",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanAxis => "mean_axis",
            OpKind::LayerNorm => "layernorm",
            OpKind::Reshape => "reshape",
            OpKind::SwapLastTwo => "swap_last_two",
            OpKind::BroadcastCols => "broadcast_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::Detach => "detach",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    SwapLastTwo(Var),
    BroadcastCols {
        x: Var,
        cols: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Detach,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Relu(..) => OpKind::Relu,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SwapLastTwo(..) => OpKind::SwapLastTwo,
            Op::BroadcastCols { .. } => OpKind::BroadcastCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Detach => OpKind::Detach,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b) => {
                vec![a, b]
            }
            Op::AddBias { x, bias, .. } => vec![x, bias],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softplus(x)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanAxis { x, .. }
            | Op::Reshape(x)
            | Op::SwapLastTwo(x)
            | Op::BroadcastCols { x, .. }
            | Op::SliceCols { x, .. } => vec![x],
            // stop-gradient: no parent receives anything
            Op::Detach => vec![],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: RealTensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every registered leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<Var>,
    grads: Vec<RealTensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&RealTensor> {
        self.leaves
            .binary_search(&leaf)
            .ok()
            .map(|pos| &self.grads[pos])
    }

    /// Gradients in leaf registration order.
    pub fn as_slice(&self) -> &[RealTensor] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<RealTensor> {
        self.grads
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &RealTensor)> {
        self.leaves.iter().copied().zip(self.grads.iter())
    }
}

/// Records operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deliberately corrupts the backward rule of `kind` (gradient scaled by 1.5).
    /// Only meant for exercising the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &RealTensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, value: RealTensor) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        self.leaves.push(v);
        v
    }

    pub fn constant(&mut self, value: RealTensor) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        v
    }

    fn push(&mut self, value: RealTensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric {
                op: op.kind().name(),
            });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let y = self.value(b);
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let out = RealTensor::new(x.shape().to_vec(), data)?;
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + offset);
        self.push(out, Op::AddScalar(x))
    }

    /// Adds a vector `bias` along `axis` of `x`, broadcasting over the other axes.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)
            .ok_or_else(|| Error::dim("add_bias", format!("axis {axis} out of range")))?;
        if self.value(bias).len() != len || self.value(bias).rank() != 1 {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} vs axis length {len}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for o in 0..outer {
            for (l, &bv) in b.iter().enumerate() {
                let base = (o * len + l) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        self.push(out, Op::AddBias { x, bias, axis })
    }

    /// `a[m x k] . b[k x n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} . {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let out = RealTensor::new(vec![m, n], out)?;
        self.push(out, Op::MatMul(a, b))
    }

    /// `x[r x k] . w[n x k]^T`, the row-vector form of a linear layer.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim("matmul_nt", format!("{sx:?} . {sw:?}^T")));
        }
        let (r, k, n) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; r * n];
        gemm(
            r,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            0.0,
        );
        let out = RealTensor::new(vec![r, n], out)?;
        self.push(out, Op::MatMulNT(x, w))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x))
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    fn axis_extents(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let ext = split_axis(self.shape(x), axis).ok_or_else(|| {
            Error::dim(
                op,
                format!("axis {axis} out of range for {:?}", self.shape(x)),
            )
        })?;
        if ext.1 == 0 {
            return Err(Error::dim(op, "zero-length axis"));
        }
        Ok(ext)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_extents("softmax", x, axis)?;
        let mut out = self.value(x).clone();
        for_each_slice(out.data_mut(), outer, len, inner, |slice| {
            let max = slice.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for v in slice.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            slice.iter_mut().for_each(|v| *v /= total);
        });
        self.push(out, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_extents("log_softmax", x, axis)?;
        let mut out = self.value(x).clone();
        for_each_slice(out.data_mut(), outer, len, inner, |slice| {
            let max = slice.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + slice.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            slice.iter_mut().for_each(|v| *v -= lse);
        });
        self.push(out, Op::LogSoftmax { x, axis })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = RealTensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let out = RealTensor::scalar(self.value(x).sum() / n as f64);
        self.push(out, Op::Mean(x))
    }

    /// Mean over `axis`; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_extents("mean_axis", x, axis)?;
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let out = RealTensor::new(shape, data)?;
        self.push(out, Op::MeanAxis { x, axis })
    }

    /// Normalizes every slice along `axis` to zero mean and unit (biased)
    /// variance, then applies `gamma * x + beta`.
    pub fn layernorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract(format!(
                "layernorm eps must be > 0, got {eps}"
            )));
        }
        let (outer, len, inner) = self.axis_extents("layernorm", x, axis)?;
        for p in [gamma, beta] {
            if self.shape(p) != [len] {
                return Err(Error::dim(
                    "layernorm",
                    format!("affine parameter {:?} vs axis length {len}", self.shape(p)),
                ));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| src[idx(l)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (src[idx(l)] - mean).powi(2)).sum::<f64>() / len as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = istd;
                for l in 0..len {
                    let n = (src[idx(l)] - mean) * istd;
                    normed[idx(l)] = n;
                    out[idx(l)] = g[l] * n + b[l];
                }
            }
        }
        let out = RealTensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                normed,
                inv_std,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Swaps the two trailing axes of a tensor of rank >= 2.
    pub fn swap_last_two(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim(
                "swap_last_two",
                format!("rank {} < 2", shape.len()),
            ));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let data = transpose_batched(self.value(x).data(), r, c);
        let mut new_shape = shape;
        let n = new_shape.len();
        new_shape.swap(n - 2, n - 1);
        let out = RealTensor::new(new_shape, data)?;
        self.push(out, Op::SwapLastTwo(x))
    }

    /// Repeats a per-row scalar (`[r]` or `[r, 1]`) across `cols` columns.
    pub fn broadcast_cols(&mut self, x: Var, cols: usize) -> Result<Var> {
        let shape = self.shape(x);
        let rows = match *shape {
            [r] | [r, 1] => r,
            _ => {
                return Err(Error::dim(
                    "broadcast_cols",
                    format!("expected [r] or [r, 1], got {shape:?}"),
                ))
            }
        };
        let src = self.value(x).data();
        let data = src
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, cols))
            .collect();
        let out = RealTensor::new(vec![rows, cols], data)?;
        self.push(out, Op::BroadcastCols { x, cols })
    }

    /// Slice `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::dim("slice_cols", "rank-0 tensor"))?;
        if start + len > last {
            return Err(Error::dim(
                "slice_cols",
                format!("{start}..{} out of {last}", start + len),
            ));
        }
        let src = self.value(x).data();
        let data = src
            .chunks(last.max(1))
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        let out = RealTensor::new(new_shape, data)?;
        self.push(out, Op::SliceCols { x, start })
    }

    /// Identity in the forward pass; blocks all gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(out, Op::Detach)
    }

    /// Reverse accumulation from a scalar `loss` to every registered leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let grads = self
            .leaves
            .iter()
            .map(|&leaf| {
                let shape = self.shape(leaf).to_vec();
                let data = grads
                    .get_mut(leaf.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; self.value(leaf).len()]);
                RealTensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients {
            leaves: self.leaves.clone(),
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, contribution: Vec<f64>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing
                .iter_mut()
                .zip(&contribution)
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match node.op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    self.accumulate(grads, a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.iter().zip(va).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, x, g.iter().map(|v| v * factor).collect())
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            Op::AddBias { x, bias, axis } => {
                self.accumulate(grads, x, g.to_vec());
                if self.wants(bias) {
                    let (outer, len, inner) =
                        split_axis(self.shape(x), axis).expect("checked in forward");
                    let mut gb = vec![0.0; len];
                    for o in 0..outer {
                        for (l, acc) in gb.iter_mut().enumerate() {
                            let base = (o * len + l) * inner;
                            *acc += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, bias, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(b).data(), true, &mut ga, 0.0);
                    self.accumulate(grads, a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, b, gb);
                }
            }
            Op::MatMulNT(x, w) => {
                let (sx, sw) = (self.shape(x), self.shape(w));
                let (r, k, n) = (sx[0], sx[1], sw[0]);
                if self.wants(x) {
                    let mut gx = vec![0.0; r * k];
                    gemm(r, n, k, g, false, self.value(w).data(), false, &mut gx, 0.0);
                    self.accumulate(grads, x, gx);
                }
                if self.wants(w) {
                    let mut gw = vec![0.0; n * k];
                    gemm(n, r, k, g, true, self.value(x).data(), false, &mut gw, 0.0);
                    self.accumulate(grads, w, gw);
                }
            }
            Op::Relu(x) => {
                let vx = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(vx)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.accumulate(grads, x, gx);
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(y).map(|(g, e)| g * e).collect();
                self.accumulate(grads, x, gx);
            }
            Op::Log(x) => {
                let vx = self.value(x).data();
                let gx = g.iter().zip(vx).map(|(g, v)| g / v).collect();
                self.accumulate(grads, x, gx);
            }
            Op::Softplus(x) => {
                let vx = self.value(x).data();
                let gx = g.iter().zip(vx).map(|(g, &v)| g * sigmoid(v)).collect();
                self.accumulate(grads, x, gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) =
                    split_axis(self.shape(x), axis).expect("checked in forward");
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) =
                    split_axis(self.shape(x), axis).expect("checked in forward");
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let total: f64 = (0..len).map(|l| g[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = g[idx(l)] - y[idx(l)].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::Sum(x) => self.accumulate(grads, x, vec![g[0]; self.value(x).len()]),
            Op::Mean(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![g[0] / n as f64; n]);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) =
                    split_axis(self.shape(x), axis).expect("checked in forward");
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                ref normed,
                ref inv_std,
            } => {
                let (outer, len, inner) =
                    split_axis(self.shape(x), axis).expect("checked in forward");
                let gm = self.value(gamma).data();
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; len];
                let mut gbeta = vec![0.0; len];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mut mean_gn = 0.0;
                        let mut mean_gn_n = 0.0;
                        for l in 0..len {
                            let gn = g[idx(l)] * gm[l];
                            mean_gn += gn;
                            mean_gn_n += gn * normed[idx(l)];
                            ggamma[l] += g[idx(l)] * normed[idx(l)];
                            gbeta[l] += g[idx(l)];
                        }
                        mean_gn /= len as f64;
                        mean_gn_n /= len as f64;
                        let istd = inv_std[o * inner + i];
                        for l in 0..len {
                            let gn = g[idx(l)] * gm[l];
                            gx[idx(l)] = istd * (gn - mean_gn - normed[idx(l)] * mean_gn_n);
                        }
                    }
                }
                self.accumulate(grads, x, gx);
                self.accumulate(grads, gamma, ggamma);
                self.accumulate(grads, beta, gbeta);
            }
            Op::SwapLastTwo(x) => {
                let shape = self.shape(x);
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                // the output is [.., c, r]; transposing it back restores x's layout
                self.accumulate(grads, x, transpose_batched(g, c, r));
            }
            Op::BroadcastCols { x, cols } => {
                let gx = g
                    .chunks(cols.max(1))
                    .map(|row| row.iter().sum())
                    .collect::<Vec<f64>>();
                let gx = if cols == 0 {
                    vec![0.0; self.value(x).len()]
                } else {
                    gx
                };
                self.accumulate(grads, x, gx);
            }
            Op::SliceCols { x, start } => {
                let last = *self.shape(x).last().expect("checked in forward");
                let len = *node.value.shape().last().expect("checked in forward");
                let mut gx = vec![0.0; self.value(x).len()];
                if len > 0 {
                    for (row, grow) in gx.chunks_mut(last).zip(g.chunks(len)) {
                        row[start..start + len].copy_from_slice(grow);
                    }
                }
                self.accumulate(grads, x, gx);
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn transpose_batched(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let block = rows * cols;
    let mut out = vec![0.0; src.len()];
    if block == 0 {
        return out;
    }
    for (s, d) in src.chunks(block).zip(out.chunks_mut(block)) {
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

/// Applies `f` to every 1-D slice along the middle extent, in place.
fn for_each_slice(
    data: &mut [f64],
    outer: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(&mut [f64]),
) {
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            for (l, b) in buf.iter_mut().enumerate() {
                *b = data[idx(l)];
            }
            f(&mut buf);
            for (l, b) in buf.iter().enumerate() {
                data[idx(l)] = *b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn scalar_op_examples() {
        let mut t = Tape::new();
        let z = t.constant(RealTensor::from_vec(vec![0.0, 0.0]));
        let sm = t.softmax(z, 0).unwrap();
        assert_eq!(t.value(sm).data(), &[0.5, 0.5]);
        let zero = t.constant(RealTensor::scalar(0.0));
        let th = t.tanh(zero).unwrap();
        assert_eq!(t.value(th).item(), 0.0);
        let x = t.constant(RealTensor::from_vec(vec![1.0, 2.0, 3.0]));
        let m = t.mean(x).unwrap();
        assert_eq!(t.value(m).item(), 2.0);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(RealTensor::new(vec![2, 3], vec![0.1, -4.0, 2.0, 7.0, 0.0, 1.5]).unwrap());
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &RealTensor::ones(&[2, 3]));
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(RealTensor::from_vec(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn layernorm_examples() {
        let mut t = Tape::new();
        let ones = t.constant(RealTensor::ones(&[3]));
        let zeros = t.constant(RealTensor::zeros(&[3]));
        let x = t.constant(RealTensor::from_vec(vec![5.0, 5.0, 5.0]));
        let y = t.layernorm(x, ones, zeros, 0, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);

        let ones = t.constant(RealTensor::ones(&[2]));
        let zeros = t.constant(RealTensor::zeros(&[2]));
        let x = t.constant(RealTensor::from_vec(vec![1.0, -1.0]));
        let y = t.layernorm(x, ones, zeros, 0, 1e-12).unwrap();
        assert!(close(t.value(y).data(), &[1.0, -1.0], 1e-9));

        let gamma = t.constant(RealTensor::full(&[2], 2.0));
        let beta = t.constant(RealTensor::full(&[2], 1.0));
        let x = t.constant(RealTensor::from_vec(vec![0.0, 2.0]));
        let y = t.layernorm(x, gamma, beta, 0, 1e-5).unwrap();
        assert!(close(t.value(y).data(), &[-1.0, 3.0], 1e-3));
    }

    #[test]
    fn layernorm_along_leading_axis() {
        let mut t = Tape::new();
        let ones = t.constant(RealTensor::ones(&[2]));
        let zeros = t.constant(RealTensor::zeros(&[2]));
        // columns [0, 2] and [4, 4]
        let x = t.constant(RealTensor::new(vec![2, 2], vec![0.0, 4.0, 2.0, 4.0]).unwrap());
        let y = t.layernorm(x, ones, zeros, 0, 1e-12).unwrap();
        assert!(close(t.value(y).data(), &[-1.0, 0.0, 1.0, 0.0], 1e-9));
    }

    #[test]
    fn layernorm_rejects_bad_inputs() {
        let mut t = Tape::new();
        let p = t.constant(RealTensor::zeros(&[0]));
        let x = t.constant(RealTensor::zeros(&[2, 0]));
        assert!(matches!(
            t.layernorm(x, p, p, 1, 1e-5),
            Err(Error::Dimension { .. })
        ));
        let p = t.constant(RealTensor::zeros(&[3]));
        let x = t.constant(RealTensor::zeros(&[2, 2]));
        assert!(matches!(
            t.layernorm(x, p, p, 1, 1e-5),
            Err(Error::Dimension { .. })
        ));
        let p = t.constant(RealTensor::zeros(&[2]));
        assert!(matches!(
            t.layernorm(x, p, p, 1, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn log_of_non_positive_is_a_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(RealTensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn overflow_is_a_numeric_error() {
        let mut t = Tape::new();
        let x = t.constant(RealTensor::scalar(1000.0));
        assert!(matches!(t.exp(x), Err(Error::Numeric { op: "exp" })));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(RealTensor::from_vec(vec![1.0, 2.0]));
        let y = t.tanh(x).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(RealTensor::from_vec(vec![0.0, 2.0, -2.0]));
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(RealTensor::from_vec(vec![1.0, 2.0]));
        let d = t.detach(x).unwrap();
        let y = t.mul(d, x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        // only the non-detached factor contributes: d/dx (c * x) = c
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(RealTensor::from_vec(vec![1.0]));
        let unused = t.leaf(RealTensor::zeros(&[2, 2]));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &RealTensor::zeros(&[2, 2]));
        assert_eq!(g.as_slice().len(), 2);
    }

    #[test]
    fn shape_helpers() {
        let mut t = Tape::new();
        let x =
            t.constant(RealTensor::new(vec![1, 2, 3], (0..6).map(f64::from).collect()).unwrap());
        let s = t.swap_last_two(x).unwrap();
        assert_eq!(t.shape(s), &[1, 3, 2]);
        assert_eq!(t.value(s).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let m = t.mean_axis(x, 2).unwrap();
        assert_eq!(t.value(m).data(), &[1.0, 4.0]);
        let sl = t.slice_cols(x, 1, 2).unwrap();
        assert_eq!(t.value(sl).data(), &[1.0, 2.0, 4.0, 5.0]);
        let col = t.constant(RealTensor::new(vec![2, 1], vec![7.0, 8.0]).unwrap());
        let b = t.broadcast_cols(col, 3).unwrap();
        assert_eq!(t.value(b).data(), &[7.0, 7.0, 7.0, 8.0, 8.0, 8.0]);
        assert!(t.matmul(x, x).is_err());
        assert!(OpKind::from_name("layernorm") == Some(OpKind::LayerNorm));
    }
}
