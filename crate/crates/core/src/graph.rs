//! Reverse-mode differentiation over the encoder operator set.
//!
//! A [`Graph`] is an append-only tape: every node is created after its inputs,
//! so node ids are already a topological order and `backward` is a single
//! reverse sweep. A graph lives for one forward/backward pass on one worker.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{matmul_into, Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by a batch-norm node.
#[derive(Clone, Debug)]
pub enum BnStats<T> {
    /// Normalize with the statistics of the input batch (train mode).
    Batch,
    /// Normalize with supplied per-channel mean and (biased) variance.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: NodeId,
        planes: usize,
        h: usize,
        w: usize,
        win: (usize, usize),
        stride: (usize, usize),
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Relu(NodeId),
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: Option<(Vec<T>, Vec<T>)>,
        channels: usize,
        inner: usize,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    AddN(Vec<NodeId>),
    Reshape(NodeId),
    MaskTail {
        input: NodeId,
        len: usize,
    },
    Truncate {
        input: NodeId,
        len: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    MaxAxis {
        input: NodeId,
        argmax: Vec<usize>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node; exactly zero for nodes the root does not depend on.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Batch mean and biased variance computed by a train-mode batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                batch_stats: Some((m, v)),
                ..
            } => Some((m, v)),
            _ => None,
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or probed input).
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Cross-correlation of `input[Cin×H×W]` with `kernels[Cout×Cin×kh×kw]`,
    /// zero "same" padding, output `Cout × ceil(H/s) × ceil(W/s)`.
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernels).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return shape_err("conv2d", &xs, &ks);
        }
        if bs != [ks[0]] {
            return shape_err("conv2d bias", &bs, &ks);
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ks[0], ks[2], ks[3], stride);
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![geom.cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
            },
            value,
            &[input, kernels, bias],
        ))
    }

    /// Max over windows of the last axis; output length `ceil(T/stride)`.
    pub fn maxpool1d(&mut self, input: NodeId, width: usize, stride: usize) -> Result<NodeId> {
        if width == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "maxpool1d width ({width}) and stride ({stride}) must be positive"
            )));
        }
        let shape = self.shape(input).to_vec();
        let len = *shape.last().unwrap();
        let rows = self.value(input).len() / len;
        let (out, argmax) = kernels::maxpool1d_forward(self.value(input).data(), rows, len, width, stride);
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len.div_ceil(stride);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(Op::MaxPool { input, argmax }, value, &[input]))
    }

    /// Max over `window × window` tiles of the last two axes.
    pub fn maxpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        if window == 0 || stride == 0 {
            return Err(Error::InvalidArgument("maxpool2d window and stride must be positive".into()));
        }
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return shape_err("maxpool2d", &shape, &[window, window]);
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = self.value(input).len() / (h * w);
        let (out, argmax) = kernels::maxpool2d_forward(self.value(input).data(), planes, h, w, window, stride);
        let mut oshape = shape;
        let r = oshape.len();
        oshape[r - 2] = h.div_ceil(stride);
        oshape[r - 1] = w.div_ceil(stride);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(Op::MaxPool { input, argmax }, value, &[input]))
    }

    /// Mean over clipped windows of the last two axes.
    pub fn avgpool_window(&mut self, input: NodeId, win: (usize, usize), stride: (usize, usize)) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || win.0 == 0 || win.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return shape_err("avgpool_window", &shape, &[win.0, win.1]);
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = self.value(input).len() / (h * w);
        let out = kernels::avgpool2d_forward(self.value(input).data(), planes, h, w, win, stride);
        let mut oshape = shape;
        let r = oshape.len();
        oshape[r - 2] = h.div_ceil(stride.0);
        oshape[r - 1] = w.div_ceil(stride.1);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(
            Op::AvgPool2d {
                input,
                planes,
                h,
                w,
                win,
                stride,
            },
            value,
            &[input],
        ))
    }

    /// `[C × ...] -> [C]`, mean over every non-channel axis.
    pub fn global_avgpool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let c = x.shape()[0];
        let inner = x.len() / c;
        let scale = T::from_f64(1.0 / inner as f64);
        let out: Vec<T> = x
            .data()
            .chunks_exact(inner)
            .map(|row| {
                let mut s = T::zero();
                for &v in row {
                    s += v;
                }
                s * scale
            })
            .collect();
        let value = Tensor::new(vec![c], out)?;
        Ok(self.push(Op::GlobalAvgPool { input }, value, &[input]))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu(input), value, &[input])
    }

    /// Batch normalization of `input[B × C × ...]` with per-channel affine
    /// parameters `gamma[C]`, `beta[C]`.
    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: BnStats<T>,
        epsilon: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return shape_err("batchnorm", &shape, self.shape(gamma));
        }
        let (b, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batchnorm", &shape, self.shape(gamma));
        }
        let inner: usize = shape[2..].iter().product();
        let x = self.value(input).data();
        let count = (b * inner) as f64;
        let (mean, var, batch_stats) = match stats {
            BnStats::Batch => {
                if b < 2 {
                    return Err(Error::InvalidArgument(
                        "batchnorm in train mode needs a batch of at least 2".into(),
                    ));
                }
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * inner;
                        for &v in &x[off..off + inner] {
                            mean[ci] += v.to_f64();
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * inner;
                        for &v in &x[off..off + inner] {
                            let d = v.to_f64() - mean[ci];
                            var[ci] += d * d;
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let mean: Vec<T> = mean.into_iter().map(T::from_f64).collect();
                let var: Vec<T> = var.into_iter().map(T::from_f64).collect();
                (mean.clone(), var.clone(), Some((mean, var)))
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batchnorm stats", &[mean.len(), var.len()], &[c]);
                }
                (mean, var, None)
            }
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64(1.0 / (v.to_f64() + epsilon).sqrt()))
            .collect();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                for i in off..off + inner {
                    let h = (x[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = gam[ci] * h + bet[ci];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                channels: c,
                inner,
            },
            value,
            &[input, gamma, beta],
        ))
    }

    /// 2-D matrix product `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err("matmul", &sa, &sb);
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return shape_err("matmul", &sa, &sb);
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb, m, k, n }, value, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value, &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar(a), value, &[a])
    }

    /// Sum of equally shaped nodes.
    pub fn add_n(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let first = *items
            .first()
            .ok_or_else(|| Error::InvalidArgument("add_n of an empty list".into()))?;
        let mut acc = self.value(first).clone();
        for &id in &items[1..] {
            acc.add_assign(self.value(id))?;
        }
        Ok(self.push(Op::AddN(items.to_vec()), acc, items))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value, &[a]))
    }

    /// Zeroes every position `>= len` along the last axis.
    pub fn mask_tail(&mut self, input: NodeId, len: usize) -> NodeId {
        let mut value = self.value(input).clone();
        let last = *value.shape().last().unwrap();
        if len < last {
            for row in value.data_mut().chunks_exact_mut(last) {
                row[len..].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        self.push(Op::MaskTail { input, len }, value, &[input])
    }

    /// Keeps the first `len` positions of the last axis.
    pub fn truncate_last(&mut self, input: NodeId, len: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        let last = *shape.last().unwrap();
        if len == 0 || len > last {
            return shape_err("truncate_last", &shape, &[len]);
        }
        if len == last {
            return Ok(input);
        }
        let data: Vec<T> = self
            .value(input)
            .data()
            .chunks_exact(last)
            .flat_map(|row| row[..len].iter().copied())
            .collect();
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let value = Tensor::new(oshape, data)?;
        Ok(self.push(Op::Truncate { input, len }, value, &[input]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), value, &[a])
    }

    /// Max of a 2-D node along `axis` (0 → per column, 1 → per row);
    /// the gradient goes to the first maximal index.
    pub fn max_axis(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 || axis > 1 {
            return shape_err("max_axis", &shape, &[axis]);
        }
        let (rows, cols) = (shape[0], shape[1]);
        let x = self.value(input).data();
        let (outer, inner, step_outer, step_inner) = if axis == 0 {
            (cols, rows, 1, cols)
        } else {
            (rows, cols, cols, 1)
        };
        let mut out = Vec::with_capacity(outer);
        let mut argmax = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut best = o * step_outer;
            for i in 1..inner {
                let idx = o * step_outer + i * step_inner;
                if x[idx] > x[best] {
                    best = idx;
                }
            }
            out.push(x[best]);
            argmax.push(best);
        }
        let value = Tensor::new(vec![outer], out)?;
        Ok(self.push(Op::MaxAxis { input, argmax }, value, &[input]))
    }

    /// Reverse sweep from a scalar root; d(root)/d(root) = 1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, found shape {:?}",
                self.shape(root)
            )));
        }
        let seed = Tensor::full(self.shape(root), T::one());
        self.backward_from(root, seed)
    }

    /// Reverse sweep seeded with an upstream gradient for `root`.
    pub fn backward_from(&self, root: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(root) {
            return shape_err("backward seed", seed.shape(), self.shape(root));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
        if !self.wants(id) {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn zeros_like(&self, id: NodeId) -> Vec<T> {
        vec![T::zero(); self.value(id).len()]
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
            } => {
                let mut dx = self.wants(*input).then(|| self.zeros_like(*input));
                let mut dk = self.wants(*kernels).then(|| self.zeros_like(*kernels));
                let mut db = self.wants(*bias).then(|| self.zeros_like(*bias));
                kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*kernels).data(),
                    gd,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (id, d) in [(*input, dx), (*kernels, dk), (*bias, db)] {
                    if let Some(d) = d {
                        let t = Tensor::new(self.shape(id).to_vec(), d)?;
                        self.accumulate(grads, id, t)?;
                    }
                }
            }
            Op::MaxPool { input, argmax } | Op::MaxAxis { input, argmax } => {
                let mut dx = self.zeros_like(*input);
                for (&src, &gv) in argmax.iter().zip(gd) {
                    dx[src] += gv;
                }
                let t = Tensor::new(self.shape(*input).to_vec(), dx)?;
                self.accumulate(grads, *input, t)?;
            }
            Op::AvgPool2d {
                input,
                planes,
                h,
                w,
                win,
                stride,
            } => {
                let mut dx = self.zeros_like(*input);
                kernels::avgpool2d_backward(gd, *planes, *h, *w, *win, *stride, &mut dx);
                let t = Tensor::new(self.shape(*input).to_vec(), dx)?;
                self.accumulate(grads, *input, t)?;
            }
            Op::GlobalAvgPool { input } => {
                let len = self.value(*input).len();
                let c = gd.len();
                let inner = len / c;
                let scale = T::from_f64(1.0 / inner as f64);
                let dx: Vec<T> = (0..len).map(|i| gd[i / inner] * scale).collect();
                let t = Tensor::new(self.shape(*input).to_vec(), dx)?;
                self.accumulate(grads, *input, t)?;
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let dx: Vec<T> = x
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                let t = Tensor::new(self.shape(*input).to_vec(), dx)?;
                self.accumulate(grads, *input, t)?;
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
                channels,
                inner,
            } => {
                let (c, inner) = (*channels, *inner);
                let b = xhat.len() / (c * inner);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * inner;
                        for i in off..off + inner {
                            dgamma[ci] += gd[i] * xhat[i];
                            dbeta[ci] += gd[i];
                        }
                    }
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    if batch_stats.is_some() {
                        // dx = inv_std / N * (N*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                        let n = T::from_f64((b * inner) as f64);
                        for ci in 0..c {
                            let sum_dxhat = dbeta[ci] * gam[ci];
                            let sum_dxhat_xhat = dgamma[ci] * gam[ci];
                            for bi in 0..b {
                                let off = (bi * c + ci) * inner;
                                for i in off..off + inner {
                                    let dxhat = gd[i] * gam[ci];
                                    dx[i] = inv_std[ci] / n * (n * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                                }
                            }
                        }
                    } else {
                        for bi in 0..b {
                            for ci in 0..c {
                                let off = (bi * c + ci) * inner;
                                for i in off..off + inner {
                                    dx[i] = gd[i] * gam[ci] * inv_std[ci];
                                }
                            }
                        }
                    }
                    let t = Tensor::new(self.shape(*input).to_vec(), dx)?;
                    self.accumulate(grads, *input, t)?;
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta)?)?;
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    if *ta {
                        matmul_into(k, n, m, bv, *tb, gd, true, &mut da, false);
                    } else {
                        matmul_into(m, n, k, gd, false, bv, !*tb, &mut da, false);
                    }
                    let t = Tensor::new(self.shape(*a).to_vec(), da)?;
                    self.accumulate(grads, *a, t)?;
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *tb {
                        matmul_into(n, m, k, gd, true, av, *ta, &mut db, false);
                    } else {
                        matmul_into(k, m, n, av, !*ta, gd, false, &mut db, false);
                    }
                    let t = Tensor::new(self.shape(*b).to_vec(), db)?;
                    self.accumulate(grads, *b, t)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *a, d)?;
                }
                if self.wants(*b) {
                    let d = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    self.accumulate(grads, *b, d)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone())?,
            Op::AddN(items) => {
                for &id in items {
                    self.accumulate(grads, id, g.clone())?;
                }
            }
            Op::Reshape(a) => {
                let t = g.reshape(self.shape(*a))?;
                self.accumulate(grads, *a, t)?;
            }
            Op::MaskTail { input, len } => {
                let mut d = g.clone();
                let last = *out.shape().last().unwrap();
                if *len < last {
                    for row in d.data_mut().chunks_exact_mut(last) {
                        row[*len..].iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                self.accumulate(grads, *input, d)?;
            }
            Op::Truncate { input, len } => {
                let full = *self.shape(*input).last().unwrap();
                let mut d = vec![T::zero(); self.value(*input).len()];
                for (dst, src) in d.chunks_exact_mut(full).zip(gd.chunks_exact(*len)) {
                    dst[..*len].copy_from_slice(src);
                }
                let t = Tensor::new(self.shape(*input).to_vec(), d)?;
                self.accumulate(grads, *input, t)?;
            }
            Op::Sum(a) => {
                let t = Tensor::full(self.shape(*a), gd[0]);
                self.accumulate(grads, *a, t)?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let t = Tensor::full(self.shape(*a), gd[0] / T::from_f64(n as f64));
                self.accumulate(grads, *a, t)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::scalar(3.0));
        let sq = g.mul(p, p).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(p).item(), 6.0);
        assert_eq!(grads.get(loss).item(), 1.0);
    }

    #[test]
    fn disconnected_param_gets_exact_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.param(Tensor::full(&[2, 2], 1.5));
        let q = g.param(Tensor::full(&[3], 2.0));
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(q).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f32>::new();
        let p = g.param(Tensor::full(&[2], 1.0));
        let r = g.relu(p);
        assert!(g.backward(r).is_err());
    }

    #[test]
    fn relu_values_and_kink() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batchnorm_single_item_train_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3], 1.0));
        let gamma = g.param(Tensor::full(&[2], 1.0));
        let beta = g.param(Tensor::full(&[2], 0.0));
        assert!(g.batchnorm(x, gamma, beta, BnStats::Batch, BN_EPSILON).is_err());
    }

    #[test]
    fn conv_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let k = g.param(Tensor::zeros(&[3, 5, 3, 3]));
        let b = g.param(Tensor::zeros(&[3]));
        let msg = g.conv2d(x, k, b, 1).unwrap_err().to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[3, 5, 3, 3]"), "{msg}");
    }
}
