//! Reverse-mode differentiation over dense f32 tensors.
//!
//! A [`Graph`] is an append-only list of nodes; every operation validates
//! shapes, computes its value eagerly, and records itself for the backward
//! sweep. Inputs of node `k` always have ids `< k`, so forward order is the
//! node order and the backward sweep is the reverse. Gradients accumulate
//! additively across fan-out and are zeroed at the start of every
//! [`Graph::backward`] call.

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a node in its owning [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// y = mul * x + add
    Affine { mul: f32, add: f32 },
    /// [m,k] @ [k,n]
    Matmul,
    /// [m,k] @ [n,k]^T
    MatmulTB,
    /// [m,n] -> [n,m]
    Transpose,
    /// Stride-1 zero-padded convolution, inputs (x[Ci,H,W], w[Co,Ci,kh,kw], b[Co]).
    Conv2d,
    /// 2x2 average pooling, [C,H,W] -> [C,H/2,W/2].
    AvgPool2,
    /// [C,H,W] -> [C,2H,2W]
    UpsampleNearest2,
    /// [C,H,W] -> [C,2H,2W]
    UpsampleBilinear2,
    /// Inputs (img[C,H,W], coords[N,2] with (u,v) in [0,1]); output [C,N].
    GridSample,
    Relu,
    LeakyRelu { slope: f32 },
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Clamp { lo: f32, hi: f32 },
    /// Reduce to scalar [1].
    Sum,
    Mean,
    L2Norm,
    /// x / ||x||, treated flat.
    L2Normalize,
    /// [N,D] + [D]
    AddBias,
    /// [C,H,W] + [H,W], broadcast over channels.
    AddImage2d,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    /// Circular shift along `axis`: out[i] = in[(i + shift) mod d].
    Roll { axis: usize, shift: usize },
    /// Exclusive prefix sums along the last axis of a 2-D tensor.
    CumsumExclusive,
    /// [R,S] -> [R,1]
    RowSums,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Affine { .. } => "affine",
            Op::Matmul => "matmul",
            Op::MatmulTB => "matmul_tb",
            Op::Transpose => "transpose",
            Op::Conv2d => "conv2d",
            Op::AvgPool2 => "avg_pool2",
            Op::UpsampleNearest2 => "upsample2_nearest",
            Op::UpsampleBilinear2 => "upsample2_bilinear",
            Op::GridSample => "grid_sample",
            Op::Relu => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::L2Norm => "l2_norm",
            Op::L2Normalize => "l2_normalize",
            Op::AddBias => "add_bias",
            Op::AddImage2d => "add_image2d",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Roll { .. } => "roll",
            Op::CumsumExclusive => "cumsum_exclusive",
            Op::RowSums => "row_sums",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Computation graph with eager forward evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
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

    /// Constant leaf; no gradient is tracked for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, false)
    }

    /// Trainable leaf; `backward` fills its gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// Overwrite a leaf's data in place (shape preserved). Call
    /// [`Graph::forward`] afterwards to refresh downstream values.
    pub fn set_leaf(&mut self, id: NodeId, data: &[f32]) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::InvalidArgument(format!(
                "set_leaf: node {} is not a leaf",
                id.0
            )));
        }
        if data.len() != node.value.numel() {
            return Err(Error::shape_mismatch(
                "set_leaf",
                format!("{} elements", node.value.numel()),
                format!("{} elements", data.len()),
            ));
        }
        node.value.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` call, if one flowed to this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn apply(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let in_vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let value = compute(&op, &in_vals).map_err(|e| annotate(e, &op, self.nodes.len()))?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, inputs, value, requires_grad))
    }

    // ── Elementwise and scalar ───────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Div, vec![a, b])
    }

    /// y = c * x
    pub fn scale(&mut self, x: NodeId, c: f32) -> Result<NodeId> {
        self.apply(Op::Affine { mul: c, add: 0.0 }, vec![x])
    }

    /// y = mul * x + add
    pub fn affine(&mut self, x: NodeId, mul: f32, add: f32) -> Result<NodeId> {
        self.apply(Op::Affine { mul, add }, vec![x])
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Matmul, vec![a, b])
    }

    /// a @ b^T with b stored row-major [n,k].
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatmulTB, vec![a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, vec![x])
    }

    // ── Image ops ────────────────────────────────────────────────────

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Conv2d, vec![x, w, b])
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::AvgPool2, vec![x])
    }

    pub fn upsample2_nearest(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::UpsampleNearest2, vec![x])
    }

    pub fn upsample2_bilinear(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::UpsampleBilinear2, vec![x])
    }

    /// Bilinear gather: `img` is [C,H,W], `coords` is [N,2] with (u,v) in
    /// [0,1] (texel centers at (j+0.5)/W), edge-clamped. Output [C,N].
    pub fn grid_sample(&mut self, img: NodeId, coords: NodeId) -> Result<NodeId> {
        self.apply(Op::GridSample, vec![img, coords])
    }

    // ── Activations ──────────────────────────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, vec![x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> Result<NodeId> {
        self.apply(Op::LeakyRelu { slope }, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, vec![x])
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Softplus, vec![x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, vec![x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, vec![x])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sqrt, vec![x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        self.apply(Op::Clamp { lo, hi }, vec![x])
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, vec![x])
    }

    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::L2Norm, vec![x])
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::L2Normalize, vec![x])
    }

    pub fn row_sums(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::RowSums, vec![x])
    }

    pub fn cumsum_exclusive(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::CumsumExclusive, vec![x])
    }

    // ── Structure ────────────────────────────────────────────────────

    pub fn add_bias(&mut self, mat: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::AddBias, vec![mat, bias])
    }

    pub fn add_image2d(&mut self, x: NodeId, img: NodeId) -> Result<NodeId> {
        self.apply(Op::AddImage2d, vec![x, img])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, parts.to_vec())
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Op::Slice { axis, start, len }, vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            vec![x],
        )
    }

    pub fn roll(&mut self, x: NodeId, axis: usize, shift: usize) -> Result<NodeId> {
        self.apply(Op::Roll { axis, shift }, vec![x])
    }

    // ── Execution ────────────────────────────────────────────────────

    /// Recompute every non-leaf node in topological (insertion) order.
    /// Deterministic given the leaf values.
    pub fn forward(&mut self) -> Result<()> {
        for k in 0..self.nodes.len() {
            if matches!(self.nodes[k].op, Op::Leaf) {
                continue;
            }
            let value = {
                let node = &self.nodes[k];
                let in_vals: Vec<&Tensor> =
                    node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                compute(&node.op, &in_vals).map_err(|e| annotate(e, &node.op, k))?
            };
            self.nodes[k].value = value;
        }
        Ok(())
    }

    /// Recompute the graph and return the value of `output`.
    pub fn forward_value(&mut self, output: NodeId) -> Result<Tensor> {
        self.forward()?;
        Ok(self.nodes[output.0].value.clone())
    }

    /// Reverse sweep from a scalar `output`; fills gradients of every node
    /// with `requires_grad` on a path to it. Gradients are zeroed first, so
    /// repeated calls do not compound.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let out_node = &self.nodes[output.0];
        if !out_node.value.is_scalar() {
            return Err(Error::NotScalar {
                op: "backward".into(),
                shape: out_node.value.shape().to_vec(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[output.0] = Some(vec![1.0]);

        for k in (0..=output.0).rev() {
            if matches!(self.nodes[k].op, Op::Leaf) || !self.nodes[k].requires_grad {
                continue;
            }
            let Some(out_grad) = self.grads[k].take() else {
                continue;
            };
            // Split borrows: node k is read-only, gradients of inputs (< k)
            // are written. Taking the grad above keeps slot k free.
            let (op, inputs) = {
                let node = &self.nodes[k];
                (node.op.clone(), node.inputs.clone())
            };
            let in_vals: Vec<Tensor> = inputs
                .iter()
                .map(|i| self.nodes[i.0].value.clone())
                .collect();
            let needed: Vec<bool> = inputs
                .iter()
                .map(|i| self.nodes[i.0].requires_grad)
                .collect();
            let out_value = self.nodes[k].value.clone();
            let mut contribs: Vec<Option<Vec<f32>>> = vec![None; inputs.len()];
            backprop(&op, &in_vals, &out_value, &out_grad, &needed, &mut contribs);
            for (slot, contrib) in inputs.iter().zip(contribs.into_iter()) {
                let Some(c) = contrib else { continue };
                if !self.nodes[slot.0].requires_grad {
                    continue;
                }
                match &mut self.grads[slot.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(c.iter()) {
                            *a += v;
                        }
                    }
                    none => *none = Some(c),
                }
            }
            self.grads[k] = Some(out_grad);
        }
        Ok(())
    }

    /// Max relative error between the analytic gradient of `leaf` and a
    /// central finite difference with step `h`, over all leaf elements:
    /// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    pub fn check_gradient(&mut self, output: NodeId, leaf: NodeId, h: f32) -> Result<f32> {
        if !(h > 0.0 && h <= 0.1) {
            return Err(Error::InvalidArgument(format!(
                "check_gradient: h must be in (0, 0.1], got {h}"
            )));
        }
        if !self.nodes[output.0].value.is_scalar() {
            return Err(Error::NotScalar {
                op: "check_gradient".into(),
                shape: self.nodes[output.0].value.shape().to_vec(),
            });
        }
        self.forward()?;
        self.backward(output)?;
        let analytic: Vec<f32> = match self.grad(leaf) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[leaf.0].value.numel()],
        };
        let base = self.nodes[leaf.0].value.data().to_vec();
        let mut max_rel = 0.0f32;
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + h;
            self.set_leaf(leaf, &probe)?;
            let fp = self.forward_value(output)?.item();
            probe[i] = base[i] - h;
            self.set_leaf(leaf, &probe)?;
            let fm = self.forward_value(output)?.item();
            probe[i] = base[i];
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs()
                / f32::max(1e-8, analytic[i].abs() + numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
        self.set_leaf(leaf, &base)?;
        self.forward()?;
        Ok(max_rel)
    }

    /// Single-coordinate variant of [`Graph::check_gradient`]: relative error
    /// at one element of `leaf` only.
    pub fn check_gradient_at(
        &mut self,
        output: NodeId,
        leaf: NodeId,
        index: usize,
        h: f32,
    ) -> Result<f32> {
        if !(h > 0.0 && h <= 0.1) {
            return Err(Error::InvalidArgument(format!(
                "check_gradient_at: h must be in (0, 0.1], got {h}"
            )));
        }
        self.forward()?;
        self.backward(output)?;
        let analytic = self.grad(leaf).map(|g| g[index]).unwrap_or(0.0);
        let base = self.nodes[leaf.0].value.data().to_vec();
        let mut probe = base.clone();
        probe[index] = base[index] + h;
        self.set_leaf(leaf, &probe)?;
        let fp = self.forward_value(output)?.item();
        probe[index] = base[index] - h;
        self.set_leaf(leaf, &probe)?;
        let fm = self.forward_value(output)?.item();
        self.set_leaf(leaf, &base)?;
        self.forward()?;
        let numeric = (fp - fm) / (2.0 * h);
        Ok((analytic - numeric).abs() / f32::max(1e-8, analytic.abs() + numeric.abs()))
    }
}

fn annotate(err: Error, op: &Op, node: usize) -> Error {
    match err {
        Error::ShapeMismatch {
            expected, actual, ..
        } => Error::ShapeMismatch {
            op: format!("{} (node {})", op.name(), node),
            expected,
            actual,
        },
        other => other,
    }
}

fn want(op: &str, cond: bool, expected: impl Into<String>, actual: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape_mismatch(op, expected, actual))
    }
}

// ── Forward kernels ──────────────────────────────────────────────────

fn compute(op: &Op, ins: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Leaf => unreachable!("leaf nodes are never recomputed"),
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (ins[0], ins[1]);
            want(
                op.name(),
                a.shape() == b.shape(),
                format!("{:?}", a.shape()),
                format!("{:?}", b.shape()),
            )?;
            let f: fn(f32, f32) -> f32 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                Op::Mul => |x, y| x * y,
                _ => |x, y| x / y,
            };
            let data = a
                .data()
                .iter()
                .zip(b.data().iter())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Affine { mul, add } => {
            let x = ins[0];
            let data = x.data().iter().map(|&v| mul * v + add).collect();
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::Matmul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k) = dims2("matmul lhs", a)?;
            let (k2, n) = dims2("matmul rhs", b)?;
            want("matmul", k == k2, format!("[{m},{k}] @ [{k},?]"), format!("[{k2},{n}]"))?;
            let mut out = vec![0.0f32; m * n];
            matmul_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)
        }
        Op::MatmulTB => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k) = dims2("matmul_tb lhs", a)?;
            let (n, k2) = dims2("matmul_tb rhs", b)?;
            want("matmul_tb", k == k2, format!("[?,{k}]"), format!("[{n},{k2}]"))?;
            let mut out = vec![0.0f32; m * n];
            for i in 0..m {
                let ar = &a.data()[i * k..(i + 1) * k];
                for j in 0..n {
                    let br = &b.data()[j * k..(j + 1) * k];
                    let mut acc = 0.0f32;
                    for t in 0..k {
                        acc += ar[t] * br[t];
                    }
                    out[i * n + j] = acc;
                }
            }
            Tensor::new(vec![m, n], out)
        }
        Op::Transpose => {
            let x = ins[0];
            let (m, n) = dims2("transpose", x)?;
            let mut out = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x.data()[i * n + j];
                }
            }
            Tensor::new(vec![n, m], out)
        }
        Op::Conv2d => conv2d_forward(ins[0], ins[1], ins[2]),
        Op::AvgPool2 => {
            let x = ins[0];
            let (c, h, w) = dims3("avg_pool2", x)?;
            want(
                "avg_pool2",
                h % 2 == 0 && w % 2 == 0,
                "even spatial dims".to_string(),
                format!("[{c},{h},{w}]"),
            )?;
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0f32; c * oh * ow];
            for ci in 0..c {
                let ip = &x.data()[ci * h * w..(ci + 1) * h * w];
                let op_ = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        let s = ip[2 * y * w + 2 * xx]
                            + ip[2 * y * w + 2 * xx + 1]
                            + ip[(2 * y + 1) * w + 2 * xx]
                            + ip[(2 * y + 1) * w + 2 * xx + 1];
                        op_[y * ow + xx] = 0.25 * s;
                    }
                }
            }
            Tensor::new(vec![c, oh, ow], out)
        }
        Op::UpsampleNearest2 => {
            let x = ins[0];
            let (c, h, w) = dims3("upsample2_nearest", x)?;
            let (oh, ow) = (2 * h, 2 * w);
            let mut out = vec![0.0f32; c * oh * ow];
            for ci in 0..c {
                let ip = &x.data()[ci * h * w..(ci + 1) * h * w];
                let op_ = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        op_[y * ow + xx] = ip[(y / 2) * w + xx / 2];
                    }
                }
            }
            Tensor::new(vec![c, oh, ow], out)
        }
        Op::UpsampleBilinear2 => {
            let x = ins[0];
            let (c, h, w) = dims3("upsample2_bilinear", x)?;
            let (oh, ow) = (2 * h, 2 * w);
            let taps_y = up2_taps(h);
            let taps_x = up2_taps(w);
            let mut out = vec![0.0f32; c * oh * ow];
            for ci in 0..c {
                let ip = &x.data()[ci * h * w..(ci + 1) * h * w];
                let op_ = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
                for y in 0..oh {
                    let (y0, y1, ty) = taps_y[y];
                    for xx in 0..ow {
                        let (x0, x1, tx) = taps_x[xx];
                        let v00 = ip[y0 * w + x0];
                        let v01 = ip[y0 * w + x1];
                        let v10 = ip[y1 * w + x0];
                        let v11 = ip[y1 * w + x1];
                        op_[y * ow + xx] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01)
                            + ty * ((1.0 - tx) * v10 + tx * v11);
                    }
                }
            }
            Tensor::new(vec![c, oh, ow], out)
        }
        Op::GridSample => {
            let (img, coords) = (ins[0], ins[1]);
            let (c, h, w) = dims3("grid_sample image", img)?;
            let n = coords_len("grid_sample coords", coords)?;
            let mut out = vec![0.0f32; c * n];
            for p in 0..n {
                let u = coords.data()[2 * p];
                let v = coords.data()[2 * p + 1];
                let t = bilinear_taps(u, v, h, w);
                for ci in 0..c {
                    let ip = &img.data()[ci * h * w..(ci + 1) * h * w];
                    out[ci * n + p] = t.w00 * ip[t.i00]
                        + t.w01 * ip[t.i01]
                        + t.w10 * ip[t.i10]
                        + t.w11 * ip[t.i11];
                }
            }
            Tensor::new(vec![c, n], out)
        }
        Op::Relu => map(ins[0], |v| v.max(0.0)),
        Op::LeakyRelu { slope } => {
            let s = *slope;
            map(ins[0], move |v| if v > 0.0 { v } else { s * v })
        }
        Op::Sigmoid => map(ins[0], sigmoid),
        Op::Softplus => map(ins[0], |v| v.max(0.0) + (-v.abs()).exp().ln_1p()),
        Op::Exp => map(ins[0], f32::exp),
        Op::Log => map(ins[0], f32::ln),
        Op::Sqrt => map(ins[0], f32::sqrt),
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            map(ins[0], move |v| v.clamp(lo, hi))
        }
        Op::Sum => Ok(Tensor::scalar(ins[0].data().iter().sum())),
        Op::Mean => {
            let x = ins[0];
            Ok(Tensor::scalar(
                x.data().iter().sum::<f32>() / x.numel() as f32,
            ))
        }
        Op::L2Norm => {
            let sq: f32 = ins[0].data().iter().map(|v| v * v).sum();
            Ok(Tensor::scalar(sq.sqrt()))
        }
        Op::L2Normalize => {
            let x = ins[0];
            let norm = x.data().iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm < 1e-12 {
                return Err(Error::InvalidArgument(
                    "l2_normalize: zero-norm input".into(),
                ));
            }
            map(x, move |v| v / norm)
        }
        Op::AddBias => {
            let (mat, bias) = (ins[0], ins[1]);
            let (n, d) = dims2("add_bias matrix", mat)?;
            want(
                "add_bias",
                bias.shape() == [d],
                format!("bias [{d}]"),
                format!("{:?}", bias.shape()),
            )?;
            let mut out = mat.data().to_vec();
            for i in 0..n {
                for j in 0..d {
                    out[i * d + j] += bias.data()[j];
                }
            }
            Tensor::new(vec![n, d], out)
        }
        Op::AddImage2d => {
            let (x, img) = (ins[0], ins[1]);
            let (c, h, w) = dims3("add_image2d input", x)?;
            want(
                "add_image2d",
                img.shape() == [h, w],
                format!("[{h},{w}]"),
                format!("{:?}", img.shape()),
            )?;
            let mut out = x.data().to_vec();
            for ci in 0..c {
                for i in 0..h * w {
                    out[ci * h * w + i] += img.data()[i];
                }
            }
            Tensor::new(vec![c, h, w], out)
        }
        Op::Concat { axis } => concat_forward(ins, *axis),
        Op::Slice { axis, start, len } => {
            let x = ins[0];
            let shape = x.shape();
            if *axis >= shape.len() || start + len > shape[*axis] {
                return Err(Error::shape_mismatch(
                    "slice",
                    format!("axis {axis} within {:?}", shape),
                    format!("start {start}, len {len}"),
                ));
            }
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let d = shape[*axis];
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * d * inner + start * inner;
                out.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut new_shape = shape.to_vec();
            new_shape[*axis] = *len;
            Tensor::new(new_shape, out)
        }
        Op::Reshape { shape } => ins[0].clone().reshaped(shape.clone()),
        Op::Roll { axis, shift } => {
            let x = ins[0];
            let shape = x.shape();
            if *axis >= shape.len() {
                return Err(Error::InvalidArgument(format!(
                    "roll: axis {axis} out of range for {:?}",
                    shape
                )));
            }
            let d = shape[*axis];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let mut out = vec![0.0f32; x.numel()];
            for o in 0..outer {
                for i in 0..d {
                    let src = (i + shift) % d;
                    let dst_base = (o * d + i) * inner;
                    let src_base = (o * d + src) * inner;
                    out[dst_base..dst_base + inner]
                        .copy_from_slice(&x.data()[src_base..src_base + inner]);
                }
            }
            Tensor::new(shape.to_vec(), out)
        }
        Op::CumsumExclusive => {
            let x = ins[0];
            let (r, s) = dims2("cumsum_exclusive", x)?;
            let mut out = vec![0.0f32; r * s];
            for i in 0..r {
                let mut acc = 0.0f32;
                for j in 0..s {
                    out[i * s + j] = acc;
                    acc += x.data()[i * s + j];
                }
            }
            Tensor::new(vec![r, s], out)
        }
        Op::RowSums => {
            let x = ins[0];
            let (r, s) = dims2("row_sums", x)?;
            let mut out = vec![0.0f32; r];
            for i in 0..r {
                out[i] = x.data()[i * s..(i + 1) * s].iter().sum();
            }
            Tensor::new(vec![r, 1], out)
        }
    }
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Result<Tensor> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn dims2(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        other => Err(Error::shape_mismatch(op, "rank 2", format!("{other:?}"))),
    }
}

fn dims3(op: &str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        other => Err(Error::shape_mismatch(op, "rank 3", format!("{other:?}"))),
    }
}

fn coords_len(op: &str, t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n, 2] => Ok(*n),
        other => Err(Error::shape_mismatch(op, "[N,2]", format!("{other:?}"))),
    }
}

fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (t, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[t * n..(t + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

/// Source taps for 2x bilinear upsampling (half-pixel centers, edge clamp).
fn up2_taps(size: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * size)
        .map(|i| {
            let f = (i as f32 + 0.5) / 2.0 - 0.5;
            let i0 = f.floor();
            let t = f - i0;
            let a = (i0 as isize).clamp(0, size as isize - 1) as usize;
            let b = (i0 as isize + 1).clamp(0, size as isize - 1) as usize;
            (a, b, t)
        })
        .collect()
}

struct BilinearTaps {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    w00: f32,
    w01: f32,
    w10: f32,
    w11: f32,
    tx: f32,
    ty: f32,
    x_spread: bool,
    y_spread: bool,
}

fn bilinear_taps(u: f32, v: f32, h: usize, w: usize) -> BilinearTaps {
    let fx = u * w as f32 - 0.5;
    let fy = v * h as f32 - 0.5;
    let x0f = fx.floor();
    let y0f = fy.floor();
    let tx = fx - x0f;
    let ty = fy - y0f;
    let x0 = (x0f as isize).clamp(0, w as isize - 1) as usize;
    let x1 = (x0f as isize + 1).clamp(0, w as isize - 1) as usize;
    let y0 = (y0f as isize).clamp(0, h as isize - 1) as usize;
    let y1 = (y0f as isize + 1).clamp(0, h as isize - 1) as usize;
    BilinearTaps {
        i00: y0 * w + x0,
        i01: y0 * w + x1,
        i10: y1 * w + x0,
        i11: y1 * w + x1,
        w00: (1.0 - ty) * (1.0 - tx),
        w01: (1.0 - ty) * tx,
        w10: ty * (1.0 - tx),
        w11: ty * tx,
        tx,
        ty,
        x_spread: x0 != x1,
        y_spread: y0 != y1,
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ci, h, wd) = dims3("conv2d input", x)?;
    let (co, ci2, kh, kw) = match w.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        other => {
            return Err(Error::shape_mismatch(
                "conv2d weights",
                "rank 4",
                format!("{other:?}"),
            ))
        }
    };
    want(
        "conv2d",
        ci == ci2 && kh % 2 == 1 && kw % 2 == 1,
        format!("weights [?,{ci},odd,odd]"),
        format!("{:?}", w.shape()),
    )?;
    want(
        "conv2d",
        b.shape() == [co],
        format!("bias [{co}]"),
        format!("{:?}", b.shape()),
    )?;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0f32; co * h * wd];
    for oc in 0..co {
        let bias = b.data()[oc];
        let op_ = &mut out[oc * h * wd..(oc + 1) * h * wd];
        op_.fill(bias);
        for ic in 0..ci {
            let ip = &x.data()[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                let dy = ky as isize - ph as isize;
                for kx in 0..kw {
                    let dx = kx as isize - pw as isize;
                    let wv = w.data()[((oc * ci + ic) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy.max(0)) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (wd as isize - dx.max(0)) as usize;
                    for y in y_lo..y_hi {
                        let src = &ip[((y as isize + dy) as usize * wd + (x_lo as isize + dx) as usize)..];
                        let dst = &mut op_[y * wd + x_lo..y * wd + x_hi];
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![co, h, wd], out)
}

// ── Backward kernels ─────────────────────────────────────────────────

/// Computes gradient contributions for every input of one node.
/// `contribs[i]` stays `None` when input `i` gets no gradient; the heavy
/// ops skip inputs whose `needed[i]` is false (frozen parameters).
fn backprop(
    op: &Op,
    ins: &[Tensor],
    out_value: &Tensor,
    d: &[f32],
    needed: &[bool],
    contribs: &mut [Option<Vec<f32>>],
) {
    match op {
        Op::Leaf => {}
        Op::Add => {
            contribs[0] = Some(d.to_vec());
            contribs[1] = Some(d.to_vec());
        }
        Op::Sub => {
            contribs[0] = Some(d.to_vec());
            contribs[1] = Some(d.iter().map(|v| -v).collect());
        }
        Op::Mul => {
            contribs[0] = Some(zipmul(d, ins[1].data()));
            contribs[1] = Some(zipmul(d, ins[0].data()));
        }
        Op::Div => {
            let a = ins[0].data();
            let b = ins[1].data();
            contribs[0] = Some(d.iter().zip(b).map(|(dv, bv)| dv / bv).collect());
            contribs[1] = Some(
                d.iter()
                    .zip(a.iter().zip(b))
                    .map(|(dv, (av, bv))| -dv * av / (bv * bv))
                    .collect(),
            );
        }
        Op::Affine { mul, .. } => {
            contribs[0] = Some(d.iter().map(|v| mul * v).collect());
        }
        Op::Matmul => {
            let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
            let n = ins[1].shape()[1];
            if needed[0] {
                // da = d @ b^T
                let mut da = vec![0.0f32; m * k];
                let b = ins[1].data();
                for i in 0..m {
                    let dr = &d[i * n..(i + 1) * n];
                    let or = &mut da[i * k..(i + 1) * k];
                    for t in 0..k {
                        let br = &b[t * n..(t + 1) * n];
                        let mut acc = 0.0f32;
                        for j in 0..n {
                            acc += dr[j] * br[j];
                        }
                        or[t] = acc;
                    }
                }
                contribs[0] = Some(da);
            }
            if needed[1] {
                // db = a^T @ d
                let mut db = vec![0.0f32; k * n];
                let a = ins[0].data();
                for i in 0..m {
                    let dr = &d[i * n..(i + 1) * n];
                    for t in 0..k {
                        let av = a[i * k + t];
                        if av == 0.0 {
                            continue;
                        }
                        let or = &mut db[t * n..(t + 1) * n];
                        for j in 0..n {
                            or[j] += av * dr[j];
                        }
                    }
                }
                contribs[1] = Some(db);
            }
        }
        Op::MatmulTB => {
            let (m, k) = (ins[0].shape()[0], ins[0].shape()[1]);
            let n = ins[1].shape()[0];
            if needed[0] {
                // da = d @ b
                let mut da = vec![0.0f32; m * k];
                matmul_into(d, ins[1].data(), &mut da, m, n, k);
                contribs[0] = Some(da);
            }
            if needed[1] {
                // db[j,:] = sum_i d[i,j] * a[i,:]
                let mut db = vec![0.0f32; n * k];
                let a = ins[0].data();
                for i in 0..m {
                    let ar = &a[i * k..(i + 1) * k];
                    for j in 0..n {
                        let dv = d[i * n + j];
                        if dv == 0.0 {
                            continue;
                        }
                        let or = &mut db[j * k..(j + 1) * k];
                        for t in 0..k {
                            or[t] += dv * ar[t];
                        }
                    }
                }
                contribs[1] = Some(db);
            }
        }
        Op::Transpose => {
            let (m, n) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut dx = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    dx[i * n + j] = d[j * m + i];
                }
            }
            contribs[0] = Some(dx);
        }
        Op::Conv2d => conv2d_backward(&ins[0], &ins[1], d, needed, contribs),
        Op::AvgPool2 => {
            let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut dx = vec![0.0f32; c * h * w];
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let g = 0.25 * d[ci * oh * ow + y * ow + xx];
                        let base = ci * h * w;
                        dx[base + 2 * y * w + 2 * xx] += g;
                        dx[base + 2 * y * w + 2 * xx + 1] += g;
                        dx[base + (2 * y + 1) * w + 2 * xx] += g;
                        dx[base + (2 * y + 1) * w + 2 * xx + 1] += g;
                    }
                }
            }
            contribs[0] = Some(dx);
        }
        Op::UpsampleNearest2 => {
            let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
            let (oh, ow) = (2 * h, 2 * w);
            let mut dx = vec![0.0f32; c * h * w];
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        dx[ci * h * w + (y / 2) * w + xx / 2] += d[ci * oh * ow + y * ow + xx];
                    }
                }
            }
            contribs[0] = Some(dx);
        }
        Op::UpsampleBilinear2 => {
            let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
            let (oh, ow) = (2 * h, 2 * w);
            let taps_y = up2_taps(h);
            let taps_x = up2_taps(w);
            let mut dx = vec![0.0f32; c * h * w];
            for ci in 0..c {
                let dp = &d[ci * oh * ow..(ci + 1) * oh * ow];
                let xp = &mut dx[ci * h * w..(ci + 1) * h * w];
                for y in 0..oh {
                    let (y0, y1, ty) = taps_y[y];
                    for xx in 0..ow {
                        let (x0, x1, tx) = taps_x[xx];
                        let g = dp[y * ow + xx];
                        xp[y0 * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                        xp[y0 * w + x1] += g * (1.0 - ty) * tx;
                        xp[y1 * w + x0] += g * ty * (1.0 - tx);
                        xp[y1 * w + x1] += g * ty * tx;
                    }
                }
            }
            contribs[0] = Some(dx);
        }
        Op::GridSample => {
            let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
            let n = ins[1].shape()[0];
            let img = ins[0].data();
            let coords = ins[1].data();
            let mut dimg = vec![0.0f32; c * h * w];
            let mut dcoords = vec![0.0f32; n * 2];
            for p in 0..n {
                let t = bilinear_taps(coords[2 * p], coords[2 * p + 1], h, w);
                let mut du = 0.0f32;
                let mut dv = 0.0f32;
                for ci in 0..c {
                    let g = d[ci * n + p];
                    let base = ci * h * w;
                    if needed[0] {
                        dimg[base + t.i00] += g * t.w00;
                        dimg[base + t.i01] += g * t.w01;
                        dimg[base + t.i10] += g * t.w10;
                        dimg[base + t.i11] += g * t.w11;
                    }
                    if needed[1] {
                        if t.x_spread {
                            let v00 = img[base + t.i00];
                            let v01 = img[base + t.i01];
                            let v10 = img[base + t.i10];
                            let v11 = img[base + t.i11];
                            du += g * ((1.0 - t.ty) * (v01 - v00) + t.ty * (v11 - v10));
                        }
                        if t.y_spread {
                            let v00 = img[base + t.i00];
                            let v01 = img[base + t.i01];
                            let v10 = img[base + t.i10];
                            let v11 = img[base + t.i11];
                            dv += g * ((1.0 - t.tx) * (v10 - v00) + t.tx * (v11 - v01));
                        }
                    }
                }
                dcoords[2 * p] = du * w as f32;
                dcoords[2 * p + 1] = dv * h as f32;
            }
            if needed[0] {
                contribs[0] = Some(dimg);
            }
            if needed[1] {
                contribs[1] = Some(dcoords);
            }
        }
        Op::Relu => {
            contribs[0] = Some(
                d.iter()
                    .zip(ins[0].data())
                    .map(|(dv, &x)| if x > 0.0 { *dv } else { 0.0 })
                    .collect(),
            );
        }
        Op::LeakyRelu { slope } => {
            contribs[0] = Some(
                d.iter()
                    .zip(ins[0].data())
                    .map(|(dv, &x)| if x > 0.0 { *dv } else { slope * dv })
                    .collect(),
            );
        }
        Op::Sigmoid => {
            contribs[0] = Some(
                d.iter()
                    .zip(out_value.data())
                    .map(|(dv, &y)| dv * y * (1.0 - y))
                    .collect(),
            );
        }
        Op::Softplus => {
            contribs[0] = Some(
                d.iter()
                    .zip(ins[0].data())
                    .map(|(dv, &x)| dv * sigmoid(x))
                    .collect(),
            );
        }
        Op::Exp => {
            contribs[0] = Some(zipmul(d, out_value.data()));
        }
        Op::Log => {
            contribs[0] = Some(d.iter().zip(ins[0].data()).map(|(dv, &x)| dv / x).collect());
        }
        Op::Sqrt => {
            contribs[0] = Some(
                d.iter()
                    .zip(out_value.data())
                    .map(|(dv, &y)| dv / (2.0 * y))
                    .collect(),
            );
        }
        Op::Clamp { lo, hi } => {
            contribs[0] = Some(
                d.iter()
                    .zip(ins[0].data())
                    .map(|(dv, &x)| if x > *lo && x < *hi { *dv } else { 0.0 })
                    .collect(),
            );
        }
        Op::Sum => {
            contribs[0] = Some(vec![d[0]; ins[0].numel()]);
        }
        Op::Mean => {
            let g = d[0] / ins[0].numel() as f32;
            contribs[0] = Some(vec![g; ins[0].numel()]);
        }
        Op::L2Norm => {
            let norm = out_value.item();
            let g = if norm > 1e-12 { d[0] / norm } else { 0.0 };
            contribs[0] = Some(ins[0].data().iter().map(|&x| g * x).collect());
        }
        Op::L2Normalize => {
            let y = out_value.data();
            let norm = ins[0].data().iter().map(|v| v * v).sum::<f32>().sqrt();
            let dot: f32 = d.iter().zip(y).map(|(dv, yv)| dv * yv).sum();
            contribs[0] = Some(
                d.iter()
                    .zip(y)
                    .map(|(dv, yv)| (dv - yv * dot) / norm)
                    .collect(),
            );
        }
        Op::AddBias => {
            let (n, dd) = (ins[0].shape()[0], ins[0].shape()[1]);
            contribs[0] = Some(d.to_vec());
            let mut db = vec![0.0f32; dd];
            for i in 0..n {
                for j in 0..dd {
                    db[j] += d[i * dd + j];
                }
            }
            contribs[1] = Some(db);
        }
        Op::AddImage2d => {
            let (c, h, w) = (ins[0].shape()[0], ins[0].shape()[1], ins[0].shape()[2]);
            contribs[0] = Some(d.to_vec());
            let mut dn = vec![0.0f32; h * w];
            for ci in 0..c {
                for i in 0..h * w {
                    dn[i] += d[ci * h * w + i];
                }
            }
            contribs[1] = Some(dn);
        }
        Op::Concat { axis } => {
            let shape = out_value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let total_d = shape[*axis];
            let mut offset = 0usize;
            for (idx, input) in ins.iter().enumerate() {
                let di = input.shape()[*axis];
                let mut g = vec![0.0f32; input.numel()];
                for o in 0..outer {
                    let src = (o * total_d + offset) * inner;
                    let dst = o * di * inner;
                    g[dst..dst + di * inner].copy_from_slice(&d[src..src + di * inner]);
                }
                contribs[idx] = Some(g);
                offset += di;
            }
        }
        Op::Slice { axis, start, len } => {
            let shape = ins[0].shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let dd = shape[*axis];
            let mut g = vec![0.0f32; ins[0].numel()];
            for o in 0..outer {
                let dst = (o * dd + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
            }
            contribs[0] = Some(g);
        }
        Op::Reshape { .. } => {
            contribs[0] = Some(d.to_vec());
        }
        Op::Roll { axis, shift } => {
            let shape = ins[0].shape();
            let dd = shape[*axis];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let mut g = vec![0.0f32; ins[0].numel()];
            for o in 0..outer {
                for i in 0..dd {
                    let src_idx = (o * dd + i) * inner;
                    let dst_idx = (o * dd + (i + shift) % dd) * inner;
                    for t in 0..inner {
                        g[dst_idx + t] += d[src_idx + t];
                    }
                }
            }
            contribs[0] = Some(g);
        }
        Op::CumsumExclusive => {
            let (r, s) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut g = vec![0.0f32; r * s];
            for i in 0..r {
                let mut acc = 0.0f32;
                for j in (0..s).rev() {
                    g[i * s + j] = acc;
                    acc += d[i * s + j];
                }
            }
            contribs[0] = Some(g);
        }
        Op::RowSums => {
            let (r, s) = (ins[0].shape()[0], ins[0].shape()[1]);
            let mut g = vec![0.0f32; r * s];
            for i in 0..r {
                let dv = d[i];
                for j in 0..s {
                    g[i * s + j] = dv;
                }
            }
            contribs[0] = Some(g);
        }
    }
}

fn zipmul(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    d: &[f32],
    needed: &[bool],
    contribs: &mut [Option<Vec<f32>>],
) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);

    let mut dx = vec![0.0f32; ci * h * wd];
    let mut dw = vec![0.0f32; w.numel()];
    let mut db = vec![0.0f32; co];

    for oc in 0..co {
        let dp = &d[oc * h * wd..(oc + 1) * h * wd];
        db[oc] = dp.iter().sum();
        for ic in 0..ci {
            let ip = &x.data()[ic * h * wd..(ic + 1) * h * wd];
            let xp = &mut dx[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..kh {
                let dy = ky as isize - ph as isize;
                for kx in 0..kw {
                    let dxo = kx as isize - pw as isize;
                    let widx = ((oc * ci + ic) * kh + ky) * kw + kx;
                    let wv = w.data()[widx];
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy.max(0)) as usize;
                    let x_lo = (-dxo).max(0) as usize;
                    let x_hi = (wd as isize - dxo.max(0)) as usize;
                    let mut wacc = 0.0f32;
                    for y in y_lo..y_hi {
                        let src_off = (y as isize + dy) as usize * wd + (x_lo as isize + dxo) as usize;
                        let dst_off = y * wd + x_lo;
                        let count = x_hi - x_lo;
                        let src = &ip[src_off..src_off + count];
                        let drow = &dp[dst_off..dst_off + count];
                        if needed[1] {
                            // dw accumulation: dot of input and output grad rows
                            let mut acc = 0.0f32;
                            for t in 0..count {
                                acc += src[t] * drow[t];
                            }
                            wacc += acc;
                        }
                        // dx scatter: w * dout into the shifted input row
                        if needed[0] && wv != 0.0 {
                            let xrow = &mut xp[src_off..src_off + count];
                            for t in 0..count {
                                xrow[t] += wv * drow[t];
                            }
                        }
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }
    if needed[0] {
        contribs[0] = Some(dx);
    }
    if needed[1] {
        contribs[1] = Some(dw);
    }
    contribs[2] = Some(db);
}

fn concat_forward(ins: &[&Tensor], axis: usize) -> Result<Tensor> {
    if ins.is_empty() {
        return Err(Error::InvalidArgument("concat: no inputs".into()));
    }
    let first = ins[0].shape();
    if axis >= first.len() {
        return Err(Error::InvalidArgument(format!(
            "concat: axis {axis} out of range for {first:?}"
        )));
    }
    let mut total = 0usize;
    for t in ins {
        let s = t.shape();
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(first.iter())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape_mismatch(
                "concat",
                format!("{first:?} (except axis {axis})"),
                format!("{s:?}"),
            ));
        }
        total += s[axis];
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out = vec![0.0f32; outer * total * inner];
    let mut offset = 0usize;
    for t in ins {
        let di = t.shape()[axis];
        for o in 0..outer {
            let src = o * di * inner;
            let dst = (o * total + offset) * inner;
            out[dst..dst + di * inner].copy_from_slice(&t.data()[src..src + di * inner]);
        }
        offset += di;
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}
