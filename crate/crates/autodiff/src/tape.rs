//! Eager Wengert tape.
//!
//! Every primitive evaluates immediately and appends a node. Backward passes
//! record their adjoint computations as ordinary nodes on the same tape, so a
//! gradient is itself differentiable (reverse-over-reverse).

use crate::error::{AdError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul { ta: bool, tb: bool },
    Add,
    Mul,
    Affine { scale: f32, shift: f32 },
    Relu,
    Sigmoid,
    Sqrt,
    Recip,
    Reshape,
    Sum,
    Mean,
    Fill,
    BroadcastChannels { n: usize, s: usize },
    SumChannels { n: usize, c: usize, s: usize },
    Conv2d { pad: usize },
    Conv2dInputGrad { pad: usize, h: usize, w: usize },
    Conv2dKernelGrad { pad: usize, kh: usize, kw: usize },
    FakeQuant { scale: f32, bits: u32 },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::Recip => "recip",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Fill => "fill",
            Op::BroadcastChannels { .. } => "broadcast_channels",
            Op::SumChannels { .. } => "sum_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dKernelGrad { .. } => "conv2d_kernel_grad",
            Op::FakeQuant { .. } => "fake_quant",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    tracked: bool,
}

/// Ordered record of primitive evaluations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AdError::shape(op, format!("expected a matrix, got shape {:?}", s))),
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(AdError::shape(op, format!("expected rank 4, got shape {:?}", s))),
    }
}

/// Evaluates a primitive from its input values. Shared by recording and replay.
fn eval(op: &Op, inputs: &[&Tensor], out_shape: Option<&[usize]>) -> Result<Tensor> {
    let name = op.name();
    let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
        if a.shape() != b.shape() {
            Err(AdError::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())))
        } else {
            Ok(())
        }
    };
    let t = match op {
        Op::Leaf | Op::Constant => unreachable!("leaves are not evaluated"),
        Op::MatMul { ta, tb } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (sa, sb) = (dims2(a, name)?, dims2(b, name)?);
            let k_a = if *ta { sa.0 } else { sa.1 };
            let k_b = if *tb { sb.1 } else { sb.0 };
            if k_a != k_b {
                return Err(AdError::shape(
                    name,
                    format!("inner dims differ: {:?}{} x {:?}{}", sa, if *ta { "^T" } else { "" }, sb, if *tb { "^T" } else { "" }),
                ));
            }
            let (data, (m, n)) = kernels::matmul(a.data(), sa, b.data(), sb, *ta, *tb);
            Tensor::new(vec![m, n], data)?
        }
        Op::Add => {
            same_shape(inputs[0], inputs[1])?;
            Tensor::new(inputs[0].shape().to_vec(), kernels::add(inputs[0].data(), inputs[1].data()))?
        }
        Op::Mul => {
            same_shape(inputs[0], inputs[1])?;
            Tensor::new(inputs[0].shape().to_vec(), kernels::mul(inputs[0].data(), inputs[1].data()))?
        }
        Op::Affine { scale, shift } => {
            Tensor::new(inputs[0].shape().to_vec(), kernels::affine(inputs[0].data(), *scale, *shift))?
        }
        Op::Relu => Tensor::new(inputs[0].shape().to_vec(), kernels::relu(inputs[0].data()))?,
        Op::Sigmoid => Tensor::new(inputs[0].shape().to_vec(), kernels::sigmoid(inputs[0].data()))?,
        Op::Sqrt => Tensor::new(
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v.sqrt()).collect(),
        )?,
        Op::Recip => Tensor::new(
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| 1.0 / v).collect(),
        )?,
        Op::Reshape => Tensor::new(out_shape.expect("reshape target").to_vec(), inputs[0].data().to_vec())?,
        Op::Sum => Tensor::scalar(kernels::sum(inputs[0].data())),
        Op::Mean => Tensor::scalar(kernels::mean(inputs[0].data())),
        Op::Fill => {
            if inputs[0].len() != 1 {
                return Err(AdError::shape(name, "fill source must be a scalar"));
            }
            Tensor::filled(out_shape.expect("fill target").to_vec(), inputs[0].item())
        }
        Op::BroadcastChannels { n, s } => {
            let shape = out_shape.expect("broadcast target").to_vec();
            let data = kernels::broadcast_channels(inputs[0].data(), *n, *s);
            Tensor::new(shape, data)?
        }
        Op::SumChannels { n, c, s } => {
            if inputs[0].len() != n * c * s {
                return Err(AdError::shape(name, format!("{:?} is not {}x{}x{}", inputs[0].shape(), n, c, s)));
            }
            Tensor::vector(kernels::sum_channels(inputs[0].data(), *n, *c, *s))
        }
        Op::Conv2d { pad } => {
            let (x, k) = (inputs[0], inputs[1]);
            let [nb, ci, h, w] = dims4(x, name)?;
            let [co, ci2, kh, kw] = dims4(k, name)?;
            if ci != ci2 || h + 2 * pad < kh || w + 2 * pad < kw {
                return Err(AdError::shape(name, format!("input {:?} kernel {:?}", x.shape(), k.shape())));
            }
            let g = ConvGeom { batch: nb, in_ch: ci, out_ch: co, h, w, kh, kw, pad: *pad };
            Tensor::new(vec![nb, co, g.out_h(), g.out_w()], kernels::conv2d(x.data(), k.data(), &g))?
        }
        Op::Conv2dInputGrad { pad, h, w } => {
            let (dy, k) = (inputs[0], inputs[1]);
            let [nb, co, oh, ow] = dims4(dy, name)?;
            let [co2, ci, kh, kw] = dims4(k, name)?;
            let g = ConvGeom { batch: nb, in_ch: ci, out_ch: co, h: *h, w: *w, kh, kw, pad: *pad };
            if co != co2 || g.out_h() != oh || g.out_w() != ow {
                return Err(AdError::shape(name, format!("grad {:?} kernel {:?}", dy.shape(), k.shape())));
            }
            Tensor::new(vec![nb, ci, *h, *w], kernels::conv2d_input_grad(dy.data(), k.data(), &g))?
        }
        Op::Conv2dKernelGrad { pad, kh, kw } => {
            let (x, dy) = (inputs[0], inputs[1]);
            let [nb, ci, h, w] = dims4(x, name)?;
            let [nb2, co, oh, ow] = dims4(dy, name)?;
            let g = ConvGeom { batch: nb, in_ch: ci, out_ch: co, h, w, kh: *kh, kw: *kw, pad: *pad };
            if nb != nb2 || g.out_h() != oh || g.out_w() != ow {
                return Err(AdError::shape(name, format!("input {:?} grad {:?}", x.shape(), dy.shape())));
            }
            Tensor::new(vec![co, ci, *kh, *kw], kernels::conv2d_kernel_grad(x.data(), dy.data(), &g))?
        }
        Op::FakeQuant { scale, bits } => {
            Tensor::new(inputs[0].shape().to_vec(), kernels::fake_quant(inputs[0].data(), *scale, *bits))?
        }
    };
    Ok(t)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Whether the node participates in differentiation.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push_raw(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: op.name(), node: id });
        }
        let tracked = matches!(op, Op::Leaf) || inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { op, inputs, value, tracked });
        Ok(Var(id))
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, out_shape: Option<&[usize]>) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            eval(&op, &vals, out_shape)?
        };
        self.push_raw(op, inputs, value)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_raw(Op::Leaf, Vec::new(), value)
    }

    /// Input that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_raw(Op::Constant, Vec::new(), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.push(Op::MatMul { ta, tb }, vec![a, b], None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add, vec![a, b], None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -1.0, 0.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul, vec![a, b], None)
    }

    /// Elementwise `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f32, shift: f32) -> Result<Var> {
        self.push(Op::Affine { scale, shift }, vec![a], None)
    }

    pub fn scale(&mut self, a: Var, scale: f32) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu, vec![a], None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid, vec![a], None)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt, vec![a], None)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Recip, vec![a], None)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(AdError::shape("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        self.push(Op::Reshape, vec![a], Some(&shape))
    }

    /// Reshapes `[n, ...]` to `[n, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = s.first().copied().unwrap_or(1);
        let rest: usize = s.iter().skip(1).product();
        self.reshape(a, vec![n, rest])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum, vec![a], None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(AdError::shape("mean", "empty tensor"));
        }
        self.push(Op::Mean, vec![a], None)
    }

    /// Broadcasts a scalar to `shape`.
    pub fn fill(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Fill, vec![a], Some(&shape))
    }

    /// Repeats a `[c]` vector into `shape`, whose leading dim is the batch and
    /// second dim is `c`; trailing dims are treated as one flat spatial axis.
    pub fn broadcast_channels(&mut self, v: Var, shape: Vec<usize>) -> Result<Var> {
        let c = self.value(v).len();
        if self.value(v).rank() != 1 || shape.len() < 2 || shape[1] != c {
            return Err(AdError::shape(
                "broadcast_channels",
                format!("{:?} into {:?}", self.shape(v), shape),
            ));
        }
        let n = shape[0];
        let s: usize = shape[2..].iter().product();
        self.push(Op::BroadcastChannels { n, s }, vec![v], Some(&shape))
    }

    /// Sums `[n, c, ...]` to `[c]`.
    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(AdError::shape("sum_channels", format!("{:?}", shape)));
        }
        let s: usize = shape[2..].iter().product();
        self.push(Op::SumChannels { n: shape[0], c: shape[1], s }, vec![x], None)
    }

    /// Stride-1 convolution with `pad` zeros on every side.
    pub fn conv2d(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        self.push(Op::Conv2d { pad }, vec![x, k], None)
    }

    fn conv2d_input_grad(&mut self, dy: Var, k: Var, pad: usize, h: usize, w: usize) -> Result<Var> {
        self.push(Op::Conv2dInputGrad { pad, h, w }, vec![dy, k], None)
    }

    fn conv2d_kernel_grad(&mut self, x: Var, dy: Var, pad: usize, kh: usize, kw: usize) -> Result<Var> {
        self.push(Op::Conv2dKernelGrad { pad, kh, kw }, vec![x, dy], None)
    }

    /// Fake quantization with a clipped straight-through backward.
    pub fn fake_quant(&mut self, w: Var, scale: f32, bits: u32) -> Result<Var> {
        if !(scale > 0.0) || !(2..=16).contains(&bits) {
            return Err(AdError::shape("fake_quant", format!("invalid scale {} or bits {}", scale, bits)));
        }
        self.push(Op::FakeQuant { scale, bits }, vec![w], None)
    }

    /// `mean((pred - target)^2)` over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// `sum(a * b)`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(AdError::State(
                "tape was consumed by a first-order gradient pass; its backward caches are gone".into(),
            ))
        } else {
            Ok(())
        }
    }

    /// Records the gradient of the scalar `output` with respect to `wrt`.
    ///
    /// The adjoint computations are appended to this tape, so the returned
    /// nodes can be differentiated again. Inputs `output` does not depend on
    /// get a zero constant.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check_live()?;
        if self.value(output).len() != 1 {
            return Err(AdError::shape("grad", format!("output must be scalar, got {:?}", self.shape(output))));
        }
        let end = output.0;
        // nodes on some path from a `wrt` node
        let mut needed = vec![false; end + 1];
        for v in wrt {
            if v.0 <= end {
                needed[v.0] = true;
            }
        }
        for i in 0..=end {
            if !needed[i] && self.nodes[i].inputs.iter().any(|v| needed[v.0]) {
                needed[i] = true;
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end + 1];
        if needed[end] {
            let seed = self.constant(Tensor::filled(self.shape(output).to_vec(), 1.0))?;
            adjoint[end] = Some(seed);
        }
        for i in (0..=end).rev() {
            let Some(g) = adjoint[i] else { continue };
            let node_inputs = self.nodes[i].inputs.clone();
            if !node_inputs.iter().any(|v| needed[v.0]) {
                continue;
            }
            let contributions = self.backward_node(i, g, &needed)?;
            for (inp, c) in node_inputs.into_iter().zip(contributions) {
                let Some(c) = c else { continue };
                adjoint[inp.0] = Some(match adjoint[inp.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        wrt.iter()
            .map(|v| match adjoint.get(v.0).copied().flatten() {
                Some(g) => Ok(g),
                None => self.constant(Tensor::zeros(self.shape(*v).to_vec())),
            })
            .collect()
    }

    /// First-order gradient values. Discards the backward caches afterwards;
    /// any later differentiation on this tape is a state error.
    pub fn gradient(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let forward_len = self.nodes.len();
        let grads = self.grad(output, wrt)?;
        let values = grads.iter().map(|g| self.value(*g).clone()).collect();
        self.nodes.truncate(forward_len);
        self.consumed = true;
        Ok(values)
    }

    /// Vector-Jacobian contributions of node `i` for upstream adjoint `g`.
    fn backward_node(&mut self, i: usize, g: Var, needed: &[bool]) -> Result<Vec<Option<Var>>> {
        let op = self.nodes[i].op.clone();
        let inputs = self.nodes[i].inputs.clone();
        let me = Var(i);
        let want = |k: usize| needed[inputs[k].0];
        let mut out: Vec<Option<Var>> = vec![None; inputs.len()];
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                if want(0) {
                    out[0] = Some(if !ta { self.matmul(g, b, false, !tb)? } else { self.matmul(b, g, tb, true)? });
                }
                if want(1) {
                    out[1] = Some(if !tb { self.matmul(a, g, !ta, false)? } else { self.matmul(g, a, true, ta)? });
                }
            }
            Op::Add => {
                if want(0) {
                    out[0] = Some(g);
                }
                if want(1) {
                    out[1] = Some(g);
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if want(0) {
                    out[0] = Some(self.mul(g, b)?);
                }
                if want(1) {
                    out[1] = Some(self.mul(g, a)?);
                }
            }
            Op::Affine { scale, .. } => {
                out[0] = Some(self.affine(g, scale, 0.0)?);
            }
            Op::Relu => {
                // second derivative is zero everywhere, so the mask is a constant
                let mask = kernels::relu_mask(self.value(inputs[0]).data());
                let m = self.constant(Tensor::new(self.shape(inputs[0]).to_vec(), mask)?)?;
                out[0] = Some(self.mul(g, m)?);
            }
            Op::Sigmoid => {
                let one_minus = self.affine(me, -1.0, 1.0)?;
                let deriv = self.mul(me, one_minus)?;
                out[0] = Some(self.mul(g, deriv)?);
            }
            Op::Sqrt => {
                let r = self.recip(me)?;
                let half = self.affine(r, 0.5, 0.0)?;
                out[0] = Some(self.mul(g, half)?);
            }
            Op::Recip => {
                let sq = self.mul(me, me)?;
                let neg = self.affine(sq, -1.0, 0.0)?;
                out[0] = Some(self.mul(g, neg)?);
            }
            Op::Reshape => {
                let shape = self.shape(inputs[0]).to_vec();
                out[0] = Some(self.reshape(g, shape)?);
            }
            Op::Sum => {
                let shape = self.shape(inputs[0]).to_vec();
                out[0] = Some(self.fill(g, shape)?);
            }
            Op::Mean => {
                let shape = self.shape(inputs[0]).to_vec();
                let n = self.value(inputs[0]).len();
                let scaled = self.affine(g, (1.0 / n as f64) as f32, 0.0)?;
                out[0] = Some(self.fill(scaled, shape)?);
            }
            Op::Fill => {
                let total = self.sum(g)?;
                let shape = self.shape(inputs[0]).to_vec();
                out[0] = Some(if shape.is_empty() { total } else { self.reshape(total, shape)? });
            }
            Op::BroadcastChannels { .. } => {
                out[0] = Some(self.sum_channels(g)?);
            }
            Op::SumChannels { .. } => {
                let shape = self.shape(inputs[0]).to_vec();
                out[0] = Some(self.broadcast_channels(g, shape)?);
            }
            Op::Conv2d { pad } => {
                let (x, k) = (inputs[0], inputs[1]);
                let [_, _, h, w] = dims4(self.value(x), "conv2d")?;
                let [_, _, kh, kw] = dims4(self.value(k), "conv2d")?;
                if want(0) {
                    out[0] = Some(self.conv2d_input_grad(g, k, pad, h, w)?);
                }
                if want(1) {
                    out[1] = Some(self.conv2d_kernel_grad(x, g, pad, kh, kw)?);
                }
            }
            Op::Conv2dInputGrad { pad, .. } => {
                let (dy, k) = (inputs[0], inputs[1]);
                let [_, _, kh, kw] = dims4(self.value(k), "conv2d_input_grad")?;
                if want(0) {
                    out[0] = Some(self.conv2d(g, k, pad)?);
                }
                if want(1) {
                    out[1] = Some(self.conv2d_kernel_grad(g, dy, pad, kh, kw)?);
                }
            }
            Op::Conv2dKernelGrad { pad, .. } => {
                let (x, dy) = (inputs[0], inputs[1]);
                let [_, _, h, w] = dims4(self.value(x), "conv2d_kernel_grad")?;
                if want(0) {
                    out[0] = Some(self.conv2d_input_grad(dy, g, pad, h, w)?);
                }
                if want(1) {
                    out[1] = Some(self.conv2d(x, g, pad)?);
                }
            }
            Op::FakeQuant { scale, bits } => {
                let mask = kernels::ste_mask(self.value(inputs[0]).data(), scale, bits);
                let m = self.constant(Tensor::new(self.shape(inputs[0]).to_vec(), mask)?)?;
                out[0] = Some(self.mul(g, m)?);
            }
        }
        Ok(out)
    }

    /// Re-evaluates every recorded node from its recorded inputs.
    ///
    /// Returns the first node whose recomputed value differs, if any.
    pub fn replay_mismatch(&self) -> Result<Option<usize>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                _ => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|v| &values[v.0]).collect();
                    eval(&node.op, &ins, Some(node.value.shape()))?
                }
            };
            let same = v.shape() == node.value.shape()
                && v.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(Some(i));
            }
            values.push(v);
        }
        Ok(None)
    }
}
