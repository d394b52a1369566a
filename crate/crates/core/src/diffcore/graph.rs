//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. Backward walks
//! the nodes in exact reverse append order, so the append order is the
//! topological order. Parameters enter the graph as leaves that copy their
//! current value out of a [`ParamStore`]; backward accumulates into the
//! store's gradient slots and never zeroes them.

use rayon::prelude::*;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Probability clamp applied before the logarithms in [`Graph::bce_loss`].
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Mul,
}

/// Vector-Jacobian product for a user-supplied unary operation:
/// `(input, output, upstream) -> gradient w.r.t. input`.
pub type CustomVjp = Box<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64> + Send + Sync>;

enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeometry,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat {
        a: NodeId,
        b: NodeId,
        rows: usize,
        left: usize,
        right: usize,
    },
    Narrow {
        input: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    GlobalAvgPool {
        input: NodeId,
        area: usize,
    },
    Sum(NodeId),
    Bce {
        pred: NodeId,
        target: Tensor,
        mask: Option<Tensor>,
        count: f64,
    },
    Custom {
        input: NodeId,
        vjp: CustomVjp,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Sum(_) => "sum",
            Op::Bce { .. } => "bce_loss",
            Op::Custom { .. } => "custom",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Concat { a, b, .. } => vec![*a, *b],
            Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Scale(x, _)
            | Op::Reshape(x)
            | Op::Sum(x) => vec![*x],
            Op::Narrow { input, .. }
            | Op::GlobalAvgPool { input, .. }
            | Op::Custom { input, .. } => vec![*input],
            Op::Bce { pred, .. } => vec![*pred],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch() * p];
        for c in 0..self.c_in {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let r = (c * self.kh + dy) * self.kw + dx;
                    let row = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + dy) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + dx) as isize - self.pad_w as isize;
                            if ix >= 0 && ix < self.w as isize {
                                row[oy * self.w_out + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx_out: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let r = (c * self.kh + dy) * self.kw + dx;
                    let row = &cols[r * p..(r + 1) * p];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + dy) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx_out[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + dx) as isize - self.pad_w as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
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

fn accumulate(slot: &mut Option<Vec<f64>>, grad: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
        None => *slot = Some(grad),
    }
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Operation kind and input ids of a node, for inspection.
    pub fn describe(&self, id: NodeId) -> (&'static str, Vec<NodeId>) {
        let op = &self.nodes[id.0].op;
        (op.kind(), op.inputs())
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => op.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), store.value(id).clone())
    }

    /// Copy of a node's value that gradients do not flow through.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.nodes[id.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {:?} and {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Adds a `[n]` bias to every row of an `[m×n]` input.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Shape(format!("add_bias of {:?} and {:?}", sx, sb)));
        }
        let n = sb[0];
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for row in out.chunks_mut(n.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(Op::AddBias(x, bias), value))
    }

    /// Zero-padded cross-correlation with odd kernels.
    ///
    /// `input` is `[c_in×h×w]` or batched `[b×c_in×h×w]`; `kernels` is
    /// `[c_out×c_in×kh×kw]`. Padding is `(k−1)/2` on each side.
    pub fn conv2d(&mut self, input: NodeId, kernels: NodeId, stride: usize) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        let (batch, c_in, h, w) = match si.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => return Err(Error::Shape(format!("conv2d input of shape {:?}", si))),
        };
        let [c_out, kc, kh, kw] = sk.as_slice() else {
            return Err(Error::Shape(format!("conv2d kernels of shape {:?}", sk)));
        };
        let (c_out, kh, kw) = (*c_out, *kh, *kw);
        if *kc != c_in {
            return Err(Error::Shape(format!(
                "conv2d input {:?} has {} channels, kernels {:?} expect {}",
                si, c_in, sk, kc
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Unsupported(format!(
                "even kernel size {}×{}; only odd kernels are supported",
                kh, kw
            )));
        }
        if stride == 0 {
            return Err(Error::Unsupported("conv2d stride must be positive".into()));
        }
        let (pad_h, pad_w) = ((kh - 1) / 2, (kw - 1) / 2);
        if kh > h + 2 * pad_h || kw > w + 2 * pad_w {
            return Err(Error::Shape(format!("kernel {:?} larger than input {:?}", sk, si)));
        }
        let geom = ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            h_out: (h + 2 * pad_h - kh) / stride + 1,
            w_out: (w + 2 * pad_w - kw) / stride + 1,
        };
        let x = self.value(input).data();
        let k = self.value(kernels).data();
        let in_len = c_in * h * w;
        let out_len = c_out * geom.positions();
        let mut out = vec![0.0; batch * out_len];
        out.par_chunks_mut(out_len.max(1))
            .zip(x.par_chunks(in_len.max(1)))
            .for_each(|(o, xb)| {
                let cols = geom.im2col(xb);
                gemm_nn(c_out, geom.patch(), geom.positions(), k, &cols, o);
            });
        let shape = if si.len() == 3 {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, c_out, geom.h_out, geom.w_out]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel: kernels,
                geom,
            },
            value,
        ))
    }

    /// Unified entry point for the pointwise operations.
    pub fn elementwise(&mut self, kind: ElementwiseKind, operands: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            ElementwiseKind::Sigmoid | ElementwiseKind::Tanh | ElementwiseKind::Relu => 1,
            ElementwiseKind::Add | ElementwiseKind::Mul => 2,
        };
        if operands.len() != arity {
            return Err(Error::Contract(format!(
                "{:?} takes {} operand(s), got {}",
                kind,
                arity,
                operands.len()
            )));
        }
        match kind {
            ElementwiseKind::Sigmoid => Ok(self.sigmoid(operands[0])),
            ElementwiseKind::Tanh => Ok(self.tanh(operands[0])),
            ElementwiseKind::Relu => Ok(self.relu(operands[0])),
            ElementwiseKind::Add => self.add(operands[0], operands[1]),
            ElementwiseKind::Mul => self.mul(operands[0], operands[1]),
        }
    }

    fn map_unary(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        Tensor::new(src.shape().to_vec(), data).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.map_unary(x, |a| if a > 0.0 { a } else { 0.0 });
        self.push(Op::Relu(x), v)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.map_unary(x, |a| a * factor);
        self.push(Op::Scale(x, factor), v)
    }

    fn zip_binary(&self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "{} of {:?} and {:?}",
                name,
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// Concatenation along the feature axis: rank-1 `[m] ⧺ [n]`, or
    /// batched rank-2 `[b×m] ⧺ [b×n]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (rows, left, right, shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m], [n]) => (1, *m, *n, vec![m + n]),
            ([r1, m], [r2, n]) if r1 == r2 => (*r1, *m, *n, vec![*r1, m + n]),
            _ => {
                return Err(Error::Shape(format!("concat of {:?} and {:?}", sa, sb)));
            }
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (left + right));
        for r in 0..rows {
            out.extend_from_slice(&da[r * left..(r + 1) * left]);
            out.extend_from_slice(&db[r * right..(r + 1) * right]);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Concat {
                a,
                b,
                rows,
                left,
                right,
            },
            value,
        ))
    }

    /// Columns `[start, start+len)` of an `[m×n]` input.
    pub fn narrow(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Shape(format!(
                "narrow [{}, {}) of {:?}",
                start,
                start + len,
                s
            )));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        Ok(self.push(Op::Narrow { input: x, start, len }, value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Mean over the spatial axes: `[c×h×w] → [c]`, `[b×c×h×w] → [b×c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let (out_shape, area) = match s.as_slice() {
            [c, h, w] => (vec![*c], h * w),
            [b, c, h, w] => (vec![*b, *c], h * w),
            _ => return Err(Error::Shape(format!("global_avg_pool of {:?}", s))),
        };
        let src = self.value(x).data();
        let out: Vec<f64> = src
            .chunks(area.max(1))
            .map(|plane| plane.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::GlobalAvgPool { input: x, area }, value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(total))
    }

    /// Mean binary cross-entropy over unmasked entries.
    ///
    /// Predictions are clamped to `[ε, 1−ε]` before the logarithms; entries
    /// outside that interval receive zero gradient.
    pub fn bce_loss(&mut self, pred: NodeId, target: &Tensor, mask: Option<&Tensor>) -> Result<NodeId> {
        let sp = self.shape(pred).to_vec();
        if sp != target.shape() {
            return Err(Error::Shape(format!(
                "bce predictions {:?} vs targets {:?}",
                sp,
                target.shape()
            )));
        }
        if let Some(m) = mask {
            if m.shape() != sp.as_slice() {
                return Err(Error::Shape(format!("bce predictions {:?} vs mask {:?}", sp, m.shape())));
            }
        }
        let p = self.value(pred).data();
        let y = target.data();
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..p.len() {
            let m = mask.map_or(1.0, |m| m.data()[i]);
            if m == 0.0 {
                continue;
            }
            let pc = p[i].clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            total += -(y[i] * pc.ln() + (1.0 - y[i]) * (1.0 - pc).ln()) * m;
            count += m;
        }
        if count == 0.0 {
            return Err(Error::DegenerateBatch);
        }
        let value = Tensor::scalar(total / count);
        Ok(self.push(
            Op::Bce {
                pred,
                target: target.clone(),
                mask: mask.cloned(),
                count,
            },
            value,
        ))
    }

    /// Unary operation with a caller-supplied value and backward rule.
    pub fn custom_unary(&mut self, x: NodeId, forward: impl Fn(f64) -> f64, vjp: CustomVjp) -> NodeId {
        let v = self.map_unary(x, forward);
        self.push(Op::Custom { input: x, vjp }, v)
    }

    /// Backpropagates from a scalar node and accumulates every reachable
    /// parameter's gradient into `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (input, grad) in self.vjp(node, &upstream)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], grad);
                }
            }
            if let Op::Param(pid) = node.op {
                if upstream.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Contract(format!(
                        "non-finite gradient for parameter {}",
                        store.qualified_name(pid)
                    )));
                }
                store.accumulate_grad(pid, &upstream)?;
            }
        }
        Ok(())
    }

    fn vjp(&self, node: &Node, up: &[f64]) -> Result<Vec<(NodeId, Vec<f64>)>> {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let out = node.value.data();
        Ok(match &node.op {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut res = Vec::new();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, up, val(*b), &mut da);
                    res.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, val(*a), up, &mut db);
                    res.push((*b, db));
                }
                res
            }
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut db = vec![0.0; n];
                for row in up.chunks(n.max(1)) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                vec![(*x, up.to_vec()), (*b, db)]
            }
            Op::Conv2d { input, kernel, geom } => self.conv_vjp(*input, *kernel, geom, up),
            Op::Sigmoid(x) => {
                let g = up.iter().zip(out).map(|(u, s)| u * s * (1.0 - s)).collect();
                vec![(*x, g)]
            }
            Op::Tanh(x) => {
                let g = up.iter().zip(out).map(|(u, t)| u * (1.0 - t * t)).collect();
                vec![(*x, g)]
            }
            Op::Relu(x) => {
                let g = up
                    .iter()
                    .zip(val(*x))
                    .map(|(u, v)| if *v > 0.0 { *u } else { 0.0 })
                    .collect();
                vec![(*x, g)]
            }
            Op::Add(a, b) => vec![(*a, up.to_vec()), (*b, up.to_vec())],
            Op::Sub(a, b) => vec![(*a, up.to_vec()), (*b, up.iter().map(|u| -u).collect())],
            Op::Mul(a, b) => {
                let mut res = Vec::new();
                if needs(*a) {
                    res.push((*a, up.iter().zip(val(*b)).map(|(u, y)| u * y).collect()));
                }
                if needs(*b) {
                    res.push((*b, up.iter().zip(val(*a)).map(|(u, x)| u * x).collect()));
                }
                res
            }
            Op::Scale(x, f) => vec![(*x, up.iter().map(|u| u * f).collect())],
            Op::Concat {
                a,
                b,
                rows,
                left,
                right,
            } => {
                let width = left + right;
                let mut ga = Vec::with_capacity(rows * left);
                let mut gb = Vec::with_capacity(rows * right);
                for r in 0..*rows {
                    ga.extend_from_slice(&up[r * width..r * width + left]);
                    gb.extend_from_slice(&up[r * width + left..(r + 1) * width]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Narrow { input, start, len } => {
                let s = self.shape(*input);
                let (m, n) = (s[0], s[1]);
                let mut g = vec![0.0; m * n];
                for r in 0..m {
                    g[r * n + start..r * n + start + len].copy_from_slice(&up[r * len..(r + 1) * len]);
                }
                vec![(*input, g)]
            }
            Op::Reshape(x) => vec![(*x, up.to_vec())],
            Op::GlobalAvgPool { input, area } => {
                let mut g = Vec::with_capacity(up.len() * area);
                for u in up {
                    let share = u / *area as f64;
                    g.extend(std::iter::repeat_n(share, *area));
                }
                vec![(*input, g)]
            }
            Op::Sum(x) => vec![(*x, vec![up[0]; self.nodes[x.0].value.len()])],
            Op::Bce {
                pred,
                target,
                mask,
                count,
            } => {
                let p = val(*pred);
                let y = target.data();
                let scale = up[0] / count;
                let g = (0..p.len())
                    .map(|i| {
                        let m = mask.as_ref().map_or(1.0, |m| m.data()[i]);
                        if m == 0.0 || p[i] < BCE_EPSILON || p[i] > 1.0 - BCE_EPSILON {
                            return 0.0;
                        }
                        scale * m * (-y[i] / p[i] + (1.0 - y[i]) / (1.0 - p[i]))
                    })
                    .collect();
                vec![(*pred, g)]
            }
            Op::Custom { input, vjp } => {
                vec![(*input, vjp(&self.nodes[input.0].value, &node.value, up))]
            }
        })
    }

    fn conv_vjp(&self, input: NodeId, kernel: NodeId, geom: &ConvGeometry, up: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let need_x = self.requires_grad(input);
        let need_k = self.requires_grad(kernel);
        let in_len = geom.c_in * geom.h * geom.w;
        let out_len = geom.c_out * geom.positions();
        let (patch, positions) = (geom.patch(), geom.positions());

        // Per-sample partials are reduced in sample order afterwards, so the
        // kernel gradient does not depend on the thread count.
        let partials: Vec<_> = (0..geom.batch)
            .into_par_iter()
            .map(|b| {
                let xb = &x[b * in_len..(b + 1) * in_len];
                let ub = &up[b * out_len..(b + 1) * out_len];
                let dk = need_k.then(|| {
                    let cols = geom.im2col(xb);
                    let mut dk = vec![0.0; geom.c_out * patch];
                    gemm_nt(geom.c_out, positions, patch, ub, &cols, &mut dk);
                    dk
                });
                let dx = need_x.then(|| {
                    let mut dcols = vec![0.0; patch * positions];
                    gemm_tn(patch, geom.c_out, positions, k, ub, &mut dcols);
                    let mut dx = vec![0.0; in_len];
                    geom.col2im(&dcols, &mut dx);
                    dx
                });
                (dk, dx)
            })
            .collect();

        let mut res = Vec::new();
        if need_x {
            let mut dx = Vec::with_capacity(geom.batch * in_len);
            for (_, part) in &partials {
                dx.extend_from_slice(part.as_ref().expect("computed"));
            }
            res.push((input, dx));
        }
        if need_k {
            let mut dk = vec![0.0; geom.c_out * patch];
            for (part, _) in &partials {
                dk.iter_mut()
                    .zip(part.as_ref().expect("computed"))
                    .for_each(|(a, g)| *a += g);
            }
            res.push((kernel, dk));
        }
        res
    }
}
