//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node to the [`Graph`]; node ids are indices into
//! the tape, so inputs always precede outputs and replaying the tape in
//! reverse index order is a valid topological order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on every side.
    Same,
    Valid,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox * stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        range_for(self.ow, self.w, self.stride, kx, self.pad)
    }

    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        range_for(self.oh, self.h, self.stride, ky, self.pad)
    }
}

fn range_for(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= in_len - 1
    let hi = if in_len + pad < k + 1 {
        0
    } else {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Exp(NodeId),
    Clamp(NodeId, f64, f64),
    LnFloor(NodeId, f64),
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    ChannelMul(NodeId, NodeId),
    SpatialMul(NodeId, NodeId),
    Softmax(NodeId),
    Gather(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
        /// Per-element weights already divided by their sum.
        coef: Vec<f64>,
    },
    Iou {
        pred: NodeId,
        gt: [f64; 4],
    },
    CenterPenalty {
        pred: NodeId,
        gt: [f64; 4],
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf created with `requires_grad`; `None` for anything else.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if xs.len() != 3 {
            return Err(Error::shape("conv2d", format!("input must be [c, h, w], got {xs:?}")));
        }
        if ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [c_out, c_in, k, k], got {ks:?}"),
            ));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ks[0], ks[2]);
        if ks[1] != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: kernel expects {}, input has {c_in}", ks[1]),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel size must be odd, got {k}")));
        }
        if bs != [c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias must be [{c_out}], got {bs:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let pad = padding.amount(k);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("spatial size {h}x{w} smaller than kernel {k}"),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        let out = conv_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new(vec![c_out, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &[input, kernel, bias],
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn offset(&mut self, a: NodeId, shift: f64) -> NodeId {
        self.unary(a, Op::Offset(a), |x| x + shift)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Elementwise clamp; zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `ln(max(x, floor))`.
    pub fn ln_floor(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.unary(a, Op::LnFloor(a, floor), |x| x.max(floor).ln())
    }

    /// 2x2 max pooling with stride 2. Ties go to the lowest flat index.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.shape(input);
        if xs.len() != 3 || xs[1] < 2 || xs[2] < 2 {
            return Err(Error::shape("max_pool2", format!("need [c, h>=2, w>=2], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    argmax.push(best);
                    out.push(x[best]);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Mean over the spatial axes: `[c, h, w] -> [c]`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.shape(input);
        if xs.len() != 3 || xs[1] == 0 || xs[2] == 0 {
            return Err(Error::shape("global_avg_pool", format!("need [c, h, w], got {xs:?}")));
        }
        let plane = xs[1] * xs[2];
        let out = self
            .value(input)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push(Tensor::from_vec(out), Op::GlobalAvgPool(input), &[input]))
    }

    /// `x[c, h, w] * v[c]`, broadcasting `v` over the spatial axes.
    pub fn channel_mul(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (xs, vs) = (self.shape(x), self.shape(v));
        if xs.len() != 3 || vs != [xs[0]] {
            return Err(Error::shape(
                "channel_mul",
                format!("features {xs:?} need a [{}] vector, got {vs:?}", xs.first().unwrap_or(&0)),
            ));
        }
        let plane = xs[1] * xs[2];
        let vd = self.value(v).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(vd)
            .flat_map(|(p, &s)| p.iter().map(move |&e| e * s))
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(value, Op::ChannelMul(x, v), &[x, v]))
    }

    /// `x[c, h, w] * m[1, h, w]`, broadcasting `m` over channels.
    pub fn spatial_mul(&mut self, x: NodeId, m: NodeId) -> Result<NodeId> {
        let (xs, ms) = (self.shape(x), self.shape(m));
        if xs.len() != 3 || ms != [1, xs[1], xs[2]] {
            return Err(Error::shape(
                "spatial_mul",
                format!("features {xs:?} need a [1, h, w] map, got {ms:?}"),
            ));
        }
        let plane = xs[1] * xs[2];
        let md = self.value(m).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .flat_map(|p| p.iter().zip(md).map(|(&e, &s)| e * s))
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(value, Op::SpatialMul(x, m), &[x, m]))
    }

    /// Softmax over a vector, with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.rank() != 1 || v.is_empty() {
            return Err(Error::shape("softmax", format!("need a nonempty vector, got {:?}", v.shape())));
        }
        let out = softmax(v.data());
        Ok(self.push(Tensor::from_vec(out), Op::Softmax(a), &[a]))
    }

    /// Flat-index gather into a vector.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", format!("index {bad} out of {}", src.len())));
        }
        let out = indices.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::from_vec(out), Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// Flatten and concatenate into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let out: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        Ok(self.push(Tensor::from_vec(out), Op::Concat(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).data();
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against fixed targets.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let n = targets.len();
        self.bce_weighted(logits, targets, &vec![1.0; n])
    }

    /// Weighted mean `sum(w * bce) / sum(w)`; equal weights give the plain mean.
    pub fn bce_weighted(&mut self, logits: NodeId, targets: &[f64], weights: &[f64]) -> Result<NodeId> {
        let x = self.value(logits).data();
        if x.len() != targets.len() || x.len() != weights.len() || x.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets, {} weights", x.len(), targets.len(), weights.len()),
            ));
        }
        let wsum: f64 = weights.iter().sum();
        if !(wsum > 0.0) || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("bce weights must be nonnegative with a positive sum".into()));
        }
        let coef: Vec<f64> = weights.iter().map(|w| w / wsum).collect();
        let total: f64 = x
            .iter()
            .zip(targets)
            .zip(&coef)
            .map(|((&l, &t), &c)| c * bce_logit(l, t))
            .sum();
        let value = Tensor::scalar(total);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                coef,
            },
            &[logits],
        ))
    }

    /// IoU of a predicted `[x0, y0, x1, y1]` box against a fixed box of positive area.
    pub fn iou(&mut self, pred: NodeId, gt: [f64; 4]) -> Result<NodeId> {
        let p = self.value(pred).data();
        if p.len() != 4 {
            return Err(Error::shape("iou", format!("box must hold 4 values, got {}", p.len())));
        }
        if gt[2] <= gt[0] || gt[3] <= gt[1] {
            return Err(Error::InvalidArgument(format!("degenerate ground-truth box {gt:?}")));
        }
        let parts = IouParts::new([p[0], p[1], p[2], p[3]], gt);
        Ok(self.push(Tensor::scalar(parts.iou()), Op::Iou { pred, gt }, &[pred]))
    }

    /// Squared center distance over the squared diagonal of the smallest box
    /// enclosing both; nonzero even when the boxes are disjoint.
    pub fn center_penalty(&mut self, pred: NodeId, gt: [f64; 4]) -> Result<NodeId> {
        let p = self.value(pred).data();
        if p.len() != 4 {
            return Err(Error::shape("center_penalty", format!("box must hold 4 values, got {}", p.len())));
        }
        if gt[2] <= gt[0] || gt[3] <= gt[1] {
            return Err(Error::InvalidArgument(format!("degenerate ground-truth box {gt:?}")));
        }
        let (value, _) = center_penalty_parts([p[0], p[1], p[2], p[3]], gt);
        Ok(self.push(Tensor::scalar(value), Op::CenterPenalty { pred, gt }, &[pred]))
    }

    /// Runs the adjoint sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedGraph(loss.0));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("adjoint of node {idx}")));
            }
            self.propagate(node, &g, &mut grads)?;
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            let node = &self.nodes[idx];
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                if let Some(gb) = self.accumulate(grads, *bias) {
                    let plane = geom.oh * geom.ow;
                    for (co, chunk) in g.chunks(plane).enumerate() {
                        gb[co] += chunk.iter().sum::<f64>();
                    }
                }
                if let Some(gk) = self.accumulate(grads, *kernel) {
                    conv_backward_kernel(x, g, gk, geom);
                }
                if let Some(gx) = self.accumulate(grads, *input) {
                    conv_backward_input(k, g, gx, geom);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(ga) = self.accumulate(grads, id) {
                        add_into(ga, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s * f);
                }
            }
            Op::Offset(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += if x[i] > 0.0 { g[i] } else { slope * g[i] };
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::LnFloor(a, floor) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        if x[i] > *floor {
                            ga[i] += g[i] / x[i];
                        }
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(ga) = self.accumulate(grads, *input) {
                    for (o, &src) in argmax.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let xs = self.shape(*a);
                let plane = xs[1] * xs[2];
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (c, chunk) in ga.chunks_mut(plane).enumerate() {
                        let share = g[c] / plane as f64;
                        chunk.iter_mut().for_each(|d| *d += share);
                    }
                }
            }
            Op::ChannelMul(x, v) => {
                let xs = self.shape(*x);
                let plane = xs[1] * xs[2];
                let (xd, vd) = (self.value(*x).data(), self.value(*v).data());
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (c, (chunk, gc)) in gx.chunks_mut(plane).zip(g.chunks(plane)).enumerate() {
                        chunk.iter_mut().zip(gc).for_each(|(d, &s)| *d += s * vd[c]);
                    }
                }
                if let Some(gv) = self.accumulate(grads, *v) {
                    for (c, (xc, gc)) in xd.chunks(plane).zip(g.chunks(plane)).enumerate() {
                        gv[c] += xc.iter().zip(gc).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::SpatialMul(x, m) => {
                let xs = self.shape(*x);
                let plane = xs[1] * xs[2];
                let (xd, md) = (self.value(*x).data(), self.value(*m).data());
                if let Some(gx) = self.accumulate(grads, *x) {
                    for (chunk, gc) in gx.chunks_mut(plane).zip(g.chunks(plane)) {
                        for i in 0..plane {
                            chunk[i] += gc[i] * md[i];
                        }
                    }
                }
                if let Some(gm) = self.accumulate(grads, *m) {
                    for (xc, gc) in xd.chunks(plane).zip(g.chunks(plane)) {
                        for i in 0..plane {
                            gm[i] += gc[i] * xc[i];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            Op::Gather(a, indices) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (o, &src) in indices.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.accumulate(grads, p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    let share = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::BceWithLogits { logits, targets, coef } => {
                let x = self.value(*logits).data();
                if let Some(gl) = self.accumulate(grads, *logits) {
                    for i in 0..x.len() {
                        gl[i] += g[0] * coef[i] * (sigmoid(x[i]) - targets[i]);
                    }
                }
            }
            Op::Iou { pred, gt } => {
                let p = self.value(*pred).data();
                let parts = IouParts::new([p[0], p[1], p[2], p[3]], *gt);
                if let Some(gp) = self.accumulate(grads, *pred) {
                    for (d, v) in gp.iter_mut().zip(parts.gradient()) {
                        *d += g[0] * v;
                    }
                }
            }
            Op::CenterPenalty { pred, gt } => {
                let p = self.value(*pred).data();
                let (_, grad) = center_penalty_parts([p[0], p[1], p[2], p[3]], *gt);
                if let Some(gp) = self.accumulate(grads, *pred) {
                    for (d, v) in gp.iter_mut().zip(grad) {
                        *d += g[0] * v;
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-[t ln σ(x) + (1 - t) ln(1 - σ(x))]` without overflow.
pub fn bce_logit(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Intersection-over-union with its partial derivatives w.r.t. the predicted box.
#[derive(Debug, Clone, Copy)]
struct IouParts {
    p: [f64; 4],
    g: [f64; 4],
    iw: f64,
    ih: f64,
    union: f64,
}

impl IouParts {
    fn new(p: [f64; 4], g: [f64; 4]) -> Self {
        let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0);
        let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
        let area_p = (p[2] - p[0]) * (p[3] - p[1]);
        let area_g = (g[2] - g[0]) * (g[3] - g[1]);
        let union = area_p + area_g - iw * ih;
        Self { p, g, iw, ih, union }
    }

    fn iou(&self) -> f64 {
        if self.union <= 0.0 {
            0.0
        } else {
            self.iw * self.ih / self.union
        }
    }

    fn gradient(&self) -> [f64; 4] {
        let Self { p, g, iw, ih, union } = *self;
        if union <= 0.0 {
            return [0.0; 4];
        }
        let inter = iw * ih;
        let d_inter = (union + inter) / (union * union);
        let d_area = -inter / (union * union);
        let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
        // intersection partials: only the active min/max term moves it
        let mut di = [0.0; 4];
        if iw > 0.0 && ih > 0.0 {
            if p[0] > g[0] {
                di[0] = -ih;
            }
            if p[2] < g[2] {
                di[2] = ih;
            }
            if p[1] > g[1] {
                di[1] = -iw;
            }
            if p[3] < g[3] {
                di[3] = iw;
            }
        }
        let da = [-ph, -pw, ph, pw];
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = d_inter * di[i] + d_area * da[i];
        }
        out
    }
}

fn center_penalty_parts(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let dx = (p[0] + p[2] - g[0] - g[2]) / 2.0;
    let dy = (p[1] + p[3] - g[1] - g[3]) / 2.0;
    let rho = dx * dx + dy * dy;
    let cw = p[2].max(g[2]) - p[0].min(g[0]);
    let ch = p[3].max(g[3]) - p[1].min(g[1]);
    let c = cw * cw + ch * ch;
    if c <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let d_rho = [dx, dy, dx, dy];
    let d_c = [
        if p[0] < g[0] { -2.0 * cw } else { 0.0 },
        if p[1] < g[1] { -2.0 * ch } else { 0.0 },
        if p[2] > g[2] { 2.0 * cw } else { 0.0 },
        if p[3] > g[3] { 2.0 * ch } else { 0.0 },
    ];
    let mut grad = [0.0; 4];
    for i in 0..4 {
        grad[i] = (d_rho[i] * c - rho * d_c[i]) / (c * c);
    }
    (rho / c, grad)
}

/// Unfolds `x` into a `(c_in*k*k) x (oh*ow)` patch matrix; padding reads as zero.
fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        c_in,
        h,
        w,
        k: ks,
        stride,
        pad,
        oh,
        ow,
        ..
    } = *geom;
    let plane = oh * ow;
    let mut cols = vec![0.0; c_in * ks * ks * plane];
    for ci in 0..c_in {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..ks {
            let (oy_lo, oy_hi) = geom.valid_rows(ky);
            for kx in 0..ks {
                let (ox_lo, ox_hi) = geom.valid_cols(kx);
                let row = ((ci * ks + ky) * ks + kx) * plane;
                let dst = &mut cols[row..row + plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let srow = &src[iy * w..(iy + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        drow[ox] = srow[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adds the patch matrix `cols` back onto the image gradient `gx`.
fn col2im(cols: &[f64], gx: &mut [f64], geom: &ConvGeom) {
    let ConvGeom {
        c_in,
        h,
        w,
        k: ks,
        stride,
        pad,
        oh,
        ow,
        ..
    } = *geom;
    let plane = oh * ow;
    for ci in 0..c_in {
        let dst = &mut gx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..ks {
            let (oy_lo, oy_hi) = geom.valid_rows(ky);
            for kx in 0..ks {
                let (ox_lo, ox_hi) = geom.valid_cols(kx);
                let row = ((ci * ks + ky) * ks + kx) * plane;
                let src = &cols[row..row + plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let drow = &mut dst[iy * w..(iy + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for ox in ox_lo..ox_hi {
                        drow[ox * stride + kx - pad] += srow[ox];
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with `op(a)` being `m x n` and `op(b)` `n x p`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, n: usize, p: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (n as isize, 1) };
    let (rsb, csb) = if b_t { (1, n as isize) } else { (p as isize, 1) };
    // SAFETY: slice lengths cover the strided extents checked below.
    assert!(a.len() >= m * n && b.len() >= n * p && c.len() >= m * p);
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            p,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

fn patch_len(geom: &ConvGeom) -> usize {
    geom.c_in * geom.k * geom.k
}

fn conv_forward(x: &[f64], k: &[f64], b: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let plane = geom.oh * geom.ow;
    let mut out = vec![0.0; geom.c_out * plane];
    for (co, dst) in out.chunks_mut(plane.max(1)).enumerate() {
        dst.iter_mut().for_each(|v| *v = b[co]);
    }
    if plane == 0 {
        return out;
    }
    let cols = im2col(x, geom);
    gemm(geom.c_out, patch_len(geom), plane, k, false, &cols, false, 1.0, &mut out);
    out
}

fn conv_backward_kernel(x: &[f64], g: &[f64], gk: &mut [f64], geom: &ConvGeom) {
    let plane = geom.oh * geom.ow;
    if plane == 0 {
        return;
    }
    let cols = im2col(x, geom);
    gemm(geom.c_out, plane, patch_len(geom), g, false, &cols, true, 1.0, gk);
}

fn conv_backward_input(k: &[f64], g: &[f64], gx: &mut [f64], geom: &ConvGeom) {
    let plane = geom.oh * geom.ow;
    if plane == 0 {
        return;
    }
    let mut cols = vec![0.0; patch_len(geom) * plane];
    gemm(patch_len(geom), geom.c_out, plane, k, true, g, false, 0.0, &mut cols);
    col2im(&cols, gx, geom);
}
