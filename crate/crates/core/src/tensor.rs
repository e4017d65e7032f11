//! Dense f64 tensors with a tape-based reverse-mode autodiff engine.
//!
//! Object-indexed tensors follow the predicate layout `[9, ..., 9, C]`: zero
//! to three object axes of size [`OBJECT_COUNT`] followed by one channel axis.
//! Operations are recorded on a [`Graph`] and addressed by [`NodeId`].

use thiserror::Error;

/// Size of every object axis.
pub const OBJECT_COUNT: usize = 9;

/// Highest supported number of object axes.
pub const MAX_ARITY: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: tensor of shape {shape:?} has arity {arity}, allowed range is {min}..={max}")]
    Arity {
        op: &'static str,
        shape: Vec<usize>,
        arity: usize,
        min: usize,
        max: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// The only element of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    /// Number of object axes, i.e. every axis but the trailing channel axis.
    pub fn arity(&self) -> usize {
        self.shape.len().saturating_sub(1)
    }

    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    index.iter().zip(shape).fold(0, |acc, (&i, &n)| {
        assert!(i < n, "index {i} out of bounds for axis of size {n}");
        acc * n + i
    })
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Sigmoid(NodeId),
    SoftmaxFlat(NodeId),
    Concat(Vec<NodeId>),
    /// `out[j] = in[src[j]]`; backs expansion, reduction and axis permutation.
    Gather {
        input: NodeId,
        src: Vec<usize>,
    },
    Reshape(NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    MaskedLogProb {
        logits: NodeId,
        mask: Vec<bool>,
        index: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracks_grad: bool,
}

/// Operation tape. Nodes are appended in execution order, so the node list is
/// topologically sorted by construction.
#[derive(Debug, Default)]
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

    /// Records a leaf. Its `requires_grad` flag decides whether gradients reach it.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let tracks_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, tracks_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn value_mut(&mut self, id: NodeId) -> &mut Tensor {
        &mut self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, mut value: Tensor, op: Op, tracks_grad: bool) -> NodeId {
        if !matches!(op, Op::Leaf) {
            value.requires_grad = tracks_grad;
        }
        self.nodes.push(Node {
            value,
            op,
            tracks_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn tracks(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracks_grad
    }

    /// Affine map along the last axis: `input[..., d_in] @ weight[d_in, d_out] + bias[d_out]`.
    pub fn matmul_lastdim(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_lastdim",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let (d_in, d_out) = (ws[0], ws[1]);
        if bs != [d_out] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_lastdim (bias)",
                left: ws.to_vec(),
                right: bs.to_vec(),
            });
        }
        let rows = x
            .numel()
            .checked_div(d_in)
            .unwrap_or_else(|| xs[..xs.len() - 1].iter().product());
        let mut out = Vec::with_capacity(rows * d_out);
        for r in 0..rows {
            out.extend_from_slice(&b.data);
            let acc = &mut out[r * d_out..(r + 1) * d_out];
            for (i, &xv) in x.data[r * d_in..(r + 1) * d_in].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (a, &wv) in acc.iter_mut().zip(&w.data[i * d_out..(i + 1) * d_out]) {
                    *a += xv * wv;
                }
            }
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = d_out;
        let tracks = self.tracks(input) || self.tracks(weight) || self.tracks(bias);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                input,
                weight,
                bias,
            },
            tracks,
        ))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        let tracks = self.tracks(input);
        self.push(value, Op::Sigmoid(input), tracks)
    }

    /// Softmax over all elements regardless of shape.
    pub fn softmax_flat(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let max = x.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut data: Vec<f64> = x.data.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v /= total);
        let value = Tensor {
            shape: x.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        };
        let tracks = self.tracks(input);
        self.push(value, Op::SoftmaxFlat(input), tracks)
    }

    pub fn concat_lastdim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.concat_many(&[a, b])
    }

    /// Channel-axis concatenation of any number of tensors with equal leading shape.
    pub fn concat_many(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let lead = leading(self.shape(first)).to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || leading(s) != lead.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_lastdim",
                    left: self.shape(first).to_vec(),
                    right: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let tracks = parts.iter().any(|&p| self.tracks(p));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), tracks))
    }

    /// Adds a trailing object axis of size [`OBJECT_COUNT`], broadcasting the input along it.
    pub fn expand_arity(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        let arity = check_arity("expand_arity", &shape, 0, MAX_ARITY - 1)?;
        let c = shape[arity];
        let lead: usize = shape[..arity].iter().product();
        let mut src = Vec::with_capacity(lead * OBJECT_COUNT * c);
        for l in 0..lead {
            for _ in 0..OBJECT_COUNT {
                src.extend(l * c..(l + 1) * c);
            }
        }
        let mut out_shape = shape[..arity].to_vec();
        out_shape.extend([OBJECT_COUNT, c]);
        self.gather(input, out_shape, src)
    }

    /// Removes the last object axis, emitting its max followed by its min on
    /// the channel axis (`2C` output channels). Ties resolve to the lowest index.
    pub fn reduce_arity(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        let arity = check_arity("reduce_arity", &shape, 1, MAX_ARITY)?;
        let n = shape[arity - 1];
        let c = shape[arity];
        let lead: usize = shape[..arity - 1].iter().product();
        let data = &self.value(input).data;
        let mut src = vec![0usize; lead * 2 * c];
        for l in 0..lead {
            for ch in 0..c {
                let base = l * n * c + ch;
                let (mut hi, mut lo) = (base, base);
                for k in 1..n {
                    let idx = base + k * c;
                    if data[idx] > data[hi] {
                        hi = idx;
                    }
                    if data[idx] < data[lo] {
                        lo = idx;
                    }
                }
                src[l * 2 * c + ch] = hi;
                src[l * 2 * c + c + ch] = lo;
            }
        }
        let mut out_shape = shape[..arity - 1].to_vec();
        out_shape.push(2 * c);
        self.gather(input, out_shape, src)
    }

    /// Reorders object axes: `out[i_0, .., i_{k-1}, c] = in[j]` where `j[perm[a]] = i_a`.
    /// Equivalently, output axis `a` is input axis `perm[a]`.
    pub fn permute_objects(&mut self, input: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        let arity = shape.len().saturating_sub(1);
        let mut seen = vec![false; arity];
        if perm.len() != arity
            || perm
                .iter()
                .any(|&p| p >= arity || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Invalid(format!(
                "permute_objects: {perm:?} is not a permutation of {arity} axes"
            )));
        }
        let c = shape[arity];
        let mut in_strides = vec![c; arity];
        for a in (0..arity.saturating_sub(1)).rev() {
            in_strides[a] = in_strides[a + 1] * shape[a + 1];
        }
        let out_obj: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let total: usize = out_obj.iter().product();
        let mut src = Vec::with_capacity(total * c);
        let mut idx = vec![0usize; arity];
        for _ in 0..total {
            let base: usize = (0..arity).map(|a| idx[a] * in_strides[perm[a]]).sum();
            src.extend(base..base + c);
            for a in (0..arity).rev() {
                idx[a] += 1;
                if idx[a] < out_obj[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let mut out_shape = out_obj;
        out_shape.push(c);
        self.gather(input, out_shape, src)
    }

    fn gather(&mut self, input: NodeId, shape: Vec<usize>, src: Vec<usize>) -> Result<NodeId> {
        let x = &self.value(input).data;
        let data = src.iter().map(|&s| x[s]).collect();
        let value = Tensor::new(shape, data)?;
        let tracks = self.tracks(input);
        Ok(self.push(value, Op::Gather { input, src }, tracks))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: x.shape.clone(),
                right: shape,
            });
        }
        let value = Tensor::new(shape, x.data.clone())?;
        let tracks = self.tracks(input);
        Ok(self.push(value, Op::Reshape(input), tracks))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape != y.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: x.shape.clone(),
                right: y.shape.clone(),
            });
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape.clone(), data)?;
        let tracks = self.tracks(a) || self.tracks(b);
        Ok(self.push(value, Op::Mul(a, b), tracks))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total = self.value(input).data.iter().sum();
        let tracks = self.tracks(input);
        self.push(Tensor::scalar(total), Op::Sum(input), tracks)
    }

    /// Log-probability of flat element `index` under a softmax restricted to
    /// the elements where `mask` is true.
    pub fn masked_log_prob(
        &mut self,
        logits: NodeId,
        mask: &[bool],
        index: usize,
    ) -> Result<NodeId> {
        let x = self.value(logits);
        if mask.len() != x.numel() || index >= x.numel() {
            return Err(TensorError::Invalid(format!(
                "masked_log_prob: mask of {} entries / index {index} for tensor of {} elements",
                mask.len(),
                x.numel()
            )));
        }
        if !mask[index] {
            return Err(TensorError::Invalid(format!(
                "masked_log_prob: index {index} is masked out"
            )));
        }
        let probs = masked_softmax(&x.data, mask);
        let value = Tensor::scalar(probs[index].ln());
        let tracks = self.tracks(logits);
        Ok(self.push(
            value,
            Op::MaskedLogProb {
                logits,
                mask: mask.to_vec(),
                index,
                probs,
            },
            tracks,
        ))
    }

    /// Reverse pass from a scalar node. Gradients are added into the `grad`
    /// buffer of every differentiable leaf; repeated calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 || !shape.iter().all(|&d| d == 1) {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].tracks_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                self.nodes[id].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value.data;
        let mut send = |target: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.tracks(target) {
                return;
            }
            let n = self.value(target).numel();
            let buf = grads[target.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                input,
                weight,
                bias,
            } => {
                let x = &self.value(*input).data;
                let w = self.value(*weight);
                let (d_in, d_out) = (w.shape[0], w.shape[1]);
                let w = &w.data;
                let rows = g.len() / d_out.max(1);
                send(*input, &mut |gx| {
                    for r in 0..rows {
                        let gr = &g[r * d_out..(r + 1) * d_out];
                        for i in 0..d_in {
                            let wr = &w[i * d_out..(i + 1) * d_out];
                            gx[r * d_in + i] += gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                });
                send(*weight, &mut |gw| {
                    for r in 0..rows {
                        let gr = &g[r * d_out..(r + 1) * d_out];
                        for (i, &xv) in x[r * d_in..(r + 1) * d_in].iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            for (acc, &gv) in gw[i * d_out..(i + 1) * d_out].iter_mut().zip(gr) {
                                *acc += xv * gv;
                            }
                        }
                    }
                });
                send(*bias, &mut |gb| {
                    for gr in g.chunks(d_out.max(1)) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Sigmoid(input) => send(*input, &mut |gx| {
                for ((a, &y), &gv) in gx.iter_mut().zip(out).zip(g) {
                    *a += gv * y * (1.0 - y);
                }
            }),
            Op::SoftmaxFlat(input) => {
                let dot: f64 = g.iter().zip(out).map(|(a, b)| a * b).sum();
                send(*input, &mut |gx| {
                    for ((a, &p), &gv) in gx.iter_mut().zip(out).zip(g) {
                        *a += p * (gv - dot);
                    }
                })
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).channels()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len().checked_div(total).unwrap_or(0);
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    send(p, &mut |gp| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { input, src } => send(*input, &mut |gx| {
                for (&s, &gv) in src.iter().zip(g) {
                    gx[s] += gv;
                }
            }),
            Op::Reshape(input) => send(*input, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }),
            Op::Mul(a, b) => {
                let (xa, xb) = (&self.value(*a).data, &self.value(*b).data);
                send(*a, &mut |ga| {
                    for ((acc, &y), &gv) in ga.iter_mut().zip(xb).zip(g) {
                        *acc += gv * y;
                    }
                });
                send(*b, &mut |gb| {
                    for ((acc, &y), &gv) in gb.iter_mut().zip(xa).zip(g) {
                        *acc += gv * y;
                    }
                });
            }
            Op::Sum(input) => send(*input, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::MaskedLogProb {
                logits,
                mask,
                index,
                probs,
            } => send(*logits, &mut |gx| {
                for (j, (a, (&m, &p))) in gx.iter_mut().zip(mask.iter().zip(probs)).enumerate() {
                    if m {
                        let onehot = if j == *index { 1.0 } else { 0.0 };
                        *a += g[0] * (onehot - p);
                    }
                }
            }),
        }
    }

    /// Detached copy of a node's value.
    pub fn detach(&self, id: NodeId) -> Tensor {
        self.value(id).detached()
    }
}

fn leading(shape: &[usize]) -> &[usize] {
    &shape[..shape.len().saturating_sub(1)]
}

fn check_arity(op: &'static str, shape: &[usize], min: usize, max: usize) -> Result<usize> {
    let arity = shape.len().saturating_sub(1);
    let objects_ok = shape[..arity].iter().all(|&d| d == OBJECT_COUNT);
    if shape.is_empty() || arity < min || arity > max || !objects_ok {
        return Err(TensorError::Arity {
            op,
            shape: shape.to_vec(),
            arity,
            min,
            max,
        });
    }
    Ok(arity)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the unmasked entries; masked entries get probability exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    probs
}
