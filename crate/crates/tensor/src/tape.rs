use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvDims, ConvTransposeDims, Window};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, dims: ConvDims },
    ConvTranspose2d { input: Var, weight: Var, bias: Var, dims: ConvTransposeDims },
    Relu(Var),
    GlobalAvgPool(Var),
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f32 },
    Sum(Var),
    Concat(Vec<Var>),
    Narrow { input: Var, start: usize },
    MeanBatch(Var),
    ChannelWeightedSum { maps: Var, weights: Var },
    MinMaxNormalize { input: Var, extrema: Vec<Option<(usize, usize)>> },
    SoftmaxCrossEntropy { logits: Var, target: Vec<usize> },
    Logistic { scores: Var, labels: Vec<f32> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, weight, bias, .. } | Op::ConvTranspose2d { input, weight, bias, .. } => {
                vec![*input, *weight, *bias]
            }
            Op::Relu(x) | Op::GlobalAvgPool(x) | Op::Sum(x) | Op::MeanBatch(x) => vec![*x],
            Op::Scale { input, .. } | Op::Narrow { input, .. } | Op::MinMaxNormalize { input, .. } => vec![*input],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::ChannelWeightedSum { maps, weights } => vec![*maps, *weights],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Logistic { scores, .. } => vec![*scores],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run record of a forward pass.
///
/// Every operation appends one node whose inputs were appended earlier, so
/// node order is a topological order. [`Tape::backward`] walks it once in
/// reverse.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    bound: HashMap<ParamId, Var>,
    no_grad: bool,
}

/// Broadcast relation between the two operands of an elementwise op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `b` is N×1×H×W and is repeated over the C channels of `a`.
    Channel { batch: usize, channels: usize, plane: usize },
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters bind as constants, for inference.
    pub fn no_grad() -> Self {
        Tape { no_grad: true, ..Self::default() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Record an input. Its `requires_grad` flag decides whether gradients
    /// are collected for it; any stored grad buffer is dropped.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let value = Tensor::new(tensor.shape().to_vec(), tensor.into_data()).expect("shape already valid");
        self.push_node(value, requires_grad, Op::Leaf)
    }

    /// Record a value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let value = Tensor::new(tensor.shape().to_vec(), tensor.into_data()).expect("shape already valid");
        self.push_node(value, false, Op::Leaf)
    }

    /// Bind a stored parameter. Binding the same id twice returns the same
    /// variable, so every use of a parameter feeds one gradient slot.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape already valid");
        let v = self.push_node(value, t.requires_grad() && !self.no_grad, Op::Leaf);
        self.bound.insert(id, v);
        v
    }

    pub(crate) fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("operator produced consistent shape");
        self.push_node(value, requires_grad, op)
    }

    // ---- convolutions -------------------------------------------------

    /// 2-D convolution. `weight` is O×I×K×K, `bias` has O entries.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        let [o, i, kh, kw] = self.value(weight).dims4(OP)?;
        if i != c {
            return Err(TensorError::shape(OP, format!("input has {c} channels (axis 1) but weight expects {i} (axis 1)")));
        }
        check_kernel(OP, kh, kw, stride)?;
        check_bias(OP, self.shape(bias), o)?;
        let win = Window::new(c, h, w, kh, stride, padding).ok_or_else(|| {
            TensorError::shape(OP, format!("kernel {kh} exceeds padded input {}×{} (axes 2, 3)", h + 2 * padding, w + 2 * padding))
        })?;
        let dims = ConvDims { batch: n, c_out: o, win };
        let data = kernels::conv2d_forward(self.value(input).data(), self.value(weight).data(), self.value(bias).data(), &dims);
        Ok(self.push(dims.out_shape().to_vec(), data, Op::Conv2d { input, weight, bias, dims }))
    }

    /// Transposed 2-D convolution (the adjoint of [`Tape::conv2d`] with the
    /// same weight). `weight` is I×O×K×K; output extent is (H−1)·s − 2p + K.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        let [i, o, kh, kw] = self.value(weight).dims4(OP)?;
        if i != c {
            return Err(TensorError::shape(OP, format!("input has {c} channels (axis 1) but weight expects {i} (axis 0)")));
        }
        check_kernel(OP, kh, kw, stride)?;
        check_bias(OP, self.shape(bias), o)?;
        if h == 0 || w == 0 {
            return Err(TensorError::shape(OP, "empty spatial plane (axes 2, 3)"));
        }
        let out_h = ((h - 1) * stride + kh).checked_sub(2 * padding);
        let out_w = ((w - 1) * stride + kw).checked_sub(2 * padding);
        let (out_h, out_w) = match (out_h, out_w) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(TensorError::shape(OP, format!("padding {padding} leaves no output for {h}×{w} input (axes 2, 3)"))),
        };
        let win = Window::new(o, out_h, out_w, kh, stride, padding).expect("output geometry is consistent");
        debug_assert_eq!((win.out_h, win.out_w), (h, w));
        let dims = ConvTransposeDims { batch: n, c_in: c, win };
        let data = kernels::conv_transpose2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            &dims,
        );
        Ok(self.push(dims.out_shape().to_vec(), data, Op::ConvTranspose2d { input, weight, bias, dims }))
    }

    // ---- elementwise ----------------------------------------------------

    /// max(0, x); the subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        self.push(x.shape().to_vec(), data, Op::Relu(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = av.data().to_vec();
        zip_broadcast(&mut data, bv.data(), bc, |x, y| *x += y);
        Ok(self.push(av.shape().to_vec(), data, Op::Add { a, b }))
    }

    /// Elementwise product. `b` may be a single-channel N×1×H×W map, which is
    /// repeated across every channel of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = av.data().to_vec();
        zip_broadcast(&mut data, bv.data(), bc, |x, y| *x *= y);
        Ok(self.push(av.shape().to_vec(), data, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        self.push(x.shape().to_vec(), data, Op::Scale { input, factor })
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        match (sa, sb) {
            (&[n, c, h, w], &[nb, 1, hb, wb]) if n == nb && h == hb && w == wb => {
                Ok(Broadcast::Channel { batch: n, channels: c, plane: h * w })
            }
            _ => Err(TensorError::shape(
                op,
                format!("shapes {sa:?} and {sb:?} differ and the second is not an N×1×H×W map over the first"),
            )),
        }
    }

    // ---- reductions -------------------------------------------------------

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        self.push(Vec::new(), vec![s as f32], Op::Sum(input))
    }

    /// N×C×H×W → N×C mean over the spatial plane.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("global_avg_pool")?;
        if h == 0 || w == 0 {
            return Err(TensorError::shape("global_avg_pool", "empty spatial plane (axes 2, 3)"));
        }
        let plane = h * w;
        let data = self
            .value(input)
            .data()
            .chunks_exact(plane)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        Ok(self.push(vec![n, c], data, Op::GlobalAvgPool(input)))
    }

    /// Mean over the leading (batch) axis; the result keeps a batch of 1.
    pub fn mean_batch(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = *x.shape().first().ok_or_else(|| TensorError::shape("mean_batch", "scalar has no batch axis"))?;
        if n == 0 {
            return Err(TensorError::contract("mean_batch", "empty batch"));
        }
        let stride = x.numel() / n;
        let mut acc = vec![0.0f64; stride];
        for item in x.data().chunks_exact(stride) {
            acc.iter_mut().zip(item).for_each(|(a, &v)| *a += v as f64);
        }
        let data = acc.into_iter().map(|a| (a / n as f64) as f32).collect();
        let mut shape = x.shape().to_vec();
        shape[0] = 1;
        Ok(self.push(shape, data, Op::MeanBatch(input)))
    }

    // ---- channel plumbing ---------------------------------------------------

    /// Concatenate N×C_i×H×W tensors along the channel axis, in order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs.first().ok_or_else(|| TensorError::contract(OP, "no inputs"))?;
        let [n, _, h, w] = self.value(first).dims4(OP)?;
        let mut total = 0;
        for &v in inputs {
            let [nv, cv, hv, wv] = self.value(v).dims4(OP)?;
            if (nv, hv, wv) != (n, h, w) {
                return Err(TensorError::shape(
                    OP,
                    format!("input is {nv}×·×{hv}×{wv} but the first is {n}×·×{h}×{w} (axes 0, 2, 3 must agree)"),
                ));
            }
            total += cv;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in inputs {
                let x = self.value(v);
                let item = x.shape()[1] * plane;
                data.extend_from_slice(&x.data()[b * item..(b + 1) * item]);
            }
        }
        Ok(self.push(vec![n, total, h, w], data, Op::Concat(inputs.to_vec())))
    }

    /// Channels `start..start + len` of an N×C×H×W tensor.
    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "narrow_channels";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        if start + len > c {
            return Err(TensorError::shape(OP, format!("channels {start}..{} out of range for {c} (axis 1)", start + len)));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&x[base..base + len * plane]);
        }
        Ok(self.push(vec![n, len, h, w], data, Op::Narrow { input, start }))
    }

    /// out[b, 0] = Σ_i maps[b, i] · weights[b, i] for N×C×H×W maps and N×C
    /// weights.
    pub fn channel_weighted_sum(&mut self, maps: Var, weights: Var) -> Result<Var> {
        const OP: &str = "channel_weighted_sum";
        let [n, c, h, w] = self.value(maps).dims4(OP)?;
        if self.shape(weights) != [n, c] {
            return Err(TensorError::shape(
                OP,
                format!("weights have shape {:?}, expected [{n}, {c}] to match maps axes 0, 1", self.shape(weights)),
            ));
        }
        let plane = h * w;
        let (m, s) = (self.value(maps).data(), self.value(weights).data());
        let mut data = vec![0.0f32; n * plane];
        let mut acc = vec![0.0f64; plane];
        for b in 0..n {
            acc.fill(0.0);
            for i in 0..c {
                let wi = s[b * c + i] as f64;
                let map = &m[(b * c + i) * plane..(b * c + i + 1) * plane];
                acc.iter_mut().zip(map).for_each(|(a, &v)| *a += v as f64 * wi);
            }
            data[b * plane..(b + 1) * plane].iter_mut().zip(&acc).for_each(|(d, &a)| *d = a as f32);
        }
        Ok(self.push(vec![n, 1, h, w], data, Op::ChannelWeightedSum { maps, weights }))
    }

    /// Per batch item, (x − min) / (max − min). An item whose range is below
    /// `eps` maps to all 0.5 and passes no gradient.
    pub fn minmax_normalize(&mut self, input: Var, eps: f32) -> Result<Var> {
        let x = self.value(input);
        let n = *x.shape().first().ok_or_else(|| TensorError::shape("minmax_normalize", "scalar has no batch axis"))?;
        let item = x.numel() / n.max(1);
        let mut data = vec![0.0f32; x.numel()];
        let mut extrema = Vec::with_capacity(n);
        for (src, dst) in x.data().chunks_exact(item.max(1)).zip(data.chunks_exact_mut(item.max(1))) {
            let (mut lo, mut hi) = (0, 0);
            for (j, &v) in src.iter().enumerate() {
                if v.is_nan() {
                    return Err(TensorError::contract("minmax_normalize", "NaN input"));
                }
                if v < src[lo] {
                    lo = j;
                }
                if v > src[hi] {
                    hi = j;
                }
            }
            let range = src[hi] - src[lo];
            if !(range >= eps) {
                dst.fill(0.5);
                extrema.push(None);
            } else {
                let min = src[lo];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = (v - min) / range);
                dst[lo] = 0.0;
                dst[hi] = 1.0;
                extrema.push(Some((lo, hi)));
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.push(shape, data, Op::MinMaxNormalize { input, extrema }))
    }

    // ---- losses -------------------------------------------------------------

    /// Mean per-pixel softmax cross-entropy of N×K×H×W logits against an
    /// N×1×H×W map of class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let [n, k, h, w] = self.value(logits).dims4(OP)?;
        if target.shape() != [n, 1, h, w] {
            return Err(TensorError::shape(OP, format!("target shape {:?} must be [{n}, 1, {h}, {w}]", target.shape())));
        }
        let mut classes = Vec::with_capacity(target.numel());
        for &t in target.data() {
            let idx = t as usize;
            if t < 0.0 || t.fract() != 0.0 || idx >= k {
                return Err(TensorError::contract(OP, format!("target value {t} is not a class index below {k}")));
            }
            classes.push(idx);
        }
        let plane = h * w;
        let z = self.value(logits).data();
        let mut total = 0.0f64;
        for b in 0..n {
            for p in 0..plane {
                let at = |c: usize| z[(b * k + c) * plane + p] as f64;
                let max = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..k).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
                total += lse - at(classes[b * plane + p]);
            }
        }
        let loss = (total / (n * plane) as f64) as f32;
        Ok(self.push(Vec::new(), vec![loss], Op::SoftmaxCrossEntropy { logits, target: classes }))
    }

    /// Mean over all entries of log(1 + exp(−y·s)) for scores `s` and labels
    /// `y ∈ {−1, +1}` of the same length.
    pub fn logistic_loss(&mut self, scores: Var, labels: &[f32]) -> Result<Var> {
        const OP: &str = "logistic_loss";
        let s = self.value(scores);
        if s.numel() != labels.len() {
            return Err(TensorError::shape(OP, format!("{} scores but {} labels", s.numel(), labels.len())));
        }
        if s.numel() == 0 {
            return Err(TensorError::contract(OP, "empty score vector"));
        }
        let total: f64 = s.data().iter().zip(labels).map(|(&s, &y)| softplus(-(y as f64) * s as f64)).sum();
        let loss = (total / labels.len() as f64) as f32;
        Ok(self.push(Vec::new(), vec![loss], Op::Logistic { scores, labels: labels.to_vec() }))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients of every node that
    /// requires one become available through [`Tape::grad`]; contributions
    /// from multiple uses of a value add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            for (input, contribution) in self.local_grads(idx, &g) {
                match &mut self.grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `idx` for each input that needs one.
    fn local_grads(&self, idx: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, dims } => {
                let need_params = self.needs(*weight) || self.needs(*bias);
                let grads = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    dims,
                    self.needs(*input),
                    need_params,
                );
                push_conv_grads(&mut out, self, [*input, *weight, *bias], grads);
            }
            Op::ConvTranspose2d { input, weight, bias, dims } => {
                let need_params = self.needs(*weight) || self.needs(*bias);
                let grads = kernels::conv_transpose2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    dims,
                    self.needs(*input),
                    need_params,
                );
                push_conv_grads(&mut out, self, [*input, *weight, *bias], grads);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                out.push((*x, g.iter().zip(xv).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect()));
            }
            Op::Add { a, b } => {
                let bc = self.broadcast("add", *a, *b).expect("validated in forward");
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, reduce_broadcast(g, bc)));
                }
            }
            Op::Mul { a, b } => {
                let bc = self.broadcast("mul", *a, *b).expect("validated in forward");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut ga = g.to_vec();
                    zip_broadcast(&mut ga, bv, bc, |x, y| *x *= y);
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let prod: Vec<f32> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    out.push((*b, reduce_broadcast(&prod, bc)));
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.iter().map(|&v| v * factor).collect()));
            }
            Op::Sum(x) => {
                out.push((*x, vec![g[0]; self.value(*x).numel()]));
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(*x).dims4("global_avg_pool").expect("rank checked in forward");
                let plane = h * w;
                let inv = 1.0 / plane as f32;
                let mut gx = Vec::with_capacity(g.len() * plane);
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, plane));
                }
                out.push((*x, gx));
            }
            Op::MeanBatch(x) => {
                let xv = self.value(*x);
                let n = xv.shape()[0];
                let inv = 1.0 / n as f32;
                let gx = (0..n).flat_map(|_| g.iter().map(|&v| v * inv)).collect();
                out.push((*x, gx));
            }
            Op::Concat(xs) => {
                let [n, total, h, w] = node.value.dims4("concat_channels").expect("rank checked in forward");
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.needs(x) {
                        let mut gx = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let base = (b * total + offset) * plane;
                            gx.extend_from_slice(&g[base..base + c * plane]);
                        }
                        out.push((x, gx));
                    }
                    offset += c;
                }
            }
            Op::Narrow { input, start } => {
                let [n, c, h, w] = self.value(*input).dims4("narrow_channels").expect("rank checked in forward");
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut gx = vec![0.0; n * c * plane];
                for b in 0..n {
                    let base = (b * c + start) * plane;
                    gx[base..base + len * plane].copy_from_slice(&g[b * len * plane..(b + 1) * len * plane]);
                }
                out.push((*input, gx));
            }
            Op::ChannelWeightedSum { maps, weights } => {
                let [n, c, h, w] = self.value(*maps).dims4("channel_weighted_sum").expect("rank checked in forward");
                let plane = h * w;
                let (m, s) = (self.value(*maps).data(), self.value(*weights).data());
                if self.needs(*maps) {
                    let mut gm = vec![0.0; m.len()];
                    for b in 0..n {
                        let gb = &g[b * plane..(b + 1) * plane];
                        for i in 0..c {
                            let wi = s[b * c + i];
                            let dst = &mut gm[(b * c + i) * plane..(b * c + i + 1) * plane];
                            dst.iter_mut().zip(gb).for_each(|(d, &gv)| *d = gv * wi);
                        }
                    }
                    out.push((*maps, gm));
                }
                if self.needs(*weights) {
                    let mut gs = vec![0.0; n * c];
                    for b in 0..n {
                        let gb = &g[b * plane..(b + 1) * plane];
                        for i in 0..c {
                            let map = &m[(b * c + i) * plane..(b * c + i + 1) * plane];
                            gs[b * c + i] = map.iter().zip(gb).map(|(&v, &gv)| v as f64 * gv as f64).sum::<f64>() as f32;
                        }
                    }
                    out.push((*weights, gs));
                }
            }
            Op::MinMaxNormalize { input, extrema } => {
                let x = self.value(*input).data();
                let item = x.len() / extrema.len().max(1);
                let mut gx = vec![0.0f32; x.len()];
                for (b, ext) in extrema.iter().enumerate() {
                    let Some((lo, hi)) = *ext else { continue };
                    let xs = &x[b * item..(b + 1) * item];
                    let gs = &g[b * item..(b + 1) * item];
                    let dst = &mut gx[b * item..(b + 1) * item];
                    let (min, max) = (xs[lo] as f64, xs[hi] as f64);
                    let range = max - min;
                    let mut to_min = 0.0f64;
                    let mut to_max = 0.0f64;
                    for ((d, &gv), &xv) in dst.iter_mut().zip(gs).zip(xs) {
                        *d = (gv as f64 / range) as f32;
                        to_min += gv as f64 * (xv as f64 - max);
                        to_max -= gv as f64 * (xv as f64 - min);
                    }
                    dst[lo] += (to_min / (range * range)) as f32;
                    dst[hi] += (to_max / (range * range)) as f32;
                }
                out.push((*input, gx));
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let [n, k, h, w] = self.value(*logits).dims4("softmax_cross_entropy").expect("rank checked in forward");
                let plane = h * w;
                let z = self.value(*logits).data();
                let scale = g[0] as f64 / (n * plane) as f64;
                let mut gz = vec![0.0f32; z.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let at = |c: usize| (b * k + c) * plane + p;
                        let max = (0..k).map(|c| z[at(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = (0..k).map(|c| (z[at(c)] as f64 - max).exp()).sum();
                        for c in 0..k {
                            let prob = (z[at(c)] as f64 - max).exp() / denom;
                            let onehot = if c == target[b * plane + p] { 1.0 } else { 0.0 };
                            gz[at(c)] = ((prob - onehot) * scale) as f32;
                        }
                    }
                }
                out.push((*logits, gz));
            }
            Op::Logistic { scores, labels } => {
                let s = self.value(*scores).data();
                let scale = g[0] as f64 / labels.len() as f64;
                let gs = s
                    .iter()
                    .zip(labels)
                    .map(|(&s, &y)| {
                        let y = y as f64;
                        (-y * sigmoid(-y * s as f64) * scale) as f32
                    })
                    .collect();
                out.push((*scores, gs));
            }
        }
        out.retain(|(v, _)| self.needs(*v));
        out
    }
}

fn check_kernel(op: &'static str, kh: usize, kw: usize, stride: usize) -> Result<()> {
    if kh != kw || kh == 0 {
        return Err(TensorError::shape(op, format!("kernel must be square and non-empty, got {kh}×{kw} (axes 2, 3)")));
    }
    if stride == 0 {
        return Err(TensorError::contract(op, "stride must be at least 1"));
    }
    Ok(())
}

fn check_bias(op: &'static str, shape: &[usize], channels: usize) -> Result<()> {
    if shape != [channels] {
        return Err(TensorError::shape(op, format!("bias shape {shape:?} must be [{channels}] (output channels)")));
    }
    Ok(())
}

fn push_conv_grads(out: &mut Vec<(Var, Vec<f32>)>, tape: &Tape, vars: [Var; 3], grads: kernels::ConvGrads) {
    let [input, weight, bias] = vars;
    if let Some(gx) = grads.input {
        out.push((input, gx));
    }
    if let Some(gw) = grads.weight.filter(|_| tape.needs(weight)) {
        out.push((weight, gw));
    }
    if let Some(gb) = grads.bias.filter(|_| tape.needs(bias)) {
        out.push((bias, gb));
    }
}

fn zip_broadcast(a: &mut [f32], b: &[f32], bc: Broadcast, f: impl Fn(&mut f32, f32)) {
    match bc {
        Broadcast::Same => a.iter_mut().zip(b).for_each(|(x, &y)| f(x, y)),
        Broadcast::Channel { batch, channels, plane } => {
            for n in 0..batch {
                let map = &b[n * plane..(n + 1) * plane];
                for c in 0..channels {
                    let base = (n * channels + c) * plane;
                    a[base..base + plane].iter_mut().zip(map).for_each(|(x, &y)| f(x, y));
                }
            }
        }
    }
}

fn reduce_broadcast(g: &[f32], bc: Broadcast) -> Vec<f32> {
    match bc {
        Broadcast::Same => g.to_vec(),
        Broadcast::Channel { batch, channels, plane } => {
            let mut out = vec![0.0f32; batch * plane];
            for n in 0..batch {
                let dst = &mut out[n * plane..(n + 1) * plane];
                for (p, d) in dst.iter_mut().enumerate() {
                    let s: f64 = (0..channels).map(|c| g[(n * channels + c) * plane + p] as f64).sum();
                    *d = s as f32;
                }
            }
            out
        }
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
