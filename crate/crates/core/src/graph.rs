//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a write-once tape: every operation appends a node holding its
//! forward value, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. Leaves are either parameters (gradients tracked) or
//! constants (gradients skipped, along with every node that only depends on
//! constants).
//!
//! Image-shaped values use the planar `[channels, height, width]` layout.
//! Shape mismatches inside the graph are programming errors and panic; public
//! entry points validate user-facing dimensions before building a graph.

use std::sync::Arc;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    Relu,
    Abs,
    Log,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
    Sqrt,
    Square,
    /// `x^p` for `x > 0`, zero otherwise.
    Powf(f64),
    ClampMin(f64),
    Exp,
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Relu => x.max(0.0),
            Unary::Abs => x.abs(),
            Unary::Log => x.ln(),
            Unary::Softplus => softplus(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Powf(p) => {
                if x > 0.0 {
                    x.powf(p)
                } else {
                    0.0
                }
            }
            Unary::ClampMin(m) => x.max(m),
            Unary::Exp => x.exp(),
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Log => 1.0 / x,
            Unary::Softplus => sigmoid(x),
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Powf(p) => {
                if x > 0.0 {
                    p * x.powf(p - 1.0)
                } else {
                    0.0
                }
            }
            Unary::ClampMin(m) => {
                if x > m {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Bilinear resampling of one `h × w` plane to `out_h × out_w`, using
/// half-pixel centres and edge clamping. Each output pixel blends four taps.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    taps: Vec<[(usize, f64); 4]>,
}

impl ResizePlan {
    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ys = axis(in_h, out_h);
        let xs = axis(in_w, out_w);
        let mut taps = Vec::with_capacity(out_h * out_w);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                taps.push([
                    (y0 * in_w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * in_w + x1, (1.0 - fy) * fx),
                    (y1 * in_w + x0, fy * (1.0 - fx)),
                    (y1 * in_w + x1, fy * fx),
                ]);
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.in_h == self.out_h && self.in_w == self.out_w
    }

    /// Resample a single plane.
    pub fn apply(&self, plane: &[f64]) -> Vec<f64> {
        debug_assert_eq!(plane.len(), self.in_h * self.in_w);
        if self.is_identity() {
            return plane.to_vec();
        }
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| plane[i] * w).sum())
            .collect()
    }

    fn apply_transpose(&self, grad: &[f64], out: &mut [f64]) {
        if self.is_identity() {
            for (o, g) in out.iter_mut().zip(grad) {
                *o += g;
            }
            return;
        }
        for (t, &g) in self.taps.iter().zip(grad) {
            for &(i, w) in t {
                out[i] += w * g;
            }
        }
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of every plane of a `[c, h, w]` buffer.
pub fn separable_filter_valid(data: &[f64], c: usize, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut out = vec![0.0; c * oh * ow];
    let mut tmp = vec![0.0; h * ow];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..ow {
                let row = &plane[y * w + x..y * w + x + k];
                tmp[y * ow + x] = row.iter().zip(kernel).map(|(a, b)| a * b).sum();
            }
        }
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for (i, kv) in kernel.iter().enumerate() {
                    acc += tmp[(y + i) * ow + x] * kv;
                }
                dst[y * ow + x] = acc;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    MatVec { w: Var, x: Var },
    MatTVec { w: Var, g: Var },
    Conv2d { x: Var, w: Var },
    ChannelBias { x: Var, b: Var },
    Upsample2(Var),
    AvgPool2(Var),
    FilterValid { x: Var, kernel: Arc<[f64]> },
    Gram(Var),
    Reshape(Var),
    Crop { x: Var, top: usize, left: usize },
    Resize { x: Var, plan: Arc<ResizePlan> },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.param_shared(Arc::new(t))
    }

    pub fn param_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.constant_shared(Arc::new(t))
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise operands must share a shape");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| v + s).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Offset(a), rg)
    }

    pub fn unary(&mut self, a: Var, u: Unary) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| u.forward(v)).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary(a, u), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `W x` for `W: [m, n]`, `x: [n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (tw, tx) = (self.value(w), self.value(x));
        let (m, n) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(tx.len(), n, "matvec: input length mismatch");
        let wd = tw.data();
        let xd = tx.data();
        let out: Vec<f64> = (0..m).map(|i| dot(&wd[i * n..(i + 1) * n], xd)).collect();
        let rg = self.rg(&[w, x]);
        self.push(Tensor::vector(out), Op::MatVec { w, x }, rg)
    }

    /// `Wᵀ g` for `W: [m, n]`, `g: [m]`.
    pub fn matvec_t(&mut self, w: Var, g: Var) -> Var {
        let (tw, tg) = (self.value(w), self.value(g));
        let (m, n) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(tg.len(), m, "matvec_t: input length mismatch");
        let mut out = vec![0.0; n];
        for (i, &gi) in tg.data().iter().enumerate() {
            axpy(gi, &tw.data()[i * n..(i + 1) * n], &mut out);
        }
        let rg = self.rg(&[w, g]);
        self.push(Tensor::vector(out), Op::MatTVec { w, g }, rg)
    }

    /// Stride-1, zero-padded ("same") 2-D convolution. `x: [c, h, w]`,
    /// `w: [o, c, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (c, h, wd) = dims3(tx.shape());
        let ws = tw.shape();
        assert_eq!(ws.len(), 4, "conv2d weight must be [o, c, k, k]");
        assert_eq!(ws[1], c, "conv2d: channel mismatch");
        let (o, k) = (ws[0], ws[2]);
        let mut out = vec![0.0; o * h * wd];
        conv_forward(tx.data(), tw.data(), &mut out, c, h, wd, o, k);
        let rg = self.rg(&[x, w]);
        self.push(Tensor::from_parts(vec![o, h, wd], out), Op::Conv2d { x, w }, rg)
    }

    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let (c, h, w) = dims3(tx.shape());
        assert_eq!(tb.len(), c, "channel_bias: length mismatch");
        let mut out = tx.data().to_vec();
        for (ch, &bv) in tb.data().iter().enumerate() {
            for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(Tensor::from_parts(vec![c, h, w], out), Op::ChannelBias { x, b }, rg)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (c, h, w) = dims3(tx.shape());
        let (oh, ow) = (2 * h, 2 * w);
        let d = tx.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = d[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![c, oh, ow], out), Op::Upsample2(x), rg)
    }

    /// 2×2 average pooling; a trailing odd row/column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (c, h, w) = dims3(tx.shape());
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "avg_pool2: input too small");
        let d = tx.data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let b = ch * h * w;
                    let s = d[b + 2 * y * w + 2 * xx]
                        + d[b + 2 * y * w + 2 * xx + 1]
                        + d[b + (2 * y + 1) * w + 2 * xx]
                        + d[b + (2 * y + 1) * w + 2 * xx + 1];
                    out[(ch * oh + y) * ow + xx] = 0.25 * s;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![c, oh, ow], out), Op::AvgPool2(x), rg)
    }

    /// Separable "valid" filtering of each plane with a fixed 1-D kernel.
    pub fn filter_valid(&mut self, x: Var, kernel: Arc<[f64]>) -> Var {
        let tx = self.value(x);
        let (c, h, w) = dims3(tx.shape());
        let k = kernel.len();
        assert!(h >= k && w >= k, "filter_valid: input smaller than kernel");
        let out = separable_filter_valid(tx.data(), c, h, w, &kernel);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![c, h + 1 - k, w + 1 - k], out),
            Op::FilterValid { x, kernel },
            rg,
        )
    }

    /// `F Fᵀ` where `F` is `x` flattened to `[c, rest]`.
    pub fn gram(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.shape()[0];
        let n = tx.len() / c;
        let d = tx.data();
        let mut out = vec![0.0; c * c];
        for i in 0..c {
            for j in i..c {
                let v = dot(&d[i * n..(i + 1) * n], &d[j * n..(j + 1) * n]);
                out[i * c + j] = v;
                out[j * c + i] = v;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![c, c], out), Op::Gram(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x);
        assert_eq!(
            shape.iter().product::<usize>(),
            t.len(),
            "reshape: element count mismatch"
        );
        let out = Tensor::from_parts(shape, t.data().to_vec());
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Spatial crop of a `[c, h, w]` value.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Var {
        let tx = self.value(x);
        let (c, h, w) = dims3(tx.shape());
        assert!(top + height <= h && left + width <= w, "crop out of bounds");
        let d = tx.data();
        let mut out = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in top..top + height {
                let row = (ch * h + y) * w;
                out.extend_from_slice(&d[row + left..row + left + width]);
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![c, height, width], out),
            Op::Crop { x, top, left },
            rg,
        )
    }

    pub fn resize(&mut self, x: Var, plan: Arc<ResizePlan>) -> Var {
        let tx = self.value(x);
        let (c, h, w) = dims3(tx.shape());
        assert_eq!((h, w), (plan.in_h, plan.in_w), "resize: plan mismatch");
        let mut out = Vec::with_capacity(c * plan.out_h * plan.out_w);
        for ch in 0..c {
            out.extend(plan.apply(&tx.data()[ch * h * w..(ch + 1) * h * w]));
        }
        let shape = vec![c, plan.out_h, plan.out_w];
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Resize { x, plan }, rg)
    }

    /// Concatenate flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), rg)
    }

    /// Contiguous range of the flattened input.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).data()[start..start + len].to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::vector(out), Op::Slice { x, start }, rg)
    }

    /// Accumulate gradients of `root` (seeded with ones) into every node that
    /// requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            let s = self.nodes[root.0].value.shape().to_vec();
            grads[root.0] = Some(Tensor::filled(&s, 1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::from_parts(self.value(v).shape().to_vec(), data)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let d = gd.iter().map(|v| -v).collect();
                    let t = self.like(*b, d);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let t = self.like(*a, d);
                    self.accumulate(grads, *a, t);
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(va).map(|(g, x)| g * x).collect();
                    let t = self.like(*b, d);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = gd.iter().zip(vb).map(|(g, y)| g / y).collect();
                    let t = self.like(*a, d);
                    self.accumulate(grads, *a, t);
                }
                if self.wants(*b) {
                    let d = gd
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    let t = self.like(*b, d);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Scale(a, s) => {
                let d = gd.iter().map(|v| v * s).collect();
                let t = self.like(*a, d);
                self.accumulate(grads, *a, t);
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Unary(a, u) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| g * u.derivative(x, y))
                    .collect();
                let t = self.like(*a, d);
                self.accumulate(grads, *a, t);
            }
            Op::Sum(a) => {
                let t = Tensor::filled(self.shape(*a), gd[0]);
                self.accumulate(grads, *a, t);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let t = Tensor::filled(self.shape(*a), gd[0] / n);
                self.accumulate(grads, *a, t);
            }
            Op::MatVec { w, x } => {
                let (tw, tx) = (self.value(*w), self.value(*x));
                let (m, n) = (tw.shape()[0], tw.shape()[1]);
                if self.wants(*w) {
                    let mut dw = vec![0.0; m * n];
                    for (i, &gi) in gd.iter().enumerate() {
                        axpy(gi, tx.data(), &mut dw[i * n..(i + 1) * n]);
                    }
                    let t = self.like(*w, dw);
                    self.accumulate(grads, *w, t);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; n];
                    for (i, &gi) in gd.iter().enumerate() {
                        axpy(gi, &tw.data()[i * n..(i + 1) * n], &mut dx);
                    }
                    let t = self.like(*x, dx);
                    self.accumulate(grads, *x, t);
                }
            }
            Op::MatTVec { w, g: gv } => {
                // out_j = Σ_i W_ij g_i
                let (tw, tg) = (self.value(*w), self.value(*gv));
                let (m, n) = (tw.shape()[0], tw.shape()[1]);
                if self.wants(*w) {
                    let mut dw = vec![0.0; m * n];
                    for (i, &gi) in tg.data().iter().enumerate() {
                        axpy(gi, gd, &mut dw[i * n..(i + 1) * n]);
                    }
                    let t = self.like(*w, dw);
                    self.accumulate(grads, *w, t);
                }
                if self.wants(*gv) {
                    let dg = (0..m).map(|i| dot(&tw.data()[i * n..(i + 1) * n], gd)).collect();
                    let t = self.like(*gv, dg);
                    self.accumulate(grads, *gv, t);
                }
            }
            Op::Conv2d { x, w } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (c, h, wd) = dims3(tx.shape());
                let ws = tw.shape();
                let (o, k) = (ws[0], ws[2]);
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut dx = if want_x { vec![0.0; tx.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![0.0; tw.len()] } else { Vec::new() };
                conv_backward(
                    tx.data(),
                    tw.data(),
                    gd,
                    want_x.then_some(dx.as_mut_slice()),
                    want_w.then_some(dw.as_mut_slice()),
                    c,
                    h,
                    wd,
                    o,
                    k,
                );
                if want_x {
                    let t = self.like(*x, dx);
                    self.accumulate(grads, *x, t);
                }
                if want_w {
                    let t = self.like(*w, dw);
                    self.accumulate(grads, *w, t);
                }
            }
            Op::ChannelBias { x, b } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.clone());
                }
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let plane = gd.len() / c;
                    let db = (0..c).map(|ch| gd[ch * plane..(ch + 1) * plane].iter().sum()).collect();
                    let t = self.like(*b, db);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Upsample2(x) => {
                let (c, h, w) = dims3(self.shape(*x));
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[(ch * h + y / 2) * w + xx / 2] += gd[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                let t = self.like(*x, dx);
                self.accumulate(grads, *x, t);
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = dims3(self.shape(*x));
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * gd[(ch * oh + y) * ow + xx];
                            let b = ch * h * w;
                            dx[b + 2 * y * w + 2 * xx] += gv;
                            dx[b + 2 * y * w + 2 * xx + 1] += gv;
                            dx[b + (2 * y + 1) * w + 2 * xx] += gv;
                            dx[b + (2 * y + 1) * w + 2 * xx + 1] += gv;
                        }
                    }
                }
                let t = self.like(*x, dx);
                self.accumulate(grads, *x, t);
            }
            Op::FilterValid { x, kernel } => {
                let (c, h, w) = dims3(self.shape(*x));
                let k = kernel.len();
                let (oh, ow) = (h + 1 - k, w + 1 - k);
                let mut dx = vec![0.0; c * h * w];
                let mut tmp = vec![0.0; h * ow];
                for ch in 0..c {
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    let gp = &gd[ch * oh * ow..(ch + 1) * oh * ow];
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = gp[y * ow + xx];
                            for (i, kv) in kernel.iter().enumerate() {
                                tmp[(y + i) * ow + xx] += gv * kv;
                            }
                        }
                    }
                    let dp = &mut dx[ch * h * w..(ch + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..ow {
                            let tv = tmp[y * ow + xx];
                            for (i, kv) in kernel.iter().enumerate() {
                                dp[y * w + xx + i] += tv * kv;
                            }
                        }
                    }
                }
                let t = self.like(*x, dx);
                self.accumulate(grads, *x, t);
            }
            Op::Gram(x) => {
                // d(F Fᵀ) = (G + Gᵀ) F
                let tx = self.value(*x);
                let c = tx.shape()[0];
                let n = tx.len() / c;
                let f = tx.data();
                let mut dx = vec![0.0; c * n];
                for i in 0..c {
                    for j in 0..c {
                        let coef = gd[i * c + j] + gd[j * c + i];
                        if coef != 0.0 {
                            axpy(coef, &f[j * n..(j + 1) * n], &mut dx[i * n..(i + 1) * n]);
                        }
                    }
                }
                let t = self.like(*x, dx);
                self.accumulate(grads, *x, t);
            }
            Op::Reshape(x) => {
                let t = self.like(*x, gd.to_vec());
                self.accumulate(grads, *x, t);
            }
            Op::Crop { x, top, left } => {
                let (c, h, w) = dims3(self.shape(*x));
                let (_, ch_h, ch_w) = dims3(node.value.shape());
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..ch_h {
                        let src = (ch * ch_h + y) * ch_w;
                        let dst = (ch * h + y + top) * w + left;
                        dx[dst..dst + ch_w].copy_from_slice(&gd[src..src + ch_w]);
                    }
                }
                let t = self.like(*x, dx);
                self.accumulate(grads, *x, t);
            }
            Op::Resize { x, plan } => {
                let (c, h, w) = dims3(self.shape(*x));
                let op = plan.out_h * plan.out_w;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    plan.apply_transpose(&gd[ch * op..(ch + 1) * op], &mut dx[ch * h * w..(ch + 1) * h * w]);
                }
                let t = self.like(*x, dx);
                self.accumulate(grads, *x, t);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let t = self.like(p, gd[off..off + n].to_vec());
                        self.accumulate(grads, p, t);
                    }
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[*start..*start + gd.len()].copy_from_slice(gd);
                let t = self.like(*x, dx);
                self.accumulate(grads, *x, t);
            }
        }
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected a [c, h, w] value, got {s:?}");
    (s[0], s[1], s[2])
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Valid output column range `[lo, hi)` for kernel offset `d` (relative to
/// the centre) on an axis of length `n`.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(x: &[f64], w: &[f64], out: &mut [f64], c: usize, h: usize, wd: usize, o: usize, k: usize) {
    let p = (k / 2) as isize;
    let plane = h * wd;
    for oc in 0..o {
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        for ic in 0..c {
            let src = &x[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (ylo, yhi) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let wv = w[((oc * c + ic) * k + ky) * k + kx];
                    let (xlo, xhi) = span(wd, dx);
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[y * wd + xlo..y * wd + xhi];
                        let sx0 = (xlo as isize + dx) as usize;
                        let srow = &src[sy * wd + sx0..sy * wd + sx0 + (xhi - xlo)];
                        axpy(wv, srow, drow);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
) {
    let p = (k / 2) as isize;
    let plane = h * wd;
    for oc in 0..o {
        let gp = &g[oc * plane..(oc + 1) * plane];
        for ic in 0..c {
            let src = &x[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - p;
                let (ylo, yhi) = span(h, dy);
                for kx in 0..k {
                    let ddx = kx as isize - p;
                    let (xlo, xhi) = span(wd, ddx);
                    let widx = ((oc * c + ic) * k + ky) * k + kx;
                    let wv = w[widx];
                    let sx0 = (xlo as isize + ddx) as usize;
                    let n = xhi - xlo;
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gp[y * wd + xlo..y * wd + xhi];
                        if dw.is_some() {
                            acc += dot(grow, &src[sy * wd + sx0..sy * wd + sx0 + n]);
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let base = ic * plane + sy * wd + sx0;
                            axpy(wv, grow, &mut dx[base..base + n]);
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}
