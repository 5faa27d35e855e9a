//! Reverse-mode tape over dense NCHW tensors.
//!
//! Every forward op appends a node; nodes only reference earlier nodes, so the
//! tape is topologically ordered by construction and backward is a single
//! reverse sweep.

use super::{Element, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    ConcatChannels(Vec<Var>),
    AvgPool2(Var),
    UpsampleNearest2(Var),
    AddChannelBias {
        input: Var,
        bias: Var,
    },
    Mse(Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Silu(a) | Op::AvgPool2(a) | Op::UpsampleNearest2(a) => vec![*a],
            Op::ConcatChannels(xs) => xs.clone(),
            Op::AddChannelBias { input, bias } => vec![*input, *bias],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. One graph per training step.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// participate in the loss.
    pub fn get(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn nchw(t: &Tensor<impl Element>, op: &str) -> Result<[usize; 4], TensorError> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(TensorError::ShapeMismatch(format!(
            "{op}: expected [N, C, H, W], got {s:?}"
        ))),
    }
}

/// Unfold `x` (`[C, H, W]`) into `[C*k*k, H*W]` for a stride-1 "same" convolution.
fn im2col<T: Element>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    out[..x0.min(w)].fill(T::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    out[x1.max(x0).min(w)..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `dx`.
fn col2im<T: Element>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dx[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let ddx = kx as isize - pad;
                let ddy = ky as isize - pad;
                for y in 0..h {
                    let sy = y as isize + ddy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ddx).max(0) as usize;
                    let x1 = (w as isize - ddx).min(w as isize).max(0) as usize;
                    if x1 <= x0 {
                        continue;
                    }
                    let s0 = (x0 as isize + ddx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op, name: &'static str) -> Result<Var, TensorError> {
        let value = value.check_finite(name)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        // ops over constants only are folded into constants
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push(value, op, requires_grad))
    }

    /// Stride-1, "same"-padded 2D convolution with an odd square kernel.
    ///
    /// `input` is `[N, Cin, H, W]`, `weight` is `[Cout, Cin, k, k]`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let [n, cin, h, w] = nchw(self.value(input), "conv2d")?;
        let (cout, k) = match self.value(weight).shape() {
            &[co, ci, kh, kw] if ci == cin && kh == kw && kh % 2 == 1 => (co, kh),
            s => {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv2d: weight {s:?} incompatible with {cin} input channels"
                )))
            }
        };
        if self.value(bias).shape() != [cout] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d: bias {:?}, expected [{cout}]",
                self.value(bias).shape()
            )));
        }
        let hw = h * w;
        let ckk = cin * k * k;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![T::zero(); n * cout * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ckk * hw] };
        for s in 0..n {
            let xs = &x[s * cin * hw..(s + 1) * cin * hw];
            let os = &mut out[s * cout * hw..(s + 1) * cout * hw];
            for (co, plane) in os.chunks_exact_mut(hw).enumerate() {
                plane.fill(b[co]);
            }
            let src: &[T] = if k == 1 {
                xs
            } else {
                im2col(xs, cin, h, w, k, &mut cols);
                &cols
            };
            T::gemm(cout, ckk, hw, wt, false, src, false, T::one(), os);
        }
        let value = Tensor::new(vec![n, cout, h, w], out)?;
        self.record(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel: k,
            },
            "conv2d",
        )
    }

    /// `input [N, in] . weight[out, in]^T + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let (n, fin) = match self.value(input).shape() {
            &[n, f] => (n, f),
            s => return Err(TensorError::ShapeMismatch(format!("linear: input {s:?}"))),
        };
        let fout = match self.value(weight).shape() {
            &[o, i] if i == fin => o,
            s => {
                return Err(TensorError::ShapeMismatch(format!(
                    "linear: weight {s:?} for {fin} inputs"
                )))
            }
        };
        if self.value(bias).shape() != [fout] {
            return Err(TensorError::ShapeMismatch(format!(
                "linear: bias {:?}, expected [{fout}]",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
        T::gemm(
            n,
            fin,
            fout,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![n, fout], out)?;
        self.record(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            "linear",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).add(self.value(b))?;
        self.record(value, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let f = T::lit(factor);
        let value = self.value(a).scale(f);
        self.record(value, Op::Scale(a, factor), "scale")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.record(value, Op::Silu(a), "silu")
    }

    /// Concatenate `[N, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::ShapeMismatch("concat of zero tensors".into()))?;
        let [n, _, h, w] = nchw(self.value(first), "concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pn, pc, ph, pw] = nchw(self.value(p), "concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_channels: {:?} vs {:?}",
                    self.value(p).shape(),
                    self.value(first).shape()
                )));
            }
            channels.push(pc);
        }
        let ctot: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                out.extend_from_slice(&self.value(p).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let value = Tensor::new(vec![n, ctot, h, w], out)?;
        self.record(value, Op::ConcatChannels(parts.to_vec()), "concat_channels")
    }

    /// 2x2 average pooling.
    pub fn avgpool2(&mut self, a: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.value(a), "avgpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "avgpool2: spatial {h}x{w} not divisible by 2"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(a).data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.record(value, Op::AvgPool2(a), "avgpool2")
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.value(a), "upsample_nearest2")?;
        let (ho, wo) = (2 * h, 2 * w);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.record(value, Op::UpsampleNearest2(a), "upsample_nearest2")
    }

    /// Add a per-sample, per-channel bias `[N, C]` to `[N, C, H, W]`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = nchw(self.value(input), "add_channel_bias")?;
        if self.value(bias).shape() != [n, c] {
            return Err(TensorError::ShapeMismatch(format!(
                "add_channel_bias: bias {:?}, expected [{n}, {c}]",
                self.value(bias).shape()
            )));
        }
        let hw = h * w;
        let b = self.value(bias).data();
        let mut out = self.value(input).data().to_vec();
        for (p, plane) in out.chunks_exact_mut(hw).enumerate() {
            let bv = b[p];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.record(value, Op::AddChannelBias { input, bias }, "add_channel_bias")
    }

    /// Mean squared error over all elements, as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.value(a).expect_same_shape(self.value(b), "mse")?;
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d = (x - y).as_f64();
                d * d
            })
            .sum();
        let value = Tensor::scalar(T::lit(sum / self.value(a).numel() as f64));
        self.record(value, Op::Mse(a, b), "mse")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedGraph);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(upstream);
                continue;
            }
            for (var, g) in self.local_grads(node, &upstream)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // only leaves keep their gradient
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(&self, node: &Node<T>, up: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, TensorError> {
        let g = up.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Mul(a, b) => {
                let ga = up.zip_map(self.value(*b), |u, y| u * y)?;
                let gb = up.zip_map(self.value(*a), |u, x| u * x)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, up.scale(T::lit(*f)))],
            Op::Silu(a) => {
                let ga = up.zip_map(self.value(*a), |u, x| {
                    let s = sigmoid(x);
                    u * s * (T::one() + x * (T::one() - s))
                })?;
                vec![(*a, ga)]
            }
            Op::Mse(a, b) => {
                let x = self.value(*a);
                let y = self.value(*b);
                let coef = g[0] * T::lit(2.0 / x.numel() as f64);
                let ga = x.zip_map(y, |p, q| coef * (p - q))?;
                let gb = ga.scale(-T::one());
                vec![(*a, ga), (*b, gb)]
            }
            Op::AddChannelBias { input, bias } => {
                let [n, c, h, w] = nchw(up, "add_channel_bias")?;
                let hw = h * w;
                let gb: Vec<T> = g.chunks_exact(hw).map(|p| p.iter().copied().sum()).collect();
                vec![(*input, up.clone()), (*bias, Tensor::new(vec![n, c], gb)?)]
            }
            Op::AvgPool2(a) => {
                let [n, c, h, w] = nchw(self.value(*a), "avgpool2")?;
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            dst[y * w + x] = src[(y / 2) * wo + x / 2] * quarter;
                        }
                    }
                }
                vec![(*a, Tensor::new(vec![n, c, h, w], gx)?)]
            }
            Op::UpsampleNearest2(a) => {
                let [n, c, h, w] = nchw(self.value(*a), "upsample_nearest2")?;
                let (ho, wo) = (2 * h, 2 * w);
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..ho {
                        for x in 0..wo {
                            dst[(y / 2) * w + x / 2] += src[y * wo + x];
                        }
                    }
                }
                vec![(*a, Tensor::new(vec![n, c, h, w], gx)?)]
            }
            Op::ConcatChannels(parts) => {
                let [n, _, h, w] = nchw(up, "concat_channels")?;
                let hw = h * w;
                let mut out: Vec<Vec<T>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(self.value(*p).numel()))
                    .collect();
                let mut offset = 0;
                for _ in 0..n {
                    for (buf, p) in out.iter_mut().zip(parts) {
                        let len = self.value(*p).dim(1) * hw;
                        buf.extend_from_slice(&g[offset..offset + len]);
                        offset += len;
                    }
                }
                parts
                    .iter()
                    .zip(out)
                    .map(|(p, buf)| Ok((*p, Tensor::new(self.value(*p).shape().to_vec(), buf)?)))
                    .collect::<Result<_, TensorError>>()?
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, fin) = (x.dim(0), x.dim(1));
                let fout = wt.dim(0);
                let mut gx = vec![T::zero(); n * fin];
                T::gemm(n, fout, fin, g, false, wt.data(), false, T::zero(), &mut gx);
                let mut gw = vec![T::zero(); fout * fin];
                T::gemm(fout, n, fin, g, true, x.data(), false, T::zero(), &mut gw);
                let mut gb = vec![T::zero(); fout];
                for row in g.chunks_exact(fout) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                vec![
                    (*input, Tensor::new(vec![n, fin], gx)?),
                    (*weight, Tensor::new(vec![fout, fin], gw)?),
                    (*bias, Tensor::new(vec![fout], gb)?),
                ]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel,
            } => {
                let k = *kernel;
                let x = self.value(*input);
                let wt = self.value(*weight);
                let [n, cin, h, w] = nchw(x, "conv2d")?;
                let cout = wt.dim(0);
                let hw = h * w;
                let ckk = cin * k * k;
                let need_input = self.nodes[input.0].requires_grad;
                let mut gx = vec![T::zero(); if need_input { n * cin * hw } else { 0 }];
                let mut gw = vec![T::zero(); cout * ckk];
                let mut gb = vec![T::zero(); cout];
                let mut cols = vec![T::zero(); if k == 1 { 0 } else { ckk * hw }];
                let mut dcols = vec![T::zero(); if k == 1 || !need_input { 0 } else { ckk * hw }];
                for s in 0..n {
                    let xs = &x.data()[s * cin * hw..(s + 1) * cin * hw];
                    let gs = &g[s * cout * hw..(s + 1) * cout * hw];
                    for (co, plane) in gs.chunks_exact(hw).enumerate() {
                        gb[co] += plane.iter().copied().sum::<T>();
                    }
                    let src: &[T] = if k == 1 {
                        xs
                    } else {
                        im2col(xs, cin, h, w, k, &mut cols);
                        &cols
                    };
                    T::gemm(cout, hw, ckk, gs, false, src, true, T::one(), &mut gw);
                    if need_input {
                        let gxs = &mut gx[s * cin * hw..(s + 1) * cin * hw];
                        if k == 1 {
                            T::gemm(ckk, cout, hw, wt.data(), true, gs, false, T::zero(), gxs);
                        } else {
                            T::gemm(ckk, cout, hw, wt.data(), true, gs, false, T::zero(), &mut dcols);
                            col2im(&dcols, cin, h, w, k, gxs);
                        }
                    }
                }
                let mut out = vec![
                    (*weight, Tensor::new(wt.shape().to_vec(), gw)?),
                    (*bias, Tensor::new(vec![cout], gb)?),
                ];
                if need_input {
                    out.push((*input, Tensor::new(vec![n, cin, h, w], gx)?));
                }
                out
            }
        })
    }
}
