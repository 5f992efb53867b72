//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the op kind, parent indices, and the computed output tensor. Nodes are
//! appended in evaluation order, so the list is already topologically sorted
//! and [`Tape::backward`] is a single reverse sweep. A tape is single-use:
//! build the graph, call `backward` once, read gradients, drop it.
//!
//! Design choices worth knowing about:
//!
//! * **Shape errors panic.** Mismatched operand shapes are programmer errors,
//!   caught at graph-construction time with a descriptive message.
//! * **Non-finite values poison the tape.** Every op output (and every leaf)
//!   is scanned; the first NaN/Inf records which op produced it, and
//!   `backward` then refuses to run, returning the poisoned context. This
//!   turns silent numerical blow-ups into attributable errors.
//! * **Gradients flow only where needed.** Constants (inputs, noise draws,
//!   masks) are marked `requires_grad = false` and the backward sweep skips
//!   them, so pinned noise never accumulates gradient buffers.
//! * **Reductions accumulate in `f64`** even when the tape scalar is `f32`
//!   (sum, cross-entropy, bias-gradient column sums).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// How gradients are routed through an elementwise mask (see
/// [`Tape::mask_mul`]).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskGradMode {
    /// Masked entries still receive gradient, so a pruned weight keeps
    /// training in the background and can win back a slot later.
    Dense,
    /// Masked entries receive zero gradient and are frozen at their value.
    Masked,
}

enum Op<S: Scalar> {
    Leaf,
    Constant,
    /// `a [m,k] · b [k,n] -> [m,n]`
    MatMul { a: Var, b: Var },
    /// `x [n,c,h,w] * k [f,c,kh,kw] -> [n,f,oh,ow]`, stride/pad uniform.
    /// Keeps the unrolled-patch matrix from the forward pass for backward.
    Conv2d { x: Var, k: Var, stride: usize, pad: usize, col: Vec<S> },
    /// Max pooling with stored argmax (flat input index per output cell).
    MaxPool2d { x: Var, argmax: Vec<u32> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// `x [n,d] + b [d]`, bias broadcast over rows.
    AddRowBias { x: Var, b: Var },
    /// `x [n,c,h,w] + b [c]`, bias broadcast over everything but channels.
    AddChanBias { x: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Exp { x: Var },
    /// `ln(x + eps)`; `x` must be nonnegative, `eps` keeps the log finite.
    LnEps { x: Var, eps: f64 },
    /// `sqrt(x + eps)`; `eps` keeps the gradient bounded near zero.
    SqrtEps { x: Var },
    Square { x: Var },
    /// `scale * x + shift` with compile-time-constant coefficients.
    Affine { x: Var, scale: f64 },
    /// `clamp(x, 0, 1)`; gradient passes only where `0 < x < 1` strictly.
    Clamp01 { x: Var },
    Reshape { x: Var },
    /// Sum of all entries to a `[1]` scalar.
    Sum { x: Var },
    /// Mean softmax cross-entropy over rows of `logits` against integer
    /// labels; keeps the softmax probabilities for backward.
    MeanCrossEntropy { logits: Var, labels: Vec<u32>, probs: Vec<S> },
    /// `x ⊙ mask` with selectable gradient routing.
    MaskMul { x: Var, mask: Vec<S>, mode: MaskGradMode },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Single-use reverse-mode tape.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
    poisoned: Option<String>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false, poisoned: None }
    }

    /// Register a differentiable input (a parameter). The tensor is copied
    /// onto the tape; gradients are read back via [`Tape::grad`] after
    /// backward.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(Op::Leaf, t.clone(), true, "leaf")
    }

    /// Register a non-differentiable input (data, noise, masks).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Op::Constant, t, false, "constant")
    }

    /// Output tensor of a node.
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// The op that first produced a NaN/Inf, if any.
    pub fn poisoned(&self) -> Option<&str> {
        self.poisoned.as_deref()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool, context: &str) -> Var {
        if self.poisoned.is_none() && !value.data().iter().all(|v| v.is_finite()) {
            self.poisoned = Some(context.to_string());
        }
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- graph construction ------------------------------------------------

    /// Matrix product `a [m,k] · b [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ad, bd) = (self.value(a).dims().to_vec(), self.value(b).dims().to_vec());
        assert_eq!(ad.len(), 2, "matmul: left operand must be rank 2, got {ad:?}");
        assert_eq!(bd.len(), 2, "matmul: right operand must be rank 2, got {bd:?}");
        assert_eq!(ad[1], bd[0], "matmul: inner dimensions differ: {ad:?} vs {bd:?}");
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![S::zero(); m * n];
        mm_nn(self.value(a).data(), m, k, self.value(b).data(), n, &mut out);
        let value = Tensor::new(vec![m, n], out).expect("matmul output size");
        let rg = self.req(a) || self.req(b);
        self.push(Op::MatMul { a, b }, value, rg, "matmul")
    }

    /// 2-D convolution, NCHW layout, uniform stride and zero padding.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Var {
        let xd = self.value(x).dims().to_vec();
        let kd = self.value(k).dims().to_vec();
        assert_eq!(xd.len(), 4, "conv2d: input must be rank 4 (NCHW), got {xd:?}");
        assert_eq!(kd.len(), 4, "conv2d: kernel must be rank 4 (FCHW), got {kd:?}");
        assert_eq!(xd[1], kd[1], "conv2d: channel counts differ: input {xd:?}, kernel {kd:?}");
        assert!(stride >= 1, "conv2d: stride must be at least 1");
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (f, _, kh, kw) = (kd[0], kd[1], kd[2], kd[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let rows = n * oh * ow;

        let col = im2col(self.value(x).data(), n, c, h, w, kh, kw, stride, pad, oh, ow);
        // kernel [f, ckk] transposed to [ckk, f] so the product is in
        // row-times-matrix form, which vectorizes.
        let kt = transpose(self.value(k).data(), f, ckk);
        let mut flat = vec![S::zero(); rows * f];
        mm_nn(&col, rows, ckk, &kt, f, &mut flat);
        // [rows, f] -> [n, f, oh, ow]
        let mut out = vec![S::zero(); n * f * oh * ow];
        for r in 0..rows {
            let (ni, sp) = (r / (oh * ow), r % (oh * ow));
            for fi in 0..f {
                out[((ni * f) + fi) * oh * ow + sp] = flat[r * f + fi];
            }
        }
        let value = Tensor::new(vec![n, f, oh, ow], out).expect("conv2d output size");
        let rg = self.req(x) || self.req(k);
        self.push(Op::Conv2d { x, k, stride, pad, col }, value, rg, "conv2d")
    }

    /// Max pooling over `size`×`size` windows with the given stride
    /// (valid positions only).
    pub fn maxpool2d(&mut self, x: Var, size: usize, stride: usize) -> Var {
        let xd = self.value(x).dims().to_vec();
        assert_eq!(xd.len(), 4, "maxpool2d: input must be rank 4 (NCHW), got {xd:?}");
        assert!(size >= 1 && stride >= 1, "maxpool2d: size and stride must be at least 1");
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        assert!(h >= size && w >= size, "maxpool2d: window larger than input");
        let oh = (h - size) / stride + 1;
        let ow = (w - size) / stride + 1;
        let data = self.value(x).data();
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_idx = 0usize;
                        for di in 0..size {
                            for dj in 0..size {
                                let idx = base + (oi * stride + di) * w + (oj * stride + dj);
                                if data[idx] > best {
                                    best = data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = (ni * c + ci) * oh * ow + oi * ow + oj;
                        out[o] = best;
                        argmax[o] = best_idx as u32;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out).expect("maxpool2d output size");
        let rg = self.req(x);
        self.push(Op::MaxPool2d { x, argmax }, value, rg, "maxpool2d")
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ad, bd) = (self.value(a).dims(), self.value(b).dims());
        assert_eq!(ad, bd, "{name}: operand shapes differ: {ad:?} vs {bd:?}");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ad.to_vec(), data).expect("binary output size")
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary_same_shape(a, b, "add", |x, y| x + y);
        let rg = self.req(a) || self.req(b);
        self.push(Op::Add { a, b }, value, rg, "add")
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary_same_shape(a, b, "sub", |x, y| x - y);
        let rg = self.req(a) || self.req(b);
        self.push(Op::Sub { a, b }, value, rg, "sub")
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary_same_shape(a, b, "mul", |x, y| x * y);
        let rg = self.req(a) || self.req(b);
        self.push(Op::Mul { a, b }, value, rg, "mul")
    }

    /// Add a `[d]` bias to every row of `x [n,d]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xd = self.value(x).dims().to_vec();
        let bd = self.value(b).dims().to_vec();
        assert_eq!(xd.len(), 2, "add_row_bias: input must be rank 2, got {xd:?}");
        assert_eq!(bd, vec![xd[1]], "add_row_bias: bias shape {bd:?} does not match columns of {xd:?}");
        let (n, d) = (xd[0], xd[1]);
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, &bv) in out[i * d..(i + 1) * d].iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![n, d], out).expect("add_row_bias output size");
        let rg = self.req(x) || self.req(b);
        self.push(Op::AddRowBias { x, b }, value, rg, "add_row_bias")
    }

    /// Add a `[c]` bias to every spatial position of `x [n,c,h,w]`.
    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let xd = self.value(x).dims().to_vec();
        let bd = self.value(b).dims().to_vec();
        assert_eq!(xd.len(), 4, "add_chan_bias: input must be rank 4, got {xd:?}");
        assert_eq!(bd, vec![xd[1]], "add_chan_bias: bias shape {bd:?} does not match channels of {xd:?}");
        let (n, c, hw) = (xd[0], xd[1], xd[2] * xd[3]);
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for ni in 0..n {
            for (ci, &bv) in bias.iter().enumerate() {
                for o in &mut out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(xd, out).expect("add_chan_bias output size");
        let rg = self.req(x) || self.req(b);
        self.push(Op::AddChanBias { x, b }, value, rg, "add_chan_bias")
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S) -> Tensor<S> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        Tensor::new(v.dims().to_vec(), data).expect("unary output size")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.unary(x, |a| if a > S::zero() { a } else { S::zero() });
        let rg = self.req(x);
        self.push(Op::Relu { x }, value, rg, "relu")
    }

    /// Numerically stable logistic function.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.unary(x, sigmoid_scalar);
        let rg = self.req(x);
        self.push(Op::Sigmoid { x }, value, rg, "sigmoid")
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.unary(x, softplus_scalar);
        let rg = self.req(x);
        self.push(Op::Softplus { x }, value, rg, "softplus")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.unary(x, |a| a.exp());
        let rg = self.req(x);
        self.push(Op::Exp { x }, value, rg, "exp")
    }

    /// `ln(x + eps)` for nonnegative `x`; `eps` keeps zeros finite.
    pub fn ln_eps(&mut self, x: Var, eps: f64) -> Var {
        let e = S::from_f64(eps);
        let value = self.unary(x, |a| (a + e).ln());
        let rg = self.req(x);
        self.push(Op::LnEps { x, eps }, value, rg, "ln_eps")
    }

    /// `sqrt(x + eps)` for nonnegative `x`; `eps` bounds the gradient.
    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        let e = S::from_f64(eps);
        let value = self.unary(x, |a| (a + e).sqrt());
        let rg = self.req(x);
        self.push(Op::SqrtEps { x }, value, rg, "sqrt_eps")
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.unary(x, |a| a * a);
        let rg = self.req(x);
        self.push(Op::Square { x }, value, rg, "square")
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (sc, sh) = (S::from_f64(scale), S::from_f64(shift));
        let value = self.unary(x, |a| sc * a + sh);
        let rg = self.req(x);
        self.push(Op::Affine { x, scale }, value, rg, "affine")
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Clamp to [0, 1]. Gradient is zero at and beyond the boundaries.
    pub fn clamp01(&mut self, x: Var) -> Var {
        let value = self.unary(x, |a| a.max(S::zero()).min(S::one()));
        let rg = self.req(x);
        self.push(Op::Clamp01 { x }, value, rg, "clamp01")
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Var {
        let v = self.value(x);
        let expected: usize = dims.iter().product();
        assert_eq!(
            v.numel(),
            expected,
            "reshape: cannot view {:?} as {dims:?}",
            v.dims()
        );
        let value = Tensor::new(dims.to_vec(), v.data().to_vec()).expect("reshape output size");
        let rg = self.req(x);
        self.push(Op::Reshape { x }, value, rg, "reshape")
    }

    /// Sum of all entries, accumulated in `f64`, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let value = Tensor::scalar(total);
        let rg = self.req(x);
        self.push(Op::Sum { x }, value, rg, "sum")
    }

    /// Mean softmax cross-entropy of `logits [n, classes]` against integer
    /// labels. Log-sum-exp and the mean run in `f64`.
    pub fn mean_cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Var {
        let v = self.value(logits);
        let dims = v.dims();
        assert_eq!(dims.len(), 2, "mean_cross_entropy: logits must be rank 2, got {dims:?}");
        let (n, classes) = (dims[0], dims[1]);
        assert_eq!(labels.len(), n, "mean_cross_entropy: {} labels for {} rows", labels.len(), n);
        assert!(
            labels.iter().all(|&l| (l as usize) < classes),
            "mean_cross_entropy: label out of range for {classes} classes"
        );
        let data = v.data();
        let mut probs = vec![S::zero(); n * classes];
        let mut total = 0.0f64;
        for i in 0..n {
            let row = &data[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max).as_f64();
            let mut denom = 0.0f64;
            for &l in row {
                denom += (l.as_f64() - max).exp();
            }
            let lse = max + denom.ln();
            for (j, &l) in row.iter().enumerate() {
                probs[i * classes + j] = S::from_f64((l.as_f64() - lse).exp());
            }
            total += lse - data[i * classes + labels[i] as usize].as_f64();
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.req(logits);
        self.push(
            Op::MeanCrossEntropy { logits, labels: labels.to_vec(), probs },
            value,
            rg,
            "mean_cross_entropy",
        )
    }

    /// Elementwise product with a fixed 0/1 mask, with selectable gradient
    /// routing: [`MaskGradMode::Dense`] passes the full gradient through to
    /// masked entries, [`MaskGradMode::Masked`] zeroes it.
    pub fn mask_mul(&mut self, x: Var, mask: &[S], mode: MaskGradMode) -> Var {
        let v = self.value(x);
        assert_eq!(mask.len(), v.numel(), "mask_mul: mask length does not match tensor size");
        let data = v.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(v.dims().to_vec(), data).expect("mask_mul output size");
        let rg = self.req(x);
        self.push(Op::MaskMul { x, mask: mask.to_vec(), mode }, value, rg, "mask_mul")
    }

    // ---- backward ----------------------------------------------------------

    /// Run the reverse sweep from a scalar loss. Fails if the tape was
    /// already consumed, the loss is not a single element, or any forward op
    /// produced a non-finite value.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::InvalidBackward { reason: "backward already ran on this tape".into() });
        }
        if let Some(ctx) = &self.poisoned {
            return Err(Error::NonFinite { context: format!("forward op `{ctx}`") });
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidBackward {
                reason: format!("loss must be a scalar, got shape {:?}", self.value(loss).dims()),
            });
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the loss with respect to a node, if one was computed.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an owned tensor shaped like the node's value.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<S>> {
        let g = self.grad(v)?;
        Some(Tensor::new(self.nodes[v.0].value.dims().to_vec(), g.to_vec()).expect("grad size"))
    }

    fn accumulate_parents(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        // Adds this node's contribution into each differentiable parent.
        // Parents always precede the node on the tape, so indices never
        // alias the gradient being read.
        macro_rules! sink {
            ($var:expr) => {{
                let p: Var = $var;
                if self.nodes[p.0].requires_grad {
                    Some(
                        grads[p.0]
                            .get_or_insert_with(|| vec![S::zero(); self.nodes[p.0].value.numel()]),
                    )
                } else {
                    None
                }
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let (m, k) = {
                    let d = self.nodes[a.0].value.dims();
                    (d[0], d[1])
                };
                let nn = self.nodes[b.0].value.dims()[1];
                if let Some(ga) = sink!(*a) {
                    // dA = G · Bᵀ, computed with B transposed once so the
                    // inner loop stays in vectorizable row-update form.
                    let bt = transpose(bv, k, nn);
                    mm_nn(g, m, nn, &bt, k, ga);
                }
                if let Some(gb) = sink!(*b) {
                    // dB = Aᵀ · G
                    mm_tn_acc(av, m, k, g, nn, gb);
                }
            }
            Op::Conv2d { x, k, stride, pad, col } => {
                let xd = self.nodes[x.0].value.dims();
                let kd = self.nodes[k.0].value.dims();
                let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
                let (f, kh, kw) = (kd[0], kd[2], kd[3]);
                let od = self.nodes[i].value.dims();
                let (oh, ow) = (od[2], od[3]);
                let ckk = c * kh * kw;
                let rows = n * oh * ow;
                // [n,f,oh,ow] -> [rows, f]
                let mut gflat = vec![S::zero(); rows * f];
                for r in 0..rows {
                    let (ni, sp) = (r / (oh * ow), r % (oh * ow));
                    for fi in 0..f {
                        gflat[r * f + fi] = g[((ni * f) + fi) * oh * ow + sp];
                    }
                }
                if let Some(gk) = sink!(*k) {
                    // dK [f, ckk] = Gᵀ · col
                    mm_tn_acc(&gflat, rows, f, col, ckk, gk);
                }
                if let Some(gx) = sink!(*x) {
                    // dcol = G · Kflat, then scatter back to image layout.
                    let kflat = self.nodes[k.0].value.data();
                    let mut gcol = vec![S::zero(); rows * ckk];
                    mm_nn(&gflat, rows, f, kflat, ckk, &mut gcol);
                    col2im_acc(&gcol, n, c, h, w, kh, kw, *stride, *pad, oh, ow, gx);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(gx) = sink!(*x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src as usize] += g[o];
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = sink!(*a) {
                    axpy(ga, g, S::one());
                }
                if let Some(gb) = sink!(*b) {
                    axpy(gb, g, S::one());
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = sink!(*a) {
                    axpy(ga, g, S::one());
                }
                if let Some(gb) = sink!(*b) {
                    axpy(gb, g, -S::one());
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = sink!(*a) {
                    let bv = self.nodes[b.0].value.data();
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * x;
                    }
                }
                if let Some(gb) = sink!(*b) {
                    let av = self.nodes[a.0].value.data();
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::AddRowBias { x, b } => {
                if let Some(gx) = sink!(*x) {
                    axpy(gx, g, S::one());
                }
                if let Some(gb) = sink!(*b) {
                    let d = self.nodes[b.0].value.numel();
                    let n = g.len() / d;
                    // Column sums accumulate in f64 to keep batch-size
                    // independence of precision.
                    let mut acc = vec![0.0f64; d];
                    for i in 0..n {
                        for (a, &gv) in acc.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *a += gv.as_f64();
                        }
                    }
                    for (o, a) in gb.iter_mut().zip(acc) {
                        *o += S::from_f64(a);
                    }
                }
            }
            Op::AddChanBias { x, b } => {
                if let Some(gx) = sink!(*x) {
                    axpy(gx, g, S::one());
                }
                if let Some(gb) = sink!(*b) {
                    let xd = self.nodes[x.0].value.dims();
                    let (n, c, hw) = (xd[0], xd[1], xd[2] * xd[3]);
                    let mut acc = vec![0.0f64; c];
                    for ni in 0..n {
                        for (ci, a) in acc.iter_mut().enumerate() {
                            for &gv in &g[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                                *a += gv.as_f64();
                            }
                        }
                    }
                    for (o, a) in gb.iter_mut().zip(acc) {
                        *o += S::from_f64(a);
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(gx) = sink!(*x) {
                    let xv = self.nodes[x.0].value.data();
                    for ((o, &gv), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > S::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = sink!(*x) {
                    let yv = self.nodes[i].value.data();
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *o += gv * y * (S::one() - y);
                    }
                }
            }
            Op::Softplus { x } => {
                if let Some(gx) = sink!(*x) {
                    let xv = self.nodes[x.0].value.data();
                    for ((o, &gv), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * sigmoid_scalar(xi);
                    }
                }
            }
            Op::Exp { x } => {
                if let Some(gx) = sink!(*x) {
                    let yv = self.nodes[i].value.data();
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *o += gv * y;
                    }
                }
            }
            Op::LnEps { x, eps } => {
                if let Some(gx) = sink!(*x) {
                    let e = S::from_f64(*eps);
                    let xv = self.nodes[x.0].value.data();
                    for ((o, &gv), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv / (xi + e);
                    }
                }
            }
            Op::SqrtEps { x } => {
                if let Some(gx) = sink!(*x) {
                    let half = S::from_f64(0.5);
                    let yv = self.nodes[i].value.data();
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(yv) {
                        *o += gv * half / y;
                    }
                }
            }
            Op::Square { x } => {
                if let Some(gx) = sink!(*x) {
                    let two = S::from_f64(2.0);
                    let xv = self.nodes[x.0].value.data();
                    for ((o, &gv), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gv * two * xi;
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = sink!(*x) {
                    axpy(gx, g, S::from_f64(*scale));
                }
            }
            Op::Clamp01 { x } => {
                if let Some(gx) = sink!(*x) {
                    let xv = self.nodes[x.0].value.data();
                    for ((o, &gv), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > S::zero() && xi < S::one() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = sink!(*x) {
                    axpy(gx, g, S::one());
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = sink!(*x) {
                    let gv = g[0];
                    for o in gx.iter_mut() {
                        *o += gv;
                    }
                }
            }
            Op::MeanCrossEntropy { logits, labels, probs } => {
                if let Some(gl) = sink!(*logits) {
                    let n = labels.len();
                    let classes = gl.len() / n;
                    let scale = g[0] / S::from_f64(n as f64);
                    for (idx, (o, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let (row, col) = (idx / classes, idx % classes);
                        let target = if labels[row] as usize == col { S::one() } else { S::zero() };
                        *o += scale * (p - target);
                    }
                }
            }
            Op::MaskMul { x, mask, mode } => {
                if let Some(gx) = sink!(*x) {
                    match mode {
                        MaskGradMode::Dense => axpy(gx, g, S::one()),
                        MaskGradMode::Masked => {
                            for ((o, &gv), &m) in gx.iter_mut().zip(g).zip(mask) {
                                *o += gv * m;
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---- numerically stable scalar helpers --------------------------------------

#[inline]
fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn softplus_scalar<S: Scalar>(x: S) -> S {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    let ax = -x.abs();
    x.max(S::zero()) + ax.exp().ln_1p()
}

// ---- dense kernels -----------------------------------------------------------

/// `out [m,n] += a [m,k] · b [k,n]`. The inner loop is a row update
/// (`out_row += a_ip * b_row`), which the compiler vectorizes.
pub(crate) fn mm_nn<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out [k,n] += aᵀ [k,m] · g [m,n]`, expressed as accumulation over rows of
/// `a` so the inner loop stays a vectorizable row update.
pub(crate) fn mm_tn_acc<S: Scalar>(a: &[S], m: usize, k: usize, g: &[S], n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Transpose a row-major `[r, c]` buffer into `[c, r]`.
pub(crate) fn transpose<S: Scalar>(a: &[S], r: usize, c: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), r * c);
    let mut out = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// `y += alpha * x`.
#[inline]
fn axpy<S: Scalar>(y: &mut [S], x: &[S], alpha: S) {
    debug_assert_eq!(y.len(), x.len());
    if alpha == S::one() {
        for (o, &v) in y.iter_mut().zip(x) {
            *o += v;
        }
    } else {
        for (o, &v) in y.iter_mut().zip(x) {
            *o += alpha * v;
        }
    }
}

/// Unroll convolution patches: output `[n*oh*ow, c*kh*kw]`, zero padding.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ckk = c * kh * kw;
    let mut col = vec![S::zero(); n * oh * ow * ckk];
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let r = (ni * oh + oi) * ow + oj;
                let dst = &mut col[r * ckk..(r + 1) * ckk];
                for ci in 0..c {
                    let src_base = (ni * c + ci) * h * w;
                    for ki in 0..kh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue; // padded row stays zero
                        }
                        for kj in 0..kw {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dst[(ci * kh + ki) * kw + kj] =
                                x[src_base + ii as usize * w + jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a patch-matrix gradient back into image layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_acc<S: Scalar>(
    gcol: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    gx: &mut [S],
) {
    let ckk = c * kh * kw;
    for ni in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                let r = (ni * oh + oi) * ow + oj;
                let src = &gcol[r * ckk..(r + 1) * ckk];
                for ci in 0..c {
                    let dst_base = (ni * c + ci) * h * w;
                    for ki in 0..kh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            gx[dst_base + ii as usize * w + jj as usize] +=
                                src[(ci * kh + ki) * kw + kj];
                        }
                    }
                }
            }
        }
    }
}
