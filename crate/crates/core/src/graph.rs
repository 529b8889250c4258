//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op as it is evaluated. [`Graph::backward`] walks
//! the tape in reverse and only visits nodes that depend on a parameter leaf,
//! so gradients of frozen weights are never computed.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, ConvDims};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Softplus(Var),
    Sum(Var),
    WeightedSum(Var, Vec<T>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Upsample2x(Var),
    AvgPool2x(Var),
    GlobalAvgPool(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    PixelNorm {
        x: Var,
        inv: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    NoiseAdd {
        x: Var,
        noise: Var,
        strength: Var,
    },
    Select {
        x: Var,
        layer: usize,
    },
    Repeat {
        x: Var,
        times: usize,
    },
    Reshape(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation over tensors of element type `T`.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = kernels::sum(self.value(a).data());
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Scalar `Σ weights[i] · a[i]` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), weights.len());
        let s = kernels::dot(va.data(), &weights);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), rg)
    }

    /// `x[N, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, k) = (vx.shape()[0], vx.shape()[1]);
        let m = vw.shape()[0];
        assert_eq!(vw.shape()[1], k, "linear: input width {k} vs weight {:?}", vw.shape());
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let xr = &vx.data()[i * k..(i + 1) * k];
            for o in 0..m {
                out[i * m + o] = kernels::dot(xr, &vw.data()[o * k..(o + 1) * k]);
            }
        }
        if let Some(b) = b {
            let vb = self.value(b).data();
            for row in out.chunks_mut(m) {
                for (v, &bb) in row.iter_mut().zip(vb) {
                    *v += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_vec(&[n, m], out).expect("shape");
        self.push(t, Op::Linear { x, w, b }, rg)
    }

    /// Stride-1 convolution with "same" zero padding; `w` is `[out, in, k, k]`, `k` odd.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, c, h, wd) = dims4(self.value(x).shape());
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c, "conv2d: input has {c} channels, weight {ws:?}");
        assert!(ws[2] == ws[3] && ws[2] % 2 == 1);
        let dims = ConvDims {
            batch: n,
            c_in: c,
            c_out: ws[0],
            h,
            w: wd,
            k: ws[2],
        };
        let mut out = vec![T::zero(); n * dims.c_out * h * wd];
        kernels::conv2d_forward(
            dims,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_vec(&[n, dims.c_out, h, wd], out).expect("shape");
        self.push(t, Op::Conv2d { x, w, b, dims }, rg)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = dims4(v.shape());
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for p in 0..n * c {
            let src = &v.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[n, c, h2, w2], out).expect("shape");
        self.push(t, Op::Upsample2x(x), rg)
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = dims4(v.shape());
        assert!(h % 2 == 0 && w % 2 == 0);
        let (h2, w2) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &v.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * w2 + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[n, c, h2, w2], out).expect("shape");
        self.push(t, Op::AvgPool2x(x), rg)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = dims4(v.shape());
        let inv = T::one() / T::lit((h * w) as f64);
        let out = v.data().chunks(h * w).map(|p| kernels::sum(p) * inv).collect();
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[n, c], out).expect("shape");
        self.push(t, Op::GlobalAvgPool(x), rg)
    }

    /// Per-sample, per-channel normalization to zero mean and unit variance over space.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = dims4(v.shape());
        let hw = h * w;
        let inv_n = T::one() / T::lit(hw as f64);
        let mut out = vec![T::zero(); v.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in v.data().chunks(hw).zip(out.chunks_mut(hw)) {
            let mean = kernels::sum(src) * inv_n;
            let mut var = T::zero();
            for &s in src {
                var += (s - mean) * (s - mean);
            }
            var *= inv_n;
            let r = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
            inv_std.push(r);
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[n, c, h, w], out).expect("shape");
        self.push(t, Op::InstanceNorm { x, inv_std }, rg)
    }

    /// Scales each row of `[N, D]` to unit root-mean-square.
    pub fn pixel_norm(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let (n, d) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![T::zero(); n * d];
        let mut inv = Vec::with_capacity(n);
        for (src, dst) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            let ms = kernels::dot(src, src) / T::lit(d as f64);
            let r = T::one() / (ms + eps).sqrt();
            for (o, &s) in dst.iter_mut().zip(src) {
                *o = s * r;
            }
            inv.push(r);
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[n, d], out).expect("shape");
        self.push(t, Op::PixelNorm { x, inv }, rg)
    }

    /// `x[n, c, :, :] * scale[n, c] + shift[n, c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = dims4(v.shape());
        let (s, b) = (self.value(scale), self.value(shift));
        assert_eq!(s.shape(), &[n, c]);
        assert_eq!(b.shape(), &[n, c]);
        let hw = h * w;
        let mut out = vec![T::zero(); v.len()];
        for (p, (src, dst)) in v.data().chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
            let (sv, bv) = (s.data()[p], b.data()[p]);
            for (d, &x) in dst.iter_mut().zip(src) {
                *d = x * sv + bv;
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        let t = Tensor::from_vec(&[n, c, h, w], out).expect("shape");
        self.push(t, Op::ChannelAffine { x, scale, shift }, rg)
    }

    /// Adds a per-channel bias `b[c]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let v = self.value(x);
        let (_, c, h, w) = dims4(v.shape());
        let bv = self.value(b);
        assert_eq!(bv.len(), c);
        let hw = h * w;
        let mut out = v.data().to_vec();
        for (p, dst) in out.chunks_mut(hw).enumerate() {
            let bb = bv.data()[p % c];
            for d in dst {
                *d += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        let t = Tensor::from_vec(v.shape(), out).expect("shape");
        self.push(t, Op::ChannelBias { x, b }, rg)
    }

    /// `x + strength[c] * noise[n, 0, :, :]`.
    pub fn noise_add(&mut self, x: Var, noise: Var, strength: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = dims4(v.shape());
        let nz = self.value(noise);
        assert_eq!(nz.shape(), &[n, 1, h, w], "noise map shape");
        let st = self.value(strength);
        assert_eq!(st.len(), c);
        let hw = h * w;
        let mut out = v.data().to_vec();
        for (p, dst) in out.chunks_mut(hw).enumerate() {
            let (ni, ci) = (p / c, p % c);
            kernels::axpy(dst, st.data()[ci], &nz.data()[ni * hw..(ni + 1) * hw]);
        }
        let rg = self.rg(x) || self.rg(noise) || self.rg(strength);
        let t = Tensor::from_vec(v.shape(), out).expect("shape");
        self.push(t, Op::NoiseAdd { x, noise, strength }, rg)
    }

    /// `[N, L, D] -> [N, D]`, picking one layer.
    pub fn select(&mut self, x: Var, layer: usize) -> Var {
        let v = self.value(x);
        let (n, l, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        assert!(layer < l);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend_from_slice(&v.data()[(i * l + layer) * d..(i * l + layer + 1) * d]);
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[n, d], out).expect("shape");
        self.push(t, Op::Select { x, layer }, rg)
    }

    /// `[N, D] -> [N, times, D]`, copying each row.
    pub fn repeat(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let (n, d) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(n * times * d);
        for row in v.data().chunks(d) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[n, times, d], out).expect("shape");
        self.push(t, Op::Repeat { x, times }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape).expect("reshape");
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Weighted mean cross-entropy of softmax(logits) against class targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Var {
        let v = self.value(logits);
        let (n, k) = (v.shape()[0], v.shape()[1]);
        assert_eq!(targets.len(), n);
        let weights: Vec<T> = match weights {
            Some(w) => w.to_vec(),
            None => vec![T::one(); n],
        };
        let total_w: T = weights.iter().copied().sum();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &v.data()[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (j, &r) in row.iter().enumerate() {
                let e = (r - m).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= z;
            }
            loss += weights[i] * (z.ln() + m - row[targets[i]]);
        }
        let rg = self.rg(logits);
        let t = Tensor::scalar(loss / total_w);
        self.push(
            t,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            rg,
        )
    }

    /// Gradients of a scalar node with respect to every parameter leaf it depends on.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Grads { grads }
    }

    fn propagate(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*b) {
                    acc(grads, *b, g.clone());
                }
                if self.rg(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    acc(grads, *b, g.map(|x| -x));
                }
                if self.rg(*a) {
                    acc(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gd.iter().zip(vb.data()).map(|(&g, &y)| g * y).collect();
                    acc(grads, *a, Tensor::from_vec(va.shape(), d).expect("shape"));
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                    acc(grads, *b, Tensor::from_vec(vb.shape(), d).expect("shape"));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => acc(grads, *a, g),
            Op::Abs(a) => {
                let x = self.value(*a);
                let d = gd
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(grads, *a, Tensor::from_vec(x.shape(), d).expect("shape"));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let two = T::lit(2.0);
                let d = gd.iter().zip(x.data()).map(|(&g, &x)| two * g * x).collect();
                acc(grads, *a, Tensor::from_vec(x.shape(), d).expect("shape"));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d = gd
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { g * *slope })
                    .collect();
                acc(grads, *a, Tensor::from_vec(x.shape(), d).expect("shape"));
            }
            Op::Tanh(a) => {
                let d = gd.iter().zip(y.data()).map(|(&g, &t)| g * (T::one() - t * t)).collect();
                acc(grads, *a, Tensor::from_vec(y.shape(), d).expect("shape"));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let d = gd
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &x)| g / (T::one() + (-x).exp()))
                    .collect();
                acc(grads, *a, Tensor::from_vec(x.shape(), d).expect("shape"));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                acc(grads, *a, Tensor::full(x.shape(), gd[0]));
            }
            Op::WeightedSum(a, w) => {
                let x = self.value(*a);
                let d = w.iter().map(|&w| w * gd[0]).collect();
                acc(grads, *a, Tensor::from_vec(x.shape(), d).expect("shape"));
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, k) = (vx.shape()[0], vx.shape()[1]);
                let m = vw.shape()[0];
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); n * k];
                    for i in 0..n {
                        let row = &mut gx[i * k..(i + 1) * k];
                        for o in 0..m {
                            kernels::axpy(row, gd[i * m + o], &vw.data()[o * k..(o + 1) * k]);
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(vx.shape(), gx).expect("shape"));
                }
                if self.rg(*w) {
                    let mut gw = vec![T::zero(); m * k];
                    for i in 0..n {
                        let xr = &vx.data()[i * k..(i + 1) * k];
                        for o in 0..m {
                            kernels::axpy(&mut gw[o * k..(o + 1) * k], gd[i * m + o], xr);
                        }
                    }
                    acc(grads, *w, Tensor::from_vec(vw.shape(), gw).expect("shape"));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); m];
                        for row in gd.chunks(m) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        acc(grads, *b, Tensor::from_vec(&[m], gb).expect("shape"));
                    }
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let mut gx = self.rg(*x).then(|| vec![T::zero(); vx.len()]);
                let mut gw = self.rg(*w).then(|| vec![T::zero(); vw.len()]);
                let mut gb = b
                    .filter(|b| self.rg(*b))
                    .map(|_| vec![T::zero(); dims.c_out]);
                kernels::conv2d_backward(
                    *dims,
                    vx.data(),
                    vw.data(),
                    gd,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    acc(grads, *x, Tensor::from_vec(vx.shape(), gx).expect("shape"));
                }
                if let Some(gw) = gw {
                    acc(grads, *w, Tensor::from_vec(vw.shape(), gw).expect("shape"));
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    acc(grads, *b, Tensor::from_vec(&[dims.c_out], gb).expect("shape"));
                }
            }
            Op::Upsample2x(a) => {
                let x = self.value(*a);
                let (n, c, h, w) = dims4(x.shape());
                let w2 = 2 * w;
                let mut gx = vec![T::zero(); x.len()];
                for p in 0..n * c {
                    let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for yy in 0..2 * h {
                        for xx in 0..w2 {
                            dst[(yy / 2) * w + xx / 2] += src[yy * w2 + xx];
                        }
                    }
                }
                acc(grads, *a, Tensor::from_vec(x.shape(), gx).expect("shape"));
            }
            Op::AvgPool2x(a) => {
                let x = self.value(*a);
                let (n, c, h, w) = dims4(x.shape());
                let (h2, w2) = (h / 2, w / 2);
                let q = T::lit(0.25);
                let mut gx = vec![T::zero(); x.len()];
                for p in 0..n * c {
                    let src = &gd[p * h2 * w2..(p + 1) * h2 * w2];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for yy in 0..h {
                        for xx in 0..w {
                            dst[yy * w + xx] = src[(yy / 2) * w2 + xx / 2] * q;
                        }
                    }
                }
                acc(grads, *a, Tensor::from_vec(x.shape(), gx).expect("shape"));
            }
            Op::GlobalAvgPool(a) => {
                let x = self.value(*a);
                let (_, _, h, w) = dims4(x.shape());
                let inv = T::one() / T::lit((h * w) as f64);
                let mut gx = vec![T::zero(); x.len()];
                for (p, dst) in gx.chunks_mut(h * w).enumerate() {
                    dst.fill(gd[p] * inv);
                }
                acc(grads, *a, Tensor::from_vec(x.shape(), gx).expect("shape"));
            }
            Op::InstanceNorm { x, inv_std } => {
                let vx = self.value(*x);
                let (_, _, h, w) = dims4(vx.shape());
                let hw = h * w;
                let inv_n = T::one() / T::lit(hw as f64);
                let mut gx = vec![T::zero(); vx.len()];
                for (p, ((gs, ys), dst)) in gd
                    .chunks(hw)
                    .zip(y.data().chunks(hw))
                    .zip(gx.chunks_mut(hw))
                    .enumerate()
                {
                    let mg = kernels::sum(gs) * inv_n;
                    let mgy = kernels::dot(gs, ys) * inv_n;
                    let r = inv_std[p];
                    for ((d, &g), &yy) in dst.iter_mut().zip(gs).zip(ys) {
                        *d = r * (g - mg - yy * mgy);
                    }
                }
                acc(grads, *x, Tensor::from_vec(vx.shape(), gx).expect("shape"));
            }
            Op::PixelNorm { x, inv } => {
                let vx = self.value(*x);
                let d = vx.shape()[1];
                let inv_d = T::one() / T::lit(d as f64);
                let mut gx = vec![T::zero(); vx.len()];
                for (p, ((gs, ys), dst)) in gd
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let mgy = kernels::dot(gs, ys) * inv_d;
                    for ((o, &g), &yy) in dst.iter_mut().zip(gs).zip(ys) {
                        *o = inv[p] * (g - yy * mgy);
                    }
                }
                acc(grads, *x, Tensor::from_vec(vx.shape(), gx).expect("shape"));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let vx = self.value(*x);
                let (_, _, h, w) = dims4(vx.shape());
                let hw = h * w;
                let vs = self.value(*scale);
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); vx.len()];
                    for (p, (gs, dst)) in gd.chunks(hw).zip(gx.chunks_mut(hw)).enumerate() {
                        let s = vs.data()[p];
                        for (d, &g) in dst.iter_mut().zip(gs) {
                            *d = g * s;
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(vx.shape(), gx).expect("shape"));
                }
                if self.rg(*scale) {
                    let gs: Vec<T> = gd
                        .chunks(hw)
                        .zip(vx.data().chunks(hw))
                        .map(|(g, x)| kernels::dot(g, x))
                        .collect();
                    acc(grads, *scale, Tensor::from_vec(vs.shape(), gs).expect("shape"));
                }
                if self.rg(*shift) {
                    let gb: Vec<T> = gd.chunks(hw).map(kernels::sum).collect();
                    acc(grads, *shift, Tensor::from_vec(vs.shape(), gb).expect("shape"));
                }
            }
            Op::ChannelBias { x, b } => {
                let vx = self.value(*x);
                let (_, c, h, w) = dims4(vx.shape());
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); c];
                    for (p, gs) in gd.chunks(h * w).enumerate() {
                        gb[p % c] += kernels::sum(gs);
                    }
                    acc(grads, *b, Tensor::from_vec(&[c], gb).expect("shape"));
                }
                if self.rg(*x) {
                    acc(grads, *x, g);
                }
            }
            Op::NoiseAdd { x, noise, strength } => {
                let vx = self.value(*x);
                let (_, c, h, w) = dims4(vx.shape());
                let hw = h * w;
                let vn = self.value(*noise);
                let vs = self.value(*strength);
                if self.rg(*strength) {
                    let mut gs = vec![T::zero(); c];
                    for (p, gp) in gd.chunks(hw).enumerate() {
                        let ni = p / c;
                        gs[p % c] += kernels::dot(gp, &vn.data()[ni * hw..(ni + 1) * hw]);
                    }
                    acc(grads, *strength, Tensor::from_vec(&[c], gs).expect("shape"));
                }
                if self.rg(*noise) {
                    let mut gn = vec![T::zero(); vn.len()];
                    for (p, gp) in gd.chunks(hw).enumerate() {
                        let ni = p / c;
                        kernels::axpy(&mut gn[ni * hw..(ni + 1) * hw], vs.data()[p % c], gp);
                    }
                    acc(grads, *noise, Tensor::from_vec(vn.shape(), gn).expect("shape"));
                }
                if self.rg(*x) {
                    acc(grads, *x, g);
                }
            }
            Op::Select { x, layer } => {
                let vx = self.value(*x);
                let (n, l, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let mut gx = vec![T::zero(); vx.len()];
                for i in 0..n {
                    gx[(i * l + layer) * d..(i * l + layer + 1) * d]
                        .copy_from_slice(&gd[i * d..(i + 1) * d]);
                }
                acc(grads, *x, Tensor::from_vec(vx.shape(), gx).expect("shape"));
            }
            Op::Repeat { x, times } => {
                let vx = self.value(*x);
                let d = vx.shape()[1];
                let mut gx = vec![T::zero(); vx.len()];
                for (i, dst) in gx.chunks_mut(d).enumerate() {
                    for t in 0..*times {
                        let src = &gd[(i * times + t) * d..(i * times + t + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(vx.shape(), gx).expect("shape"));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(grads, *a, g.reshaped(&shape).expect("shape"));
            }
            Op::SoftmaxXent {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vl = self.value(*logits);
                let k = vl.shape()[1];
                let total_w: T = weights.iter().copied().sum();
                let mut gl = probs.clone();
                for (i, row) in gl.chunks_mut(k).enumerate() {
                    row[targets[i]] -= T::one();
                    let f = weights[i] * gd[0] / total_w;
                    for v in row {
                        *v *= f;
                    }
                }
                acc(grads, *logits, Tensor::from_vec(vl.shape(), gl).expect("shape"));
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Result of [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;

    /// Central-difference check of `build` w.r.t. each input tensor.
    pub(crate) fn check_grad(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let l = build(&mut g, &vars);
            g.value(l).item()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-6));
                worst = worst.max(rel);
            }
        }
        worst
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, rng::normal_vec(&mut rng::rng(seed), n)).unwrap()
    }

    fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
        let w = rng::normal_vec(&mut rng::rng(seed), g.value(y).len());
        g.weighted_sum(y, w)
    }

    #[test]
    fn elementwise_ops() {
        let a = rand_t(&[2, 3], 1);
        let b = rand_t(&[2, 3], 2);
        let err = check_grad(&[a, b], |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            let t = g.tanh(m);
            let sp = g.softplus(t);
            let q = g.square(sp);
            let l = g.leaky_relu(q, 0.2);
            let c = g.scale(l, 3.0);
            let c = g.add_scalar(c, 1.0);
            let ab = g.abs(c);
            let mean = g.mean(ab);
            let ws = probe(g, m, 3);
            let tot = g.add(mean, ws);
            g.sum(tot)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn linear_and_pixel_norm() {
        let x = rand_t(&[3, 4], 4);
        let w = rand_t(&[5, 4], 5);
        let b = rand_t(&[5], 6);
        let err = check_grad(&[x, w, b], |g, v| {
            let n = g.pixel_norm(v[0], 1e-8);
            let y = g.linear(n, v[1], Some(v[2]));
            probe(g, y, 7)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn conv_pool_upsample() {
        let x = rand_t(&[2, 3, 4, 4], 8);
        let w3 = rand_t(&[2, 3, 3, 3], 9);
        let b = rand_t(&[2], 10);
        let w1 = rand_t(&[3, 2, 1, 1], 11);
        let err = check_grad(&[x, w3, b, w1], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]));
            let y = g.upsample2x(y);
            let y = g.conv2d(y, v[3], None);
            let y = g.avg_pool2x(y);
            let p = g.global_avg_pool(y);
            let a = probe(g, y, 12);
            let b = probe(g, p, 13);
            g.add(a, b)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn normalization_and_modulation() {
        let x = rand_t(&[2, 3, 4, 4], 14);
        let scale = rand_t(&[2, 3], 15);
        let shift = rand_t(&[2, 3], 16);
        let bias = rand_t(&[3], 17);
        let noise = rand_t(&[2, 1, 4, 4], 18);
        let strength = rand_t(&[3], 19);
        let err = check_grad(&[x, scale, shift, bias, noise, strength], |g, v| {
            let y = g.noise_add(v[0], v[4], v[5]);
            let y = g.channel_bias(y, v[3]);
            let y = g.instance_norm(y, 1e-8);
            let y = g.channel_affine(y, v[1], v[2]);
            probe(g, y, 20)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn select_repeat_reshape() {
        let x = rand_t(&[2, 3], 21);
        let err = check_grad(&[x], |g, v| {
            let r = g.repeat(v[0], 4);
            let s = g.select(r, 2);
            let s2 = g.select(r, 3);
            let m = g.mul(s, s2);
            let f = g.reshape(m, &[6]);
            probe(g, f, 22)
        });
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn weighted_cross_entropy() {
        let logits = rand_t(&[4, 3], 23);
        let err = check_grad(&[logits], |g, v| g.softmax_cross_entropy(v[0], &[0, 2, 1, 2], Some(&[1.0, 2.0, 0.5, 1.0])));
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[2], 1.0));
        let w = g.param(Tensor::full(&[2], 2.0));
        let y = g.mul(x, w);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn instance_norm_output_statistics() {
        let mut g = Graph::<f64>::new();
        let x = g.input(rand_t(&[1, 2, 5, 5], 30).map(|v| 3.0 * v + 1.0));
        let y = g.instance_norm(x, 1e-8);
        for plane in g.value(y).data().chunks(25) {
            let m: f64 = plane.iter().sum::<f64>() / 25.0;
            let var: f64 = plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 25.0;
            assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
        }
    }
}
