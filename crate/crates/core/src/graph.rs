//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation
//! evaluates eagerly and records how to push gradients back to its inputs.
//! Leaves are either inputs/constants (no gradient unless requested) or
//! parameters tagged with the id of the [`ParamStore`](crate::nn::ParamStore)
//! they came from, so [`Gradients::for_store`] can hand the optimiser one
//! gradient per parameter.

use crate::kernels::{cn_to_nc, col2im, gemm, im2col, nc_to_cn, ConvGeom};
use crate::tensor::Tensor;

/// Backward rule for a single-input operation evaluated outside the graph.
pub trait UnaryBackward {
    /// Gradient w.r.t. the input `x`, given the forward output `y` and its gradient `gy`.
    fn backward(&self, x: &Tensor, y: &Tensor, gy: &Tensor) -> Tensor;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param { store: u64, index: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Clamp(Var, f32, f32),
    Relu(Var),
    LeakyRelu(Var, f32),
    Silu(Var, Vec<f32>),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        xmat: Vec<f32>,
    },
    Concat(Var, Var),
    Upsample(Var, usize),
    GlobalAvgPool(Var),
    PixelNorm(Var, f32),
    Mean(Var),
    Mse(Var, Var),
    SigmoidBce {
        logits: Var,
        target: Vec<f32>,
    },
    Custom(Var, Box<dyn UnaryBackward>),
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
    /// Double-precision value kept for scalar reductions and their sums.
    exact: Option<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Probability clamp applied before every logarithm in the BCE losses.
pub const PROB_EPS: f64 = 1e-7;

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

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            grad,
            exact: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, m: f64, op: Op, grad: bool) -> Var {
        let v = self.push(Tensor::scalar(m as f32), op, grad);
        self.nodes[v.0].exact = Some(m);
        v
    }

    /// Scalar value in double precision. Losses assembled from reductions
    /// with `add`, `sub` and `scale` keep their f64 value.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.exact.unwrap_or_else(|| n.value.item() as f64)
    }

    fn exact_pair(&self, a: Var, b: Var) -> Option<(f64, f64)> {
        Some((self.nodes[a.0].exact?, self.nodes[b.0].exact?))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::of`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: u64, index: usize, t: Tensor) -> Var {
        self.push(t, Op::Param { store, index }, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let g = self.needs(a) || self.needs(b);
        if let Some((x, y)) = self.exact_pair(a, b) {
            return self.push_scalar(x + y, Op::Add(a, b), g);
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let g = self.needs(a) || self.needs(b);
        if let Some((x, y)) = self.exact_pair(a, b) {
            return self.push_scalar(x - y, Op::Sub(a, b), g);
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let g = self.needs(a);
        if let Some(x) = self.nodes[a.0].exact {
            return self.push_scalar(x * s as f64, Op::Scale(a, s), g);
        }
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), g)
    }

    /// Clamp into `[lo, hi]`; the gradient is masked outside the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let g = self.needs(a);
        self.push(v, Op::Clamp(a, lo, hi), g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.needs(a);
        self.push(v, Op::Relu(a), g)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { x * slope });
        let g = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), g)
    }

    /// `x · sigmoid(x)`, a smooth rectifier.
    pub fn silu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sig: Vec<f32> = x.data().iter().map(|&v| sigmoid(v)).collect();
        let y: Vec<f32> = x.data().iter().zip(&sig).map(|(v, s)| v * s).collect();
        let t = Tensor::new(x.shape(), y).unwrap();
        let g = self.needs(a);
        self.push(t, Op::Silu(a, if g { sig } else { Vec::new() }), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let g = self.needs(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f32::tanh);
        let g = self.needs(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape must preserve element count");
        let g = self.needs(a);
        self.push(v, Op::Reshape(a), g)
    }

    /// `x[n, in] · wᵀ + b` with `w` shaped `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.value(x).dims2().expect("linear input must be 2-d");
        let (dout, win) = self.value(w).dims2().expect("linear weight must be 2-d");
        assert_eq!(din, win, "linear: input width {din} vs weight width {win}");
        let mut out = vec![0.0f32; n * dout];
        gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            (din as isize, 1),
            self.value(w).data(),
            (1, din as isize),
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let g = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(&[n, dout], out).unwrap();
        self.push(t, Op::Linear { x, w, b }, g)
    }

    /// 2-d convolution, weight `[Cout, Cin, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4().expect("conv2d input must be 4-d");
        let (co, ci, k, k2) = self.value(w).dims4().expect("conv2d weight must be 4-d");
        assert!(ci == c && k == k2, "conv2d: input channels {c} vs weight {ci}");
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let p = oh * ow;
        let ncols = n * p;
        let krows = geom.col_rows();
        let cols = im2col(self.value(x).data(), n, geom);
        let mut out_cn = vec![0.0f32; co * ncols];
        gemm(
            co,
            krows,
            ncols,
            self.value(w).data(),
            (krows as isize, 1),
            &cols,
            (ncols as isize, 1),
            0.0,
            &mut out_cn,
        );
        if let Some(b) = b {
            for (row, &bv) in out_cn.chunks_mut(ncols).zip(self.value(b).data()) {
                row.iter_mut().for_each(|o| *o += bv);
            }
        }
        let out = Tensor::new(&[n, co, oh, ow], cn_to_nc(&out_cn, n, co, p)).unwrap();
        let wgrad = self.needs(w);
        let g = self.needs(x) || wgrad || b.is_some_and(|b| self.needs(b));
        let cols = if wgrad { cols } else { Vec::new() };
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            g,
        )
    }

    /// Transposed convolution, weight `[Cin, Cout, k, k]`; output side
    /// `(H − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (n, ci, h, wd) = self.value(x).dims4().expect("conv_transpose2d input must be 4-d");
        let (wci, co, k, k2) = self.value(w).dims4().expect("conv_transpose2d weight must be 4-d");
        assert!(wci == ci && k == k2, "conv_transpose2d: channels {ci} vs weight {wci}");
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom {
            channels: co,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_h(), h);
        let hw = h * wd;
        let nhw = n * hw;
        let cokk = geom.col_rows();
        let xmat = nc_to_cn(self.value(x).data(), n, ci, hw);
        let mut cols = vec![0.0f32; cokk * nhw];
        gemm(
            cokk,
            ci,
            nhw,
            self.value(w).data(),
            (1, cokk as isize),
            &xmat,
            (nhw as isize, 1),
            0.0,
            &mut cols,
        );
        let mut out = col2im(&cols, n, geom);
        if let Some(b) = b {
            let bias = self.value(b).data();
            let plane = oh * ow;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bias[i % co];
                chunk.iter_mut().for_each(|o| *o += bv);
            }
        }
        let out = Tensor::new(&[n, co, oh, ow], out).unwrap();
        let wgrad = self.needs(w);
        let g = self.needs(x) || wgrad || b.is_some_and(|b| self.needs(b));
        let xmat = if wgrad { xmat } else { Vec::new() };
        self.push(
            out,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                xmat,
            },
            g,
        )
    }

    /// Concatenate two `[N, C, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4().unwrap();
        let (nb, cb, hb, wb) = self.value(b).dims4().unwrap();
        assert!(n == nb && h == hb && w == wb, "concat: spatial/batch mismatch");
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&self.value(b).data()[i * pb..(i + 1) * pb]);
        }
        let t = Tensor::new(&[n, ca + cb, h, w], out).unwrap();
        let g = self.needs(a) || self.needs(b);
        self.push(t, Op::Concat(a, b), g)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Var {
        let (n, c, h, w) = self.value(a).dims4().unwrap();
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(a).data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        for (plane, dst) in out.chunks_mut(oh * ow).enumerate() {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    dst[y * ow + x] = s[(y / factor) * w + x / factor];
                }
            }
        }
        let t = Tensor::new(&[n, c, oh, ow], out).unwrap();
        let g = self.needs(a);
        self.push(t, Op::Upsample(a, factor), g)
    }

    /// `[N, C, H, W]` → `[N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4().unwrap();
        let data: Vec<f32> = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f32>() / (h * w) as f32)
            .collect();
        let t = Tensor::new(&[n, c], data).unwrap();
        let g = self.needs(a);
        self.push(t, Op::GlobalAvgPool(a), g)
    }

    /// Normalise each spatial feature vector to unit RMS across channels.
    pub fn pixel_norm(&mut self, a: Var, eps: f32) -> Var {
        let (n, c, h, w) = self.value(a).dims4().unwrap();
        let p = h * w;
        let x = self.value(a).data();
        let mut out = vec![0.0f32; x.len()];
        for i in 0..n {
            for s in 0..p {
                let ms: f32 = (0..c).map(|j| x[(i * c + j) * p + s].powi(2)).sum::<f32>() / c as f32;
                let r = 1.0 / (ms + eps).sqrt();
                for j in 0..c {
                    out[(i * c + j) * p + s] = x[(i * c + j) * p + s] * r;
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out).unwrap();
        let g = self.needs(a);
        self.push(t, Op::PixelNorm(a, eps), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        let g = self.needs(a);
        self.push_scalar(m, Op::Mean(a), g)
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        assert_eq!(va.len(), vb.len(), "mse: size mismatch");
        let s: f64 = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum();
        let g = self.needs(a) || self.needs(b);
        self.push_scalar(s / va.len() as f64, Op::Mse(a, b), g)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
    ///
    /// Probabilities are clamped to `[1e-7, 1 − 1e-7]` for the value; the
    /// gradient w.r.t. the logits is `(sigmoid(l) − t) / n`.
    pub fn sigmoid_bce(&mut self, logits: Var, target: &[f32]) -> Var {
        let l = self.value(logits).data();
        assert_eq!(l.len(), target.len(), "bce: size mismatch");
        let s: f64 = l
            .iter()
            .zip(target)
            .map(|(&z, &t)| bce_term(sigmoid(z) as f64, t as f64))
            .sum();
        let g = self.needs(logits);
        self.push_scalar(
            s / l.len() as f64,
            Op::SigmoidBce {
                logits,
                target: target.to_vec(),
            },
            g,
        )
    }

    /// Record an externally evaluated single-input op.
    pub fn custom(&mut self, x: Var, y: Tensor, rule: Box<dyn UnaryBackward>) -> Var {
        let g = self.needs(x);
        self.push(y, Op::Custom(x, rule), g)
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, index } => Some((i, store, index)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn propagate(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &self.nodes[i].value;
        let mut send = |v: Var, g: Tensor| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Add(a, b) => {
                send(*a, gy.clone());
                send(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                send(*a, gy.clone());
                send(*b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                send(*a, gy.zip_map(self.value(*b), |g, v| g * v));
                send(*b, gy.zip_map(self.value(*a), |g, v| g * v));
            }
            Op::Scale(a, s) => send(*a, gy.map(|g| g * s)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *a,
                    gy.zip_map(self.value(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
                );
            }
            Op::Relu(a) => send(
                *a,
                gy.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                send(
                    *a,
                    gy.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { g * s }),
                );
            }
            Op::Silu(a, sig) => {
                let x = self.value(*a).data();
                let data = gy
                    .data()
                    .iter()
                    .zip(x)
                    .zip(sig)
                    .map(|((g, x), s)| g * s * (1.0 + x * (1.0 - s)))
                    .collect();
                send(*a, Tensor::new(gy.shape(), data).unwrap());
            }
            Op::Sigmoid(a) => send(*a, gy.zip_map(y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => send(*a, gy.zip_map(y, |g, t| g * (1.0 - t * t))),
            Op::Reshape(a) => send(
                *a,
                gy.clone().reshape(self.value(*a).shape()).unwrap(),
            ),
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2().unwrap();
                let dout = gy.shape()[1];
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        gy.data(),
                        (dout as isize, 1),
                        self.value(*w).data(),
                        (din as isize, 1),
                        0.0,
                        &mut dx,
                    );
                    send(*x, Tensor::new(&[n, din], dx).unwrap());
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0f32; dout * din];
                    gemm(
                        dout,
                        n,
                        din,
                        gy.data(),
                        (1, dout as isize),
                        self.value(*x).data(),
                        (din as isize, 1),
                        0.0,
                        &mut dw,
                    );
                    send(*w, Tensor::new(&[dout, din], dw).unwrap());
                }
                if let Some(b) = b {
                    let mut db = vec![0.0f32; dout];
                    for row in gy.data().chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    send(*b, Tensor::new(&[dout], db).unwrap());
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (n, co, oh, ow) = gy.dims4().unwrap();
                let p = oh * ow;
                let ncols = n * p;
                let krows = geom.col_rows();
                let g_cn = nc_to_cn(gy.data(), n, co, p);
                if self.needs(*w) {
                    let mut dw = vec![0.0f32; co * krows];
                    gemm(
                        co,
                        ncols,
                        krows,
                        &g_cn,
                        (ncols as isize, 1),
                        cols,
                        (1, ncols as isize),
                        0.0,
                        &mut dw,
                    );
                    send(*w, Tensor::new(self.value(*w).shape(), dw).unwrap());
                }
                if let Some(b) = b {
                    let db: Vec<f32> = g_cn.chunks(ncols).map(|r| r.iter().sum()).collect();
                    send(*b, Tensor::new(&[co], db).unwrap());
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0f32; krows * ncols];
                    gemm(
                        krows,
                        co,
                        ncols,
                        self.value(*w).data(),
                        (1, krows as isize),
                        &g_cn,
                        (ncols as isize, 1),
                        0.0,
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, n, *geom);
                    send(*x, Tensor::new(self.value(*x).shape(), dx).unwrap());
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                xmat,
            } => {
                let (n, ci, h, wd) = self.value(*x).dims4().unwrap();
                let nhw = n * h * wd;
                let cokk = geom.col_rows();
                let gcols = im2col(gy.data(), n, *geom);
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; ci * nhw];
                    gemm(
                        ci,
                        cokk,
                        nhw,
                        self.value(*w).data(),
                        (cokk as isize, 1),
                        &gcols,
                        (nhw as isize, 1),
                        0.0,
                        &mut dx,
                    );
                    let dx = cn_to_nc(&dx, n, ci, h * wd);
                    send(*x, Tensor::new(self.value(*x).shape(), dx).unwrap());
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0f32; ci * cokk];
                    gemm(
                        ci,
                        nhw,
                        cokk,
                        xmat,
                        (nhw as isize, 1),
                        &gcols,
                        (1, nhw as isize),
                        0.0,
                        &mut dw,
                    );
                    send(*w, Tensor::new(self.value(*w).shape(), dw).unwrap());
                }
                if let Some(b) = b {
                    let co = geom.channels;
                    let plane = geom.height * geom.width;
                    let mut db = vec![0.0f32; co];
                    for (k, chunk) in gy.data().chunks(plane).enumerate() {
                        db[k % co] += chunk.iter().sum::<f32>();
                    }
                    send(*b, Tensor::new(&[co], db).unwrap());
                }
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().unwrap();
                let cb = self.value(*b).shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut ga = Vec::with_capacity(n * pa);
                let mut gb = Vec::with_capacity(n * pb);
                for chunk in gy.data().chunks(pa + pb) {
                    ga.extend_from_slice(&chunk[..pa]);
                    gb.extend_from_slice(&chunk[pa..]);
                }
                send(*a, Tensor::new(&[n, ca, h, w], ga).unwrap());
                send(*b, Tensor::new(&[n, cb, h, w], gb).unwrap());
            }
            Op::Upsample(a, f) => {
                let (n, c, h, w) = self.value(*a).dims4().unwrap();
                let ow = w * f;
                let mut ga = vec![0.0f32; n * c * h * w];
                for (plane, src) in gy.data().chunks(h * f * ow).enumerate() {
                    let dst = &mut ga[plane * h * w..(plane + 1) * h * w];
                    for (idx, g) in src.iter().enumerate() {
                        let (yy, xx) = (idx / ow, idx % ow);
                        dst[(yy / f) * w + xx / f] += g;
                    }
                }
                send(*a, Tensor::new(&[n, c, h, w], ga).unwrap());
            }
            Op::GlobalAvgPool(a) => {
                let (n, c, h, w) = self.value(*a).dims4().unwrap();
                let p = h * w;
                let mut ga = vec![0.0f32; n * c * p];
                for (chunk, g) in ga.chunks_mut(p).zip(gy.data()) {
                    chunk.iter_mut().for_each(|v| *v = g / p as f32);
                }
                send(*a, Tensor::new(&[n, c, h, w], ga).unwrap());
            }
            Op::PixelNorm(a, eps) => {
                let (n, c, h, w) = self.value(*a).dims4().unwrap();
                let p = h * w;
                let x = self.value(*a).data();
                let g = gy.data();
                let mut ga = vec![0.0f32; x.len()];
                for i in 0..n {
                    for s in 0..p {
                        let idx = |j: usize| (i * c + j) * p + s;
                        let ms: f32 = (0..c).map(|j| x[idx(j)].powi(2)).sum::<f32>() / c as f32;
                        let r = 1.0 / (ms + eps).sqrt();
                        let dot: f32 = (0..c).map(|j| g[idx(j)] * x[idx(j)]).sum();
                        for j in 0..c {
                            ga[idx(j)] = r * g[idx(j)] - x[idx(j)] * r.powi(3) * dot / c as f32;
                        }
                    }
                }
                send(*a, Tensor::new(&[n, c, h, w], ga).unwrap());
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f32;
                let g = gy.item() / n;
                send(*a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel() as f32;
                let s = 2.0 * gy.item() / n;
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * s);
                send(*b, diff.map(|d| -d));
                send(*a, diff);
            }
            Op::SigmoidBce { logits, target } => {
                let l = self.value(*logits);
                let n = l.numel() as f32;
                let s = gy.item() / n;
                let data = l
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&z, &t)| (sigmoid(z) - t) * s)
                    .collect();
                send(*logits, Tensor::new(l.shape(), data).unwrap());
            }
            Op::Custom(x, rule) => {
                let g = rule.backward(self.value(*x), y, gy);
                send(*x, g);
            }
        }
    }
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `−[t·ln p + (1 − t)·ln(1 − p)]` with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, u64, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// One gradient slot per parameter of store `store` (`len` parameters);
    /// parameters that did not take part in the graph get `None`.
    pub fn for_store(&self, store: u64, len: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..len).map(|_| None).collect();
        for &(node, s, index) in &self.params {
            if s != store {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                match &mut out[index] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}
