//! Processing layer: differentiable image perturbations placed between the
//! generator and the watermark decoder during fine-tuning.
//!
//! Every operator maps `[0, 1]` images to `[0, 1]` images, is the identity
//! at its documented identity parameter, and back-propagates to its input.
//! Parameters are per image so one batch can mix strengths.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{Graph, UnaryBackward, Var};
use crate::image::{Image, ImageBatch};
use crate::jpeg::{JpegSim, JpegTrace, RoundingSurrogate};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Luminance weights used by the contrast and saturation adjustments.
pub const GRAY_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Noise,
    Blur,
    Jpeg,
    Color,
}

impl Operator {
    pub const ALL: [Operator; 4] = [Operator::Noise, Operator::Blur, Operator::Jpeg, Operator::Color];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Noise => "noise",
            Operator::Blur => "blur",
            Operator::Jpeg => "jpeg",
            Operator::Color => "color",
        }
    }
}

impl std::str::FromStr for Operator {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Operator::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| invalid(format!("unknown operator `{s}`")))
    }
}

/// Ranges the processing layer samples from, plus the per-operator firing
/// probability. Ranges are closed `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub noise_sigma: [f64; 2],
    /// Odd kernel sizes; 0 means no blur.
    pub blur_kernel: [usize; 2],
    pub blur_sigma: [f64; 2],
    pub jpeg_quality: [u8; 2],
    /// Shared range for brightness, contrast and saturation factors.
    pub color_factor: [f64; 2],
    pub per_op_probability: f64,
    pub rounding: RoundingSurrogate,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            noise_sigma: [0.001, 0.15],
            blur_kernel: [1, 9],
            blur_sigma: [5.0, 15.0],
            jpeg_quality: [20, 50],
            color_factor: [1.0, 1.3],
            per_op_probability: 0.15,
            rounding: RoundingSurrogate::StraightThrough,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(invalid(format!("{name} range {r:?} must be finite with min ≤ max")));
    }
    Ok(())
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("noise_sigma", self.noise_sigma)?;
        if self.noise_sigma[0] < 0.0 {
            return Err(invalid("noise_sigma must be ≥ 0"));
        }
        check_range("blur_sigma", self.blur_sigma)?;
        if self.blur_sigma[0] <= 0.0 {
            return Err(invalid("blur_sigma must be > 0"));
        }
        let [klo, khi] = self.blur_kernel;
        if klo > khi || self.kernel_choices().is_empty() {
            return Err(invalid(format!("blur_kernel range {:?} holds no odd size", self.blur_kernel)));
        }
        let [qlo, qhi] = self.jpeg_quality;
        if qlo > qhi || qlo < 1 || qhi > 100 {
            return Err(invalid(format!("jpeg_quality range {:?} must lie in [1, 100]", self.jpeg_quality)));
        }
        check_range("color_factor", self.color_factor)?;
        if self.color_factor[0] <= 0.0 {
            return Err(invalid("color factors must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.per_op_probability) {
            return Err(invalid("per_op_probability must be in [0, 1]"));
        }
        Ok(())
    }

    fn kernel_choices(&self) -> Vec<usize> {
        (self.blur_kernel[0]..=self.blur_kernel[1])
            .filter(|k| k % 2 == 1 || *k == 0)
            .collect()
    }

    /// Draw this image's operators and parameters.
    pub fn sample(&self, rng: &mut Rng) -> AppliedOps {
        let p = self.per_op_probability;
        let mut ops = AppliedOps::default();
        if rng.bernoulli(p) {
            ops.noise = Some(rng.uniform_range(self.noise_sigma[0], self.noise_sigma[1]));
        }
        if rng.bernoulli(p) {
            let ks = self.kernel_choices();
            let k = ks[rng.below(ks.len())];
            ops.blur = Some((k, rng.uniform_range(self.blur_sigma[0], self.blur_sigma[1])));
        }
        if rng.bernoulli(p) {
            let [lo, hi] = self.jpeg_quality;
            ops.jpeg = Some(rng.int_range(lo as i64, hi as i64) as u8);
        }
        if rng.bernoulli(p) {
            let [lo, hi] = self.color_factor;
            ops.color = Some([
                rng.uniform_range(lo, hi),
                rng.uniform_range(lo, hi),
                rng.uniform_range(lo, hi),
            ]);
        }
        ops
    }
}

/// Operators that fired for one image, with their parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AppliedOps {
    pub noise: Option<f64>,
    pub blur: Option<(usize, f64)>,
    pub jpeg: Option<u8>,
    /// `[brightness, contrast, saturation]`
    pub color: Option<[f64; 3]>,
}

impl AppliedOps {
    pub fn fired(&self, op: Operator) -> bool {
        match op {
            Operator::Noise => self.noise.is_some(),
            Operator::Blur => self.blur.is_some(),
            Operator::Jpeg => self.jpeg.is_some(),
            Operator::Color => self.color.is_some(),
        }
    }
}

fn batch_dims(g: &Graph, x: Var) -> (usize, usize, usize) {
    let (n, c, s, _) = g.value(x).dims4().expect("augmentation input must be N×C×S×S");
    (n, c, s)
}

/// `clamp(x + σ_i·ε)` with fresh standard normal `ε`; the noise is a constant.
pub fn noise_var(g: &mut Graph, x: Var, sigmas: &[f64], rng: &mut Rng) -> Result<Var> {
    let (n, c, s) = batch_dims(g, x);
    if sigmas.len() != n {
        return Err(invalid("one sigma per image required"));
    }
    if let Some(sig) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(invalid(format!("noise sigma {sig} must be ≥ 0")));
    }
    let per = c * s * s;
    let mut noise = Tensor::zeros(&[n, c, s, s]);
    for (chunk, &sig) in noise.data_mut().chunks_mut(per).zip(sigmas) {
        if sig > 0.0 {
            rng.fill_normal(chunk, sig as f32);
        }
    }
    let nv = g.constant(noise);
    let y = g.add(x, nv);
    Ok(g.clamp(y, 0.0, 1.0))
}

/// Normalised 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Result<Vec<f32>> {
    if size.is_multiple_of(2) {
        return Err(invalid(format!("blur kernel size {size} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(invalid(format!("blur sigma {sigma} must be > 0")));
    }
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|v| (v / total) as f32).collect())
}

fn reflect(i: isize, s: usize) -> usize {
    let s = s as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= s {
        i = 2 * (s - 1) - i;
    }
    i as usize
}

/// One separable pass over a single `s × s` plane (or its adjoint).
fn blur_pass(src: &[f32], dst: &mut [f32], s: usize, taps: &[f32], horizontal: bool, adjoint: bool) {
    let r = (taps.len() / 2) as isize;
    for a in 0..s {
        for b in 0..s {
            let out = if horizontal { a * s + b } else { b * s + a };
            for (t, &w) in taps.iter().enumerate() {
                let j = reflect(b as isize + t as isize - r, s);
                let inp = if horizontal { a * s + j } else { j * s + a };
                if adjoint {
                    dst[inp] += w * src[out];
                } else {
                    dst[out] += w * src[inp];
                }
            }
        }
    }
}

struct BlurOp {
    taps: Vec<Option<Vec<f32>>>,
    size: usize,
}

impl BlurOp {
    fn run(&self, x: &[f32], channels: usize, adjoint: bool) -> Vec<f32> {
        let s = self.size;
        let plane = s * s;
        let mut out = vec![0.0f32; x.len()];
        let mut tmp = vec![0.0f32; plane];
        for (p, (src, dst)) in x.chunks(plane).zip(out.chunks_mut(plane)).enumerate() {
            match &self.taps[p / channels] {
                None => dst.copy_from_slice(src),
                Some(taps) => {
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    // forward: horizontal then vertical; adjoint in reverse order
                    blur_pass(src, &mut tmp, s, taps, !adjoint, adjoint);
                    blur_pass(&tmp, dst, s, taps, adjoint, adjoint);
                }
            }
        }
        out
    }
}

impl UnaryBackward for BlurOp {
    fn backward(&self, x: &Tensor, _y: &Tensor, gy: &Tensor) -> Tensor {
        let c = x.shape()[1];
        Tensor::new(x.shape(), self.run(gy.data(), c, true)).unwrap()
    }
}

/// Per-channel Gaussian blur with reflect padding; `None` or kernel 0/1
/// leaves an image untouched.
pub fn blur_var(g: &mut Graph, x: Var, params: &[Option<(usize, f64)>]) -> Result<Var> {
    let (n, c, s) = batch_dims(g, x);
    if params.len() != n {
        return Err(invalid("one blur setting per image required"));
    }
    let mut taps = Vec::with_capacity(n);
    for p in params {
        taps.push(match *p {
            None | Some((0, _)) | Some((1, _)) => None,
            Some((k, sigma)) => {
                if k / 2 >= s {
                    return Err(invalid(format!("blur kernel {k} too large for {s}×{s} image")));
                }
                Some(gaussian_kernel_1d(k, sigma)?)
            }
        });
    }
    let op = BlurOp { taps, size: s };
    let y = Tensor::new(g.value(x).shape(), op.run(g.value(x).data(), c, false)).unwrap();
    Ok(g.custom(x, y, Box::new(op)))
}

struct JpegOp {
    sims: Vec<Option<(JpegSim, JpegTrace)>>,
    size: usize,
}

impl UnaryBackward for JpegOp {
    fn backward(&self, x: &Tensor, _y: &Tensor, gy: &Tensor) -> Tensor {
        let per = x.numel() / x.shape()[0];
        let mut out = Vec::with_capacity(x.numel());
        for (i, g) in gy.data().chunks(per).enumerate() {
            match &self.sims[i] {
                None => out.extend_from_slice(g),
                Some((sim, trace)) => out.extend(sim.backward(trace, g, self.size)),
            }
        }
        Tensor::new(x.shape(), out).unwrap()
    }
}

/// Differentiable JPEG per image; `None` leaves an image untouched.
pub fn jpeg_var(
    g: &mut Graph,
    x: Var,
    qualities: &[Option<u8>],
    surrogate: RoundingSurrogate,
) -> Result<Var> {
    let (n, c, s) = batch_dims(g, x);
    if qualities.len() != n {
        return Err(invalid("one JPEG quality per image required"));
    }
    if c != 3 {
        return Err(invalid("JPEG simulation needs RGB input"));
    }
    if s < 8 {
        return Err(invalid("JPEG simulation needs images of at least 8×8"));
    }
    let per = c * s * s;
    let mut sims = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n * per);
    for (img, q) in g.value(x).data().chunks(per).zip(qualities) {
        match q {
            None => {
                out.extend_from_slice(img);
                sims.push(None);
            }
            Some(q) => {
                let sim = JpegSim::new(*q, surrogate)?;
                let trace = sim.forward(img, s);
                out.extend_from_slice(&trace.output);
                sims.push(Some((sim, trace)));
            }
        }
    }
    let y = Tensor::new(g.value(x).shape(), out).unwrap();
    Ok(g.custom(x, y, Box::new(JpegOp { sims, size: s })))
}

/// `x·b` per image.
struct BrightnessOp(Vec<f32>);

impl UnaryBackward for BrightnessOp {
    fn backward(&self, x: &Tensor, _y: &Tensor, gy: &Tensor) -> Tensor {
        let per = x.numel() / x.shape()[0];
        let data = gy
            .data()
            .chunks(per)
            .zip(&self.0)
            .flat_map(|(g, &b)| g.iter().map(move |v| v * b))
            .collect();
        Tensor::new(x.shape(), data).unwrap()
    }
}

/// `c·x + (1 − c)·m`, `m` the image's mean luminance.
struct ContrastOp(Vec<f32>);

impl UnaryBackward for ContrastOp {
    fn backward(&self, x: &Tensor, _y: &Tensor, gy: &Tensor) -> Tensor {
        let (_, ch, s, _) = x.dims4().unwrap();
        let plane = s * s;
        let per = ch * plane;
        let mut out = Vec::with_capacity(x.numel());
        for (g, &c) in gy.data().chunks(per).zip(&self.0) {
            let total: f32 = g.iter().sum();
            for (k, v) in g.iter().enumerate() {
                let w = GRAY_WEIGHTS[k / plane];
                out.push(c * v + (1.0 - c) * total * w / plane as f32);
            }
        }
        Tensor::new(x.shape(), out).unwrap()
    }
}

/// `s·x + (1 − s)·gray(x)` per pixel.
struct SaturationOp(Vec<f32>);

impl UnaryBackward for SaturationOp {
    fn backward(&self, x: &Tensor, _y: &Tensor, gy: &Tensor) -> Tensor {
        let (_, ch, s, _) = x.dims4().unwrap();
        let plane = s * s;
        let per = ch * plane;
        let mut out = vec![0.0f32; x.numel()];
        for ((g, o), &sat) in gy.data().chunks(per).zip(out.chunks_mut(per)).zip(&self.0) {
            for p in 0..plane {
                let sum: f32 = (0..3).map(|k| g[k * plane + p]).sum();
                for k in 0..3 {
                    o[k * plane + p] = sat * g[k * plane + p] + (1.0 - sat) * GRAY_WEIGHTS[k] * sum;
                }
            }
        }
        Tensor::new(x.shape(), out).unwrap()
    }
}

fn gray_mean(img: &[f32], plane: usize) -> f32 {
    (0..plane)
        .map(|p| (0..3).map(|k| GRAY_WEIGHTS[k] * img[k * plane + p]).sum::<f32>())
        .sum::<f32>()
        / plane as f32
}

/// Brightness, then contrast, then saturation, each followed by a clamp to
/// `[0, 1]`. `None` leaves an image untouched.
pub fn color_var(g: &mut Graph, x: Var, factors: &[Option<[f64; 3]>]) -> Result<Var> {
    let (n, c, s) = batch_dims(g, x);
    if factors.len() != n {
        return Err(invalid("one colour setting per image required"));
    }
    if c != 3 {
        return Err(invalid("colour jitter needs RGB input"));
    }
    if let Some(f) = factors.iter().flatten().find(|f| f.iter().any(|v| !(*v >= 0.0 && v.is_finite()))) {
        return Err(invalid(format!("colour factors {f:?} must be ≥ 0")));
    }
    let plane = s * s;
    let per = 3 * plane;
    let pick = |i: usize| -> Vec<f32> {
        factors
            .iter()
            .map(|f| f.map_or(1.0, |f| f[i] as f32))
            .collect()
    };
    let (b, ct, sat) = (pick(0), pick(1), pick(2));

    let y: Vec<f32> = g
        .value(x)
        .data()
        .chunks(per)
        .zip(&b)
        .flat_map(|(img, &bv)| img.iter().map(move |v| v * bv))
        .collect();
    let y = g.custom(x, Tensor::new(g.value(x).shape(), y).unwrap(), Box::new(BrightnessOp(b)));
    let y = g.clamp(y, 0.0, 1.0);

    let mut out = Vec::with_capacity(n * per);
    for (img, &cv) in g.value(y).data().chunks(per).zip(&ct) {
        let m = gray_mean(img, plane);
        out.extend(img.iter().map(|v| cv * v + (1.0 - cv) * m));
    }
    let y = g.custom(y, Tensor::new(g.value(x).shape(), out).unwrap(), Box::new(ContrastOp(ct)));
    let y = g.clamp(y, 0.0, 1.0);

    let mut out = vec![0.0f32; n * per];
    for ((img, o), &sv) in g.value(y).data().chunks(per).zip(out.chunks_mut(per)).zip(&sat) {
        for p in 0..plane {
            let gray: f32 = (0..3).map(|k| GRAY_WEIGHTS[k] * img[k * plane + p]).sum();
            for k in 0..3 {
                o[k * plane + p] = sv * img[k * plane + p] + (1.0 - sv) * gray;
            }
        }
    }
    let y = g.custom(y, Tensor::new(g.value(x).shape(), out).unwrap(), Box::new(SaturationOp(sat)));
    Ok(g.clamp(y, 0.0, 1.0))
}

/// Apply already-sampled operators in the fixed order noise → blur → JPEG → colour.
pub fn apply_ops_var(
    g: &mut Graph,
    x: Var,
    ops: &[AppliedOps],
    surrogate: RoundingSurrogate,
    rng: &mut Rng,
) -> Result<Var> {
    let mut y = x;
    if ops.iter().any(|o| o.noise.is_some()) {
        let sig: Vec<f64> = ops.iter().map(|o| o.noise.unwrap_or(0.0)).collect();
        y = noise_var(g, y, &sig, rng)?;
    }
    if ops.iter().any(|o| o.blur.is_some()) {
        let p: Vec<_> = ops.iter().map(|o| o.blur).collect();
        y = blur_var(g, y, &p)?;
    }
    if ops.iter().any(|o| o.jpeg.is_some()) {
        let q: Vec<_> = ops.iter().map(|o| o.jpeg).collect();
        y = jpeg_var(g, y, &q, surrogate)?;
    }
    if ops.iter().any(|o| o.color.is_some()) {
        let f: Vec<_> = ops.iter().map(|o| o.color).collect();
        y = color_var(g, y, &f)?;
    }
    Ok(y)
}

/// Sample operators independently per image and apply them inside a graph.
pub fn pipeline_var(
    g: &mut Graph,
    x: Var,
    cfg: &AugmentationConfig,
    rng: &mut Rng,
) -> Result<(Var, Vec<AppliedOps>)> {
    cfg.validate()?;
    let (n, _, _) = batch_dims(g, x);
    let ops: Vec<AppliedOps> = (0..n).map(|_| cfg.sample(rng)).collect();
    let y = apply_ops_var(g, x, &ops, cfg.rounding, rng)?;
    Ok((y, ops))
}

fn run_single(x: &Image, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Image> {
    let mut g = Graph::new();
    let shape = [1, x.channels(), x.size(), x.size()];
    let v = g.constant(x.tensor().clone().reshape(&shape)?);
    let y = f(&mut g, v)?;
    Image::clamped(g.value(y).clone().reshape(x.shape())?)
}

pub fn add_gaussian_noise(x: &Image, sigma: f64, rng: &mut Rng) -> Result<Image> {
    run_single(x, |g, v| noise_var(g, v, &[sigma], rng))
}

pub fn gaussian_blur(x: &Image, kernel: usize, sigma: f64) -> Result<Image> {
    if kernel.is_multiple_of(2) {
        return Err(invalid(format!("blur kernel size {kernel} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(invalid(format!("blur sigma {sigma} must be > 0")));
    }
    run_single(x, |g, v| blur_var(g, v, &[Some((kernel, sigma))]))
}

pub fn diff_jpeg(x: &Image, quality: u8, surrogate: RoundingSurrogate) -> Result<Image> {
    run_single(x, |g, v| jpeg_var(g, v, &[Some(quality)], surrogate))
}

pub fn color_jitter(x: &Image, brightness: f64, contrast: f64, saturation: f64) -> Result<Image> {
    run_single(x, |g, v| color_var(g, v, &[Some([brightness, contrast, saturation])]))
}

/// Batch version of [`pipeline_var`] outside any graph.
pub fn apply_pipeline(
    x: &ImageBatch,
    cfg: &AugmentationConfig,
    rng: &mut Rng,
) -> Result<(ImageBatch, Vec<AppliedOps>)> {
    let mut g = Graph::new();
    let v = g.constant(x.tensor().clone());
    let (y, ops) = pipeline_var(&mut g, v, cfg, rng)?;
    Ok((ImageBatch::new(g.value(y).clone())?, ops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_shapes;
    use crate::jpeg::real_jpeg;
    use crate::gradcheck::{analytic, max_rel_error, random_tensor};

    fn mean_abs(a: &Image, b: &Image) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.data().len() as f64
    }

    fn sample_image(seed: u64) -> Image {
        synth_shapes(1, 32, seed).unwrap().remove(0)
    }

    #[test]
    fn identity_parameters_leave_image_unchanged() {
        let x = sample_image(1);
        let mut rng = Rng::new(0);
        assert_eq!(add_gaussian_noise(&x, 0.0, &mut rng).unwrap(), x);
        assert_eq!(gaussian_blur(&x, 1, 3.0).unwrap(), x);
        let c = color_jitter(&x, 1.0, 1.0, 1.0).unwrap();
        assert!(mean_abs(&c, &x) < 1e-6);
    }

    #[test]
    fn colour_jitter_analytic_cases() {
        let x = Image::constant(3, 8, 0.5).unwrap();
        let y = color_jitter(&x, 1.3, 1.0, 1.0).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.65).abs() < 1e-6));
        let x = sample_image(11);
        let y = color_jitter(&x, 1.0, 1.0, 0.0).unwrap();
        let p = 32 * 32;
        for i in 0..p {
            let d = y.data();
            assert!((d[i] - d[p + i]).abs() < 1e-6 && (d[i] - d[2 * p + i]).abs() < 1e-6);
        }
        assert!(color_jitter(&x, 1.0, -0.5, 1.0).is_err());
    }

    #[test]
    fn noise_gradient_is_one_where_unclamped() {
        let x = Tensor::full(&[1, 3, 8, 8], 0.5);
        let build = |g: &mut Graph, v: Var| {
            let mut r = Rng::new(1);
            let y = noise_var(g, v, &[0.05], &mut r).unwrap();
            let s = g.mean(y);
            g.scale(s, 192.0)
        };
        let ga = analytic(&build, &x);
        assert!(ga.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
        assert!(add_gaussian_noise(&Image::constant(3, 8, 0.5).unwrap(), -0.1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn pipeline_identities() {
        let imgs = synth_shapes(4, 16, 12).unwrap();
        let batch = ImageBatch::from_images(&imgs).unwrap();
        let off = AugmentationConfig {
            per_op_probability: 0.0,
            ..Default::default()
        };
        let (y, _) = apply_pipeline(&batch, &off, &mut Rng::new(1)).unwrap();
        assert_eq!(y, batch);
        let pinned = AugmentationConfig {
            noise_sigma: [0.0, 0.0],
            blur_kernel: [1, 1],
            jpeg_quality: [100, 100],
            color_factor: [1.0, 1.0],
            per_op_probability: 1.0,
            ..Default::default()
        };
        let (y, ops) = apply_pipeline(&batch, &pinned, &mut Rng::new(1)).unwrap();
        assert!(ops.iter().all(|o| Operator::ALL.iter().all(|op| o.fired(*op))));
        // quality 100 still rounds DCT coefficients to integers
        let d: Vec<f64> = y.tensor().data().iter().zip(batch.tensor().data()).map(|(a, b)| (a - b) as f64).collect();
        let rms = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        let worst = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rms < 1.05 * crate::jpeg::unit_step_rounding_rms(), "rms {rms}");
        assert!(worst < 4.0 / 255.0, "worst {worst}");
    }

    #[test]
    fn blur_kernel_is_normalised_and_nearly_flat_for_wide_sigma() {
        let k = gaussian_kernel_1d(9, 10.0).unwrap();
        let two_d: Vec<f64> = k.iter().flat_map(|a| k.iter().map(move |b| *a as f64 * *b as f64)).collect();
        assert!((two_d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        // per axis the spread is exp(16/200); the corner/centre ratio squares it
        let axis = (k[4] / k[0]) as f64;
        assert!(axis < 1.1);
        assert!((axis - (0.08f64).exp()).abs() < 1e-5);
        let max = two_d.iter().cloned().fold(f64::MIN, f64::max);
        let min = two_d.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max / min - (0.16f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn blur_rejects_bad_parameters() {
        let x = sample_image(2);
        assert!(gaussian_blur(&x, 4, 5.0).is_err());
        assert!(gaussian_blur(&x, 5, 0.0).is_err());
        assert!(gaussian_blur(&x, 5, -1.0).is_err());
    }

    #[test]
    fn blur_preserves_constant_image() {
        let x = Image::constant(3, 16, 0.4).unwrap();
        let y = gaussian_blur(&x, 9, 7.0).unwrap();
        assert!(mean_abs(&x, &y) < 1e-6);
    }

    #[test]
    fn noise_standard_deviation_matches() {
        let x = Image::constant(3, 200, 0.5).unwrap();
        let mut rng = Rng::new(9);
        let y = add_gaussian_noise(&x, 0.1, &mut rng).unwrap();
        let n = y.data().len() as f64;
        let var = y.data().iter().map(|v| (*v as f64 - 0.5).powi(2)).sum::<f64>() / n;
        assert!((var.sqrt() - 0.1).abs() < 0.005, "std {}", var.sqrt());
    }

    #[test]
    fn differentiable_jpeg_tracks_real_codec() {
        let x = sample_image(3);
        let real = real_jpeg(&x, 50).unwrap();
        let sim = diff_jpeg(&x, 50, RoundingSurrogate::StraightThrough).unwrap();
        let d = mean_abs(&real, &sim);
        assert!(d < 0.02, "mean abs diff {d}");
    }

    #[test]
    fn jpeg_cubic_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let x = random_tensor(&[1, 3, 16, 16], 0.3, 0.7, &mut rng);
        let w = random_tensor(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let build = |g: &mut Graph, v: Var| {
            let y = jpeg_var(g, v, &[Some(40)], RoundingSurrogate::Cubic).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv);
            g.mean(p)
        };
        let err = max_rel_error(&build, &x, 1e-3, 40, 1e-4, &mut rng);
        assert!(err < 5e-2, "rel err {err}");
    }

    #[test]
    fn jpeg_straight_through_gradient_equals_rounding_free_map() {
        let mut rng = Rng::new(5);
        let x = random_tensor(&[1, 3, 16, 16], 0.3, 0.7, &mut rng);
        let w = random_tensor(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let build = |g: &mut Graph, v: Var| {
            let y = jpeg_var(g, v, &[Some(30)], RoundingSurrogate::StraightThrough).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv);
            g.mean(p)
        };
        // without rounding the codec is the identity on in-range images
        let ga = analytic(&build, &x);
        let n = x.numel() as f32;
        for (a, wv) in ga.data().iter().zip(w.data()) {
            assert!((a - wv / n).abs() < 5e-2 / n);
        }
    }

    #[test]
    fn blur_noise_colour_gradients_match_finite_differences() {
        let mut rng = Rng::new(6);
        let x = random_tensor(&[2, 3, 12, 12], 0.25, 0.75, &mut rng);
        let w = random_tensor(&[2, 3, 12, 12], -1.0, 1.0, &mut rng);
        let wsq = |g: &mut Graph, y: Var| {
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv);
            let q = g.mul(p, y);
            g.mean(q)
        };
        let blur = |g: &mut Graph, v: Var| {
            let y = blur_var(g, v, &[Some((5, 2.0)), None]).unwrap();
            wsq(g, y)
        };
        assert!(max_rel_error(&blur, &x, 1e-3, 40, 1e-4, &mut rng) < 1e-2);
        let colour = |g: &mut Graph, v: Var| {
            let y = color_var(g, v, &[Some([1.05, 1.2, 1.15]), Some([1.0, 1.1, 1.3])]).unwrap();
            wsq(g, y)
        };
        assert!(max_rel_error(&colour, &x, 1e-3, 40, 1e-4, &mut rng) < 1e-2);
        let noise = |g: &mut Graph, v: Var| {
            let mut r = Rng::new(77);
            let y = noise_var(g, v, &[0.01, 0.02], &mut r).unwrap();
            wsq(g, y)
        };
        assert!(max_rel_error(&noise, &x, 1e-3, 40, 1e-4, &mut rng) < 1e-2);
    }

    #[test]
    fn firing_rate_matches_probability() {
        let cfg = AugmentationConfig::default();
        let mut rng = Rng::new(7);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let ops = cfg.sample(&mut rng);
            for (c, op) in counts.iter_mut().zip(Operator::ALL) {
                *c += ops.fired(op) as usize;
            }
        }
        let se = (0.15f64 * 0.85 / n as f64).sqrt();
        for c in counts {
            let rate = c as f64 / n as f64;
            assert!((rate - 0.15).abs() < 3.0 * se, "rate {rate}");
        }
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let cfg = AugmentationConfig {
            per_op_probability: 1.0,
            ..Default::default()
        };
        let mut rng = Rng::new(8);
        for _ in 0..500 {
            let ops = cfg.sample(&mut rng);
            let s = ops.noise.unwrap();
            assert!((0.001..=0.15).contains(&s));
            let (k, sig) = ops.blur.unwrap();
            assert!(k % 2 == 1 && k <= 9);
            assert!((5.0..=15.0).contains(&sig));
            assert!((20..=50).contains(&ops.jpeg.unwrap()));
            assert!(ops.color.unwrap().iter().all(|f| (1.0..=1.3).contains(f)));
        }
    }

    #[test]
    fn pipeline_is_reproducible_and_in_range() {
        let imgs = synth_shapes(6, 16, 10).unwrap();
        let batch = ImageBatch::from_images(&imgs).unwrap();
        let cfg = AugmentationConfig {
            per_op_probability: 0.5,
            ..Default::default()
        };
        let (a, oa) = apply_pipeline(&batch, &cfg, &mut Rng::new(3)).unwrap();
        let (b, ob) = apply_pipeline(&batch, &cfg, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        assert!(a.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let bad = [
            AugmentationConfig { noise_sigma: [0.2, 0.1], ..Default::default() },
            AugmentationConfig { blur_kernel: [2, 2], ..Default::default() },
            AugmentationConfig { jpeg_quality: [0, 50], ..Default::default() },
            AugmentationConfig { per_op_probability: 1.5, ..Default::default() },
            AugmentationConfig { color_factor: [0.0, 1.0], ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert_eq!("jpeg".parse::<Operator>().unwrap(), Operator::Jpeg);
        assert!("crop".parse::<Operator>().is_err());
    }
}
