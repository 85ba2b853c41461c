//! Pixel containers in `[0, 1]`, file I/O and resizing.

use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, UnaryBackward, Var};
use crate::tensor::Tensor;

/// A `C × S × S` image with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    t: Tensor,
}

fn check_range(data: &[f32]) -> Result<()> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(invalid(format!("pixel {i} = {} outside [0, 1]", data[i]))),
        None => Ok(()),
    }
}

impl Image {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [c, h, w] if *c > 0 && *h > 0 && h == w => {}
            s => return Err(invalid(format!("image must be C×S×S, got {s:?}"))),
        }
        check_range(t.data())?;
        Ok(Self { t })
    }

    /// Build from arbitrary values, clamping into `[0, 1]`.
    pub fn clamped(t: Tensor) -> Result<Self> {
        Self::new(t.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn constant(channels: usize, size: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::full(&[channels, size, size], value))
    }

    pub fn channels(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn shape(&self) -> &[usize] {
        self.t.shape()
    }

    pub fn data(&self) -> &[f32] {
        self.t.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn into_tensor(self) -> Tensor {
        self.t
    }

    /// Round every value to the nearest multiple of 1/255.
    pub fn quantize_u8(&self) -> Image {
        Image {
            t: self.t.map(|v| (v * 255.0).round() / 255.0),
        }
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels() != 3 {
            return Err(invalid("only 3-channel images can be exported"));
        }
        let s = self.size();
        let plane = s * s;
        let d = self.data();
        Ok(image::RgbImage::from_fn(s as u32, s as u32, |x, y| {
            let p = y as usize * s + x as usize;
            let px = |c: usize| (d[c * plane + p] * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        }))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w != h {
            return Err(invalid(format!("image must be square, got {w}×{h}")));
        }
        let s = w as usize;
        let plane = s * s;
        let mut data = vec![0.0f32; 3 * plane];
        for (x, y, px) in img.enumerate_pixels() {
            let p = y as usize * s + x as usize;
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        Self::new(Tensor::new(&[3, s, s], data)?)
    }

    /// Lossless 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::ImageFile {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Decode any supported file as 8-bit RGB divided by 255; non-square
    /// inputs are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::ImageFile {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_rgb8(&img.to_rgb8())
    }

    /// Bilinear resize to `size × size` (half-pixel centres, edge clamped).
    pub fn resize(&self, size: usize) -> Image {
        if size == self.size() {
            return self.clone();
        }
        let plan = ResizePlan::new(self.size(), size);
        let data = plan.apply(self.data(), self.channels());
        Image {
            t: Tensor::new(&[self.channels(), size, size], data).unwrap(),
        }
    }
}

/// A non-empty batch of equally shaped images, stored `[N, C, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    t: Tensor,
}

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [n, c, h, w] if *n > 0 && *c > 0 && *h > 0 && h == w => {}
            s => return Err(invalid(format!("image batch must be N×C×S×S, got {s:?}"))),
        }
        check_range(t.data())?;
        Ok(Self { t })
    }

    pub fn from_images(images: &[Image]) -> Result<Self> {
        let ts: Vec<&Tensor> = images.iter().map(|i| &i.t).collect();
        Self::new(Tensor::stack(&ts)?)
    }

    pub fn len(&self) -> usize {
        self.t.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.t.shape()[1..]
    }

    pub fn size(&self) -> usize {
        self.t.shape()[2]
    }

    pub fn get(&self, i: usize) -> Image {
        Image {
            t: Tensor::new(self.image_shape(), self.t.index0(i).to_vec()).unwrap(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Image> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn into_tensor(self) -> Tensor {
        self.t
    }

    pub fn slice(&self, start: usize, end: usize) -> Result<ImageBatch> {
        if start >= end || end > self.len() {
            return Err(invalid(format!("bad batch slice {start}..{end} of {}", self.len())));
        }
        Ok(Self {
            t: self.t.narrow0(start, end),
        })
    }
}

/// Separable bilinear interpolation weights between two square sizes.
#[derive(Debug, Clone)]
struct ResizePlan {
    src: usize,
    dst: usize,
    taps: Vec<(usize, usize, f32)>,
}

impl ResizePlan {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f32 / dst as f32;
        let taps = (0..dst)
            .map(|o| {
                let pos = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f32);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f32)
            })
            .collect();
        Self { src, dst, taps }
    }

    fn apply(&self, x: &[f32], planes: usize) -> Vec<f32> {
        let (s, d) = (self.src, self.dst);
        let mut out = vec![0.0f32; planes * d * d];
        for p in 0..planes {
            let src = &x[p * s * s..(p + 1) * s * s];
            let dst = &mut out[p * d * d..(p + 1) * d * d];
            for (oy, &(y0, y1, fy)) in self.taps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.taps.iter().enumerate() {
                    let top = src[y0 * s + x0] * (1.0 - fx) + src[y0 * s + x1] * fx;
                    let bot = src[y1 * s + x0] * (1.0 - fx) + src[y1 * s + x1] * fx;
                    dst[oy * d + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    fn adjoint(&self, g: &[f32], planes: usize) -> Vec<f32> {
        let (s, d) = (self.src, self.dst);
        let mut out = vec![0.0f32; planes * s * s];
        for p in 0..planes {
            let gp = &g[p * d * d..(p + 1) * d * d];
            let dst = &mut out[p * s * s..(p + 1) * s * s];
            for (oy, &(y0, y1, fy)) in self.taps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.taps.iter().enumerate() {
                    let v = gp[oy * d + ox];
                    dst[y0 * s + x0] += v * (1.0 - fx) * (1.0 - fy);
                    dst[y0 * s + x1] += v * fx * (1.0 - fy);
                    dst[y1 * s + x0] += v * (1.0 - fx) * fy;
                    dst[y1 * s + x1] += v * fx * fy;
                }
            }
        }
        out
    }
}

impl UnaryBackward for ResizePlan {
    fn backward(&self, x: &Tensor, _y: &Tensor, gy: &Tensor) -> Tensor {
        let (n, c, _, _) = x.dims4().unwrap();
        Tensor::new(x.shape(), self.adjoint(gy.data(), n * c)).unwrap()
    }
}

/// Differentiable bilinear resize of a `[N, C, S, S]` graph value.
pub fn resize_var(g: &mut Graph, x: Var, size: usize) -> Var {
    let (n, c, s, _) = g.value(x).dims4().unwrap();
    if s == size {
        return x;
    }
    let plan = ResizePlan::new(s, size);
    let y = Tensor::new(&[n, c, size, size], plan.apply(g.value(x).data(), n * c)).unwrap();
    g.custom(x, y, Box::new(plan))
}

/// Reverse the last axis.
pub fn hflip(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("flip needs at least one axis");
    let mut out = t.clone();
    for (src, dst) in t.data().chunks(w).zip(out.data_mut().chunks_mut(w)) {
        dst.iter_mut().zip(src.iter().rev()).for_each(|(d, s)| *d = *s);
    }
    out
}

struct FlipOp;

impl UnaryBackward for FlipOp {
    fn backward(&self, _x: &Tensor, _y: &Tensor, gy: &Tensor) -> Tensor {
        hflip(gy)
    }
}

/// Left-right mirror of a graph value.
pub fn hflip_var(g: &mut Graph, x: Var) -> Var {
    let y = hflip(g.value(x));
    g.custom(x, y, Box::new(FlipOp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(s: usize, rng: &mut Rng) -> Image {
        let mut t = Tensor::zeros(&[3, s, s]);
        rng.fill_uniform(t.data_mut(), 0.0, 1.0);
        Image::new(t).unwrap()
    }

    #[test]
    fn mirror_is_an_involution_with_matching_gradient() {
        let mut rng = Rng::new(4);
        let x = random_image(6, &mut rng).into_tensor();
        let once = hflip(&x);
        assert_eq!(once.data()[5], x.data()[0]);
        assert_eq!(hflip(&once), x);
        let w = hflip(&random_image(6, &mut rng).into_tensor());
        let mut g = Graph::new();
        let v = g.input_with_grad(x.clone());
        let y = hflip_var(&mut g, v);
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv);
        let loss = g.mean(p);
        let grad = g.backward(loss).of(v).unwrap().clone();
        let n = x.numel() as f32;
        let want = hflip(&w);
        assert!(grad.data().iter().zip(want.data()).all(|(a, b)| (a * n - b).abs() < 1e-5));
    }

    #[test]
    fn rejects_out_of_range_and_non_square() {
        assert!(Image::new(Tensor::full(&[3, 4, 4], 1.5)).is_err());
        assert!(Image::new(Tensor::full(&[3, 4, 5], 0.5)).is_err());
        assert!(ImageBatch::new(Tensor::zeros(&[0, 3, 4, 4])).is_err());
    }

    #[test]
    fn png_round_trip_is_u8_quantisation() {
        let mut rng = Rng::new(5);
        let img = random_image(8, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back, img.quantize_u8());
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = Rng::new(6);
        let img = random_image(8, &mut rng);
        assert_eq!(img.resize(8), img);
        let c = Image::constant(3, 8, 0.25).unwrap().resize(16);
        assert!(c.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn resize_adjoint_holds() {
        let plan = ResizePlan::new(6, 9);
        let x: Vec<f32> = (0..36).map(|v| (v % 5) as f32 - 2.0).collect();
        let y: Vec<f32> = (0..81).map(|v| (v % 7) as f32 - 3.0).collect();
        let lhs: f32 = plan.apply(&x, 1).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = plan.adjoint(&y, 1).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }
}
