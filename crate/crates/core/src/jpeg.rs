//! JPEG: a differentiable simulation for training and the real codec for
//! evaluation.
//!
//! The simulation follows the baseline pipeline (JFIF YCbCr, level shift,
//! 8×8 orthonormal DCT, quality-scaled quantisation tables, 4:4:4) with the
//! rounding step replaced by a surrogate that has a usable derivative.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Image;

#[rustfmt::skip]
const LUMA_QTABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA_QTABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// RGB → YCbCr (JFIF, full range, chroma centred on zero).
const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_735_892, -0.331_264_108, 0.5],
    [0.5, -0.418_687_589, -0.081_312_411],
];

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// RMS pixel error (on `[0, 1]`, averaged over RGB) that integer rounding of
/// unit-step DCT coefficients alone produces: each coefficient error is
/// uniform on `[−½, ½]` in 8-bit units, the orthonormal DCT keeps its
/// variance of 1/12, and the YCbCr → RGB rows add their squared gains.
pub fn unit_step_rounding_rms() -> f64 {
    let inv = invert3(&RGB_TO_YCC);
    let gain: f64 = inv.iter().flatten().map(|v| v * v).sum::<f64>() / 3.0;
    (gain / 12.0).sqrt() / 255.0
}

/// libjpeg quality scaling: `5000/Q` below 50, `200 − 2Q` otherwise,
/// entries `(t·scale + 50) / 100` clamped to `[1, 255]`.
pub fn quant_tables(quality: u8) -> Result<([f32; 64], [f32; 64])> {
    if !(1..=100).contains(&quality) {
        return Err(invalid(format!("JPEG quality {quality} outside [1, 100]")));
    }
    let q = quality as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let scaled = |t: &[u16; 64]| {
        let mut out = [0.0f32; 64];
        for (o, &v) in out.iter_mut().zip(t) {
            *o = ((v as u32 * scale + 50) / 100).clamp(1, 255) as f32;
        }
        out
    };
    Ok((scaled(&LUMA_QTABLE), scaled(&CHROMA_QTABLE)))
}

fn dct_basis() -> [[f32; 8]; 8] {
    let mut d = [[0.0f32; 8]; 8];
    for (u, row) in d.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = (alpha
                * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos())
                as f32;
        }
    }
    d
}

/// `out = a · b · c` for 8×8 row-major blocks, with optional transposes.
fn sandwich(d: &[[f32; 8]; 8], block: &[f32; 64], forward: bool) -> [f32; 64] {
    // forward: D · B · Dᵀ ; inverse: Dᵀ · B · D
    let mut tmp = [0.0f32; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                let dik = if forward { d[i][k] } else { d[k][i] };
                s += dik * block[k * 8 + j];
            }
            tmp[i * 8 + j] = s;
        }
    }
    let mut out = [0.0f32; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut s = 0.0;
            for k in 0..8 {
                let dkj = if forward { d[j][k] } else { d[k][j] };
                s += tmp[i * 8 + k] * dkj;
            }
            out[i * 8 + j] = s;
        }
    }
    out
}

/// Orthonormal 2-D DCT-II of an 8×8 block.
pub fn dct8x8(block: &[f32; 64]) -> [f32; 64] {
    sandwich(&dct_basis(), block, true)
}

/// Inverse of [`dct8x8`].
pub fn idct8x8(coef: &[f32; 64]) -> [f32; 64] {
    sandwich(&dct_basis(), coef, false)
}

/// Stand-in for `round` inside the differentiable simulation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundingSurrogate {
    /// True rounding forward, identity derivative.
    #[default]
    StraightThrough,
    /// `round(u) + (u − round(u))³`, continuous with derivative `3(u − round(u))²`.
    Cubic,
}

impl RoundingSurrogate {
    fn apply(self, u: f32) -> (f32, f32) {
        let r = u.round();
        match self {
            Self::StraightThrough => (r, 1.0),
            Self::Cubic => {
                let d = u - r;
                (r + d * d * d, 3.0 * d * d)
            }
        }
    }
}

/// Differentiable JPEG at a fixed quality.
#[derive(Debug, Clone)]
pub struct JpegSim {
    luma: [f32; 64],
    chroma: [f32; 64],
    surrogate: RoundingSurrogate,
    basis: [[f32; 8]; 8],
    to_ycc: [[f32; 3]; 3],
    to_rgb: [[f32; 3]; 3],
}

/// Values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct JpegTrace {
    pub output: Vec<f32>,
    pre_clamp: Vec<f32>,
    slope: Vec<f32>,
}

fn cast3(m: [[f64; 3]; 3]) -> [[f32; 3]; 3] {
    m.map(|r| r.map(|v| v as f32))
}

impl JpegSim {
    pub fn new(quality: u8, surrogate: RoundingSurrogate) -> Result<Self> {
        let (luma, chroma) = quant_tables(quality)?;
        Ok(Self {
            luma,
            chroma,
            surrogate,
            basis: dct_basis(),
            to_ycc: cast3(RGB_TO_YCC),
            to_rgb: cast3(invert3(&RGB_TO_YCC)),
        })
    }

    fn padded(s: usize) -> usize {
        s.div_ceil(8) * 8
    }

    fn reflect(i: usize, s: usize) -> usize {
        if i < s {
            i
        } else {
            2 * (s - 1) - i
        }
    }

    /// Run on one `3 × S × S` image (`S ≥ 8`); sizes that are not a multiple
    /// of 8 are reflect-padded, processed, then cropped.
    pub fn forward(&self, x: &[f32], s: usize) -> JpegTrace {
        let p = Self::padded(s);
        let pp = p * p;
        let mut ycc = vec![0.0f32; 3 * pp];
        for y in 0..p {
            for xx in 0..p {
                let src = Self::reflect(y, s) * s + Self::reflect(xx, s);
                let rgb = [x[src] * 255.0, x[s * s + src] * 255.0, x[2 * s * s + src] * 255.0];
                for c in 0..3 {
                    let m = &self.to_ycc[c];
                    let v = m[0] * rgb[0] + m[1] * rgb[1] + m[2] * rgb[2];
                    ycc[c * pp + y * p + xx] = if c == 0 { v - 128.0 } else { v };
                }
            }
        }
        let mut slope = vec![0.0f32; 3 * pp];
        let mut rec = vec![0.0f32; 3 * pp];
        for c in 0..3 {
            let table = if c == 0 { &self.luma } else { &self.chroma };
            for by in (0..p).step_by(8) {
                for bx in (0..p).step_by(8) {
                    let mut block = [0.0f32; 64];
                    for i in 0..8 {
                        for j in 0..8 {
                            block[i * 8 + j] = ycc[c * pp + (by + i) * p + bx + j];
                        }
                    }
                    let coef = sandwich(&self.basis, &block, true);
                    let mut deq = [0.0f32; 64];
                    for k in 0..64 {
                        let (r, d) = self.surrogate.apply(coef[k] / table[k]);
                        deq[k] = r * table[k];
                        slope[c * pp + (by + k / 8) * p + bx + k % 8] = d;
                    }
                    let back = sandwich(&self.basis, &deq, false);
                    for i in 0..8 {
                        for j in 0..8 {
                            rec[c * pp + (by + i) * p + bx + j] = back[i * 8 + j];
                        }
                    }
                }
            }
        }
        let mut pre_clamp = vec![0.0f32; 3 * s * s];
        for y in 0..s {
            for xx in 0..s {
                let q = y * p + xx;
                let v = [rec[q] + 128.0, rec[pp + q], rec[2 * pp + q]];
                for c in 0..3 {
                    let m = &self.to_rgb[c];
                    pre_clamp[c * s * s + y * s + xx] = (m[0] * v[0] + m[1] * v[1] + m[2] * v[2]) / 255.0;
                }
            }
        }
        let output = pre_clamp.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        JpegTrace {
            output,
            pre_clamp,
            slope,
        }
    }

    /// Vector-Jacobian product of [`JpegSim::forward`].
    pub fn backward(&self, trace: &JpegTrace, gy: &[f32], s: usize) -> Vec<f32> {
        let p = Self::padded(s);
        let pp = p * p;
        let mut g_rec = vec![0.0f32; 3 * pp];
        for y in 0..s {
            for xx in 0..s {
                let mut g = [0.0f32; 3];
                for (c, gc) in g.iter_mut().enumerate() {
                    let i = c * s * s + y * s + xx;
                    let pc = trace.pre_clamp[i];
                    if (0.0..=1.0).contains(&pc) {
                        *gc = gy[i] / 255.0;
                    }
                }
                for c in 0..3 {
                    g_rec[c * pp + y * p + xx] =
                        self.to_rgb[0][c] * g[0] + self.to_rgb[1][c] * g[1] + self.to_rgb[2][c] * g[2];
                }
            }
        }
        let mut g_ycc = vec![0.0f32; 3 * pp];
        for c in 0..3 {
            for by in (0..p).step_by(8) {
                for bx in (0..p).step_by(8) {
                    let mut block = [0.0f32; 64];
                    for i in 0..8 {
                        for j in 0..8 {
                            block[i * 8 + j] = g_rec[c * pp + (by + i) * p + bx + j];
                        }
                    }
                    let mut g_coef = sandwich(&self.basis, &block, true);
                    for (k, gc) in g_coef.iter_mut().enumerate() {
                        *gc *= trace.slope[c * pp + (by + k / 8) * p + bx + k % 8];
                    }
                    let back = sandwich(&self.basis, &g_coef, false);
                    for i in 0..8 {
                        for j in 0..8 {
                            g_ycc[c * pp + (by + i) * p + bx + j] = back[i * 8 + j];
                        }
                    }
                }
            }
        }
        let mut gx = vec![0.0f32; 3 * s * s];
        for y in 0..p {
            for xx in 0..p {
                let q = y * p + xx;
                let dst = Self::reflect(y, s) * s + Self::reflect(xx, s);
                let g = [g_ycc[q], g_ycc[pp + q], g_ycc[2 * pp + q]];
                for c in 0..3 {
                    gx[c * s * s + dst] += 255.0
                        * (self.to_ycc[0][c] * g[0] + self.to_ycc[1][c] * g[1] + self.to_ycc[2][c] * g[2]);
                }
            }
        }
        gx
    }
}

/// Encode with a real baseline JPEG encoder at `quality` and decode back.
pub fn real_jpeg(img: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(invalid(format!("JPEG quality {quality} outside [1, 100]")));
    }
    let rgb = img.to_rgb8()?;
    let mut buf = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?;
    Image::from_rgb8(&decoded.to_rgb8())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn dct_round_trip() {
        let mut rng = Rng::new(1);
        let mut block = [0.0f32; 64];
        rng.fill_uniform(&mut block, -128.0, 127.0);
        let back = idct8x8(&dct8x8(&block));
        let err = block.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err / 255.0 < 1e-5, "max abs error {err}");
        let dc = dct8x8(&[8.0; 64]);
        assert!((dc[0] - 64.0).abs() < 1e-4);
        assert!(dc[1..].iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn colour_transform_inverts() {
        let inv = invert3(&RGB_TO_YCC);
        for (i, row) in inv.iter().enumerate() {
            for j in 0..3 {
                let v: f64 = row.iter().zip(&RGB_TO_YCC).map(|(a, m)| a * m[j]).sum();
                assert!((v - (i == j) as u8 as f64).abs() < 1e-12);
            }
        }
        assert!((inv[0][2] - 1.402).abs() < 1e-3);
        assert!((inv[2][1] - 1.772).abs() < 1e-3);
    }

    #[test]
    fn quality_scaling() {
        let (l50, c50) = quant_tables(50).unwrap();
        assert_eq!(l50[0], 16.0);
        assert_eq!(c50[63], 99.0);
        let (l100, _) = quant_tables(100).unwrap();
        assert!(l100.iter().all(|&v| v == 1.0));
        let (l10, _) = quant_tables(10).unwrap();
        assert_eq!(l10[0], 80.0);
        let (l1, _) = quant_tables(1).unwrap();
        assert_eq!(l1[63], 255.0);
        assert!(quant_tables(0).is_err());
        assert!(quant_tables(101).is_err());
    }

    #[test]
    fn non_multiple_of_eight_is_padded_and_cropped() {
        let mut rng = Rng::new(2);
        let s = 12;
        let mut x = vec![0.0f32; 3 * s * s];
        rng.fill_uniform(&mut x, 0.2, 0.8);
        let sim = JpegSim::new(95, RoundingSurrogate::StraightThrough).unwrap();
        let tr = sim.forward(&x, s);
        assert_eq!(tr.output.len(), x.len());
        let err = x.iter().zip(&tr.output).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 0.1);
    }

    #[test]
    fn real_codec_round_trip_shape() {
        let img = Image::constant(3, 16, 0.5).unwrap();
        let out = real_jpeg(&img, 50).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(real_jpeg(&img, 0).is_err());
    }
}
