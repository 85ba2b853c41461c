//! Image-fidelity metrics: MSE, PSNR and SSIM on `[0, 1]` images.

use crate::error::{invalid, Error, Result};
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(x: &Image, y: &Image) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean of squared element differences.
pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    same_shape(x, y)?;
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(s / x.data().len() as f64)
}

/// `10·log10(1 / mse)` with peak 1.0, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB)
    }
}

/// Summed-area table with a zero border row/column.
fn integral(p: &[f64], s: usize) -> Vec<f64> {
    let w = s + 1;
    let mut t = vec![0.0; w * w];
    for y in 0..s {
        let mut row = 0.0;
        for x in 0..s {
            row += p[y * s + x];
            t[(y + 1) * w + x + 1] = t[y * w + x + 1] + row;
        }
    }
    t
}

fn window_sum(t: &[f64], s: usize, y: usize, x: usize, k: usize) -> f64 {
    let w = s + 1;
    t[(y + k) * w + x + k] - t[y * w + x + k] - t[(y + k) * w + x] + t[y * w + x]
}

/// Mean local SSIM over every 8×8 window (stride 1), per channel, then
/// averaged across channels. Uniform window weights, population moments.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    same_shape(x, y)?;
    let s = x.size();
    let k = SSIM_WINDOW;
    if s < k {
        return Err(invalid(format!("SSIM needs at least {k}×{k} pixels, got {s}×{s}")));
    }
    let plane = s * s;
    let n = (k * k) as f64;
    let per_window = s - k + 1;
    let mut total = 0.0;
    for c in 0..x.channels() {
        let a: Vec<f64> = x.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p * q).collect();
        let (ta, tb, taa, tbb, tab) = (
            integral(&a, s),
            integral(&b, s),
            integral(&aa, s),
            integral(&bb, s),
            integral(&ab, s),
        );
        let mut acc = 0.0;
        for wy in 0..per_window {
            for wx in 0..per_window {
                let mx = window_sum(&ta, s, wy, wx, k) / n;
                let my = window_sum(&tb, s, wy, wx, k) / n;
                let vx = (window_sum(&taa, s, wy, wx, k) / n - mx * mx).max(0.0);
                let vy = (window_sum(&tbb, s, wy, wx, k) / n - my * my).max(0.0);
                let cxy = window_sum(&tab, s, wy, wx, k) / n - mx * my;
                acc += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
        total += acc / (per_window * per_window) as f64;
    }
    Ok(total / x.channels() as f64)
}
