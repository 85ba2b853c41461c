//! Low-level dense kernels: GEMM, im2col/col2im and layout permutations.

/// `c[m×n] = a[m×k] · b[k×n] + beta · c` with arbitrary element strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_a = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
    let max_b = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
    assert!((max_a as usize) < a.len() && (max_b as usize) < b.len());
    // SAFETY: the asserts above bound every index touched by the kernel.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Output positions `o` in `[lo, hi)` whose input index `o·stride + off − pad`
/// falls inside `[0, len)`.
fn valid_range(off: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if len + pad > off { (len + pad - off).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfold a `[batch, C, H, W]` image into `[C·k·k, batch·Ho·Wo]` columns.
pub(crate) fn im2col(x: &[f32], batch: usize, g: ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = batch * oh * ow;
    let mut out = vec![0.0f32; g.col_rows() * cols];
    let plane = g.height * g.width;
    let s = g.stride;
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            let (y0, y1) = valid_range(ki, g.pad, s, g.height, oh);
            for kj in 0..g.kernel {
                let (x0, x1) = valid_range(kj, g.pad, s, g.width, ow);
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..batch {
                    let src = &x[(n * g.channels + c) * plane..(n * g.channels + c + 1) * plane];
                    let dst = &mut dst_row[n * oh * ow..(n + 1) * oh * ow];
                    for oy in y0..y1 {
                        let iy = oy * s + ki - g.pad;
                        let src_row = &src[iy * g.width..(iy + 1) * g.width];
                        let dst_line = &mut dst[oy * ow + x0..oy * ow + x1];
                        let first = x0 * s + kj - g.pad;
                        if s == 1 {
                            dst_line.copy_from_slice(&src_row[first..first + (x1 - x0)]);
                        } else {
                            for (i, d) in dst_line.iter_mut().enumerate() {
                                *d = src_row[first + i * s];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[batch, C, H, W]` image.
pub(crate) fn col2im(cols_buf: &[f32], batch: usize, g: ConvGeom) -> Vec<f32> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = batch * oh * ow;
    let plane = g.height * g.width;
    let s = g.stride;
    let mut out = vec![0.0f32; batch * g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            let (y0, y1) = valid_range(ki, g.pad, s, g.height, oh);
            for kj in 0..g.kernel {
                let (x0, x1) = valid_range(kj, g.pad, s, g.width, ow);
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src_row = &cols_buf[row * cols..(row + 1) * cols];
                for n in 0..batch {
                    let dst =
                        &mut out[(n * g.channels + c) * plane..(n * g.channels + c + 1) * plane];
                    let src = &src_row[n * oh * ow..(n + 1) * oh * ow];
                    for oy in y0..y1 {
                        let iy = oy * s + ki - g.pad;
                        let dst_line = &mut dst[iy * g.width..(iy + 1) * g.width];
                        let src_line = &src[oy * ow + x0..oy * ow + x1];
                        let first = x0 * s + kj - g.pad;
                        if s == 1 {
                            dst_line[first..first + (x1 - x0)]
                                .iter_mut()
                                .zip(src_line)
                                .for_each(|(d, v)| *d += v);
                        } else {
                            for (i, v) in src_line.iter().enumerate() {
                                dst_line[first + i * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[N, C, P]` → `[C, N·P]`.
pub(crate) fn nc_to_cn(x: &[f32], n: usize, c: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for i in 0..n {
        for j in 0..c {
            let src = &x[(i * c + j) * p..(i * c + j + 1) * p];
            out[j * n * p + i * p..j * n * p + (i + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N·P]` → `[N, C, P]`.
pub(crate) fn cn_to_nc(x: &[f32], n: usize, c: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for i in 0..n {
        for j in 0..c {
            out[(i * c + j) * p..(i * c + j + 1) * p]
                .copy_from_slice(&x[j * n * p + i * p..j * n * p + (i + 1) * p]);
        }
    }
    out
}
