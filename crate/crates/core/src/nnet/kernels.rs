//! Array kernels behind the tape operations. Convolutions lower to
//! im2col + GEMM; everything runs single-threaded in a fixed order.

/// Output length of a strided, zero-padded convolution.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output length of the transposed convolution with the same geometry.
pub fn tconv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((input - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0)
}

pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }
    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one image `(C, H, W)` into `(C*k*k, Ho*Wo)`.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `x`.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Strided view of a matrix slice for [`gemm`].
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f64], ncols: usize) -> Self {
        Self { data, rs: ncols, cs: 1 }
    }
    /// Transposed view of a row-major matrix with `ncols` columns.
    pub fn t(data: &'a [f64], ncols: usize) -> Self {
        Self { data, rs: 1, cs: ncols }
    }
    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with `c` row-major `m x n`.
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_index(m, k) < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index(k, n) < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Block mean over `k x k` windows of each `h x w` plane.
///
/// Each block is summed row by row, left to right, in f64 and divided by
/// `k*k`, matching the raster block average.
pub fn avg_pool_planes(x: &[f64], planes: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let (ho, wo) = (h / k, w / k);
    let area = (k * k) as f64;
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for by in 0..ho {
            for bx in 0..wo {
                let mut acc = 0.0f64;
                for dy in 0..k {
                    let row = &src[(by * k + dy) * w + bx * k..][..k];
                    for &v in row {
                        acc += v;
                    }
                }
                dst[by * wo + bx] = acc / area;
            }
        }
    }
}
