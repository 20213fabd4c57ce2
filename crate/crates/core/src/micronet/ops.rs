//! Dense kernels shared by the layer implementations.
//!
//! Convolutions are lowered to matrix products through an im2col buffer whose
//! column order is `(ky, kx, channel)`, matching the row order of a conv
//! weight matrix `[k * k * c_in, c_out]`.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: isize,
    pub cols: isize,
}

impl Layout {
    /// Row-major `r × c` matrix.
    pub fn row_major(c: usize) -> Self {
        Layout {
            rows: c as isize,
            cols: 1,
        }
    }

    /// The transpose of a row-major matrix with `c` columns.
    pub fn transposed(c: usize) -> Self {
        Layout {
            rows: 1,
            cols: c as isize,
        }
    }
}

fn max_offset(rows: usize, cols: usize, layout: Layout) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * layout.rows as usize + (cols - 1) * layout.cols as usize
}

/// `c = a · b + beta · c` for an `m × k` times `k × n` product; `c` is
/// row-major `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || max_offset(m, k, la) < a.len());
    assert!(k == 0 || n == 0 || max_offset(k, n, lb) < b.len());
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every offset the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rows,
            la.cols,
            b.as_ptr(),
            lb.rows,
            lb.cols,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let p = self.pad();
        (
            (self.h + 2 * p - self.kernel) / self.stride + 1,
            (self.w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.c
    }
}

/// Zero-padded patch extraction; returns an `[oh * ow, k * k * c]` buffer.
pub(crate) fn im2col(x: &[f64], g: ConvGeometry) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let patch = g.patch();
    let pad = g.pad() as isize;
    let mut cols = vec![0.0; oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..][..patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - pad;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.c;
                    let dst = (ky * g.kernel + kx) * g.c;
                    row[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: ConvGeometry) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let patch = g.patch();
    let pad = g.pad() as isize;
    let mut x = vec![0.0; g.h * g.w * g.c];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * patch..][..patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - pad;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - pad;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.c;
                    let src = (ky * g.kernel + kx) * g.c;
                    for (d, s) in x[dst..dst + g.c].iter_mut().zip(&row[src..src + g.c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Convolution as `cols · weight + bias`, producing an `[oh * ow, c_out]` map.
pub(crate) fn conv_forward(cols: &[f64], rows: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let c_out = bias.len();
    let patch = weight.len() / c_out;
    let mut out = Vec::with_capacity(rows * c_out);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(
        rows,
        patch,
        c_out,
        cols,
        Layout::row_major(patch),
        weight,
        Layout::row_major(c_out),
        1.0,
        &mut out,
    );
    out
}

/// Accumulates weight/bias gradients and returns the patch gradient.
pub(crate) fn conv_backward(
    cols: &[f64],
    rows: usize,
    weight: &[f64],
    dy: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let c_out = grad_bias.len();
    let patch = weight.len() / c_out;
    for row in dy.chunks_exact(c_out) {
        for (g, d) in grad_bias.iter_mut().zip(row) {
            *g += d;
        }
    }
    gemm(
        patch,
        rows,
        c_out,
        cols,
        Layout::transposed(patch),
        dy,
        Layout::row_major(c_out),
        1.0,
        grad_weight,
    );
    let mut dcols = vec![0.0; rows * patch];
    gemm(
        rows,
        c_out,
        patch,
        dy,
        Layout::row_major(c_out),
        weight,
        Layout::transposed(c_out),
        0.0,
        &mut dcols,
    );
    dcols
}
