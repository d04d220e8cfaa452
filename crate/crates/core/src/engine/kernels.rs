//! Dense compute kernels shared by the autograd ops: GEMM wrapper,
//! im2col/col2im and bilinear resampling tables.

/// `c = a · b + beta · c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: operand extents were checked against the strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold one CHW image into a `[c*k*k, ho*wo]` column matrix.
pub fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto a CHW image.
pub fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            prow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for half-pixel-centred linear resampling along one axis:
/// `(i0, i1, w1)` so that `out = (1 - w1) * in[i0] + w1 * in[i1]`.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = if i1 == i0 { 0.0 } else { (src - i0 as f64) as f32 };
            (i0, i1, w1)
        })
        .collect()
}

/// Bilinear resize of one plane.
pub fn resize_plane(src: &[f32], ih: usize, iw: usize, dst: &mut [f32], oh: usize, ow: usize) {
    let ty = linear_taps(ih, oh);
    let tx = linear_taps(iw, ow);
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let top = src[y0 * iw + x0] * (1.0 - wx) + src[y0 * iw + x1] * wx;
            let bot = src[y1 * iw + x0] * (1.0 - wx) + src[y1 * iw + x1] * wx;
            dst[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
}

pub fn resize_plane_backward(
    grad_out: &[f32],
    oh: usize,
    ow: usize,
    grad_in: &mut [f32],
    ih: usize,
    iw: usize,
) {
    let ty = linear_taps(ih, oh);
    let tx = linear_taps(iw, ow);
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let g = grad_out[oy * ow + ox];
            grad_in[y0 * iw + x0] += g * (1.0 - wy) * (1.0 - wx);
            grad_in[y0 * iw + x1] += g * (1.0 - wy) * wx;
            grad_in[y1 * iw + x0] += g * wy * (1.0 - wx);
            grad_in[y1 * iw + x1] += g * wy * wx;
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
