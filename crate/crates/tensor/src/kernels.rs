//! Raw numeric kernels shared by the forward and backward passes.

use crate::Padding;

/// `c = alpha * op(a) @ op(b) + beta * c` for a single matrix product.
///
/// `a` is `[m, k]` (or `[k, m]` when `ta`), `b` is `[k, n]` (or `[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (checked above in
    // debug builds and guaranteed by callers), and the strides describe row-major
    // layouts of those extents.
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

/// Geometry of a channels-last 2-d convolution with stride 1 and "same" output size.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: Padding,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn cols(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Source pixel for output position `(y, x)` and kernel tap `(dy, dx)`.
    #[inline]
    fn source(&self, y: usize, x: usize, dy: usize, dx: usize) -> Option<(usize, usize)> {
        let sy = y as isize + dy as isize - (self.kh / 2) as isize;
        let sx = x as isize + dx as isize - (self.kw / 2) as isize;
        let (h, w) = (self.height as isize, self.width as isize);
        match self.pad {
            Padding::Periodic => Some((sy.rem_euclid(h) as usize, sx.rem_euclid(w) as usize)),
            Padding::Zero => {
                if sy < 0 || sy >= h || sx < 0 || sx >= w {
                    None
                } else {
                    Some((sy as usize, sx as usize))
                }
            }
        }
    }
}

/// Unfold `[B, H, W, C]` into `[B*H*W, kh*kw*C]` patches.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ncols = g.cols();
    let mut cols = vec![0.0f32; g.rows() * ncols];
    let plane = g.height * g.width * g.cin;
    for b in 0..g.batch {
        let xb = &x[b * plane..(b + 1) * plane];
        for y in 0..g.height {
            for xx in 0..g.width {
                let row = (b * g.height + y) * g.width + xx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for dy in 0..g.kh {
                    for dx in 0..g.kw {
                        let off = (dy * g.kw + dx) * g.cin;
                        if let Some((sy, sx)) = g.source(y, xx, dy, dx) {
                            let src = (sy * g.width + sx) * g.cin;
                            dst[off..off + g.cin].copy_from_slice(&xb[src..src + g.cin]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the input grid.
pub(crate) fn col2im(dcols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let ncols = g.cols();
    let plane = g.height * g.width * g.cin;
    let mut dx = vec![0.0f32; g.batch * plane];
    for b in 0..g.batch {
        let dxb = &mut dx[b * plane..(b + 1) * plane];
        for y in 0..g.height {
            for xx in 0..g.width {
                let row = (b * g.height + y) * g.width + xx;
                let src = &dcols[row * ncols..(row + 1) * ncols];
                for dy in 0..g.kh {
                    for ddx in 0..g.kw {
                        let off = (dy * g.kw + ddx) * g.cin;
                        if let Some((sy, sx)) = g.source(y, xx, dy, ddx) {
                            let dst = (sy * g.width + sx) * g.cin;
                            for c in 0..g.cin {
                                dxb[dst + c] += src[off + c];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[inline]
pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Split `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
