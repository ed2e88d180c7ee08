//! im2col + GEMM kernels for 2-D cross-correlation.

use serde::{Deserialize, Serialize};

/// Zero padding applied to each spatial side before convolving.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Pads only the low (top/left) sides.
    pub fn low(p: usize) -> Self {
        Self {
            top: p,
            bottom: 0,
            left: p,
            right: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    /// Output extents, or `None` when the padded input is smaller than the kernel.
    pub fn output_extent(
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Padding,
    ) -> Option<(usize, usize)> {
        let ph = h + pad.top + pad.bottom;
        let pw = w + pad.left + pad.right;
        if ph < kh || pw < kw || stride == 0 {
            return None;
        }
        Some(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad.top as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad.left as isize;
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

fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad.left as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// C[m×n] = alpha·A[m×k]·B[k×n] + beta·C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: callers pass slices whose lengths cover the strided m×k, k×n and
    // m×n (row-major, contiguous) extents; the C buffer is not aliased.
    unsafe {
        matrixmultiply::dgemm(
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

pub(crate) fn forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![0.0; g.batch * g.cout * p];
    let mut cols = vec![0.0; k * p];
    let in_stride = g.cin * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &input[b * in_stride..(b + 1) * in_stride], &mut cols);
        let dst = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(bias[o]);
            }
        }
        gemm(
            g.cout,
            k,
            p,
            kernel,
            (k as isize, 1),
            &cols,
            (p as isize, 1),
            if bias.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    upstream: &[f64],
    want: (bool, bool, bool),
) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let in_stride = g.cin * g.h * g.w;
    let mut d_input = want.0.then(|| vec![0.0; g.batch * in_stride]);
    let mut d_kernel = want.1.then(|| vec![0.0; g.cout * k]);
    let d_bias = want.2.then(|| {
        let mut db = vec![0.0; g.cout];
        for b in 0..g.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = (b * g.cout + o) * p;
                *acc += upstream[start..start + p].iter().sum::<f64>();
            }
        }
        db
    });
    let mut cols = vec![0.0; k * p];
    for b in 0..g.batch {
        let dy = &upstream[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(dk) = d_kernel.as_mut() {
            im2col(g, &input[b * in_stride..(b + 1) * in_stride], &mut cols);
            // dK[cout×k] += dY[cout×p] · colsᵀ[p×k]
            gemm(g.cout, p, k, dy, (p as isize, 1), &cols, (1, p as isize), 1.0, dk);
        }
        if let Some(dx) = d_input.as_mut() {
            // dcols[k×p] = Kᵀ[k×cout] · dY[cout×p]
            gemm(
                k,
                g.cout,
                p,
                kernel,
                (1, k as isize),
                dy,
                (p as isize, 1),
                0.0,
                &mut cols,
            );
            col2im(g, &cols, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}
