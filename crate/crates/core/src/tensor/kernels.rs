//! Raw numeric kernels behind the graph ops. Layouts are row-major, images NCHW.

/// Fresh row-major `[m, n]` product `a·b`. The output is never zeroed first:
/// with `beta = 0` the kernel writes every element without reading it.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Vec<f64> {
    if m == 0 || n == 0 {
        return Vec::new();
    }
    if k == 0 {
        return vec![0.0; m * n];
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, rsa, csa) < a.len());
    assert!(last(k, n, rsb, csb) < b.len());
    let mut c: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: operands are bounds-checked above; C has room for m·n values,
    // all of which dgemm writes when beta is zero, before `set_len` exposes them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

/// y[N,out] = x[N,in] · Wᵀ + b, with W stored as [out, in].
pub(crate) fn linear_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    n: usize,
    fan_in: usize,
    fan_out: usize,
) -> Vec<f64> {
    let mut y = gemm(n, fan_in, fan_out, x, (fan_in, 1), w, (1, fan_in));
    if let Some(b) = b {
        for row in y.chunks_exact_mut(fan_out) {
            for (v, bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
    }
    y
}

pub(crate) struct LinearGrads {
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

pub(crate) fn linear_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    n: usize,
    fan_in: usize,
    fan_out: usize,
) -> LinearGrads {
    let dx = gemm(n, fan_out, fan_in, dy, (fan_out, 1), w, (fan_in, 1));
    let dw = gemm(fan_out, n, fan_in, dy, (1, fan_out), x, (fan_in, 1));
    let mut db = vec![0.0; fan_out];
    for row in dy.chunks_exact(fan_out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    LinearGrads { x: dx, w: dw, b: db }
}

/// Geometry of a stride-1, zero-padded 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Batch patch matrix `[C_in·k·k, N·H_out·W_out]`: row `(ci, ky, kx)` holds,
/// image after image, the input values under that kernel tap.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, w) = (g.height as isize, g.width as isize);
    let k = g.kernel;
    let pad = g.padding as isize;
    let in_img = g.c_in * g.height * g.width;
    let mut cols = Vec::with_capacity(g.patch_len() * g.batch * oh * ow);
    for ci in 0..g.c_in {
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                // Output columns whose tap lands inside the image.
                let lo = (pad - kx).clamp(0, ow as isize) as usize;
                let hi = (w + pad - kx).clamp(lo as isize, ow as isize) as usize;
                for n in 0..g.batch {
                    let src = &x[n * in_img + ci * g.height * g.width..][..g.height * g.width];
                    for oy in 0..oh as isize {
                        let iy = oy + ky - pad;
                        if iy < 0 || iy >= h {
                            cols.resize(cols.len() + ow, 0.0);
                            continue;
                        }
                        let row = &src[iy as usize * g.width..][..g.width];
                        let start = (lo as isize + kx - pad) as usize;
                        cols.resize(cols.len() + lo, 0.0);
                        cols.extend_from_slice(&row[start..start + (hi - lo)]);
                        cols.resize(cols.len() + ow - hi, 0.0);
                    }
                }
            }
        }
    }
    cols
}

/// Folds one image's columns of a patch matrix back onto the image,
/// accumulating overlaps. Inverse layout of [`im2col`].
fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64], stride: usize, offset: usize) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let pad = g.padding as isize;
    for ci in 0..g.c_in {
        let dst = &mut img[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * stride + offset..];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and, when `keep_cols`, the batch patch matrix
/// for backward. One GEMM covers the batch.
pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let wide = g.batch * plane;
    let cols = im2col(x, g);
    let tmp = gemm(g.c_out, patch, wide, w, (patch, 1), &cols, (wide, 1));
    let mut y = Vec::with_capacity(g.c_out * wide);
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let src = &tmp[co * wide + n * plane..][..plane];
            match b {
                Some(b) => y.extend(src.iter().map(|v| v + b[co])),
                None => y.extend_from_slice(src),
            }
        }
    }
    (y, keep_cols.then_some(cols))
}

pub(crate) struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Weight and bias gradients, plus the input gradient when `want_x`.
pub(crate) fn conv2d_backward(dy: &[f64], cols: &[f64], w: &[f64], g: &ConvGeom, want_x: bool) -> ConvGrads {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_img = g.c_in * g.height * g.width;
    let wide = g.batch * plane;
    // dy is [N, C_out, plane]; regroup to [C_out, N·plane].
    let mut dyt = Vec::with_capacity(g.c_out * wide);
    let mut db = vec![0.0; g.c_out];
    for (co, acc) in db.iter_mut().enumerate() {
        for n in 0..g.batch {
            let src = &dy[(n * g.c_out + co) * plane..][..plane];
            dyt.extend_from_slice(src);
            *acc += src.iter().sum::<f64>();
        }
    }
    let dw = gemm(g.c_out, wide, patch, &dyt, (wide, 1), cols, (1, wide));
    let x = want_x.then(|| {
        let dcols = gemm(patch, g.c_out, wide, w, (1, patch), &dyt, (wide, 1));
        let mut dx = vec![0.0; g.batch * in_img];
        for n in 0..g.batch {
            col2im(&dcols, g, &mut dx[n * in_img..(n + 1) * in_img], wide, n * plane);
        }
        dx
    });
    ConvGrads { x, w: dw, b: db }
}

/// 2×2 max-pool with stride 2 (odd trailing rows/cols dropped).
/// Returns output and the flat input index of each selected maximum; ties keep the first.
pub(crate) fn max_pool2_forward(
    x: &[f64],
    planes: usize,
    height: usize,
    width: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * width + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * width + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

/// Mean over the spatial plane: [N,C,H,W] → [N,C].
pub(crate) fn global_avg_pool(x: &[f64], planes: usize, plane: usize) -> Vec<f64> {
    (0..planes)
        .map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}
