//! Slice-level forward/backward kernels. Shapes are validated by the caller.

/// `c = alpha * a·b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass buffers covering the strided m×k, k×n and m×n
    // extents; c is a dense row-major m×n block.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *o = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            plane[ih as usize * g.w + iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. Returns the output and, unless the kernel is a
/// pointwise 1×1, the im2col buffers needed by the backward pass.
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<f64>, Vec<f64>) {
    let kk = g.col_rows();
    let p = g.col_cols();
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    let mut out = vec![0.0; g.batch * out_stride];
    let pointwise = g.is_pointwise();
    let mut saved = if keep_cols && !pointwise {
        vec![0.0; g.batch * kk * p]
    } else {
        Vec::new()
    };
    let mut scratch = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    for n in 0..g.batch {
        let xs = &x[n * in_stride..(n + 1) * in_stride];
        let cols: &[f64] = if pointwise {
            xs
        } else {
            let buf = if keep_cols {
                &mut saved[n * kk * p..(n + 1) * kk * p]
            } else {
                &mut scratch[..]
            };
            im2col(xs, g, buf);
            buf
        };
        let o = &mut out[n * out_stride..(n + 1) * out_stride];
        for (co, row) in o.chunks_exact_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        gemm(
            g.c_out,
            kk,
            p,
            weight,
            (kk as isize, 1),
            cols,
            (p as isize, 1),
            o,
            1.0,
        );
    }
    (out, saved)
}

/// Accumulates gradients into `dx`, `dw`, `db` (any of which may be empty
/// to skip that input).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    saved_cols: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let kk = g.col_rows();
    let p = g.col_cols();
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    let pointwise = g.is_pointwise();
    let mut scratch = vec![0.0; if pointwise { 0 } else { kk * p }];
    let mut dcols = vec![0.0; kk * p];
    for n in 0..g.batch {
        let dyn_ = &dy[n * out_stride..(n + 1) * out_stride];
        if !db.is_empty() {
            for (co, row) in dyn_.chunks_exact(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        if !dw.is_empty() {
            let xs = &x[n * in_stride..(n + 1) * in_stride];
            let cols: &[f64] = if pointwise {
                xs
            } else if !saved_cols.is_empty() {
                &saved_cols[n * kk * p..(n + 1) * kk * p]
            } else {
                im2col(xs, g, &mut scratch);
                &scratch
            };
            // dW += dY · colsᵀ
            gemm(
                g.c_out,
                p,
                kk,
                dyn_,
                (p as isize, 1),
                cols,
                (1, p as isize),
                dw,
                1.0,
            );
        }
        if !dx.is_empty() {
            let dxn = &mut dx[n * in_stride..(n + 1) * in_stride];
            if pointwise {
                // dX += Wᵀ · dY directly.
                gemm(
                    kk,
                    g.c_out,
                    p,
                    weight,
                    (1, kk as isize),
                    dyn_,
                    (p as isize, 1),
                    dxn,
                    1.0,
                );
            } else {
                gemm(
                    kk,
                    g.c_out,
                    p,
                    weight,
                    (1, kk as isize),
                    dyn_,
                    (p as isize, 1),
                    &mut dcols,
                    0.0,
                );
                col2im_add(&dcols, g, dxn);
            }
        }
    }
}

/// `out[rows, d_out] = x[rows, d_in] · Wᵀ + b`.
pub fn linear_forward(x: &[f64], w: &[f64], b: &[f64], rows: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        out.extend_from_slice(b);
    }
    gemm(
        rows,
        d_in,
        d_out,
        x,
        (d_in as isize, 1),
        w,
        (1, d_in as isize),
        &mut out,
        1.0,
    );
    out
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    if !dx.is_empty() {
        gemm(rows, d_out, d_in, dy, (d_out as isize, 1), w, (d_in as isize, 1), dx, 1.0);
    }
    if !dw.is_empty() {
        gemm(d_out, rows, d_in, dy, (1, d_out as isize), x, (d_in as isize, 1), dw, 1.0);
    }
    if !db.is_empty() {
        for row in dy.chunks_exact(d_out) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
}

/// 2×2 max pooling with stride 2 over `[planes, h, w]`; odd trailing rows
/// and columns are dropped. Returns output and flat argmax indices.
pub fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + 2 * oh * w + 2 * ow;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oh + di) * w + 2 * ow + dj;
                    // Strict comparison: ties resolve to the first position.
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Softmax of `x / temperature` into `out`, max-subtracted.
pub fn softmax_into(x: &[f64], temperature: f64, out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - m) / temperature).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// `log Σ exp(x / T)`, evaluated as `max/T + ln(1 + Σ_{others} exp(..))`
/// so confident rows keep full precision.
pub fn log_sum_exp(x: &[f64], temperature: f64) -> f64 {
    let (arg, m) = x
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) });
    let rest: f64 = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| ((v - m) / temperature).exp())
        .sum();
    m / temperature + rest.ln_1p()
}
