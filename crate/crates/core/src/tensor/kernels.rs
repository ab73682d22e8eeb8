//! Raw numeric kernels over flat slices.

/// `c = a' * b' + beta * c` where `a'` is `[m, k]` and `b'` is `[k, n]`;
/// `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the asserted slice extents.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output positions per sample.
    pub fn plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_size(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Output columns `[lo, hi)` whose input column `ow*stride + kj - pad` lies
/// inside `[0, w)`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride).min(g.wo);
    // largest ow with ow*stride + kj < w + pad
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one sample `x: [c, h, w]` into `cols: [c*kh*kw, ho*wo]`.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.plane();
    debug_assert_eq!(cols.len(), g.rows() * plane);
    for c in 0..g.c {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..g.ho {
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    let ih = oh * g.stride + ki;
                    if ih < g.pad || ih >= g.h + g.pad || lo == hi {
                        out.fill(0.0);
                        continue;
                    }
                    let srow = &src[(ih - g.pad) * g.w..(ih - g.pad + 1) * g.w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                    } else {
                        for (o, v) in out[lo..hi].iter_mut().zip(srow[start..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`] for one sample: accumulates `cols` into `dx`.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.plane();
    for c in 0..g.c {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..g.ho {
                    let ih = oh * g.stride + ki;
                    if ih < g.pad || ih >= g.h + g.pad {
                        continue;
                    }
                    let drow = &mut dst[(ih - g.pad) * g.w..(ih - g.pad + 1) * g.w];
                    let start = lo * g.stride + kj - g.pad;
                    let s = &src[oh * g.wo + lo..oh * g.wo + hi];
                    for (d, v) in drow[start..].iter_mut().step_by(g.stride).zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 max pooling with ceil rounding. Returns output and, per
/// output element, the flat index of the winning input element.
pub fn maxpool2(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ih in 2 * oh..(2 * oh + 2).min(h) {
                    for iw in 2 * ow..(2 * ow + 2).min(w) {
                        let idx = base + ih * w + iw;
                        // first maximum wins on ties
                        if x[idx] > best || best_idx == usize::MAX {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2× upsampling of `[n, c, h, w]`.
pub fn upsample2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
            }
        }
    }
    out
}
