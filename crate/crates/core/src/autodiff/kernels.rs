//! Dense kernels shared by the forward and backward passes.

/// `c = op(a) · op(b) + beta · c` where `a` is stored `m×k` (or `k×m` when
/// `a_t`) and `b` is stored `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
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
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices were checked to hold exactly the m×k, k×n and m×n
    // elements the strides address.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds `x` (`N×C×H×W`) into a `(C·k·k) × (N·Ho·Wo)` patch matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols_n = g.positions();
    let mut cols = vec![0.0f32; g.patch() * cols_n];
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.w..][..g.w];
                        let out_base = n * hw_out + oh * g.wo;
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[out_base + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols_n = g.positions();
    let mut dx = vec![0.0f32; g.n * g.c * g.h * g.w];
    let hw_out = g.ho * g.wo;
    for c in 0..g.c {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[ih as usize * g.w..][..g.w];
                        let out_base = n * hw_out + oh * g.wo;
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst_row[iw as usize] += src[out_base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `[F × N·HW]` → `[N × F × HW]`.
pub(crate) fn fn_to_nf(src: &[f32], f: usize, n: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for fi in 0..f {
        for ni in 0..n {
            out[(ni * f + fi) * hw..][..hw].copy_from_slice(&src[fi * n * hw + ni * hw..][..hw]);
        }
    }
    out
}

/// `[N × F × HW]` → `[F × N·HW]`.
pub(crate) fn nf_to_fn(src: &[f32], f: usize, n: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; src.len()];
    for ni in 0..n {
        for fi in 0..f {
            out[fi * n * hw + ni * hw..][..hw].copy_from_slice(&src[(ni * f + fi) * hw..][..hw]);
        }
    }
    out
}
