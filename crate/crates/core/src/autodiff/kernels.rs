//! Dense numeric kernels shared by forward and backward passes.

/// Row/column strides of a 2-D operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows x cols`.
    pub fn row_major(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix that has `stored_cols` columns.
    pub fn transpose_of(stored_cols: usize) -> Self {
        Self {
            rs: 1,
            cs: stored_cols as isize,
        }
    }
}

/// Below this many multiply-adds a plain triple loop beats the blocked kernel.
const SMALL_GEMM: usize = 4096;

/// `c = a (m x k) * b (k x n) + beta * c` with arbitrary strides; `c` is row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let max_a = (m as isize - 1) * la.rs + (k as isize - 1) * la.cs;
    let max_b = (k as isize - 1) * lb.rs + (n as isize - 1) * lb.cs;
    assert!(la.rs >= 0 && la.cs >= 0 && lb.rs >= 0 && lb.cs >= 0);
    assert!((max_a as usize) < a.len(), "gemm lhs out of bounds");
    assert!((max_b as usize) < b.len(), "gemm rhs out of bounds");

    if m * n * k <= SMALL_GEMM {
        small_gemm(m, k, n, a, la, b, lb, c, accumulate);
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every element the kernel reads from `a`
    // and `b`, and `c` holds at least m*n row-major elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain loops for tiny products, with contiguous fast paths for the
/// `a b` and `a b^T` layouts used by batched attention.
#[allow(clippy::too_many_arguments)]
fn small_gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64], accumulate: bool) {
    if !accumulate {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
    }
    let (ars, acs, brs, bcs) = (la.rs as usize, la.cs as usize, lb.rs as usize, lb.cs as usize);
    if acs == 1 && brs == 1 {
        // Rows of `a` against rows of the stored `b^T`: contiguous dot products.
        for i in 0..m {
            let ar = &a[i * ars..i * ars + k];
            for j in 0..n {
                let br = &b[j * bcs..j * bcs + k];
                c[i * n + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    } else if bcs == 1 {
        for i in 0..m {
            let cr = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * ars + p * acs];
                let br = &b[p * brs..p * brs + n];
                for (o, &bv) in cr.iter_mut().zip(br) {
                    *o += av * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * ars + p * acs] * b[p * brs + j * bcs];
                }
                c[i * n + j] += s;
            }
        }
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Visits every output element of a same-rank broadcast, passing
/// `(out_index, a_index, b_index)`.
pub(crate) fn broadcast_for_each(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let sa_full = strides(a_shape);
    let sb_full = strides(b_shape);
    let sa: Vec<usize> = (0..rank).map(|d| if a_shape[d] == 1 { 0 } else { sa_full[d] }).collect();
    let sb: Vec<usize> = (0..rank).map(|d| if b_shape[d] == 1 { 0 } else { sb_full[d] }).collect();
    let inner = out_shape[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let mut base_a = 0usize;
    let mut base_b = 0usize;
    let mut out = 0usize;
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(out, ia, ib);
            out += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // Odometer over the leading dimensions.
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if counter[d] < out_shape[d] {
                break;
            }
            base_a -= sa[d] * out_shape[d];
            base_b -= sb[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}

/// Unfolds one `[c, h, w]` image into `[c*kh*kw, ho*wo]` patch columns.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let n_out = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back onto the image, adding.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let n_out = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
