//! Reverse-mode pass over a [`Tape`].

use super::kernels::{self, Layout};
use super::tape::{permute_data, sigmoid, Op, Tape, Var};
use crate::error::{Error, Result};

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn unary(&self, x: Var, g: &[f64], grads: &mut [Option<Vec<f64>>], f: impl Fn(usize, f64) -> f64) {
        if !self.wants(x) {
            return;
        }
        match &mut grads[x.0] {
            Some(dst) => {
                for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                    *d += f(i, gi);
                }
            }
            slot @ None => *slot = Some(g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect()),
        }
    }

    /// Reduces an output-shaped gradient onto a broadcast operand.
    fn reduce_to(&self, v: Var, out_shape: &[usize], other: Var, g: &[f64], grads: &mut [Option<Vec<f64>>], scale: impl Fn(usize, usize) -> f64) {
        let shape = self.shape(v).to_vec();
        let other_shape = self.shape(other).to_vec();
        if shape == out_shape && other_shape == out_shape {
            match &mut grads[v.0] {
                Some(dst) => {
                    for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                        *d += gi * scale(i, i);
                    }
                }
                slot @ None => *slot = Some(g.iter().enumerate().map(|(i, &gi)| gi * scale(i, i)).collect()),
            }
        } else {
            let dst = acc(grads, v, self.len_of(v));
            kernels::broadcast_for_each(out_shape, &shape, &other_shape, |o, iv, io| {
                dst[iv] += g[o] * scale(iv, io);
            });
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let other = if v == *a { *b } else { *a };
                        self.reduce_to(v, out_shape, other, g, grads, |_, _| 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.reduce_to(*a, out_shape, *b, g, grads, |_, _| 1.0);
                }
                if self.wants(*b) {
                    self.reduce_to(*b, out_shape, *a, g, grads, |_, _| -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.reduce_to(*a, out_shape, *b, g, grads, |_, io| db[io]);
                }
                if self.wants(*b) {
                    self.reduce_to(*b, out_shape, *a, g, grads, |_, io| da[io]);
                }
            }
            Op::Affine { x, scale } => self.unary(*x, g, grads, |_, gi| gi * scale),
            Op::MatMul { x, w, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                if self.wants(*x) {
                    let wd = self.value(*w).data();
                    let dst = acc(grads, *x, rows * k);
                    kernels::gemm(rows, n, k, g, Layout::row_major(n), wd, Layout::transpose_of(n), dst, true);
                }
                if self.wants(*w) {
                    let xd = self.value(*x).data();
                    let dst = acc(grads, *w, k * n);
                    kernels::gemm(k, rows, n, xd, Layout::transpose_of(k), g, Layout::row_major(n), dst, true);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let dst = acc(grads, *a, batch * m * k);
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bd[bi * k * n..(bi + 1) * k * n];
                        // dA = G * B^T; B^T is [n,k]: row-major when B is stored [n,k].
                        let lb = if *trans_b { Layout::row_major(k) } else { Layout::transpose_of(n) };
                        kernels::gemm(m, n, k, gb, Layout::row_major(n), bb, lb, &mut dst[bi * m * k..(bi + 1) * m * k], true);
                    }
                }
                if self.wants(*b) {
                    let dst = acc(grads, *b, batch * k * n);
                    for bi in 0..batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &ad[bi * m * k..(bi + 1) * m * k];
                        let out = &mut dst[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB [n,k] = G^T A.
                            kernels::gemm(n, m, k, gb, Layout::transpose_of(n), ab, Layout::row_major(k), out, true);
                        } else {
                            // dB [k,n] = A^T G.
                            kernels::gemm(k, m, n, ab, Layout::transpose_of(k), gb, Layout::row_major(n), out, true);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.unary(*x, g, grads, |i, gi| if xd[i] > 0.0 { gi } else { 0.0 })
            }
            Op::Elu(x) => {
                let xd = self.value(*x).data();
                self.unary(*x, g, grads, |i, gi| if xd[i] > 0.0 { gi } else { gi * (y[i] + 1.0) })
            }
            Op::Sigmoid(x) => self.unary(*x, g, grads, |i, gi| gi * y[i] * (1.0 - y[i])),
            Op::Exp(x) => self.unary(*x, g, grads, |i, gi| gi * y[i]),
            Op::Log(x) => {
                let xd = self.value(*x).data();
                self.unary(*x, g, grads, |i, gi| gi / xd[i])
            }
            Op::Softplus(x) => {
                let xd = self.value(*x).data();
                self.unary(*x, g, grads, |i, gi| gi * sigmoid(xd[i]))
            }
            Op::Softmax { x, len } | Op::MaskedSoftmax { x, len } => {
                if !self.wants(*x) {
                    return;
                }
                // Masked entries have y = 0 so they receive zero gradient either way.
                let dst = acc(grads, *x, g.len());
                for ((d, yr), gr) in dst.chunks_exact_mut(*len).zip(y.chunks_exact(*len)).zip(g.chunks_exact(*len)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                        *dv += yv * (gv - dot);
                    }
                }
            }
            Op::SumAxis { x, outer, len, inner } => {
                if !self.wants(*x) {
                    return;
                }
                let (outer, len, inner) = (*outer, *len, *inner);
                let dst = acc(grads, *x, outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let row = &mut dst[(o * len + l) * inner..(o * len + l + 1) * inner];
                        row.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                let n = self.len_of(*x);
                if self.wants(*x) {
                    acc(grads, *x, n).iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::MaskedMean {
                x,
                mask,
                inv_count,
                n,
                d,
            } => {
                if !self.wants(*x) {
                    return;
                }
                let (n, d) = (*n, *d);
                let dst = acc(grads, *x, mask.len() * d);
                for (gi, &ic) in inv_count.iter().enumerate() {
                    let src = &g[gi * d..(gi + 1) * d];
                    for ni in 0..n {
                        let w = mask[gi * n + ni] * ic;
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut dst[(gi * n + ni) * d..(gi * n + ni + 1) * d];
                        row.iter_mut().zip(src).for_each(|(a, s)| *a += w * s);
                    }
                }
            }
            Op::Concat { xs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut off = 0;
                for (&v, &w) in xs.iter().zip(widths) {
                    if self.wants(v) {
                        let dst = acc(grads, v, outer * w);
                        for o in 0..*outer {
                            let src = &g[o * row + off..o * row + off + w];
                            dst[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                        }
                    }
                    off += w;
                }
            }
            Op::Slice {
                x,
                outer,
                in_width,
                start,
                width,
            } => {
                if !self.wants(*x) {
                    return;
                }
                let dst = acc(grads, *x, outer * in_width);
                for o in 0..*outer {
                    let src = &g[o * width..(o + 1) * width];
                    let base = o * in_width + start;
                    dst[base..base + width].iter_mut().zip(src).for_each(|(a, s)| *a += s);
                }
            }
            Op::Reshape(x) => self.unary(*x, g, grads, |_, gi| gi),
            Op::Permute { x, perm } => {
                if !self.wants(*x) {
                    return;
                }
                let mut inv = vec![0; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let (_, back) = permute_data(g, out_shape, &inv);
                let dst = acc(grads, *x, back.len());
                dst.iter_mut().zip(&back).for_each(|(a, s)| *a += s);
            }
            Op::BroadcastTo(x) => {
                if !self.wants(*x) {
                    return;
                }
                let sx = self.shape(*x).to_vec();
                let dst = acc(grads, *x, self.len_of(*x));
                kernels::broadcast_for_each(out_shape, &sx, out_shape, |o, ia, _| dst[ia] += g[o]);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = (out_shape[2], out_shape[3]);
                let ckk = c * kh * kw;
                let n_out = ho * wo;
                let (xd, wdat) = (self.value(*x).data(), self.value(*w).data());
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut cols = vec![0.0; ckk * n_out];
                let mut dw = want_w.then(|| vec![0.0; o * ckk]);
                let mut dx = want_x.then(|| vec![0.0; b * c * h * wd]);
                for bi in 0..b {
                    let gb = &g[bi * o * n_out..(bi + 1) * o * n_out];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col(&xd[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, kh, kw, *stride, *pad, ho, wo, &mut cols);
                        // dW [o, ckk] += G [o, n_out] * cols^T
                        kernels::gemm(o, n_out, ckk, gb, Layout::row_major(n_out), &cols, Layout::transpose_of(n_out), dw, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcols [ckk, n_out] = W^T G
                        kernels::gemm(ckk, o, n_out, wdat, Layout::transpose_of(ckk), gb, Layout::row_major(n_out), &mut cols, false);
                        kernels::col2im_add(&cols, c, h, wd, kh, kw, *stride, *pad, ho, wo, &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd]);
                    }
                }
                if let Some(dw) = dw {
                    acc(grads, *w, dw.len()).iter_mut().zip(&dw).for_each(|(a, s)| *a += s);
                }
                if let Some(dx) = dx {
                    acc(grads, *x, dx.len()).iter_mut().zip(&dx).for_each(|(a, s)| *a += s);
                }
            }
            Op::Upsample2x(x) => {
                if !self.wants(*x) {
                    return;
                }
                let s = self.shape(*x).to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let dst = acc(grads, *x, planes * h * w);
                for p in 0..planes {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(p * h + yy / 2) * w + xx / 2] += g[(p * 2 * h + yy) * 2 * w + xx];
                        }
                    }
                }
            }
            Op::Gather { map, taps, channels } => {
                if !self.wants(*map) {
                    return;
                }
                let c = *channels;
                let dst = acc(grads, *map, self.len_of(*map));
                for (q, t) in taps.iter().enumerate() {
                    let src = &g[q * c..(q + 1) * c];
                    for &(idx, wgt) in t {
                        if wgt == 0.0 {
                            continue;
                        }
                        dst[idx * c..(idx + 1) * c].iter_mut().zip(src).for_each(|(a, s)| *a += wgt * s);
                    }
                }
            }
            Op::CumsumExclusive { x, len } => {
                if !self.wants(*x) {
                    return;
                }
                let dst = acc(grads, *x, g.len());
                for (d, gr) in dst.chunks_exact_mut(*len).zip(g.chunks_exact(*len)) {
                    // dx_j = sum_{i > j} g_i
                    let mut tail = 0.0;
                    for j in (0..*len).rev() {
                        d[j] += tail;
                        tail += gr[j];
                    }
                }
            }
            Op::L1Loss(p, t) => {
                let (pd, td) = (self.value(*p).data(), self.value(*t).data());
                let scale = g[0] / pd.len().max(1) as f64;
                let sign = |i: usize| {
                    let d = pd[i] - td[i];
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                if self.wants(*p) {
                    acc(grads, *p, pd.len()).iter_mut().enumerate().for_each(|(i, a)| *a += scale * sign(i));
                }
                if self.wants(*t) {
                    acc(grads, *t, td.len()).iter_mut().enumerate().for_each(|(i, a)| *a -= scale * sign(i));
                }
            }
        }
    }
}
