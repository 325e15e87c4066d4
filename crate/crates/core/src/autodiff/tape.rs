//! Operation tape and forward definitions of every differentiable op.
//!
//! Ops are recorded in creation order, which is a topological order; the
//! backward pass (see `backward.rs`) walks it in reverse.

use std::collections::HashMap;

use super::kernels::{self, Layout};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// One bilinear lookup into a `[B, H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatherPoint {
    pub batch: usize,
    /// Continuous pixel coordinates (pixel centres at +0.5).
    pub u: f64,
    pub v: f64,
    /// Invalid points produce a zero row.
    pub valid: bool,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    MatMul {
        x: Var,
        w: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Softmax {
        x: Var,
        len: usize,
    },
    MaskedSoftmax {
        x: Var,
        len: usize,
    },
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(Var),
    MaskedMean {
        x: Var,
        mask: Vec<f64>,
        inv_count: Vec<f64>,
        n: usize,
        d: usize,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        in_width: usize,
        start: usize,
        width: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    BroadcastTo(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Gather {
        map: Var,
        taps: Vec<[(usize, f64); 4]>,
        channels: usize,
    },
    CumsumExclusive {
        x: Var,
        len: usize,
    },
    L1Loss(Var, Var),
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
    /// Only set for masked softmax: which entries take part.
    pub mask: Option<Vec<bool>>,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    pub(crate) params: Vec<(Var, String)>,
    param_lookup: HashMap<String, Var>,
    check_finite: bool,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = kernels::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out_shape, out);
    }
    if rank == 0 {
        out.push(data[0]);
        return (out_shape, out);
    }
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    let last = rank - 1;
    loop {
        let step = src_strides[last];
        let mut s = src;
        for _ in 0..out_shape[last] {
            out.push(data[s]);
            s += step;
        }
        let mut d = last;
        loop {
            if d == 0 {
                return (out_shape, out);
            }
            d -= 1;
            counter[d] += 1;
            src += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fail any op whose output contains NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            mask: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            mask: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
            mask: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a named parameter; repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_lookup.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?
            .clone();
        let v = self.variable(t);
        self.params.push((v, name.to_string()));
        self.param_lookup.insert(name.to_string(), v);
        Ok(v)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            kernels::broadcast_for_each(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        Ok((Tensor::new(out_shape, data)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise `a + b` with same-rank broadcasting over unit dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.map(x, |v| scale * v + shift);
        let rg = self.rg(x);
        self.push(t, Op::Affine { x, scale }, rg, "affine")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = &self.nodes[x.0].value;
        Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect()).expect("same size")
    }

    /// `x [.., k] @ w [k, n] -> [.., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sx,
                rhs: sw,
            });
        }
        let (k, n) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / k;
        let mut out = vec![0.0; rows * n];
        kernels::gemm(rows, k, n, self.data(x), Layout::row_major(k), self.data(w), Layout::row_major(n), &mut out, false);
        let mut shape = sx;
        *shape.last_mut().expect("rank >= 1") = n;
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(shape, out)?, Op::MatMul { x, w, rows, k, n }, rg, "matmul")
    }

    /// Batched `a [B, m, k] @ b [B, k, n]`, or `a @ b^T` for `b [B, n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        let lb = if trans_b { Layout::transpose_of(k) } else { Layout::row_major(n) };
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                Layout::row_major(k),
                &db[i * k * n..(i + 1) * k * n],
                lb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
            "bmm",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg, "relu")
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| if v > 0.0 { v } else { v.exp_m1() });
        let rg = self.rg(x);
        self.push(t, Op::Elu(x), rg, "elu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, f64::exp);
        let rg = self.rg(x);
        self.push(t, Op::Exp(x), rg, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, f64::ln);
        let rg = self.rg(x);
        self.push(t, Op::Log(x), rg, "log")
    }

    /// `ln(1 + e^x)`, always non-negative.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, softplus);
        let rg = self.rg(x);
        self.push(t, Op::Softplus(x), rg, "softplus")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(len) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, len }, rg, "softmax")
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Masked entries get exactly zero; fully masked rows are all zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if mask.len() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let len = *shape.last().ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let mut out = self.data(x).to_vec();
        for (row, m) in out.chunks_exact_mut(len).zip(mask.chunks_exact(len)) {
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let mut s = 0.0;
            for (v, &keep) in row.iter_mut().zip(m) {
                *v = if keep { (*v - mx).exp() } else { 0.0 };
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(x);
        let var = self.push(Tensor::new(shape, out)?, Op::MaskedSoftmax { x, len }, rg, "masked_softmax")?;
        self.nodes[var.0].mask = Some(mask.to_vec());
        Ok(var)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, outer, len, inner }, rg, "sum_axis")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg, "sum_all")
    }

    /// Mean over axis 1 of `x [G, N, D]`, counting only entries with
    /// `mask [G*N] = true`. Groups with no valid entry produce zeros.
    pub fn masked_mean(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || mask.len() != shape[0] * shape[1] {
            return Err(Error::ShapeMismatch {
                op: "masked_mean",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let (g, n, d) = (shape[0], shape[1], shape[2]);
        let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let inv_count: Vec<f64> = m
            .chunks_exact(n)
            .map(|row| {
                let c: f64 = row.iter().sum();
                if c > 0.0 {
                    1.0 / c
                } else {
                    0.0
                }
            })
            .collect();
        let src = self.data(x);
        let mut out = vec![0.0; g * d];
        for gi in 0..g {
            let dst = &mut out[gi * d..(gi + 1) * d];
            for ni in 0..n {
                if m[gi * n + ni] == 0.0 {
                    continue;
                }
                let row = &src[(gi * n + ni) * d..(gi * n + ni + 1) * d];
                for (o, v) in dst.iter_mut().zip(row) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv_count[gi]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![g, d], out)?,
            Op::MaskedMean {
                x,
                mask: m,
                inv_count,
                n,
                d,
            },
            rg,
            "masked_mean",
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                widths,
            },
            rg,
            "concat",
        )
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{} of axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let in_width = full * inner;
        let width = len * inner;
        let start = start * inner;
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&src[o * in_width + start..o * in_width + start + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice {
                x,
                outer,
                in_width,
                start,
                width,
            },
            rg,
            "slice",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    /// Output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, out) = permute_data(self.data(x), &shape, perm);
        let rg = self.rg(x);
        self.push(Tensor::new(out_shape, out)?, Op::Permute { x, perm: perm.to_vec() }, rg, "permute")
    }

    /// Repeats unit dims of `x` to reach `shape` (same rank).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let out_shape = broadcast_shape("broadcast_to", &sx, shape)?;
        if out_shape != shape {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: sx,
                rhs: shape.to_vec(),
            });
        }
        let src = self.data(x);
        let mut out = vec![0.0; shape.iter().product()];
        kernels::broadcast_for_each(shape, &sx, shape, |o, ia, _| out[o] = src[ia]);
        let rg = self.rg(x);
        self.push(Tensor::new(out_shape, out)?, Op::BroadcastTo(x), rg, "broadcast_to")
    }

    /// 2-D convolution (cross-correlation) of `x [B, C, H, W]` with `w [O, C, kh, kw]`,
    /// zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::invalid("convolution kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let mut cols = vec![0.0; ckk * ho * wo];
        let mut out = vec![0.0; b * o * ho * wo];
        let (dx, dw) = (self.data(x), self.data(w));
        for bi in 0..b {
            kernels::im2col(&dx[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, kh, kw, stride, pad, ho, wo, &mut cols);
            kernels::gemm(
                o,
                ckk,
                ho * wo,
                dw,
                Layout::row_major(ckk),
                &cols,
                Layout::row_major(ho * wo),
                &mut out[bi * o * ho * wo..(bi + 1) * o * ho * wo],
                false,
            );
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(vec![b, o, ho, wo], out)?, Op::Conv2d { x, w, stride, pad }, rg, "conv2d")
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid(format!("upsample2x expects rank 4, got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?,
            Op::Upsample2x(x),
            rg,
            "upsample2x",
        )
    }

    /// Bilinear lookups into `map [B, H, W, C]` with edge replication; returns `[Q, C]`.
    pub fn gather_bilinear(&mut self, map: Var, points: &[GatherPoint]) -> Result<Var> {
        let s = self.shape(map).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid(format!("gather expects a [B,H,W,C] map, got {s:?}")));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut taps = Vec::with_capacity(points.len());
        for p in points {
            if !p.valid {
                taps.push([(0, 0.0); 4]);
                continue;
            }
            if p.batch >= b || !p.u.is_finite() || !p.v.is_finite() {
                return Err(Error::invalid(format!("bad gather point {p:?} for map {s:?}")));
            }
            let base = p.batch * h * w;
            let mut t = geometry::bilinear_taps(p.u, p.v, w, h);
            t.iter_mut().for_each(|tap| tap.0 += base);
            taps.push(t);
        }
        let src = self.data(map);
        let mut out = vec![0.0; points.len() * c];
        for (q, t) in taps.iter().enumerate() {
            let dst = &mut out[q * c..(q + 1) * c];
            for &(idx, wgt) in t {
                if wgt == 0.0 {
                    continue;
                }
                for (o, v) in dst.iter_mut().zip(&src[idx * c..(idx + 1) * c]) {
                    *o += wgt * v;
                }
            }
        }
        let rg = self.rg(map);
        self.push(
            Tensor::new(vec![points.len(), c], out)?,
            Op::Gather { map, taps, channels: c },
            rg,
            "gather_bilinear",
        )
    }

    /// `y_i = sum_{j < i} x_j` along the last axis.
    pub fn cumsum_exclusive(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::invalid("cumsum of a scalar"))?;
        let mut out = vec![0.0; self.value(x).numel()];
        for (dst, row) in out.chunks_exact_mut(len).zip(self.data(x).chunks_exact(len)) {
            let mut acc = 0.0;
            for (o, v) in dst.iter_mut().zip(row) {
                *o = acc;
                acc += v;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out)?, Op::CumsumExclusive { x, len }, rg, "cumsum_exclusive")
    }

    /// Mean absolute difference; a scalar.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::ShapeMismatch {
                op: "l1_loss",
                lhs: self.shape(pred).to_vec(),
                rhs: self.shape(target).to_vec(),
            });
        }
        let n = self.value(pred).numel().max(1) as f64;
        let s: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(a, b)| (a - b).abs())
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push(Tensor::scalar(s / n), Op::L1Loss(pred, target), rg, "l1_loss")
    }

    // Composite helpers.

    /// `x @ w + b` with `b` of shape `[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let rank = self.shape(y).len();
        let n = self.shape(b).iter().product::<usize>();
        let mut bshape = vec![1; rank];
        bshape[rank - 1] = n;
        let b = self.reshape(b, &bshape)?;
        self.add(y, b)
    }

    /// Population variance over axis 1 of `x [G, N, D]`, masked like [`Tape::masked_mean`].
    pub fn masked_variance(&mut self, x: Var, mean: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let m = self.reshape(mean, &[s[0], 1, s[2]])?;
        let d = self.sub(x, m)?;
        let sq = self.mul(d, d)?;
        self.masked_mean(sq, mask)
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}
