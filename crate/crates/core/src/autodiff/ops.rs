//! Elementwise, shape, reduction and matrix primitives.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Broadcast rule: one shape must be a suffix of the other (leading batch
/// axes only).
fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.ends_with(b) {
        Some(a.to_vec())
    } else if b.ends_with(a) {
        Some(b.to_vec())
    } else {
        None
    }
}

/// Sums a gradient over the leading axes that were broadcast away.
fn reduce_to<S: Scalar>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![S::zero(); n];
    for (i, &v) in g.data().iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Splits a shape around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tape<S> {
    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        df: impl Fn(S, S, S) -> (S, S) + 'static,
    ) -> Result<Var> {
        let (value, sa, sb) = {
            let (va, vb) = (self.value(a), self.value(b));
            let shape = broadcast(va.shape(), vb.shape())
                .ok_or_else(|| Error::dim(op, va.shape(), vb.shape()))?;
            let (na, nb) = (va.numel(), vb.numel());
            let n: usize = shape.iter().product();
            let (da, db) = (va.data(), vb.data());
            let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
            (
                Tensor::from_parts(shape, data),
                va.shape().to_vec(),
                vb.shape().to_vec(),
            )
        };
        Ok(self.record(value, &[a, b], move |g, p, _, needs| {
            let (na, nb) = (p[0].numel(), p[1].numel());
            let mut ga = vec![S::zero(); g.numel()];
            let mut gb = vec![S::zero(); g.numel()];
            for (i, &gi) in g.data().iter().enumerate() {
                let (x, y) = df(p[0].data()[i % na], p[1].data()[i % nb], gi);
                ga[i] = x;
                gb[i] = y;
            }
            let ga = Tensor::from_parts(g.shape().to_vec(), ga);
            let gb = Tensor::from_parts(g.shape().to_vec(), gb);
            vec![
                needs[0].then(|| reduce_to(&ga, &sa)),
                needs[1].then(|| reduce_to(&gb, &sb)),
            ]
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    /// Sum of several same-shape values.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        let (first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::arg("add_n of an empty list"))?;
        rest.iter().try_fold(*first, |acc, &x| self.add(acc, x))
    }

    fn unary(&self, x: Var, f: impl Fn(S) -> S, df: impl Fn(S, S) -> S + 'static) -> Var {
        let value = self.value(x).map(f);
        self.record(value, &[x], move |g, p, y, _| {
            let data = g
                .data()
                .iter()
                .zip(p[0].data())
                .zip(y.data())
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn scale(&self, x: Var, c: S) -> Var {
        self.unary(x, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: Var, c: S) -> Var {
        self.unary(x, |v| v + c, |_, _| S::one())
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -S::one())
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), |x, _| S::one() / x)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| x + x)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (S::one() - y))
    }

    /// `x · sigmoid(x)`
    pub fn swish(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (S::one() - s)
            },
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > S::zero() { v } else { S::zero() },
            |x, _| if x > S::zero() { S::one() } else { S::zero() },
        )
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let orig = self.shape(x);
        Ok(self.record(value, &[x], move |g, _, _, _| {
            vec![Some(Tensor::from_parts(orig.clone(), g.data().to_vec()))]
        }))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &shape, perm));
        }
        let value = permute_tensor(&self.value(x), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.record(value, &[x], move |g, _, _, _| {
            vec![Some(permute_tensor(g, &inverse))]
        }))
    }

    /// Swaps two axes.
    pub fn transpose(&self, x: Var, a: usize, b: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if a >= rank || b >= rank {
            return Err(Error::dim("transpose", &self.shape(x), &[a, b]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(x, &perm)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&x| self.shape(x)).collect();
        let first = shapes.first().ok_or_else(|| Error::arg("concat of an empty list"))?;
        if axis >= first.len() {
            return Err(Error::dim("concat", first, &[axis]));
        }
        for s in &shapes[1..] {
            if s.len() != first.len()
                || s.iter().zip(first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", first, s));
            }
        }
        let (outer, _, inner) = axis_split(first, axis);
        let extents: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let values: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
            for o in 0..outer {
                for (v, &e) in values.iter().zip(&extents) {
                    data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
                }
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.record(value, xs, move |g, p, _, needs| {
            let mut offset = 0;
            let mut out = Vec::with_capacity(p.len());
            for (k, &e) in extents.iter().enumerate() {
                if needs[k] {
                    let mut d = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + e * inner]);
                    }
                    out.push(Some(Tensor::from_parts(p[k].shape().to_vec(), d)));
                } else {
                    out.push(None);
                }
                offset += e;
            }
            out
        }))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let data = {
            let v = self.value(x);
            let mut d = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * extent + start) * inner;
                d.extend_from_slice(&v.data()[s..s + len * inner]);
            }
            d
        };
        Ok(self.record(Tensor::from_parts(out_shape, data), &[x], move |g, _, _, _| {
            let mut d = vec![S::zero(); outer * extent * inner];
            for o in 0..outer {
                let s = (o * extent + start) * inner;
                d[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        }))
    }

    /// Zero padding along `axis`.
    pub fn pad(&self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::dim("pad", &shape, &[axis]));
        }
        if before == 0 && after == 0 {
            return Ok(x);
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let total = extent + before + after;
        let mut out_shape = shape.clone();
        out_shape[axis] = total;
        let data = {
            let v = self.value(x);
            let mut d = vec![S::zero(); outer * total * inner];
            for o in 0..outer {
                let s = (o * total + before) * inner;
                d[s..s + extent * inner].copy_from_slice(&v.data()[o * extent * inner..(o + 1) * extent * inner]);
            }
            d
        };
        Ok(self.record(Tensor::from_parts(out_shape, data), &[x], move |g, _, _, _| {
            let mut d = Vec::with_capacity(outer * extent * inner);
            for o in 0..outer {
                let s = (o * total + before) * inner;
                d.extend_from_slice(&g.data()[s..s + extent * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        }))
    }

    /// Replaces entries where `mask` is true with `value`. The mask is
    /// broadcast over leading axes (its length must divide the element
    /// count as a suffix extent).
    pub fn masked_fill(&self, x: Var, mask: &[bool], value: S) -> Result<Var> {
        let n = self.value(x).numel();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(Error::dim("masked_fill", &self.shape(x), &[mask.len()]));
        }
        let mask = mask.to_vec();
        let m = mask.len();
        let out = {
            let v = self.value(x);
            let data = v
                .data()
                .iter()
                .enumerate()
                .map(|(i, &xi)| if mask[i % m] { value } else { xi })
                .collect();
            Tensor::from_parts(v.shape().to_vec(), data)
        };
        Ok(self.record(out, &[x], move |g, _, _, _| {
            let data = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &gi)| if mask[i % m] { S::zero() } else { gi })
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        }))
    }

    pub fn sum(&self, x: Var) -> Var {
        let (value, shape) = {
            let v = self.value(x);
            (Tensor::scalar(v.sum()), v.shape().to_vec())
        };
        self.record(value, &[x], move |g, _, _, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, S::one() / S::from_usize_lossy(n))
    }

    /// Sum over one axis, removing it (rank-1 input yields shape `[1]`).
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::dim("sum_axis", &shape, &[axis]));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let data = {
            let v = self.value(x);
            let mut d = vec![S::zero(); outer * inner];
            for o in 0..outer {
                for e in 0..extent {
                    let src = &v.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                    for (acc, &s) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *acc += s;
                    }
                }
            }
            d
        };
        Ok(self.record(Tensor::from_parts(out_shape, data), &[x], move |g, _, _, _| {
            let mut d = Vec::with_capacity(outer * extent * inner);
            for o in 0..outer {
                for _ in 0..extent {
                    d.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        }))
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let extent = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, S::one() / S::from_usize_lossy(extent)))
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`. Batch axes follow
    /// the suffix broadcast rule.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = match broadcast(ba, bb) {
            Some(b) if k == k2 => b,
            _ => return Err(Error::dim("matmul", &sa, &sb)),
        };
        let nbatch: usize = batch.iter().product();
        let (na, nb) = (ba.iter().product::<usize>(), bb.iter().product::<usize>());
        let mut out = vec![S::zero(); nbatch * m * n];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for t in 0..nbatch {
                let ia = t % na;
                let ib = t % nb;
                gemm_nn(
                    m,
                    k,
                    n,
                    &va.data()[ia * m * k..(ia + 1) * m * k],
                    &vb.data()[ib * k * n..(ib + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(self.record(Tensor::from_parts(out_shape, out), &[a, b], move |g, p, _, needs| {
            let gd = g.data();
            let da = needs[0].then(|| {
                let mut d = vec![S::zero(); na * m * k];
                for t in 0..nbatch {
                    let ia = t % na;
                    let ib = t % nb;
                    gemm_nt(
                        m,
                        n,
                        k,
                        &gd[t * m * n..(t + 1) * m * n],
                        &p[1].data()[ib * k * n..(ib + 1) * k * n],
                        &mut d[ia * m * k..(ia + 1) * m * k],
                    );
                }
                Tensor::from_parts(sa.clone(), d)
            });
            let db = needs[1].then(|| {
                let mut d = vec![S::zero(); nb * k * n];
                for t in 0..nbatch {
                    let ia = t % na;
                    let ib = t % nb;
                    gemm_tn(
                        k,
                        m,
                        n,
                        &p[0].data()[ia * m * k..(ia + 1) * m * k],
                        &gd[t * m * n..(t + 1) * m * n],
                        &mut d[ib * k * n..(ib + 1) * k * n],
                    );
                }
                Tensor::from_parts(sb.clone(), d)
            });
            vec![da, db]
        }))
    }

    /// Affine map over the last axis: `x[.., in] · w[in, out] + b[out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let din = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != din {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let dout = sw[1];
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [dout] {
                return Err(Error::dim("linear.bias", &sw, &sb));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![S::zero(); rows * dout];
        {
            let (vx, vw) = (self.value(x), self.value(w));
            if let Some(b) = b {
                let vb = self.value(b);
                for r in 0..rows {
                    out[r * dout..(r + 1) * dout].copy_from_slice(vb.data());
                }
            }
            gemm_nn(rows, din, dout, vx.data(), vw.data(), &mut out);
        }
        let mut out_shape = sx.clone();
        *out_shape.last_mut().unwrap() = dout;
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        Ok(self.record(Tensor::from_parts(out_shape, out), &parents, move |g, p, _, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut d = vec![S::zero(); rows * din];
                gemm_nt(rows, dout, din, gd, p[1].data(), &mut d);
                Tensor::from_parts(sx.clone(), d)
            });
            let dw = needs[1].then(|| {
                let mut d = vec![S::zero(); din * dout];
                gemm_tn(din, rows, dout, p[0].data(), gd, &mut d);
                Tensor::from_parts(sw.clone(), d)
            });
            let mut res = vec![dx, dw];
            if p.len() == 3 {
                res.push(needs[2].then(|| {
                    let mut d = vec![S::zero(); dout];
                    for r in 0..rows {
                        for (acc, &v) in d.iter_mut().zip(&gd[r * dout..(r + 1) * dout]) {
                            *acc += v;
                        }
                    }
                    Tensor::from_parts(vec![dout], d)
                }));
            }
            res
        }))
    }
}

pub(crate) fn permute_tensor<S: Scalar>(t: &Tensor<S>, perm: &[usize]) -> Tensor<S> {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let src = t.data();
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}
