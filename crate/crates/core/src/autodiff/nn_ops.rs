//! Normalization, activation and attention primitives with fused VJPs.

use rand::Rng;

use super::ops::axis_split;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Tape<S> {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let value = {
            let v = self.value(x);
            let mut y = vec![S::zero(); v.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| v.data()[at(k)]).fold(S::neg_infinity(), S::max);
                    let mut z = S::zero();
                    for k in 0..n {
                        let e = (v.data()[at(k)] - m).exp();
                        y[at(k)] = e;
                        z += e;
                    }
                    for k in 0..n {
                        y[at(k)] /= z;
                    }
                }
            }
            Tensor::from_parts(shape.clone(), y)
        };
        Ok(self.record(value, &[x], move |g, _, y, _| {
            let mut dx = vec![S::zero(); g.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: S = (0..n).map(|k| g.data()[at(k)] * y.data()[at(k)]).sum();
                    for k in 0..n {
                        dx[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        }))
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::dim("log_softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let value = {
            let v = self.value(x);
            let mut y = vec![S::zero(); v.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| v.data()[at(k)]).fold(S::neg_infinity(), S::max);
                    let lse = m + (0..n).map(|k| (v.data()[at(k)] - m).exp()).sum::<S>().ln();
                    for k in 0..n {
                        y[at(k)] = v.data()[at(k)] - lse;
                    }
                }
            }
            Tensor::from_parts(shape.clone(), y)
        };
        Ok(self.record(value, &[x], move |g, _, y, _| {
            let mut dx = vec![S::zero(); g.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let gs: S = (0..n).map(|k| g.data()[at(k)]).sum();
                    for k in 0..n {
                        dx[at(k)] = g.data()[at(k)] - y.data()[at(k)].exp() * gs;
                    }
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        }))
    }

    /// Softmax over the last axis where `keep[j] == false` removes column
    /// `j` from every row. Removed entries are exactly zero; a row with no
    /// kept column is all zeros.
    pub fn masked_softmax(&self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.last().unwrap_or(&0);
        if keep.len() != n {
            return Err(Error::dim("masked_softmax", &shape, &[keep.len()]));
        }
        let keep = keep.to_vec();
        let value = {
            let v = self.value(x);
            let mut y = vec![S::zero(); v.numel()];
            for (row, out) in v.data().chunks(n).zip(y.chunks_mut(n)) {
                let m = row
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &k)| k)
                    .fold(S::neg_infinity(), |m, (&x, _)| m.max(x));
                if m == S::neg_infinity() {
                    continue;
                }
                let mut z = S::zero();
                for ((o, &xv), &k) in out.iter_mut().zip(row).zip(&keep) {
                    if k {
                        *o = (xv - m).exp();
                        z += *o;
                    }
                }
                for o in out.iter_mut() {
                    *o /= z;
                }
            }
            Tensor::from_parts(shape, y)
        };
        Ok(self.record(value, &[x], move |g, _, y, _| {
            let mut dx = vec![S::zero(); g.numel()];
            for ((gr, yr), dr) in g.data().chunks(n).zip(y.data().chunks(n)).zip(dx.chunks_mut(n)) {
                let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        }))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x);
        let d = *shape.last().unwrap_or(&0);
        let (sg, sb) = (self.shape(gain), self.shape(bias));
        if sg != [d] || sb != [d] {
            return Err(Error::dim("layer_norm", &shape, &sg));
        }
        if eps <= S::zero() {
            return Err(Error::arg("layer_norm eps must be positive"));
        }
        let dn = S::from_usize_lossy(d);
        let value = {
            let (v, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
            let mut y = vec![S::zero(); v.numel()];
            for (row, out) in v.data().chunks(d).zip(y.chunks_mut(d)) {
                let mean = row.iter().copied().sum::<S>() / dn;
                let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<S>() / dn;
                let rstd = S::one() / (var + eps).sqrt();
                for (k, o) in out.iter_mut().enumerate() {
                    *o = (row[k] - mean) * rstd * vg.data()[k] + vb.data()[k];
                }
            }
            Tensor::from_parts(shape, y)
        };
        Ok(self.record(value, &[x, gain, bias], move |g, p, _, needs| {
            let (xv, gv) = (p[0], p[1]);
            let mut dx = vec![S::zero(); g.numel()];
            let mut dg = vec![S::zero(); d];
            let mut db = vec![S::zero(); d];
            let mut xhat = vec![S::zero(); d];
            let mut dxhat = vec![S::zero(); d];
            for ((row, grow), dxrow) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(dx.chunks_mut(d)) {
                let mean = row.iter().copied().sum::<S>() / dn;
                let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<S>() / dn;
                let rstd = S::one() / (var + eps).sqrt();
                for k in 0..d {
                    xhat[k] = (row[k] - mean) * rstd;
                    dxhat[k] = grow[k] * gv.data()[k];
                    dg[k] += grow[k] * xhat[k];
                    db[k] += grow[k];
                }
                let m1 = dxhat.iter().copied().sum::<S>() / dn;
                let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<S>() / dn;
                for k in 0..d {
                    dxrow[k] = rstd * (dxhat[k] - m1 - xhat[k] * m2);
                }
            }
            vec![
                needs[0].then(|| Tensor::from_parts(g.shape().to_vec(), dx)),
                needs[1].then(|| Tensor::from_parts(vec![d], dg)),
                needs[2].then(|| Tensor::from_parts(vec![d], db)),
            ]
        }))
    }

    /// Gated linear unit over the last axis: `[a; b] -> a ⊙ sigmoid(b)`.
    pub fn glu(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let d = *shape.last().unwrap_or(&0);
        if d % 2 != 0 {
            return Err(Error::dim("glu", &shape, &[2]));
        }
        let h = d / 2;
        let sig = |v: S| S::one() / (S::one() + (-v).exp());
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = h;
        let value = {
            let v = self.value(x);
            let data = v
                .data()
                .chunks(d)
                .flat_map(|row| (0..h).map(move |k| row[k] * sig(row[h + k])))
                .collect();
            Tensor::from_parts(out_shape, data)
        };
        Ok(self.record(value, &[x], move |g, p, _, _| {
            let mut dx = vec![S::zero(); p[0].numel()];
            for ((row, grow), drow) in p[0].data().chunks(d).zip(g.data().chunks(h)).zip(dx.chunks_mut(d)) {
                for k in 0..h {
                    let s = sig(row[h + k]);
                    drow[k] = grow[k] * s;
                    drow[h + k] = grow[k] * row[k] * s * (S::one() - s);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }

    /// Inverted dropout: active only on training tapes.
    pub fn dropout(&self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::arg(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.is_training() || rate == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let scale = S::lit(1.0 / (1.0 - rate));
        let mask: Vec<S> = {
            let mut rng = self.rng();
            (0..n)
                .map(|_| if rng.random::<f64>() >= rate { scale } else { S::zero() })
                .collect()
        };
        let value = {
            let v = self.value(x);
            let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            Tensor::from_parts(v.shape().to_vec(), data)
        };
        Ok(self.record(value, &[x], move |g, _, _, _| {
            let data = g.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        }))
    }

    /// Converts relative-position scores `[.., T, 2T-1]` (relative distance
    /// ordered from `T-1` down to `-(T-1)`) into absolute `[.., T, T]`
    /// scores: `out[i, j] = x[i, T-1-i+j]`.
    pub fn rel_shift(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let r = shape.len();
        if r < 2 || shape[r - 1] != 2 * shape[r - 2] - 1 {
            return Err(Error::dim("rel_shift", &shape, &[]));
        }
        let t = shape[r - 2];
        let w = 2 * t - 1;
        let batch: usize = shape[..r - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape[r - 1] = t;
        let value = {
            let v = self.value(x);
            let mut d = Vec::with_capacity(batch * t * t);
            for b in 0..batch {
                for i in 0..t {
                    let row = &v.data()[(b * t + i) * w..(b * t + i + 1) * w];
                    d.extend_from_slice(&row[t - 1 - i..t - 1 - i + t]);
                }
            }
            Tensor::from_parts(out_shape, d)
        };
        Ok(self.record(value, &[x], move |g, _, _, _| {
            let mut d = vec![S::zero(); batch * t * w];
            for b in 0..batch {
                for i in 0..t {
                    let dst = &mut d[(b * t + i) * w + t - 1 - i..(b * t + i) * w + 2 * t - 1 - i];
                    dst.copy_from_slice(&g.data()[(b * t + i) * t..(b * t + i + 1) * t]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        }))
    }

    /// Average pooling along axis 0 of `[T, C]` with window = stride.
    /// A trailing partial window averages the rows it covers.
    pub fn avg_pool_rows(&self, x: Var, window: usize) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || window == 0 {
            return Err(Error::dim("avg_pool_rows", &shape, &[window]));
        }
        let (t, c) = (shape[0], shape[1]);
        let to = (t - 1) / window + 1;
        let count = move |o: usize| (((o + 1) * window).min(t) - o * window) as f64;
        let value = {
            let v = self.value(x);
            let mut d = vec![S::zero(); to * c];
            for r in 0..t {
                let o = r / window;
                for k in 0..c {
                    d[o * c + k] += v.data()[r * c + k];
                }
            }
            for o in 0..to {
                let inv = S::lit(1.0 / count(o));
                for k in 0..c {
                    d[o * c + k] *= inv;
                }
            }
            Tensor::from_parts(vec![to, c], d)
        };
        Ok(self.record(value, &[x], move |g, _, _, _| {
            let mut d = vec![S::zero(); t * c];
            for r in 0..t {
                let o = r / window;
                let inv = S::lit(1.0 / count(o));
                for k in 0..c {
                    d[r * c + k] = g.data()[o * c + k] * inv;
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        }))
    }
}
