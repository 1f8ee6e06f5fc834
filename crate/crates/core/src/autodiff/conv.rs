//! Convolution primitives.

use super::kernels::{conv_out_len, gemm_nn, gemm_nt, gemm_tn, ConvGeom};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<S: Scalar> Tape<S> {
    /// Depthwise 1-D convolution over time of `x[T, C]` with `w[C, k]`,
    /// `b[C]`, odd kernel and "same" padding `(k-1)/2`. Output length is
    /// `floor((T-1)/stride) + 1`.
    pub fn conv1d_depthwise(&self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sw[0] != sx[1] || sb != [sx[1]] || sw[1] % 2 == 0 || stride == 0 {
            return Err(Error::dim("conv1d_depthwise", &sx, &sw));
        }
        let (t, c, k) = (sx[0], sx[1], sw[1]);
        let pad = (k - 1) / 2;
        let to = conv_out_len(t, k, stride, pad);
        let value = {
            let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
            let (xd, wd) = (vx.data(), vw.data());
            let mut out = Vec::with_capacity(to * c);
            for _ in 0..to {
                out.extend_from_slice(vb.data());
            }
            for o in 0..to {
                for j in 0..k {
                    let src = (o * stride + j) as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = &xd[src as usize * c..(src as usize + 1) * c];
                    let orow = &mut out[o * c..(o + 1) * c];
                    for ch in 0..c {
                        orow[ch] += wd[ch * k + j] * xrow[ch];
                    }
                }
            }
            Tensor::from_parts(vec![to, c], out)
        };
        Ok(self.record(value, &[x, w, b], move |g, p, _, needs| {
            let (xd, wd, gd) = (p[0].data(), p[1].data(), g.data());
            let mut dx = vec![S::zero(); t * c];
            let mut dw = vec![S::zero(); c * k];
            let mut db = vec![S::zero(); c];
            for o in 0..to {
                let grow = &gd[o * c..(o + 1) * c];
                for ch in 0..c {
                    db[ch] += grow[ch];
                }
                for j in 0..k {
                    let src = (o * stride + j) as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let s = src as usize;
                    for ch in 0..c {
                        dx[s * c + ch] += grow[ch] * wd[ch * k + j];
                        dw[ch * k + j] += grow[ch] * xd[s * c + ch];
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::from_parts(vec![t, c], dx)),
                needs[1].then(|| Tensor::from_parts(vec![c, k], dw)),
                needs[2].then(|| Tensor::from_parts(vec![c], db)),
            ]
        }))
    }

    /// 2-D convolution of `x[N, Cin, H, W]` with `w[Cout, Cin, kh, kw]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: [usize; 2], pad: [usize; 2]) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let geom = ConvGeom::new(
            sx[1],
            [1, sx[2], sx[3]],
            [1, sw[2], sw[3]],
            [1, stride[0], stride[1]],
            [0, pad[0], pad[1]],
        );
        let [_, oh, ow] = geom.output;
        self.conv_nd("conv2d", x, w, b, sx[0], geom, vec![sx[0], sw[0], oh, ow])
    }

    /// 3-D convolution of `x[Cin, D, H, W]` with `w[Cout, Cin, kd, kh, kw]`.
    pub fn conv3d(&self, x: Var, w: Var, b: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] {
            return Err(Error::dim("conv3d", &sx, &sw));
        }
        let geom = ConvGeom::new(sx[0], [sx[1], sx[2], sx[3]], [sw[2], sw[3], sw[4]], stride, pad);
        let [od, oh, ow] = geom.output;
        self.conv_nd("conv3d", x, w, b, 1, geom, vec![sw[0], od, oh, ow])
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_nd(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        geom: ConvGeom,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let cout = sw[0];
        if sb != [cout] || geom.kernel.iter().zip(&geom.input).zip(&geom.pad).any(|((&k, &i), &p)| k > i + 2 * p) {
            return Err(Error::dim(op, &sx, &sw));
        }
        let (patch, npos, in_len) = (geom.patch(), geom.positions(), geom.input_len());
        let value = {
            let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
            let mut out = vec![S::zero(); batch * cout * npos];
            for n in 0..batch {
                let cols = geom.im2col(&vx.data()[n * in_len..(n + 1) * in_len]);
                let o = &mut out[n * cout * npos..(n + 1) * cout * npos];
                for (co, &bv) in vb.data().iter().enumerate() {
                    o[co * npos..(co + 1) * npos].fill(bv);
                }
                gemm_nn(cout, patch, npos, vw.data(), &cols, o);
            }
            Tensor::from_parts(out_shape, out)
        };
        Ok(self.record(value, &[x, w, b], move |g, p, _, needs| {
            let (xd, wd, gd) = (p[0].data(), p[1].data(), g.data());
            let mut dx = needs[0].then(|| vec![S::zero(); batch * in_len]);
            let mut dw = vec![S::zero(); cout * patch];
            let mut db = vec![S::zero(); cout];
            for n in 0..batch {
                let gn = &gd[n * cout * npos..(n + 1) * cout * npos];
                for co in 0..cout {
                    db[co] += gn[co * npos..(co + 1) * npos].iter().copied().sum::<S>();
                }
                if needs[1] {
                    let cols = geom.im2col(&xd[n * in_len..(n + 1) * in_len]);
                    gemm_nt(cout, npos, patch, gn, &cols, &mut dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let mut dcols = vec![S::zero(); patch * npos];
                    gemm_tn(patch, cout, npos, wd, gn, &mut dcols);
                    geom.col2im(&dcols, &mut dx[n * in_len..(n + 1) * in_len]);
                }
            }
            vec![
                dx.map(|d| Tensor::from_parts(sx.clone(), d)),
                needs[1].then(|| Tensor::from_parts(sw.clone(), dw)),
                needs[2].then(|| Tensor::from_parts(vec![cout], db)),
            ]
        }))
    }
}
