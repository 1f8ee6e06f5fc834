//! Dense kernels on flat row-major slices.

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// Output extent of a padded, strided window.
pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Geometry of an N-d convolution over spatial axes (up to 3).
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        let output = [0, 1, 2].map(|d| conv_out_len(input[d], kernel[d], stride[d], pad[d]));
        Self {
            cin,
            input,
            kernel,
            stride,
            pad,
            output,
        }
    }

    pub fn patch(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    /// Visits `(row, col, input_offset)` for every in-bounds patch element.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let npos = self.positions();
        for c in 0..self.cin {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = ((c * kd + a) * kh + b) * kw + e;
                        for z in 0..od {
                            let zi = (z * self.stride[0] + a) as isize - self.pad[0] as isize;
                            if zi < 0 || zi >= id as isize {
                                continue;
                            }
                            for y in 0..oh {
                                let yi = (y * self.stride[1] + b) as isize - self.pad[1] as isize;
                                if yi < 0 || yi >= ih as isize {
                                    continue;
                                }
                                let base = ((c * id + zi as usize) * ih + yi as usize) * iw;
                                let colbase = (z * oh + y) * ow;
                                for x in 0..ow {
                                    let xi = (x * self.stride[2] + e) as isize - self.pad[2] as isize;
                                    if xi < 0 || xi >= iw as isize {
                                        continue;
                                    }
                                    f(row * npos, colbase + x, base + xi as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfolds `input[cin, d, h, w]` into `cols[patch, positions]`.
    pub fn im2col<S: Scalar>(&self, input: &[S]) -> Vec<S> {
        let mut cols = vec![S::zero(); self.patch() * self.positions()];
        self.for_each(|rowoff, col, off| cols[rowoff + col] = input[off]);
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds columns back.
    pub fn col2im<S: Scalar>(&self, cols: &[S], out: &mut [S]) {
        self.for_each(|rowoff, col, off| out[off] += cols[rowoff + col]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);

        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c2);

        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let mut c3 = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c3);
        for i in 0..m * n {
            assert!((c[i] - c2[i]).abs() < 1e-12);
            assert!((c[i] - c3[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn out_len_same_padding() {
        for len in 1..40 {
            assert_eq!(conv_out_len(len, 3, 2, 1), (len - 1) / 2 + 1);
            assert_eq!(conv_out_len(len, 15, 1, 7), len);
        }
    }
}
