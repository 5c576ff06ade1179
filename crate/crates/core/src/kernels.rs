//! Slice-level numeric kernels: matrix products and the im2col/col2im pair
//! behind 3D convolution.
//!
//! All kernels accumulate into their output (`c += ...`). Every output
//! element is reduced in a fixed order, so results are bit-reproducible.

use crate::tensor::Element;

const COL_TILE: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<F: Element>(m: usize, n: usize, k: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_TILE).min(n);
        for i in 0..m {
            let crow = &mut c[i * n + j0..i * n + j1];
            let arow = &a[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
        j0 = j1;
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<F: Element>(m: usize, n: usize, k: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<F: Element>(m: usize, n: usize, k: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        let acol = &a[p * m..(p + 1) * m];
        for (i, &av) in acol.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums.
pub fn dot<F: Element>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Geometry of one 3D convolution, fully resolved against an input shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels_per_group: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels_per_group * self.kernel.iter().product::<usize>()
    }

    pub fn plane(&self) -> usize {
        self.out_dims[1] * self.out_dims[2]
    }

    /// Unfold the input patches feeding output frame `t_out` into
    /// `col[col_rows × plane]`. `input` holds `channels_per_group` channels of
    /// one sample, laid out `[c][t][h][w]`.
    pub fn im2col<F: Element>(&self, input: &[F], t_out: usize, col: &mut [F]) {
        let [_, ih, iw] = self.in_dims;
        let [it, _, _] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let plane = oh * ow;
        let mut row = 0;
        for c in 0..self.channels_per_group {
            let cbase = c * it * ih * iw;
            for a in 0..kt {
                let ti = (t_out * st + a) as isize - pt as isize;
                for b in 0..kh {
                    for d in 0..kw {
                        let dst = &mut col[row * plane..(row + 1) * plane];
                        row += 1;
                        if ti < 0 || ti >= it as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let tbase = cbase + ti as usize * ih * iw;
                        for y in 0..oh {
                            let yi = (y * sh + b) as isize - ph as isize;
                            let drow = &mut dst[y * ow..(y + 1) * ow];
                            if yi < 0 || yi >= ih as isize {
                                drow.fill(F::zero());
                                continue;
                            }
                            let src = &input[tbase + yi as usize * iw..tbase + (yi as usize + 1) * iw];
                            for (x, v) in drow.iter_mut().enumerate() {
                                let xi = (x * sw + d) as isize - pw as isize;
                                *v = if xi < 0 || xi >= iw as isize {
                                    F::zero()
                                } else {
                                    src[xi as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatter-add `col` back into `grad_input`.
    pub fn col2im<F: Element>(&self, col: &[F], t_out: usize, grad_input: &mut [F]) {
        let [it, ih, iw] = self.in_dims;
        let [_, oh, ow] = self.out_dims;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.padding;
        let plane = oh * ow;
        let mut row = 0;
        for c in 0..self.channels_per_group {
            let cbase = c * it * ih * iw;
            for a in 0..kt {
                let ti = (t_out * st + a) as isize - pt as isize;
                for b in 0..kh {
                    for d in 0..kw {
                        let src = &col[row * plane..(row + 1) * plane];
                        row += 1;
                        if ti < 0 || ti >= it as isize {
                            continue;
                        }
                        let tbase = cbase + ti as usize * ih * iw;
                        for y in 0..oh {
                            let yi = (y * sh + b) as isize - ph as isize;
                            if yi < 0 || yi >= ih as isize {
                                continue;
                            }
                            let dst = &mut grad_input
                                [tbase + yi as usize * iw..tbase + (yi as usize + 1) * iw];
                            for (x, &v) in src[y * ow..(y + 1) * ow].iter().enumerate() {
                                let xi = (x * sw + d) as isize - pw as isize;
                                if xi >= 0 && xi < iw as isize {
                                    dst[xi as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn seq(len: usize, seed: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64 + seed) * 0.37).sin()).collect()
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, n, k) = (5, 300, 7);
        let a = seq(m * k, 1.0);
        let b = seq(k * n, 2.0);
        let want = naive_nn(m, n, k, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, n, k, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nt(m, n, k, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_tn(m, n, k, &at, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..13).map(|i| i as f64).collect();
        let b = vec![1.0; 13];
        assert_eq!(dot(&a, &b), 78.0);
    }
}
