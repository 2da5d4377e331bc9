//! Dense loops shared by the graph primitives. All kernels are sequential and
//! accumulate in a fixed order, so results are bitwise reproducible.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`, row-major.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut c, m, k, n);
    c
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let hp = self.h + 2 * self.pad;
        let wp = self.w + 2 * self.pad;
        if hp < self.k || wp < self.k || self.stride == 0 {
            return None;
        }
        Some(((hp - self.k) / self.stride + 1, (wp - self.k) / self.stride + 1))
    }

    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Unfolds `x[n,c,h,w]` into rows `[n·oh·ow, c·k·k]`.
pub fn im2col<T: Scalar>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw().expect("valid geometry");
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.n * oh * ow * patch];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * patch;
                for c in 0..g.c {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[row + (c * g.k + ky) * g.k + kx] =
                                plane[iy as usize * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back into `[n,c,h,w]`.
pub fn col2im<T: Scalar>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw().expect("valid geometry");
    let patch = g.patch();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((n * oh + oy) * ow + ox) * patch;
                for c in 0..g.c {
                    let base = (n * g.c + c) * g.h * g.w;
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            x[base + iy as usize * g.w + ix as usize] +=
                                cols[row + (c * g.k + ky) * g.k + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
