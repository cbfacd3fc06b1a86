//! Lowering of convolutions to GEMM.

use super::Scalar;

/// Geometry of a 2-D convolution window over one input plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one `C x H x W` image into columns of a `(C*k*k) x ld` matrix,
/// starting at column `col0`.
pub(crate) fn im2col<T: Scalar>(src: &[T], g: Window, dst: &mut [T], ld: usize, col0: usize) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.h as isize, g.w as isize);
    for c in 0..g.channels {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out = &mut dst[row * ld + col0..row * ld + col0 + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let shift = kx as isize - g.pad as isize;
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + shift;
                            *v = if ix < 0 || ix >= w {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix < 0 || ix >= w {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `C x H x W` image.
pub(crate) fn col2im<T: Scalar>(src: &[T], ld: usize, col0: usize, g: Window, dst: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.h as isize, g.w as isize);
    for c in 0..g.channels {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let cols = &src[row * ld + col0..row * ld + col0 + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &cols[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Copies samples `[n0, n0+count)` of an NCHW buffer (per-sample `c x p`) into a
/// `c x (count*p)` matrix.
pub(crate) fn gather<T: Scalar>(src: &[T], c: usize, p: usize, n0: usize, count: usize) -> Vec<T> {
    let ld = count * p;
    let mut out = vec![T::zero(); c * ld];
    for i in 0..count {
        let s = &src[(n0 + i) * c * p..(n0 + i + 1) * c * p];
        for ch in 0..c {
            out[ch * ld + i * p..ch * ld + (i + 1) * p].copy_from_slice(&s[ch * p..(ch + 1) * p]);
        }
    }
    out
}

/// Inverse of [`gather`].
pub(crate) fn scatter<T: Scalar>(src: &[T], c: usize, p: usize, n0: usize, count: usize, dst: &mut [T]) {
    let ld = count * p;
    for i in 0..count {
        let d = &mut dst[(n0 + i) * c * p..(n0 + i + 1) * c * p];
        for ch in 0..c {
            d[ch * p..(ch + 1) * p].copy_from_slice(&src[ch * ld + i * p..ch * ld + (i + 1) * p]);
        }
    }
}

/// Upper bound on scratch-matrix elements per GEMM chunk.
const CHUNK_ELEMS: usize = 1 << 24;

/// Splits a batch of `n` samples into chunks whose unfolded matrices stay
/// under the scratch budget. Always yields at least one sample per chunk.
pub(crate) fn chunks(n: usize, elems_per_sample: usize) -> impl Iterator<Item = (usize, usize)> {
    let per = (CHUNK_ELEMS / elems_per_sample.max(1)).clamp(1, n.max(1));
    (0..n).step_by(per).map(move |s| (s, per.min(n - s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let g = Window {
            channels: 2,
            h: 5,
            w: 4,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..g.channels * g.h * g.w).map(|i| (i as f64 * 0.37).sin()).collect();
        let ld = g.out_len();
        let y: Vec<f64> = (0..g.rows() * ld).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; g.rows() * ld];
        im2col(&x, g, &mut cols, ld, 0);
        let mut back = vec![0.0; x.len()];
        col2im(&y, ld, 0, g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_inverse() {
        let src: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32).collect();
        let g = gather(&src, 3, 4, 0, 2);
        assert_eq!(g[4], 12.0);
        let mut dst = vec![0.0f32; src.len()];
        scatter(&g, 3, 4, 0, 2, &mut dst);
        assert_eq!(src, dst);
    }

    #[test]
    fn chunk_cover() {
        let c: Vec<_> = chunks(5, CHUNK_ELEMS / 2).collect();
        assert_eq!(c, vec![(0, 2), (2, 2), (4, 1)]);
    }
}
