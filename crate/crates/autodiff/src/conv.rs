//! im2col / col2im helpers shared by the convolution kernels.

use crate::scalar::Scalar;

/// Geometry of one 2-D convolution, seen from the "dense" side.
///
/// For a forward convolution the dense side is the input; for a transposed
/// convolution it is the output. `out_h`/`out_w` are always the sizes of the
/// strided (smaller) side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn src(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        (y >= 0 && (y as usize) < self.in_h).then_some(y as usize)
    }

    /// Half-open range of output columns whose source column for kernel
    /// offset `kx` lies inside the image.
    #[inline]
    fn valid_x(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if self.in_w + p > kx {
            ((self.in_w + p - kx - 1) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Output size of a strided convolution, `None` when non-positive.
pub(crate) fn conv_out(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Unfolds one `channels x in_h x in_w` image into a `(C*k*k) x (out_h*out_w)` matrix.
pub(crate) fn im2col<T: Scalar>(g: &Geom, image: &[T], cols: &mut [T]) {
    let ncols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_x(kx);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src(oy, ky) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(y) => {
                            let src_row = &plane[y * g.in_w..(y + 1) * g.in_w];
                            line[..lo].iter_mut().for_each(|v| *v = T::zero());
                            line[hi..].iter_mut().for_each(|v| *v = T::zero());
                            // first valid source column
                            let x0 = lo * g.stride + kx - g.padding;
                            if g.stride == 1 {
                                line[lo..hi].copy_from_slice(&src_row[x0..x0 + hi - lo]);
                            } else {
                                for (i, v) in line[lo..hi].iter_mut().enumerate() {
                                    *v = src_row[x0 + i * g.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix back into an image.
pub(crate) fn col2im<T: Scalar>(g: &Geom, cols: &[T], image: &mut [T]) {
    let ncols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_x(kx);
                for oy in 0..g.out_h {
                    let Some(y) = g.src(oy, ky) else { continue };
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst_row = &mut plane[y * g.in_w..(y + 1) * g.in_w];
                    if lo == hi {
                        continue;
                    }
                    let x0 = lo * g.stride + kx - g.padding;
                    for (i, &v) in line[lo..hi].iter().enumerate() {
                        let x = x0 + i * g.stride;
                        dst_row[x] = dst_row[x] + v;
                    }
                }
            }
        }
    }
}
