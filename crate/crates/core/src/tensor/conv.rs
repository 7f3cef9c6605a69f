//! Slice-level kernels for convolution and circular padding.

use super::{gemm, Scalar};

/// Output length of a strided, zero-padded window: `floor((len + 2 pad - k) / stride) + 1`.
pub fn conv_output_size(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = pad.checked_mul(2)?.checked_add(len)?;
    (stride > 0 && kernel > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    /// Rows of the unfolded patch matrix.
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Output positions per sample.
    pub fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample `[c_in, h, w]` into `cols[patch, positions]`.
    pub fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    for oh in 0..self.ho {
                        let ih = (oh * self.sh + i) as isize - self.ph as isize;
                        let dst = &mut cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + ih as usize) * self.w..][..self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.sw + j) as isize - self.pw as isize;
                            *d = if iw < 0 || iw >= self.w as isize { T::zero() } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters `cols` back, accumulating into `dx`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    for oh in 0..self.ho {
                        let ih = (oh * self.sh + i) as isize - self.ph as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + ih as usize) * self.w..][..self.w];
                        let src = &cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        for (ow, &v) in src.iter().enumerate() {
                            let iw = (ow * self.sw + j) as isize - self.pw as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] = dst[iw as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `y[c_out, positions] = weight[c_out, patch] * cols + bias`.
    pub fn forward_sample<T: Scalar>(&self, weight: &[T], bias: Option<&[T]>, cols: &[T], y: &mut [T]) {
        let (k, p) = (self.patch(), self.positions());
        gemm(self.c_out, k, p, (weight, k, 1), (cols, p, 1), T::zero(), (y, p, 1));
        if let Some(b) = bias {
            for (row, &bv) in y.chunks_exact_mut(p).zip(b) {
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }

    /// `dweight += dy * cols^T`.
    pub fn weight_grad<T: Scalar>(&self, dy: &[T], cols: &[T], dweight: &mut [T]) {
        let (k, p) = (self.patch(), self.positions());
        gemm(self.c_out, p, k, (dy, p, 1), (cols, 1, p), T::one(), (dweight, k, 1));
    }

    /// `dcols = weight^T * dy`.
    pub fn cols_grad<T: Scalar>(&self, weight: &[T], dy: &[T], dcols: &mut [T]) {
        let (k, p) = (self.patch(), self.positions());
        gemm(k, self.c_out, p, (weight, 1, k), (dy, p, 1), T::zero(), (dcols, p, 1));
    }
}

/// Copies `[rows, w]` planes into `[rows, w + 2 pad]` with wrapped edge columns.
pub(crate) fn circular_pad_rows<T: Copy>(x: &[T], w: usize, pad: usize, out: &mut [T]) {
    let wo = w + 2 * pad;
    for (src, dst) in x.chunks_exact(w).zip(out.chunks_exact_mut(wo)) {
        dst[..pad].copy_from_slice(&src[w - pad..]);
        dst[pad..pad + w].copy_from_slice(src);
        dst[pad + w..].copy_from_slice(&src[..pad]);
    }
}

/// Adjoint of [`circular_pad_rows`]: folds the pad columns back onto their sources.
pub(crate) fn circular_unpad_rows<T: Scalar>(dy: &[T], w: usize, pad: usize, dx: &mut [T]) {
    let wo = w + 2 * pad;
    for (src, dst) in dy.chunks_exact(wo).zip(dx.chunks_exact_mut(w)) {
        for (j, &g) in src.iter().enumerate() {
            let col = (j + w - pad % w) % w;
            dst[col] = dst[col] + g;
        }
    }
}
