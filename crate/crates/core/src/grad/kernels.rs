//! Numeric kernels behind the tape primitives.

use std::f64::consts::PI;

use super::scalar::gemm;
use super::{GradError, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub ch_in: usize,
    pub len_in: usize,
    pub ch_out: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub len_out: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        ch_in: usize,
        len_in: usize,
        ch_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self, GradError> {
        if k == 0 || stride == 0 || dilation == 0 {
            return Err(GradError::Shape(
                "conv1d kernel size, stride and dilation must be positive".into(),
            ));
        }
        let span = (k - 1) * dilation + 1;
        let padded = len_in + 2 * padding;
        if padded < span {
            return Err(GradError::Shape(format!(
                "conv1d input of length {len_in} (+{padding} padding) shorter than kernel span {span}"
            )));
        }
        Ok(Self {
            batch,
            ch_in,
            len_in,
            ch_out,
            k,
            stride,
            dilation,
            padding,
            len_out: (padded - span) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.ch_in * self.k
    }

    /// Output positions `t` whose input index `t·stride + off` lies inside
    /// the signal.
    fn valid_range(&self, off: isize) -> (usize, usize) {
        let s = self.stride as isize;
        let l = self.len_in as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = if l - off <= 0 { 0 } else { ((l - off) + s - 1) / s };
        let lo = (lo as usize).min(self.len_out);
        let hi = (hi as usize).clamp(lo, self.len_out);
        (lo, hi)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let lout = g.len_out;
    for c in 0..g.ch_in {
        let src = &x[c * g.len_in..(c + 1) * g.len_in];
        for j in 0..g.k {
            let row = &mut col[(c * g.k + j) * lout..][..lout];
            let off = (j * g.dilation) as isize - g.padding as isize;
            let (lo, hi) = g.valid_range(off);
            row[..lo].fill(T::zero());
            row[hi..].fill(T::zero());
            if hi == lo {
                continue;
            }
            if g.stride == 1 {
                let start = (lo as isize + off) as usize;
                row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
            } else {
                for (t, slot) in row.iter_mut().enumerate().take(hi).skip(lo) {
                    *slot = src[(t as isize * g.stride as isize + off) as usize];
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, gx: &mut [T]) {
    let lout = g.len_out;
    for c in 0..g.ch_in {
        let dst = &mut gx[c * g.len_in..(c + 1) * g.len_in];
        for j in 0..g.k {
            let row = &col[(c * g.k + j) * lout..][..lout];
            let off = (j * g.dilation) as isize - g.padding as isize;
            let (lo, hi) = g.valid_range(off);
            if hi == lo {
                continue;
            }
            if g.stride == 1 {
                let start = (lo as isize + off) as usize;
                for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&row[lo..hi]) {
                    *d = *d + v;
                }
            } else {
                for (t, &v) in row.iter().enumerate().take(hi).skip(lo) {
                    let p = (t as isize * g.stride as isize + off) as usize;
                    dst[p] = dst[p] + v;
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let per_out = g.ch_out * g.len_out;
    let mut out = vec![T::zero(); g.batch * per_out];
    let mut col = vec![T::zero(); g.rows() * g.len_out];
    for b in 0..g.batch {
        let xb = &x[b * g.ch_in * g.len_in..(b + 1) * g.ch_in * g.len_in];
        let ob = &mut out[b * per_out..(b + 1) * per_out];
        if let Some(bias) = bias {
            for (row, &bv) in ob.chunks_mut(g.len_out).zip(bias) {
                row.fill(bv);
            }
        }
        im2col(xb, g, &mut col);
        gemm(g.ch_out, g.rows(), g.len_out, w, false, &col, false, T::one(), ob);
    }
    out
}

/// Gradients w.r.t. input and kernel; either side may be skipped.
pub(crate) fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let per_in = g.ch_in * g.len_in;
    let per_out = g.ch_out * g.len_out;
    let mut gx = want_x.then(|| vec![T::zero(); g.batch * per_in]);
    let mut gw = want_w.then(|| vec![T::zero(); w.len()]);
    let mut col = vec![T::zero(); g.rows() * g.len_out];
    for b in 0..g.batch {
        let gb = &gout[b * per_out..(b + 1) * per_out];
        if let Some(gw) = gw.as_mut() {
            im2col(&x[b * per_in..(b + 1) * per_in], g, &mut col);
            gemm(g.ch_out, g.len_out, g.rows(), gb, false, &col, true, T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(g.rows(), g.ch_out, g.len_out, w, true, gb, false, T::zero(), &mut col);
            col2im_add(&col, g, &mut gx[b * per_in..(b + 1) * per_in]);
        }
    }
    (gx, gw)
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(classes) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

fn hamming(j: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    0.54 - 0.46 * (2.0 * PI * j as f64 / (len - 1) as f64).cos()
}

/// Band-pass kernels for normalized cutoffs `f1 < f2` (cycles per sample).
pub(crate) fn sinc_bank<T: Scalar>(f1: &[T], f2: &[T], len: usize) -> Vec<T> {
    let half = (len / 2) as isize;
    let mut out = Vec::with_capacity(f1.len() * len);
    for (&a, &b) in f1.iter().zip(f2) {
        let (a, b) = (a.as_f64(), b.as_f64());
        for j in 0..len {
            // Evaluated at |n| so the kernel is exactly even.
            let n = (j as isize - half).unsigned_abs();
            let h = if n == 0 {
                2.0 * (b - a)
            } else {
                let n = n as f64;
                ((2.0 * PI * b * n).sin() - (2.0 * PI * a * n).sin()) / (PI * n)
            };
            out.push(T::from_f64_lossy(h * hamming(half as usize + n, len)));
        }
    }
    out
}

/// Derivatives of a loss w.r.t. each filter's normalized `f1` and `f2`,
/// given the loss gradient w.r.t. the kernel values.
pub(crate) fn sinc_bank_cutoff_grads<T: Scalar>(f1: &[T], f2: &[T], len: usize, g: &[T]) -> (Vec<T>, Vec<T>) {
    let half = (len / 2) as isize;
    let mut d1 = Vec::with_capacity(f1.len());
    let mut d2 = Vec::with_capacity(f1.len());
    for (i, (&a, &b)) in f1.iter().zip(f2).enumerate() {
        let (a, b) = (a.as_f64(), b.as_f64());
        let (mut s1, mut s2) = (0.0, 0.0);
        for j in 0..len {
            let n = (j as isize - half) as f64;
            let gw = g[i * len + j].as_f64() * hamming(j, len);
            s1 -= 2.0 * (2.0 * PI * a * n).cos() * gw;
            s2 += 2.0 * (2.0 * PI * b * n).cos() * gw;
        }
        d1.push(T::from_f64_lossy(s1));
        d2.push(T::from_f64_lossy(s2));
    }
    (d1, d2)
}
