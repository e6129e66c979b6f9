//! Dense kernels shared by the forward and backward rules.

use alloc::vec;
use alloc::vec::Vec;

use crate::Real;

/// Geometry of one batched 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

}

/// Gather plan of one convolution. Each run of `ow` consecutive entries
/// of an image's `[C·kh·kw, oh·ow]` unfolding reads the zero-padded
/// `C×(H+2p)×(W+2p)` image at `starts[run] + i·stride`.
struct Unfold {
    starts: Vec<usize>,
    span: usize,
    padded_h: usize,
    padded_w: usize,
}

impl Unfold {
    fn new(g: &ConvGeom) -> Self {
        let (ph, pw) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        let mut starts = Vec::with_capacity(g.patch() * g.oh);
        for c in 0..g.in_c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    starts.extend((0..g.oh).map(|oy| (c * ph + oy * g.stride + ki) * pw + kj));
                }
            }
        }
        Unfold { starts, span: (g.ow - 1) * g.stride + 1, padded_h: ph, padded_w: pw }
    }

    fn padded_len(&self, g: &ConvGeom) -> usize {
        g.in_c * self.padded_h * self.padded_w
    }

    /// Copy one image into the interior of `padded`; the border stays zero.
    fn pad_into<T: Real>(&self, x: &[T], g: &ConvGeom, padded: &mut [T]) {
        for (c, src) in x.chunks_exact(g.h * g.w).enumerate() {
            for (y, row) in src.chunks_exact(g.w).enumerate() {
                let at = (c * self.padded_h + y + g.pad) * self.padded_w + g.pad;
                padded[at..at + g.w].copy_from_slice(row);
            }
        }
    }

    fn gather<T: Real>(&self, padded: &[T], g: &ConvGeom, col: &mut [T]) {
        for (dst, &at) in col.chunks_exact_mut(g.ow).zip(&self.starts) {
            let src = &padded[at..at + self.span];
            if g.stride == 1 {
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v);
            } else {
                dst.iter_mut().zip(src.iter().step_by(g.stride)).for_each(|(d, &v)| *d = v);
            }
        }
    }

    /// Adjoint of pad + gather, added into one image gradient `dx`.
    fn scatter_add<T: Real>(&self, col: &[T], g: &ConvGeom, scratch: &mut [T], dx: &mut [T]) {
        scratch.iter_mut().for_each(|v| *v = T::zero());
        for (src, &at) in col.chunks_exact(g.ow).zip(&self.starts) {
            let dst = &mut scratch[at..at + self.span];
            if g.stride == 1 {
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
            } else {
                dst.iter_mut().step_by(g.stride).zip(src).for_each(|(d, &v)| *d = *d + v);
            }
        }
        for (c, dst) in dx.chunks_exact_mut(g.h * g.w).enumerate() {
            for (y, row) in dst.chunks_exact_mut(g.w).enumerate() {
                let at = (c * self.padded_h + y + g.pad) * self.padded_w + g.pad;
                for (d, &s) in row.iter_mut().zip(&scratch[at..at + g.w]) {
                    *d = *d + s;
                }
            }
        }
    }
}

/// Convolution as one `[O, C·kh·kw] · [C·kh·kw, oh·ow]` product per image,
/// written straight into the `[B, O, oh, ow]` output.
pub(crate) fn conv_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (patch, plane) = (g.patch(), g.plane());
    let in_len = g.in_c * g.h * g.w;
    let out_len = g.out_c * plane;
    let unfold = Unfold::new(g);
    let mut padded = vec![T::zero(); unfold.padded_len(g)];
    let mut col = vec![T::zero(); patch * plane];
    let mut out = vec![T::zero(); g.batch * out_len];
    for (xb, ob) in x.chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
        unfold.pad_into(xb, g, &mut padded);
        unfold.gather(&padded, g, &mut col);
        T::gemm(g.out_c, patch, plane, T::one(), weight, (patch as isize, 1), &col, (plane as isize, 1), T::zero(), ob, (plane as isize, 1));
        if let Some(bias) = bias {
            for (row, &b) in ob.chunks_exact_mut(plane).zip(bias) {
                row.iter_mut().for_each(|v| *v = *v + b);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (patch, plane) = (g.patch(), g.plane());
    let in_len = g.in_c * g.h * g.w;
    let out_len = g.out_c * plane;
    let bias = need.2.then(|| {
        let mut db = vec![T::zero(); g.out_c];
        for ob in dout.chunks_exact(out_len) {
            for (d, row) in db.iter_mut().zip(ob.chunks_exact(plane)) {
                *d = row.iter().fold(*d, |acc, &v| acc + v);
            }
        }
        db
    });
    let mut dw = need.1.then(|| vec![T::zero(); g.out_c * patch]);
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let unfold = Unfold::new(g);
    let mut padded = vec![T::zero(); unfold.padded_len(g)];
    let mut col = vec![T::zero(); patch * plane];
    let mut dcol = vec![T::zero(); if need.0 { patch * plane } else { 0 }];
    let mut scratch = vec![T::zero(); if need.0 { unfold.padded_len(g) } else { 0 }];
    for (b, db) in dout.chunks_exact(out_len).enumerate() {
        if let Some(dw) = dw.as_mut() {
            unfold.pad_into(&x[b * in_len..(b + 1) * in_len], g, &mut padded);
            unfold.gather(&padded, g, &mut col);
            // dW += dOut_b · col_bᵀ
            T::gemm(g.out_c, plane, patch, T::one(), db, (plane as isize, 1), &col, (1, plane as isize), T::one(), dw, (patch as isize, 1));
        }
        if let Some(dx) = dx.as_mut() {
            // dcol_b = Wᵀ · dOut_b
            T::gemm(patch, g.out_c, plane, T::one(), weight, (1, patch as isize), db, (plane as isize, 1), T::zero(), &mut dcol, (plane as isize, 1));
            unfold.scatter_add(&dcol, g, &mut scratch, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    ConvGrads { input: dx, weight: dw, bias }
}

/// Row-wise tempered softmax with max subtraction.
pub(crate) fn softmax_rows<T: Real>(z: &[T], k: usize, tau: T, out: &mut [T]) {
    for (row, dst) in z.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = ((v - max) / tau).exp();
            sum = sum + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
}

/// Row-wise tempered log-softmax.
pub(crate) fn log_softmax_rows<T: Real>(z: &[T], k: usize, tau: T, out: &mut [T]) {
    for (row, dst) in z.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for &v in row {
            sum = sum + ((v - max) / tau).exp();
        }
        let lse = sum.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max) / tau - lse;
        }
    }
}
