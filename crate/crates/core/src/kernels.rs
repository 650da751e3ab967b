//! Raw forward/backward loops over `N×T×F×C` buffers.
//!
//! Batch items are processed in parallel; reductions across the batch are
//! formed from per-item partials summed in batch order, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub t: usize,
    pub f: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub pad_t: usize,
    pub pad_f: usize,
}

impl ConvGeometry {
    pub fn out_t(&self) -> usize {
        self.t + 2 * self.pad_t + 1 - self.kh
    }

    pub fn out_f(&self) -> usize {
        self.f + 2 * self.pad_f + 1 - self.kw
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside the input.
    #[inline]
    fn source(o: usize, k: usize, pad: usize, len: usize) -> Option<usize> {
        let i = o + k;
        if i < pad || i - pad >= len {
            None
        } else {
            Some(i - pad)
        }
    }
}

impl ConvGeometry {
    fn positions(&self) -> usize {
        self.out_t() * self.out_f()
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    /// True when the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad_t == 0 && self.pad_f == 0
    }

    /// Unfolds one item into a `positions × (kh·kw·C_in)` matrix whose
    /// column order matches the kernel layout; padding reads as zero.
    fn im2col<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let (ot, of, cin) = (self.out_t(), self.out_f(), self.c_in);
        let patch = self.patch();
        let mut cols = vec![S::zero(); ot * of * patch];
        for t in 0..ot {
            for f in 0..of {
                let row = &mut cols[(t * of + f) * patch..][..patch];
                for dt in 0..self.kh {
                    let Some(it) = Self::source(t, dt, self.pad_t, self.t) else {
                        continue;
                    };
                    for df in 0..self.kw {
                        let Some(jf) = Self::source(f, df, self.pad_f, self.f) else {
                            continue;
                        };
                        row[(dt * self.kw + df) * cin..][..cin].copy_from_slice(&x[(it * self.f + jf) * cin..][..cin]);
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatter-adds a column matrix into `dx`.
    fn col2im<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let (ot, of, cin) = (self.out_t(), self.out_f(), self.c_in);
        let patch = self.patch();
        for t in 0..ot {
            for f in 0..of {
                let row = &cols[(t * of + f) * patch..][..patch];
                for dt in 0..self.kh {
                    let Some(it) = Self::source(t, dt, self.pad_t, self.t) else {
                        continue;
                    };
                    for df in 0..self.kw {
                        let Some(jf) = Self::source(f, df, self.pad_f, self.f) else {
                            continue;
                        };
                        let src = &row[(dt * self.kw + df) * cin..][..cin];
                        for (a, &v) in dx[(it * self.f + jf) * cin..][..cin].iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y = im2col(x)·K + b` per item; `K` is `kh×kw×C_in×C_out`, read as a matrix.
pub fn conv2d_forward<S: Scalar>(g: &ConvGeometry, x: &[S], k: &[S], b: &[S]) -> Vec<S> {
    let item_in = g.t * g.f * g.c_in;
    let (p, patch) = (g.positions(), g.patch());
    let item_out = p * g.c_out;
    let mut out = vec![S::zero(); g.n * item_out];
    out.par_chunks_mut(item_out)
        .zip(x.par_chunks(item_in))
        .for_each(|(y, x)| {
            for row in y.chunks_mut(g.c_out) {
                row.copy_from_slice(b);
            }
            let owned;
            let cols = if g.is_pointwise() {
                x
            } else {
                owned = g.im2col(x);
                &owned
            };
            S::gemm(p, patch, g.c_out, cols, (patch, 1), k, (g.c_out, 1), y, true);
        });
    out
}

/// Returns `(dx, dk, db)` for upstream gradient `dy`.
pub fn conv2d_backward<S: Scalar>(
    g: &ConvGeometry,
    x: &[S],
    k: &[S],
    dy: &[S],
    need_dx: bool,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let item_in = g.t * g.f * g.c_in;
    let (p, patch) = (g.positions(), g.patch());
    let item_out = p * g.c_out;
    let k_len = patch * g.c_out;

    let mut dx = vec![S::zero(); if need_dx { g.n * item_in } else { 0 }];
    if need_dx {
        dx.par_chunks_mut(item_in)
            .zip(dy.par_chunks(item_out))
            .for_each(|(dx, dy)| {
                // dcols = dy·Kᵀ
                if g.is_pointwise() {
                    S::gemm(p, g.c_out, patch, dy, (g.c_out, 1), k, (1, g.c_out), dx, false);
                } else {
                    let mut dcols = vec![S::zero(); p * patch];
                    S::gemm(p, g.c_out, patch, dy, (g.c_out, 1), k, (1, g.c_out), &mut dcols, false);
                    g.col2im(&dcols, dx);
                }
            });
    }

    let partials: Vec<(Vec<S>, Vec<S>)> = x
        .par_chunks(item_in)
        .zip(dy.par_chunks(item_out))
        .map(|(x, dy)| {
            let mut db = vec![S::zero(); g.c_out];
            for row in dy.chunks(g.c_out) {
                for (a, &d) in db.iter_mut().zip(row) {
                    *a += d;
                }
            }
            // dK = colsᵀ·dy
            let mut dk = vec![S::zero(); k_len];
            let owned;
            let cols = if g.is_pointwise() {
                x
            } else {
                owned = g.im2col(x);
                &owned
            };
            S::gemm(patch, p, g.c_out, cols, (1, patch), dy, (g.c_out, 1), &mut dk, false);
            (dk, db)
        })
        .collect();

    let mut dk = vec![S::zero(); k_len];
    let mut db = vec![S::zero(); g.c_out];
    for (pk, pb) in partials {
        for (a, b) in dk.iter_mut().zip(pk) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(pb) {
            *a += b;
        }
    }
    (dx, dk, db)
}

/// 2×2 average pooling with stride 2; a trailing odd row or column is dropped.
pub fn avg_pool2_forward<S: Scalar>(dims: [usize; 4], x: &[S]) -> Vec<S> {
    let [n, t, f, c] = dims;
    let (ot, of) = (t / 2, f / 2);
    let quarter = S::of(0.25);
    let mut out = vec![S::zero(); n * ot * of * c];
    for b in 0..n {
        for i in 0..ot {
            for j in 0..of {
                for ch in 0..c {
                    let at = |ti: usize, fj: usize| x[((b * t + ti) * f + fj) * c + ch];
                    let s = at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1);
                    out[((b * ot + i) * of + j) * c + ch] = s * quarter;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<S: Scalar>(dims: [usize; 4], dy: &[S]) -> Vec<S> {
    let [n, t, f, c] = dims;
    let (ot, of) = (t / 2, f / 2);
    let quarter = S::of(0.25);
    let mut dx = vec![S::zero(); n * t * f * c];
    for b in 0..n {
        for i in 0..ot {
            for j in 0..of {
                for ch in 0..c {
                    let g = dy[((b * ot + i) * of + j) * c + ch] * quarter;
                    for (ti, fj) in [
                        (2 * i, 2 * j),
                        (2 * i, 2 * j + 1),
                        (2 * i + 1, 2 * j),
                        (2 * i + 1, 2 * j + 1),
                    ] {
                        dx[((b * t + ti) * f + fj) * c + ch] += g;
                    }
                }
            }
        }
    }
    dx
}
