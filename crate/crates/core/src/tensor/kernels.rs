//! Raw forward/adjoint kernels shared by the graph ops.
//!
//! Maps are HWC row-major; convolution weights are `[k, k, c_in, c_out]` so
//! the innermost loops run over contiguous output channels.

use super::Scalar;

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Input coordinate for output index `o` and tap `t`, if inside the map.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], wt: &[T], bias: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(oh * ow * g.cout);
    for _ in 0..oh * ow {
        out.extend_from_slice(bias);
    }
    let tap_len = g.cin * g.cout;
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                    let wk = &wt[(ky * g.k + kx) * tap_len..][..tap_len];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv != T::zero() {
                            axpy(o, xv, &wk[ci * g.cout..][..g.cout]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoints of [`conv2d_forward`]. Returns `(d_input, d_weight, d_bias)`;
/// `d_input` is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    grad_out: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let tap_len = g.cin * g.cout;
    let taps = g.k * g.k;

    let mut db = vec![T::zero(); g.cout];
    for go in grad_out.chunks_exact(g.cout) {
        for (d, &v) in db.iter_mut().zip(go) {
            *d += v;
        }
    }

    let mut dw = vec![T::zero(); wt.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &grad_out[(oy * ow + ox) * g.cout..][..g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                    let dwk = &mut dw[(ky * g.k + kx) * tap_len..][..tap_len];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv != T::zero() {
                            axpy(&mut dwk[ci * g.cout..][..g.cout], xv, go);
                        }
                    }
                }
            }
        }
    }

    let dx = need_input.then(|| {
        // [tap, cout, cin] so the input adjoint is also an axpy over a contiguous row.
        let mut wt_t = vec![T::zero(); wt.len()];
        for t in 0..taps {
            for ci in 0..g.cin {
                for co in 0..g.cout {
                    wt_t[t * tap_len + co * g.cin + ci] = wt[t * tap_len + ci * g.cout + co];
                }
            }
        }
        let mut dx = vec![T::zero(); x.len()];
        for oy in 0..oh {
            for ox in 0..ow {
                let go = &grad_out[(oy * ow + ox) * g.cout..][..g.cout];
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.w) else { continue };
                        let dxi = &mut dx[(iy * g.w + ix) * g.cin..][..g.cin];
                        let wk = &wt_t[(ky * g.k + kx) * tap_len..][..tap_len];
                        for (co, &gv) in go.iter().enumerate() {
                            if gv != T::zero() {
                                axpy(dxi, gv, &wk[co * g.cin..][..g.cin]);
                            }
                        }
                    }
                }
            }
        }
        dx
    });

    (dx, dw, db)
}

/// Interpolation stencil for one sample location on an `h x w` grid.
///
/// Coordinates are clamped to `[0, h-1] x [0, w-1]`; the coordinate
/// derivative is zero along an axis whose coordinate was clamped.
#[derive(Clone, Copy, Debug)]
pub struct Stencil<T> {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
    pub fi: T,
    pub fj: T,
    pub live_i: bool,
    pub live_j: bool,
}

#[inline]
fn axis<T: Scalar>(x: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::from_f64((n - 1) as f64);
    let live = n > 1 && x >= T::zero() && x <= hi;
    if n == 1 {
        return (0, 0, T::zero(), false);
    }
    let xc = x.max(T::zero()).min(hi);
    let lo = xc.floor().to_usize().unwrap_or(0).min(n - 2);
    let f = xc - T::from_f64(lo as f64);
    (lo, lo + 1, f, live)
}

impl<T: Scalar> Stencil<T> {
    #[inline]
    pub fn new(h: usize, w: usize, i: T, j: T) -> Self {
        let (i0, i1, fi, live_i) = axis(i, h);
        let (j0, j1, fj, live_j) = axis(j, w);
        Self {
            i0,
            i1,
            j0,
            j1,
            fi,
            fj,
            live_i,
            live_j,
        }
    }

    /// The four `(row, col, weight)` taps.
    #[inline]
    pub fn taps(&self) -> [(usize, usize, T); 4] {
        let one = T::one();
        [
            (self.i0, self.j0, (one - self.fi) * (one - self.fj)),
            (self.i0, self.j1, (one - self.fi) * self.fj),
            (self.i1, self.j0, self.fi * (one - self.fj)),
            (self.i1, self.j1, self.fi * self.fj),
        ]
    }

    /// Interpolated value given a corner lookup.
    #[inline]
    pub fn sample(&self, v: impl Fn(usize, usize) -> T) -> T {
        self.taps()
            .iter()
            .fold(T::zero(), |acc, &(r, c, wgt)| acc + wgt * v(r, c))
    }

    /// `(d/di, d/dj)` of the interpolated value.
    #[inline]
    pub fn coord_grad(&self, v: impl Fn(usize, usize) -> T) -> (T, T) {
        let one = T::one();
        let (v00, v01) = (v(self.i0, self.j0), v(self.i0, self.j1));
        let (v10, v11) = (v(self.i1, self.j0), v(self.i1, self.j1));
        let di = (one - self.fj) * (v10 - v00) + self.fj * (v11 - v01);
        let dj = (one - self.fi) * (v01 - v00) + self.fi * (v11 - v10);
        (
            if self.live_i { di } else { T::zero() },
            if self.live_j { dj } else { T::zero() },
        )
    }
}
