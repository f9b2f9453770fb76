//! im2col lowering for size-preserving odd-kernel cross-correlation.

use super::Scalar;

/// Column index range `[lo, hi)` of output pixels whose source `x + d` is
/// inside `0..w`.
fn span(w: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (w as isize - d).clamp(0, w as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfolds one `c x h x w` image into a `(c*k*k) x (h*w)` matrix with zero
/// padding `k / 2`.
pub(super) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = ((ci * k + ky) * k + kx) * plane;
                let dst = &mut col[row..row + plane];
                let (x0, x1) = span(w, dx);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let (a, b) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
                    out[x0..x1].copy_from_slice(&s[a..b]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds the column matrix back into `dx`.
pub(super) fn col2im_add<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dxo = kx as isize - pad;
                let row = ((ci * k + ky) * k + kx) * plane;
                let src = &col[row..row + plane];
                let (x0, x1) = span(w, dxo);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let s = &src[y * w..(y + 1) * w];
                    let off = (x0 as isize + dxo) as usize;
                    for (t, v) in d[off..off + (x1 - x0)].iter_mut().zip(&s[x0..x1]) {
                        *t += *v;
                    }
                }
            }
        }
    }
}
