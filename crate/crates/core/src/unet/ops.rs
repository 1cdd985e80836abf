//! Dense kernels for channel-major volumes `[C, X, Y, Z]` (z fastest).

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating-point element type of a network.
pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + PartialOrd
    + Debug
    + Display
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    /// `C = alpha·A·B + beta·C` with element strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                unsafe { $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major `C[m×n] = alpha·op(A)·op(B) + beta·C`. `op(A)` is `m×k`; with
/// `ta` set, `A` is stored as `k×m`. Likewise for `B`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(ta: bool, tb: bool, m: usize, n: usize, k: usize, alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    // SAFETY: lengths checked above; strides describe row-major storage.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

pub fn voxels(d: [usize; 3]) -> usize {
    d[0] * d[1] * d[2]
}

/// Output positions `o` with `0 <= o + shift < n`.
fn valid(shift: isize, n: usize) -> std::ops::Range<usize> {
    let lo = (-shift).max(0) as usize;
    let hi = (n as isize - shift).clamp(0, n as isize) as usize;
    lo..hi.max(lo)
}

/// Tap `o` of a 3×3×3 stencil as an (x, y, z) shift.
fn tap(o: usize) -> [isize; 3] {
    [(o / 9) as isize - 1, ((o / 3) % 3) as isize - 1, (o % 3) as isize - 1]
}

/// For one tap, the flat output ranges whose source is the output index plus
/// a constant offset, and the z column that wraps into a neighbouring row.
/// Calls `f(range, delta)` per x-slab; the caller fixes up `edge` afterwards.
fn tap_blocks(d: [usize; 3], s: [isize; 3], mut f: impl FnMut(std::ops::Range<usize>, isize)) {
    let [nx, ny, nz] = d;
    let n = (nx * ny * nz) as isize;
    let delta = (s[0] * ny as isize + s[1]) * nz as isize + s[2];
    let ys = valid(s[1], ny);
    for x in valid(s[0], nx) {
        let a = ((x * ny + ys.start) * nz) as isize;
        let b = ((x * ny + ys.end) * nz) as isize;
        let (lo, hi) = (a.max(-delta), b.min(n - delta));
        if lo < hi {
            f(lo as usize..hi as usize, delta);
        }
    }
}

/// Visit the output positions of a tap whose z source falls outside the grid.
fn tap_edges(d: [usize; 3], s: [isize; 3], mut f: impl FnMut(usize)) {
    let [nx, ny, nz] = d;
    let zs: &[usize] = match s[2] {
        0 => return,
        _ if nz == 1 => &[0],
        1 => &[nz - 1],
        _ => &[0],
    };
    for x in valid(s[0], nx) {
        for y in valid(s[1], ny) {
            for &z in zs {
                f((x * ny + y) * nz + z);
            }
        }
    }
}

/// Unfold 3×3×3 zero-padded neighbourhoods into `col[(c·27 + o), voxel]`.
pub fn im2col<T: Real>(x: &[T], c: usize, d: [usize; 3], col: &mut [T]) {
    let n = voxels(d);
    for ci in 0..c {
        let src = &x[ci * n..(ci + 1) * n];
        for o in 0..27 {
            let s = tap(o);
            let dst = &mut col[(ci * 27 + o) * n..(ci * 27 + o + 1) * n];
            let mut done = 0;
            tap_blocks(d, s, |r, delta| {
                dst[done..r.start].fill(T::ZERO);
                let from = (r.start as isize + delta) as usize;
                dst[r.clone()].copy_from_slice(&src[from..from + r.len()]);
                done = r.end;
            });
            dst[done..].fill(T::ZERO);
            tap_edges(d, s, |i| dst[i] = T::ZERO);
        }
    }
}

/// Adjoint of [`im2col`]; overwrites `x`. The wrapped edge entries of `col`
/// are zeroed in the process.
pub fn col2im<T: Real>(col: &mut [T], c: usize, d: [usize; 3], x: &mut [T]) {
    let n = voxels(d);
    x[..c * n].fill(T::ZERO);
    for ci in 0..c {
        let dst = &mut x[ci * n..(ci + 1) * n];
        for o in 0..27 {
            let s = tap(o);
            let src = &mut col[(ci * 27 + o) * n..(ci * 27 + o + 1) * n];
            tap_edges(d, s, |i| src[i] = T::ZERO);
            tap_blocks(d, s, |r, delta| {
                let to = (r.start as isize + delta) as usize;
                for (t, v) in dst[to..to + r.len()].iter_mut().zip(&src[r]) {
                    *t += *v;
                }
            });
        }
    }
}

/// Convolution geometry. `k` is 1 (pointwise) or 3 (3×3×3, zero padding 1).
/// Parameters are stored as `W[cout, cin·k³]` followed by `b[cout]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub offset: usize,
}

impl Conv {
    pub fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.taps()
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn params<'a, T>(&self, p: &'a [T]) -> (&'a [T], &'a [T]) {
        p[self.offset..self.offset + self.param_count()].split_at(self.weight_len())
    }

    pub fn params_mut<'a, T>(&self, p: &'a mut [T]) -> (&'a mut [T], &'a mut [T]) {
        p[self.offset..self.offset + self.param_count()].split_at_mut(self.weight_len())
    }

    /// `y = W ∗ x + b`, optionally rectified.
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], d: [usize; 3], relu: bool, col: &mut Vec<T>) -> Vec<T> {
        let n = voxels(d);
        let (w, b) = self.params(p);
        let mut y = vec![T::ZERO; self.cout * n];
        if self.k == 1 {
            gemm(false, false, self.cout, n, self.cin, T::ONE, w, x, T::ZERO, &mut y);
        } else {
            col.resize(self.cin * 27 * n, T::ZERO);
            im2col(x, self.cin, d, col);
            gemm(false, false, self.cout, n, self.cin * 27, T::ONE, w, col, T::ZERO, &mut y);
        }
        for (row, &bias) in y.chunks_exact_mut(n).zip(b) {
            if relu {
                row.iter_mut().for_each(|v| {
                    let z = *v + bias;
                    *v = if z > T::ZERO { z } else { T::ZERO };
                });
            } else {
                row.iter_mut().for_each(|v| *v += bias);
            }
        }
        y
    }

    /// Accumulate parameter gradients into `g` and, when requested, return
    /// the gradient with respect to `x`. `dy` is taken before any activation.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        x: &[T],
        dy: &[T],
        d: [usize; 3],
        g: &mut [T],
        want_dx: bool,
        col: &mut Vec<T>,
    ) -> Option<Vec<T>> {
        let n = voxels(d);
        let (w, _) = self.params(p);
        let (dw, db) = self.params_mut(g);
        for (row, acc) in dy.chunks_exact(n).zip(db.iter_mut()) {
            let mut s = T::ZERO;
            for &v in row {
                s += v;
            }
            *acc += s;
        }
        let kk = self.cin * self.taps();
        if self.k == 1 {
            gemm(false, true, self.cout, self.cin, n, T::ONE, dy, x, T::ONE, dw);
            return want_dx.then(|| {
                let mut dx = vec![T::ZERO; self.cin * n];
                gemm(true, false, self.cin, n, self.cout, T::ONE, w, dy, T::ZERO, &mut dx);
                dx
            });
        }
        col.resize(kk * n, T::ZERO);
        im2col(x, self.cin, d, col);
        gemm(false, true, self.cout, kk, n, T::ONE, dy, col, T::ONE, dw);
        if !want_dx {
            return None;
        }
        gemm(true, false, kk, n, self.cout, T::ONE, w, dy, T::ZERO, col);
        let mut dx = vec![T::ZERO; self.cin * n];
        col2im(col, self.cin, d, &mut dx);
        Some(dx)
    }
}

/// Zero `dy` where the rectified output `y` is not positive.
pub fn relu_backward<T: Real>(dy: &mut [T], y: &[T]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if !(v > T::ZERO) {
            *g = T::ZERO;
        }
    }
}

pub fn pooled_dims(d: [usize; 3], f: [usize; 3]) -> [usize; 3] {
    [d[0] / f[0], d[1] / f[1], d[2] / f[2]]
}

/// Max pooling with per-axis factor 1 or 2. Returns the pooled volume and,
/// for each output, the winning input offset within its channel.
pub fn maxpool<T: Real>(x: &[T], c: usize, d: [usize; 3], f: [usize; 3]) -> (Vec<T>, Vec<u32>) {
    let od = pooled_dims(d, f);
    let (n, on) = (voxels(d), voxels(od));
    let mut y = Vec::with_capacity(c * on);
    let mut idx = Vec::with_capacity(c * on);
    for ci in 0..c {
        let src = &x[ci * n..(ci + 1) * n];
        for ox in 0..od[0] {
            for oy in 0..od[1] {
                for oz in 0..od[2] {
                    let mut best = usize::MAX;
                    for a in 0..f[0] {
                        for b in 0..f[1] {
                            for e in 0..f[2] {
                                let at = ((ox * f[0] + a) * d[1] + oy * f[1] + b) * d[2] + oz * f[2] + e;
                                if best == usize::MAX || src[at] > src[best] {
                                    best = at;
                                }
                            }
                        }
                    }
                    y.push(src[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool_backward<T: Real>(dy: &[T], idx: &[u32], c: usize, d: [usize; 3], f: [usize; 3]) -> Vec<T> {
    let (n, on) = (voxels(d), voxels(pooled_dims(d, f)));
    let mut dx = vec![T::ZERO; c * n];
    for ci in 0..c {
        for o in 0..on {
            dx[ci * n + idx[ci * on + o] as usize] += dy[ci * on + o];
        }
    }
    dx
}

/// Transposed convolution with kernel = stride = `f` (per axis). Parameters
/// are `W[cout·|f|, cin]` followed by `b[cout]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpConv {
    pub cin: usize,
    pub cout: usize,
    pub f: [usize; 3],
    pub offset: usize,
}

impl UpConv {
    pub fn taps(&self) -> usize {
        self.f.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.taps() * self.cin
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn params<'a, T>(&self, p: &'a [T]) -> (&'a [T], &'a [T]) {
        p[self.offset..self.offset + self.param_count()].split_at(self.weight_len())
    }

    /// Visit `(tap row, input voxel, output voxel)` for every output voxel.
    fn scatter(&self, d: [usize; 3], mut visit: impl FnMut(usize, usize, usize)) {
        let f = self.f;
        let od = [d[0] * f[0], d[1] * f[1], d[2] * f[2]];
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    let inp = (x * d[1] + y) * d[2] + z;
                    for a in 0..f[0] {
                        for b in 0..f[1] {
                            for e in 0..f[2] {
                                let tap = (a * f[1] + b) * f[2] + e;
                                let out = ((x * f[0] + a) * od[1] + y * f[1] + b) * od[2] + z * f[2] + e;
                                visit(tap, inp, out);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Upsample `x` of extent `d` to extent `d·f`.
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], d: [usize; 3]) -> Vec<T> {
        let (n, kv) = (voxels(d), self.taps());
        let on = n * kv;
        let (w, b) = self.params(p);
        let mut tmp = vec![T::ZERO; self.cout * kv * n];
        gemm(false, false, self.cout * kv, n, self.cin, T::ONE, w, x, T::ZERO, &mut tmp);
        let mut y = vec![T::ZERO; self.cout * on];
        for co in 0..self.cout {
            let (dst, bias) = (&mut y[co * on..(co + 1) * on], b[co]);
            let src = &tmp[co * kv * n..(co + 1) * kv * n];
            self.scatter(d, |tap, inp, out| dst[out] = src[tap * n + inp] + bias);
        }
        y
    }

    pub fn backward<T: Real>(&self, p: &[T], x: &[T], dy: &[T], d: [usize; 3], g: &mut [T]) -> Vec<T> {
        let (n, kv) = (voxels(d), self.taps());
        let on = n * kv;
        let (w, _) = self.params(p);
        let mut dtmp = vec![T::ZERO; self.cout * kv * n];
        for co in 0..self.cout {
            let src = &dy[co * on..(co + 1) * on];
            let dst = &mut dtmp[co * kv * n..(co + 1) * kv * n];
            self.scatter(d, |tap, inp, out| dst[tap * n + inp] = src[out]);
        }
        let (dw, db) = g[self.offset..self.offset + self.param_count()].split_at_mut(self.weight_len());
        for (row, acc) in dy.chunks_exact(on).zip(db.iter_mut()) {
            let mut s = T::ZERO;
            for &v in row {
                s += v;
            }
            *acc += s;
        }
        gemm(false, true, self.cout * kv, self.cin, n, T::ONE, &dtmp, x, T::ONE, dw);
        let mut dx = vec![T::ZERO; self.cin * n];
        gemm(true, false, self.cin, n, self.cout * kv, T::ONE, w, &dtmp, T::ZERO, &mut dx);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 3×3×3 zero-padded convolution.
    fn conv_naive(w: &[f64], b: &[f64], x: &[f64], cin: usize, cout: usize, d: [usize; 3]) -> Vec<f64> {
        let n = voxels(d);
        let mut y = vec![0.0; cout * n];
        for co in 0..cout {
            for i in 0..d[0] {
                for j in 0..d[1] {
                    for k in 0..d[2] {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for o in 0..27 {
                                let (a, bb, c) = (i as isize + (o / 9) as isize - 1, j as isize + ((o / 3) % 3) as isize - 1, k as isize + (o % 3) as isize - 1);
                                if a < 0 || bb < 0 || c < 0 || a >= d[0] as isize || bb >= d[1] as isize || c >= d[2] as isize {
                                    continue;
                                }
                                let at = ((a as usize * d[1] + bb as usize) * d[2]) + c as usize;
                                s += w[(co * cin + ci) * 27 + o] * x[ci * n + at];
                            }
                        }
                        y[co * n + (i * d[1] + j) * d[2] + k] = s;
                    }
                }
            }
        }
        y
    }

    fn seq(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 7919 % 101) as f64 / 50.0 - 1.0) * scale).collect()
    }

    #[test]
    fn single_conv_param_count() {
        assert_eq!(Conv { cin: 1, cout: 8, k: 3, offset: 0 }.param_count(), 224);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let d = [4, 3, 5];
        let conv = Conv { cin: 2, cout: 3, k: 3, offset: 0 };
        let p = seq(conv.param_count(), 0.3);
        let x = seq(2 * voxels(d), 1.0);
        let got = conv.forward(&p, &x, d, false, &mut Vec::new());
        let (w, b) = conv.params(&p);
        let want = conv_naive(w, b, &x, 2, 3, d);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for d in [[3, 4, 2], [2, 2, 1], [1, 3, 5], [4, 1, 3]] {
            let [nx, ny, nz] = d;
            let n = voxels(d);
            let x = seq(2 * n, 1.3);
            let mut col = vec![f64::NAN; 2 * 27 * n];
            im2col(&x, 2, d, &mut col);
            for ci in 0..2 {
                for o in 0..27 {
                    let [sx, sy, sz] = tap(o);
                    for i in 0..nx {
                        for j in 0..ny {
                            for k in 0..nz {
                                let (a, b, c) = (i as isize + sx, j as isize + sy, k as isize + sz);
                                let inside = (0..nx as isize).contains(&a) && (0..ny as isize).contains(&b) && (0..nz as isize).contains(&c);
                                let want = if inside { x[ci * n + ((a as usize * ny) + b as usize) * nz + c as usize] } else { 0.0 };
                                assert_eq!(col[(ci * 27 + o) * n + (i * ny + j) * nz + k], want, "{d:?} tap {o}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let d = [3, 4, 2];
        let n = voxels(d);
        let x = seq(2 * n, 1.0);
        let c = seq(2 * 27 * n, 0.7);
        let mut col = vec![0.0; 2 * 27 * n];
        im2col(&x, 2, d, &mut col);
        let mut back = vec![0.0; 2 * n];
        col2im(&mut c.clone(), 2, d, &mut back);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_saturates_unit_axis() {
        let d = [2, 2, 1];
        let x = vec![1.0, 5.0, -2.0, 3.0];
        let (y, idx) = maxpool(&x, 1, d, [2, 2, 1]);
        assert_eq!(y, vec![5.0]);
        assert_eq!(idx, vec![1]);
        assert_eq!(maxpool_backward(&[2.0], &idx, 1, d, [2, 2, 1]), vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn upconv_places_taps() {
        let up = UpConv { cin: 1, cout: 1, f: [2, 1, 2], offset: 0 };
        // weights for taps (a, e) = (0,0), (0,1), (1,0), (1,1); bias 10.
        let p = vec![1.0, 2.0, 3.0, 4.0, 10.0];
        let y = up.forward(&p, &[1.0, -1.0], [1, 2, 1]);
        // output extent [2, 2, 2]
        assert_eq!(y, vec![11.0, 12.0, 9.0, 8.0, 13.0, 14.0, 7.0, 6.0]);
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(true, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
