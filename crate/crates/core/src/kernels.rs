//! Raw forward/backward kernels over contiguous row-major buffers.
//!
//! Layouts: activations `[B, C, H, W]`; conv weights `[Cout, Cin, Kh, Kw]`;
//! transposed-conv weights `[Cin, Cout, Kh, Kw]`; linear weights `[D, E]`.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match *shape {
            [n, c, h, w] => Some(Self { n, c, h, w }),
            _ => None,
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn to_vec(self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }
}

pub fn conv2d_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose2d_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let full = (input.checked_sub(1)?) * stride + kernel;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

/// Output columns `o` for which `o * stride + k - pad` lands inside `[0, extent)`.
#[inline]
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let k = k as isize;
    let s = stride as isize;
    let p = pad as isize;
    // smallest o with o*s + k - p >= 0
    let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
    // largest o with o*s + k - p <= extent - 1
    let top = extent as isize - 1 + p - k;
    let hi = if top < 0 { 0 } else { (top / s + 1).min(out as isize) };
    let lo = lo.min(out as isize);
    (lo as usize, hi.max(lo) as usize)
}

pub struct ConvGeom {
    pub x: Dims4,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product; each matrix is given
/// with its row and column strides so transposes need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: lhs buffer too short");
    assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: rhs buffer too short");
    assert!(c.0.len() >= span(m, n, c.1, c.2), "gemm: output buffer too short");
    // SAFETY: the asserts above keep every strided access inside its slice,
    // and `c` is a unique borrow that cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}

/// Sliding-window layout shared by convolution and its transpose: an image of
/// `c × h × w` read through `kh × kw` windows at the positions of an `oh × ow` grid.
#[derive(Clone, Copy)]
struct Patches {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Windows as columns: `[c·kh·kw, oh·ow]`, zeros where the window leaves the image.
    fn im2col(&self, img: &[f64], col: &mut [f64]) {
        col.fill(0.0);
        let p = self.cols();
        for ci in 0..self.c {
            let src = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy_lo, oy_hi) = valid_range(self.oh, self.h, ky, self.stride, self.pad);
                for kx in 0..self.kw {
                    let (ox_lo, ox_hi) = valid_range(self.ow, self.w, kx, self.stride, self.pad);
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[r * p..(r + 1) * p];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let row = &src[iy * self.w..(iy + 1) * self.w];
                        for ox in ox_lo..ox_hi {
                            dst[oy * self.ow + ox] = row[ox * self.stride + kx - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back, summing overlaps into `img`.
    fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.c {
            let dst = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (oy_lo, oy_hi) = valid_range(self.oh, self.h, ky, self.stride, self.pad);
                for kx in 0..self.kw {
                    let (ox_lo, ox_hi) = valid_range(self.ow, self.w, kx, self.stride, self.pad);
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[r * p..(r + 1) * p];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.pad;
                        let row = &mut dst[iy * self.w..(iy + 1) * self.w];
                        for ox in ox_lo..ox_hi {
                            row[ox * self.stride + kx - self.pad] += src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }

    /// 1×1 windows at unit stride without padding are the image itself.
    fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn channel_sums<T: Real>(dy: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    (0..c)
        .map(|co| {
            let s: f64 = (0..n)
                .map(|b| dy[(b * c + co) * plane..(b * c + co + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>())
                .sum();
            T::of(s)
        })
        .collect()
}

impl ConvGeom {
    /// Windows over the input, one per output position.
    fn conv_patches(&self) -> Patches {
        Patches {
            c: self.x.c,
            h: self.x.h,
            w: self.x.w,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            oh: self.oh,
            ow: self.ow,
        }
    }

    /// Windows over the transposed-conv output, one per input position.
    fn transpose_patches(&self) -> Patches {
        Patches {
            c: self.cout,
            h: self.oh,
            w: self.ow,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            oh: self.x.h,
            ow: self.x.w,
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let pt = g.conv_patches();
    let (n, cin_plane) = (g.x.n, g.x.c * g.x.plane());
    let (kk, p) = (pt.rows(), pt.cols());
    let (xf, wf) = (to_f64(x), to_f64(w));
    let mut out = vec![0f64; n * g.cout * p];
    let mut col = vec![0f64; if pt.is_identity() { 0 } else { kk * p }];
    for b in 0..n {
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_mut(p).enumerate() {
                plane.fill(bias[co].as_f64());
            }
        }
        let xb = &xf[b * cin_plane..(b + 1) * cin_plane];
        let src: &[f64] = if pt.is_identity() {
            xb
        } else {
            pt.im2col(xb, &mut col);
            &col
        };
        gemm(g.cout, kk, p, (&wf, kk, 1), (src, p, 1), 1.0, (ob, p, 1));
    }
    from_f64(&out)
}

/// Returns `(dx, dw, db)` for a conv2d given the upstream gradient.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let pt = g.conv_patches();
    let (n, cin_plane) = (g.x.n, g.x.c * g.x.plane());
    let (kk, p) = (pt.rows(), pt.cols());
    let (xf, wf, dyf) = (to_f64(x), to_f64(w), to_f64(dy));
    let mut dw = vec![0f64; w.len()];
    let mut dx = need_dx.then(|| vec![0f64; x.len()]);
    let mut col = vec![0f64; kk * p];
    for b in 0..n {
        let xb = &xf[b * cin_plane..(b + 1) * cin_plane];
        let gb = &dyf[b * g.cout * p..(b + 1) * g.cout * p];
        let src: &[f64] = if pt.is_identity() {
            xb
        } else {
            pt.im2col(xb, &mut col);
            &col
        };
        gemm(g.cout, p, kk, (gb, p, 1), (src, 1, p), 1.0, (&mut dw, kk, 1));
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * cin_plane..(b + 1) * cin_plane];
            if pt.is_identity() {
                gemm(kk, g.cout, p, (&wf, 1, kk), (gb, p, 1), 1.0, (dxb, p, 1));
            } else {
                gemm(kk, g.cout, p, (&wf, 1, kk), (gb, p, 1), 0.0, (&mut col, p, 1));
                pt.col2im(&col, dxb);
            }
        }
    }
    let db = channel_sums(dy, n, g.cout, p);
    (dx.map(|d| from_f64(&d)), from_f64(&dw), db)
}

/// Transposed convolution; `g.cout` is the output channel count, `g.oh/ow` the output extents.
pub fn conv_transpose2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let pt = g.transpose_patches();
    let (n, cin) = (g.x.n, g.x.c);
    let (ck, pin) = (pt.rows(), pt.cols());
    let out_plane = g.oh * g.ow;
    let (xf, wf) = (to_f64(x), to_f64(w));
    let mut out = vec![0f64; n * g.cout * out_plane];
    let mut col = vec![0f64; ck * pin];
    for b in 0..n {
        let xb = &xf[b * cin * pin..(b + 1) * cin * pin];
        gemm(ck, cin, pin, (&wf, 1, ck), (xb, pin, 1), 0.0, (&mut col, pin, 1));
        let ob = &mut out[b * g.cout * out_plane..(b + 1) * g.cout * out_plane];
        pt.col2im(&col, ob);
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_mut(out_plane).enumerate() {
                let bv = bias[co].as_f64();
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    from_f64(&out)
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let pt = g.transpose_patches();
    let (n, cin) = (g.x.n, g.x.c);
    let (ck, pin) = (pt.rows(), pt.cols());
    let out_plane = g.oh * g.ow;
    let (xf, wf, dyf) = (to_f64(x), to_f64(w), to_f64(dy));
    let mut dw = vec![0f64; w.len()];
    let mut dx = need_dx.then(|| vec![0f64; x.len()]);
    let mut col = vec![0f64; ck * pin];
    for b in 0..n {
        pt.im2col(&dyf[b * g.cout * out_plane..(b + 1) * g.cout * out_plane], &mut col);
        let xb = &xf[b * cin * pin..(b + 1) * cin * pin];
        gemm(cin, pin, ck, (xb, pin, 1), (&col, 1, pin), 1.0, (&mut dw, ck, 1));
        if let Some(dx) = dx.as_mut() {
            gemm(cin, ck, pin, (&wf, ck, 1), (&col, pin, 1), 0.0, (&mut dx[b * cin * pin..(b + 1) * cin * pin], pin, 1));
        }
    }
    let db = channel_sums(dy, n, g.cout, out_plane);
    (dx.map(|d| from_f64(&d)), from_f64(&dw), db)
}

/// `y[n, e] = bias[e] + sum_d x[n, d] * w[d, e]`
pub fn linear_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, n: usize, d: usize, e: usize) -> Vec<T> {
    let mut out = vec![0f64; n * e];
    if let Some(b) = bias {
        for row in out.chunks_mut(e.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, &v)| *o = v.as_f64());
        }
    }
    gemm(n, d, e, (&to_f64(x), d, 1), (&to_f64(w), e, 1), 1.0, (&mut out, e, 1));
    from_f64(&out)
}

pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    d: usize,
    e: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (xf, wf, gf) = (to_f64(x), to_f64(w), to_f64(dy));
    let mut dx = vec![0f64; n * d];
    let mut dw = vec![0f64; d * e];
    gemm(n, e, d, (&gf, e, 1), (&wf, 1, e), 0.0, (&mut dx, d, 1));
    gemm(d, n, e, (&xf, 1, d), (&gf, e, 1), 0.0, (&mut dw, e, 1));
    let db = (0..e).map(|j| T::of((0..n).map(|r| gf[r * e + j]).sum::<f64>())).collect();
    (from_f64(&dx), from_f64(&dw), db)
}

/// `[B, M, K] x [B, K, N] -> [B, M, N]`
pub fn bmm_forward<T: Real>(a: &[T], b: &[T], bs: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let (af, bf) = (to_f64(a), to_f64(b));
    let mut out = vec![0f64; bs * m * n];
    for p in 0..bs {
        gemm(
            m,
            k,
            n,
            (&af[p * m * k..(p + 1) * m * k], k, 1),
            (&bf[p * k * n..(p + 1) * k * n], n, 1),
            0.0,
            (&mut out[p * m * n..(p + 1) * m * n], n, 1),
        );
    }
    from_f64(&out)
}

pub fn bmm_backward<T: Real>(
    a: &[T],
    b: &[T],
    dy: &[T],
    bs: usize,
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let (af, bf, gf) = (to_f64(a), to_f64(b), to_f64(dy));
    let mut da = vec![0f64; a.len()];
    let mut db = vec![0f64; b.len()];
    for p in 0..bs {
        let ap = &af[p * m * k..(p + 1) * m * k];
        let bp = &bf[p * k * n..(p + 1) * k * n];
        let gp = &gf[p * m * n..(p + 1) * m * n];
        gemm(m, n, k, (gp, n, 1), (bp, 1, n), 0.0, (&mut da[p * m * k..(p + 1) * m * k], k, 1));
        gemm(k, m, n, (ap, 1, k), (gp, n, 1), 0.0, (&mut db[p * k * n..(p + 1) * k * n], n, 1));
    }
    (from_f64(&da), from_f64(&db))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for extent in 1..7 {
            for k in 0..4 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        let out = 9;
                        let (lo, hi) = valid_range(out, extent, k, stride, pad);
                        let brute: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = (o * stride + k) as isize - pad as isize;
                                i >= 0 && i < extent as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "extent {extent} k {k} s {stride} p {pad}");
                    }
                }
            }
        }
    }

    #[test]
    fn output_extents() {
        assert_eq!(conv2d_out_extent(64, 3, 2, 1), Some(32));
        assert_eq!(conv2d_out_extent(16, 3, 1, 1), Some(16));
        assert_eq!(conv2d_out_extent(2, 5, 1, 1), None);
        assert_eq!(conv_transpose2d_out_extent(16, 2, 2, 0), Some(32));
    }
}
