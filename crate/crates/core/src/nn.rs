//! Forward and backward kernels for the layers of the segmentation network.
//!
//! Every kernel works on a batch laid out as `(N, C, D, H, W)`; planar images
//! use `D = 1` with unit kernel/pool/upsample factors along depth, so one code
//! path serves both the 2D and the 3D network.

use crate::scalar::Scalar;

/// Batch geometry `(N, C, D, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geom {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Geom {
    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.spatial()
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn scaled_down(self, f: [usize; 3]) -> Self {
        Self { d: self.d / f[0], h: self.h / f[1], w: self.w / f[2], ..self }
    }

    pub fn scaled_up(self, f: [usize; 3]) -> Self {
        Self { d: self.d * f[0], h: self.h * f[1], w: self.w * f[2], ..self }
    }
}

fn im2col<T: Scalar>(x: &[T], g: Geom, k: [usize; 3], col: &mut [T]) {
    let [kd, kh, kw] = k;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let (d, h, w) = (g.d, g.h, g.w);
    let p = g.spatial();
    let mut row = 0;
    for ci in 0..g.c {
        let xc = &x[ci * p..(ci + 1) * p];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let shift = e as isize - pw;
                    for z in 0..d {
                        let iz = z as isize + a as isize - pd;
                        for y in 0..h {
                            let iy = y as isize + b as isize - ph;
                            let o = (z * h + y) * w;
                            let out = &mut dst[o..o + w];
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                            for (xo, v) in out.iter_mut().enumerate() {
                                let ix = xo as isize + shift;
                                *v = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: Geom, k: [usize; 3], dx: &mut [T]) {
    let [kd, kh, kw] = k;
    let (pd, ph, pw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let (d, h, w) = (g.d, g.h, g.w);
    let p = g.spatial();
    let mut row = 0;
    for ci in 0..g.c {
        let dxc = &mut dx[ci * p..(ci + 1) * p];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let shift = e as isize - pw;
                    for z in 0..d {
                        let iz = z as isize + a as isize - pd;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for y in 0..h {
                            let iy = y as isize + b as isize - ph;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let o = (z * h + y) * w;
                            let dst = &mut dxc[(iz as usize * h + iy as usize) * w..][..w];
                            for xo in 0..w {
                                let ix = xo as isize + shift;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += src[o + xo];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn is_pointwise(k: [usize; 3]) -> bool {
    k == [1, 1, 1]
}

/// Same-padded, stride-1 convolution. `weight` is `(cout, cin * kd * kh * kw)`.
pub fn conv_forward<T: Scalar>(x: &[T], g: Geom, weight: &[T], bias: &[T], cout: usize, k: [usize; 3]) -> Vec<T> {
    let p = g.spatial();
    let kdim = g.c * k.iter().product::<usize>();
    let mut out = vec![T::zero(); g.n * cout * p];
    let mut col = if is_pointwise(k) { Vec::new() } else { vec![T::zero(); kdim * p] };
    for n in 0..g.n {
        let xn = &x[n * g.c * p..(n + 1) * g.c * p];
        let yn = &mut out[n * cout * p..(n + 1) * cout * p];
        for (co, chunk) in yn.chunks_mut(p).enumerate() {
            chunk.fill(bias[co]);
        }
        let colref: &[T] = if is_pointwise(k) {
            xn
        } else {
            im2col(xn, g, k, &mut col);
            &col
        };
        T::gemm(false, false, cout, kdim, p, T::one(), weight, colref, T::one(), yn);
    }
    out
}

/// Gradients of [`conv_forward`]. `dweight`/`dbias` are accumulated into;
/// the input gradient is returned only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &[T],
    g: Geom,
    weight: &[T],
    cout: usize,
    k: [usize; 3],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let p = g.spatial();
    let kdim = g.c * k.iter().product::<usize>();
    let pointwise = is_pointwise(k);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * p] };
    let mut dcol = if need_dx && !pointwise { vec![T::zero(); kdim * p] } else { Vec::new() };
    let mut dx = if need_dx { vec![T::zero(); g.len()] } else { Vec::new() };
    for n in 0..g.n {
        let xn = &x[n * g.c * p..(n + 1) * g.c * p];
        let dyn_ = &dy[n * cout * p..(n + 1) * cout * p];
        for (co, chunk) in dyn_.chunks(p).enumerate() {
            dbias[co] += chunk.iter().copied().sum::<T>();
        }
        let colref: &[T] = if pointwise {
            xn
        } else {
            im2col(xn, g, k, &mut col);
            &col
        };
        T::gemm(false, true, cout, p, kdim, T::one(), dyn_, colref, T::one(), dweight);
        if need_dx {
            let dxn = &mut dx[n * g.c * p..(n + 1) * g.c * p];
            if pointwise {
                T::gemm(true, false, kdim, cout, p, T::one(), weight, dyn_, T::zero(), dxn);
            } else {
                T::gemm(true, false, kdim, cout, p, T::one(), weight, dyn_, T::zero(), &mut dcol);
                col2im(&dcol, g, k, dxn);
            }
        }
    }
    need_dx.then_some(dx)
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` in place by the sign of the forward output.
pub fn relu_backward_inplace<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (g, &o) in dy.iter_mut().zip(y) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Max pooling with window = stride = `f`. Returns the output and, per output
/// element, the flat index of the winning input element.
pub fn maxpool_forward<T: Scalar>(x: &[T], g: Geom, f: [usize; 3]) -> (Vec<T>, Vec<u32>) {
    let o = g.scaled_down(f);
    let mut out = Vec::with_capacity(o.len());
    let mut idx = Vec::with_capacity(o.len());
    let p_in = g.spatial();
    for nc in 0..g.n * g.c {
        let base = nc * p_in;
        for z in 0..o.d {
            for y in 0..o.h {
                for xo in 0..o.w {
                    let mut best = T::neg_infinity();
                    let mut best_i = base;
                    for a in 0..f[0] {
                        for b in 0..f[1] {
                            for e in 0..f[2] {
                                let i = base + ((z * f[0] + a) * g.h + y * f[1] + b) * g.w + xo * f[2] + e;
                                if x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    idx.push(best_i as u32);
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool_backward<T: Scalar>(dy: &[T], idx: &[u32], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&g, &i) in dy.iter().zip(idx) {
        dx[i as usize] += g;
    }
    dx
}

// Source coordinates for doubling an axis with half-pixel centers, the
// convention of bilinear/trilinear resizing without corner alignment.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

// Treats `x` as `[outer, len, inner]` and doubles the middle axis.
fn upsample_axis<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let taps = upsample_taps(len);
    let mut out = vec![T::zero(); outer * 2 * len * inner];
    for o in 0..outer {
        let src = &x[o * len * inner..(o + 1) * len * inner];
        let dst = &mut out[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        for (j, &(i0, i1, l)) in taps.iter().enumerate() {
            let (w0, w1) = (T::lit(1.0 - l), T::lit(l));
            let d = &mut dst[j * inner..(j + 1) * inner];
            let s0 = &src[i0 * inner..(i0 + 1) * inner];
            let s1 = &src[i1 * inner..(i1 + 1) * inner];
            for ((v, &a), &b) in d.iter_mut().zip(s0).zip(s1) {
                *v = w0 * a + w1 * b;
            }
        }
    }
    out
}

fn upsample_axis_backward<T: Scalar>(dy: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let taps = upsample_taps(len);
    let mut dx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let src = &dy[o * 2 * len * inner..(o + 1) * 2 * len * inner];
        let dst = &mut dx[o * len * inner..(o + 1) * len * inner];
        for (j, &(i0, i1, l)) in taps.iter().enumerate() {
            let (w0, w1) = (T::lit(1.0 - l), T::lit(l));
            let s = &src[j * inner..(j + 1) * inner];
            for (t, &g) in s.iter().enumerate() {
                dst[i0 * inner + t] += w0 * g;
                dst[i1 * inner + t] += w1 * g;
            }
        }
    }
    dx
}

/// Separable linear upsampling by 2 along every axis whose factor is 2
/// (bilinear for planar input, trilinear for volumes).
pub fn upsample_forward<T: Scalar>(x: &[T], g: Geom, f: [usize; 3]) -> Vec<T> {
    let nc = g.n * g.c;
    let mut cur = x.to_vec();
    let (d, mut h, mut w) = (g.d, g.h, g.w);
    if f[2] == 2 {
        cur = upsample_axis(&cur, nc * d * h, w, 1);
        w *= 2;
    }
    if f[1] == 2 {
        cur = upsample_axis(&cur, nc * d, h, w);
        h *= 2;
    }
    if f[0] == 2 {
        cur = upsample_axis(&cur, nc, d, h * w);
    }
    cur
}

/// Adjoint of [`upsample_forward`]; `g` is the geometry of the forward input.
pub fn upsample_backward<T: Scalar>(dy: &[T], g: Geom, f: [usize; 3]) -> Vec<T> {
    let nc = g.n * g.c;
    let mut cur = dy.to_vec();
    let w2 = g.w * f[2];
    let h2 = g.h * f[1];
    if f[0] == 2 {
        cur = upsample_axis_backward(&cur, nc, g.d, h2 * w2);
    }
    if f[1] == 2 {
        cur = upsample_axis_backward(&cur, nc * g.d, g.h, w2);
    }
    if f[2] == 2 {
        cur = upsample_axis_backward(&cur, nc * g.d * g.h, g.w, 1);
    }
    cur
}

/// Channel concatenation `[a, b]` per sample.
pub fn concat_channels<T: Scalar>(a: &[T], ca: usize, b: &[T], cb: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * (ca + cb) * p);
    for i in 0..n {
        out.extend_from_slice(&a[i * ca * p..(i + 1) * ca * p]);
        out.extend_from_slice(&b[i * cb * p..(i + 1) * cb * p]);
    }
    out
}

pub fn split_channels<T: Scalar>(x: &[T], ca: usize, cb: usize, n: usize, p: usize) -> (Vec<T>, Vec<T>) {
    let mut a = Vec::with_capacity(n * ca * p);
    let mut b = Vec::with_capacity(n * cb * p);
    let stride = (ca + cb) * p;
    for i in 0..n {
        a.extend_from_slice(&x[i * stride..i * stride + ca * p]);
        b.extend_from_slice(&x[i * stride + ca * p..(i + 1) * stride]);
    }
    (a, b)
}

const NORM_EPS: f64 = 1e-5;

/// Parameter-free instance normalization in place; returns `1/sigma` per
/// `(n, c)` plane for the backward pass.
pub fn instance_norm_inplace<T: Scalar>(x: &mut [T], g: Geom) -> Vec<T> {
    let p = g.spatial();
    let pn = T::lit(p as f64);
    x.chunks_mut(p)
        .map(|plane| {
            let mean = plane.iter().copied().sum::<T>() / pn;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / pn;
            let inv = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv
        })
        .collect()
}

/// `y` is the normalized forward output.
pub fn instance_norm_backward_inplace<T: Scalar>(y: &[T], inv_std: &[T], g: Geom, dy: &mut [T]) {
    let p = g.spatial();
    let pn = T::lit(p as f64);
    for ((dplane, yplane), &inv) in dy.chunks_mut(p).zip(y.chunks(p)).zip(inv_std) {
        let mean_dy = dplane.iter().copied().sum::<T>() / pn;
        let mean_dyy = dplane.iter().zip(yplane).map(|(&a, &b)| a * b).sum::<T>() / pn;
        for (d, &yv) in dplane.iter_mut().zip(yplane) {
            *d = inv * (*d - mean_dy - yv * mean_dyy);
        }
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Softmax across channels for every voxel.
pub fn softmax_channels<T: Scalar>(z: &[T], g: Geom) -> Vec<T> {
    let p = g.spatial();
    let mut out = vec![T::zero(); z.len()];
    for n in 0..g.n {
        let base = n * g.c * p;
        for s in 0..p {
            let mut mx = T::neg_infinity();
            for c in 0..g.c {
                mx = mx.max(z[base + c * p + s]);
            }
            let mut total = T::zero();
            for c in 0..g.c {
                let e = (z[base + c * p + s] - mx).exp();
                out[base + c * p + s] = e;
                total += e;
            }
            for c in 0..g.c {
                out[base + c * p + s] /= total;
            }
        }
    }
    out
}

/// Logit gradient of a channel softmax given its output and the probability gradient.
pub fn softmax_backward<T: Scalar>(prob: &[T], dprob: &[T], g: Geom) -> Vec<T> {
    let p = g.spatial();
    let mut dz = vec![T::zero(); prob.len()];
    for n in 0..g.n {
        let base = n * g.c * p;
        for s in 0..p {
            let mut dot = T::zero();
            for c in 0..g.c {
                dot += prob[base + c * p + s] * dprob[base + c * p + s];
            }
            for c in 0..g.c {
                let i = base + c * p + s;
                dz[i] = prob[i] * (dprob[i] - dot);
            }
        }
    }
    dz
}
