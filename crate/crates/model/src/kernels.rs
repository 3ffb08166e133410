//! Forward and backward kernels behind the graph ops.

use crate::tensor::{gemm, Float, MatRef, Tensor};

/// Upper bound on the number of elements in one im2col buffer.
const MAX_COL_ELEMS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn square(k: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeom { kh: k, kw: k, stride, pad, dilation }
    }

    /// Output extent of a convolution over `input` samples, `None` if the window does not fit.
    pub fn out_extent(&self, input: usize, k: usize) -> Option<usize> {
        let eff = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.pad;
        if padded < eff {
            None
        } else {
            Some((padded - eff) / self.stride + 1)
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((self.out_extent(h, self.kh)?, self.out_extent(w, self.kw)?))
    }

    /// Output extent of the transposed convolution.
    pub fn transposed_extent(&self, input: usize, k: usize) -> Option<usize> {
        let full = (input - 1) * self.stride + self.dilation * (k - 1) + 1;
        full.checked_sub(2 * self.pad).filter(|&v| v > 0)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Geometry of one image and the output grid it is unfolded onto.
#[derive(Clone, Copy)]
struct Unfold {
    c: usize,
    h: usize,
    w: usize,
    ow: usize,
    g: ConvGeom,
}

impl Unfold {
    fn k(&self) -> usize {
        self.c * self.g.kh * self.g.kw
    }

    fn src(&self, o: usize, i: usize, extent: usize) -> Option<usize> {
        let p = (o * self.g.stride + i * self.g.dilation) as isize - self.g.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }

    /// Columns for output rows `row0..row0 + rows` into `col` (K × rows·ow).
    fn im2col<T: Float>(&self, img: &[T], row0: usize, rows: usize, col: &mut [T]) {
        let p = rows * self.ow;
        let mut r = 0;
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.g.kh {
                for j in 0..self.g.kw {
                    let dst = &mut col[r * p..(r + 1) * p];
                    for oy in 0..rows {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(row0 + oy, i, self.h) {
                            None => line.fill(T::zero()),
                            Some(y) => {
                                let srow = &plane[y * self.w..(y + 1) * self.w];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.src(ox, j, self.w) {
                                        Some(x) => srow[x],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-add columns back into `img`.
    fn col2im<T: Float>(&self, col: &[T], row0: usize, rows: usize, img: &mut [T]) {
        let p = rows * self.ow;
        let mut r = 0;
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.g.kh {
                for j in 0..self.g.kw {
                    let src = &col[r * p..(r + 1) * p];
                    for oy in 0..rows {
                        if let Some(y) = self.src(row0 + oy, i, self.h) {
                            let line = &src[oy * self.ow..(oy + 1) * self.ow];
                            let drow = &mut plane[y * self.w..(y + 1) * self.w];
                            for (ox, &v) in line.iter().enumerate() {
                                if let Some(x) = self.src(ox, j, self.w) {
                                    drow[x] += v;
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    fn chunk_rows(&self, oh: usize) -> usize {
        (MAX_COL_ELEMS / (self.k() * self.ow).max(1)).clamp(1, oh.max(1))
    }
}

fn row_chunks(total: usize, step: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..total).step_by(step).map(move |r| (r, step.min(total - r)))
}

/// `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [1, Cout, 1, 1]`.
pub fn conv2d<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
    assert_eq!((kh, kw), (g.kh, g.kw), "conv2d: kernel size mismatch");
    let (oh, ow) = g
        .out_hw(h, wd)
        .unwrap_or_else(|| panic!("conv2d: kernel does not fit a {h}x{wd} input"));
    let u = Unfold { c: cin, h, w: wd, ow, g };
    let k = u.k();
    let plane = oh * ow;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let step = u.chunk_rows(oh);
    let mut col = vec![T::zero(); k * step * ow];
    for s in 0..n {
        let img = x.sample(s);
        let dst = out.sample_mut(s);
        if g.is_pointwise() {
            gemm(cout, k, plane, T::one(), MatRef::new(w.data(), k, 1), MatRef::new(img, plane, 1), T::zero(), dst, plane, 1);
        } else {
            for (r0, rows) in row_chunks(oh, step) {
                let p = rows * ow;
                u.im2col(img, r0, rows, &mut col[..k * p]);
                gemm(
                    cout,
                    k,
                    p,
                    T::one(),
                    MatRef::new(w.data(), k, 1),
                    MatRef::new(&col[..k * p], p, 1),
                    T::zero(),
                    &mut dst[r0 * ow..],
                    plane,
                    1,
                );
            }
        }
        if let Some(b) = b {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Per-output-channel sums of `gout` as a `[1, C, 1, 1]` tensor.
pub fn channel_sums<T: Float>(gout: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = gout.shape();
    let mut db = Tensor::zeros([1, c, 1, 1]);
    for s in 0..n {
        for (ch, chunk) in gout.sample(s).chunks(h * w).enumerate() {
            db.data_mut()[ch] += chunk.iter().copied().sum::<T>();
        }
    }
    db
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let cout = w.n();
    let [_, _, oh, ow] = gout.shape();
    let u = Unfold { c: cin, h, w: wd, ow, g };
    let k = u.k();
    let plane = oh * ow;
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| Tensor::zeros(w.shape()));
    let step = u.chunk_rows(oh);
    let mut col = vec![T::zero(); k * step * ow];
    for s in 0..n {
        let img = x.sample(s);
        let go = gout.sample(s);
        if g.is_pointwise() {
            if let Some(dw) = dw.as_mut() {
                gemm(cout, plane, k, T::one(), MatRef::new(go, plane, 1), MatRef::new(img, 1, plane), T::one(), dw.data_mut(), k, 1);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(k, cout, plane, T::one(), MatRef::new(w.data(), 1, k), MatRef::new(go, plane, 1), T::zero(), dx.sample_mut(s), plane, 1);
            }
            continue;
        }
        for (r0, rows) in row_chunks(oh, step) {
            let p = rows * ow;
            let go_chunk = &go[r0 * ow..];
            if let Some(dw) = dw.as_mut() {
                u.im2col(img, r0, rows, &mut col[..k * p]);
                gemm(cout, p, k, T::one(), MatRef::new(go_chunk, plane, 1), MatRef::new(&col[..k * p], 1, p), T::one(), dw.data_mut(), k, 1);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(k, cout, p, T::one(), MatRef::new(w.data(), 1, k), MatRef::new(go_chunk, plane, 1), T::zero(), &mut col[..k * p], p, 1);
                u.col2im(&col[..k * p], r0, rows, dx.sample_mut(s));
            }
        }
    }
    ConvGrads { dx, dw, db: need[2].then(|| channel_sums(gout)) }
}

/// `x: [N, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`.
pub fn conv_transpose2d<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape();
    let [wcin, cout, kh, kw] = w.shape();
    assert_eq!(cin, wcin, "conv_transpose2d: input has {cin} channels, weight expects {wcin}");
    assert_eq!((kh, kw), (g.kh, g.kw), "conv_transpose2d: kernel size mismatch");
    let oh = g.transposed_extent(h, kh).expect("conv_transpose2d: empty output");
    let ow = g.transposed_extent(wd, kw).expect("conv_transpose2d: empty output");
    // The output image is unfolded onto the input grid.
    let u = Unfold { c: cout, h: oh, w: ow, ow: wd, g };
    let k = u.k();
    let plane_in = h * wd;
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let step = u.chunk_rows(h);
    let mut col = vec![T::zero(); k * step * wd];
    for s in 0..n {
        let img = x.sample(s);
        for (r0, rows) in row_chunks(h, step) {
            let p = rows * wd;
            gemm(k, cin, p, T::one(), MatRef::new(w.data(), 1, k), MatRef::new(&img[r0 * wd..], plane_in, 1), T::zero(), &mut col[..k * p], p, 1);
            u.col2im(&col[..k * p], r0, rows, out.sample_mut(s));
        }
        if let Some(b) = b {
            for (co, chunk) in out.sample_mut(s).chunks_mut(oh * ow).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeom,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, oh, ow] = gout.shape();
    let u = Unfold { c: cout, h: oh, w: ow, ow: wd, g };
    let k = u.k();
    let plane_in = h * wd;
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut dw = need[1].then(|| Tensor::zeros(w.shape()));
    let step = u.chunk_rows(h);
    let mut col = vec![T::zero(); k * step * wd];
    for s in 0..n {
        let img = x.sample(s);
        for (r0, rows) in row_chunks(h, step) {
            let p = rows * wd;
            u.im2col(gout.sample(s), r0, rows, &mut col[..k * p]);
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.sample_mut(s)[r0 * wd..];
                gemm(cin, k, p, T::one(), MatRef::new(w.data(), k, 1), MatRef::new(&col[..k * p], p, 1), T::zero(), dst, plane_in, 1);
            }
            if let Some(dw) = dw.as_mut() {
                gemm(cin, p, k, T::one(), MatRef::new(&img[r0 * wd..], plane_in, 1), MatRef::new(&col[..k * p], 1, p), T::one(), dw.data_mut(), k, 1);
            }
        }
    }
    ConvGrads { dx, dw, db: need[2].then(|| channel_sums(gout)) }
}

/// Saved statistics of a group-norm forward pass.
pub struct GroupNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn group_norm<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: T,
) -> (Tensor<T>, GroupNormCache<T>) {
    let [n, c, h, w] = x.shape();
    assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
    let gsize = (c / groups) * h * w;
    let plane = h * w;
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(n * groups);
    let m = T::from_f64(gsize as f64);
    for s in 0..n {
        for gi in 0..groups {
            let off = s * c * plane + gi * gsize;
            let seg = &x.data()[off..off + gsize];
            let mean = seg.iter().copied().sum::<T>() / m;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (i, &v) in seg.iter().enumerate() {
                let ch = gi * (c / groups) + i / plane;
                let xh = (v - mean) * inv;
                xhat.data_mut()[off + i] = xh;
                out.data_mut()[off + i] = xh * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    (out, GroupNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Float>(
    cache: &GroupNormCache<T>,
    gamma: &Tensor<T>,
    gout: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = gout.shape();
    let plane = h * w;
    let cpg = c / groups;
    let gsize = cpg * plane;
    let m = T::from_f64(gsize as f64);
    let mut dx = Tensor::zeros(gout.shape());
    let mut dgamma = Tensor::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor::zeros([1, c, 1, 1]);
    let mut dxhat = vec![T::zero(); gsize];
    for s in 0..n {
        for gi in 0..groups {
            let off = s * c * plane + gi * gsize;
            let go = &gout.data()[off..off + gsize];
            let xh = &cache.xhat.data()[off..off + gsize];
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for i in 0..gsize {
                let ch = gi * cpg + i / plane;
                dgamma.data_mut()[ch] += go[i] * xh[i];
                dbeta.data_mut()[ch] += go[i];
                let d = go[i] * gamma.data()[ch];
                dxhat[i] = d;
                sum_d += d;
                sum_dx += d * xh[i];
            }
            let inv = cache.inv_std[s * groups + gi];
            let dst = &mut dx.data_mut()[off..off + gsize];
            for i in 0..gsize {
                dst[i] = inv / m * (m * dxhat[i] - sum_d - xh[i] * sum_dx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Non-overlapping `k×k` average pooling.
pub fn avg_pool<T: Float>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
    let (oh, ow) = (h / k, w / k);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let scale = T::one() / T::from_f64((k * k) as f64);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / k) * ow + xx / k] += src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

pub fn avg_pool_backward<T: Float>(gout: &Tensor<T>, k: usize) -> Tensor<T> {
    let [n, c, oh, ow] = gout.shape();
    let (h, w) = (oh * k, ow * k);
    let scale = T::one() / T::from_f64((k * k) as f64);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        let src = &gout.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / k) * ow + xx / k] * scale;
            }
        }
    }
    dx
}

/// Separable "valid" filter applied to every channel: output shrinks by `len - 1`.
pub fn separable_filter<T: Float>(x: &Tensor<T>, taps: &[T]) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let k = taps.len();
    assert!(h >= k && w >= k, "separable_filter: {h}x{w} smaller than window {k}");
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..ow {
                let row = &src[y * w + xx..y * w + xx + k];
                tmp[y * ow + xx] = row.iter().zip(taps).map(|(&a, &b)| a * b).sum();
            }
        }
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = (0..k).map(|i| tmp[(y + i) * ow + xx] * taps[i]).sum();
            }
        }
    }
    out
}

pub fn separable_filter_backward<T: Float>(gout: &Tensor<T>, taps: &[T]) -> Tensor<T> {
    let [n, c, oh, ow] = gout.shape();
    let k = taps.len();
    let (h, w) = (oh + k - 1, ow + k - 1);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..n * c {
        let go = &gout.data()[p * oh * ow..(p + 1) * oh * ow];
        tmp.fill(T::zero());
        for y in 0..oh {
            for i in 0..k {
                for xx in 0..ow {
                    tmp[(y + i) * ow + xx] += go[y * ow + xx] * taps[i];
                }
            }
        }
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..ow {
                let g = tmp[y * ow + xx];
                for (j, &t) in taps.iter().enumerate() {
                    dst[y * w + xx + j] += g * t;
                }
            }
        }
    }
    dx
}

/// Source indices and weights for half-pixel-centred bilinear resampling along one axis.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn resize_bilinear<T: Float>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + xx] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Float>(gout: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, oh, ow] = gout.shape();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        let go = &gout.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let g = go[y * ow + xx];
                dst[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += g * (T::one() - fy) * fx;
                dst[y1 * w + x0] += g * fy * (T::one() - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let cout = w.n();
        let (oh, ow) = g.out_hw(h, wd).unwrap();
        Tensor::from_fn([n, cout, oh, ow], |idx| {
            let ox = idx % ow;
            let oy = (idx / ow) % oh;
            let co = (idx / (ow * oh)) % cout;
            let s = idx / (ow * oh * cout);
            let mut acc = 0.0;
            for ci in 0..cin {
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let y = (oy * g.stride + i * g.dilation) as isize - g.pad as isize;
                        let xx = (ox * g.stride + j * g.dilation) as isize - g.pad as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                            acc += x.at(s, ci, y as usize, xx as usize) * w.at(co, ci, i, j);
                        }
                    }
                }
            }
            acc
        })
    }

    fn ramp(shape: [usize; 4], a: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 * a).sin() * 1.7).fract())
    }

    #[test]
    fn conv_matches_direct_summation() {
        for g in [
            ConvGeom::square(3, 1, 1, 1),
            ConvGeom::square(4, 2, 1, 1),
            ConvGeom::square(3, 1, 2, 2),
            ConvGeom::square(1, 1, 0, 1),
            ConvGeom::square(3, 1, 0, 1),
        ] {
            let x = ramp([2, 3, 9, 8], 0.37);
            let w = ramp([4, 3, g.kh, g.kw], 0.91);
            let got = conv2d(&x, &w, None, g);
            let want = naive_conv(&x, &w, g);
            assert!(got.max_abs_diff(&want) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn discriminator_arithmetic_reaches_fourteen() {
        let s2 = ConvGeom::square(4, 2, 1, 1);
        let mut n = 256;
        for _ in 0..4 {
            n = s2.out_extent(n, 4).unwrap();
        }
        n = ConvGeom::square(3, 1, 1, 1).out_extent(n, 3).unwrap();
        n = ConvGeom::square(3, 1, 0, 1).out_extent(n, 3).unwrap();
        assert_eq!(n, 14);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for the same weights.
        let g = ConvGeom::square(4, 2, 1, 1);
        let x = ramp([1, 3, 8, 8], 0.13);
        let w = ramp([5, 3, 4, 4], 0.71);
        let cx = conv2d(&x, &w, None, g);
        let y = ramp(cx.shape(), 0.29);
        // Transposed weights are laid out [Cin_t = 5, Cout_t = 3, k, k].
        let ty = conv_transpose2d(&y, &w, None, g);
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn area_pool_preserves_mean() {
        let x = ramp([1, 2, 8, 8], 0.5);
        let p = avg_pool(&x, 4);
        assert!((p.mean() - x.mean()).abs() < 1e-12);
        let block = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(avg_pool(&block, 2).item(), 0.5);
    }

    #[test]
    fn bilinear_resize_of_constant_is_constant() {
        let x = Tensor::<f64>::full([1, 1, 4, 4], 0.25);
        let y = resize_bilinear(&x, 32, 32);
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn filter_is_adjoint_of_its_backward() {
        let taps = [0.2, 0.5, 0.3];
        let x = ramp([1, 2, 7, 6], 0.4);
        let fx = separable_filter(&x, &taps);
        let y = ramp(fx.shape(), 0.8);
        let by = separable_filter_backward(&y, &taps);
        let lhs: f64 = fx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(by.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
