//! Forward and backward kernels for the layers the U-Net is assembled from.
//!
//! Every kernel works on one `N×C×H×W` tensor and flat parameter slices. Backward
//! kernels accumulate (`+=`) into parameter gradients and return the input gradient.

use super::tensor::Tensor;
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;

/// Output columns `lo..hi` whose source column `x + dx` lies inside `0..w`.
#[inline]
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).min(w as isize).max(lo as isize) as usize;
    (lo.min(w), hi)
}

/// Unfold a `C×H×W` plane stack into `(C·k·k)×(H·W)` patches for a stride-1 `k×k` same-padded conv.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let (lo, hi) = valid_span(w, dx);
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let off = (lo as isize + dx) as usize;
                    dst[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let (lo, hi) = valid_span(w, dx);
                    let off = (lo as isize + dx) as usize;
                    for (d, &g) in dst[off..off + hi - lo].iter_mut().zip(&src[lo..hi]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Stride-1 same-padded convolution, weights `cout × (cin·k·k)`.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let hw = h * w;
    let kk = cin * k * k;
    let mut y = Tensor::zeros([n, cout, h, w]);
    let mut scratch = if k > 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
    for i in 0..n {
        let patches: &[T] = if k > 1 {
            im2col(x.item(i), cin, h, w, k, &mut scratch);
            &scratch
        } else {
            x.item(i)
        };
        let out = y.item_mut(i);
        for (co, row) in out.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        T::gemm(cout, kk, hw, T::one(), weight, kk as isize, 1, patches, hw as isize, 1, T::one(), out, hw as isize, 1);
    }
    y
}

/// Backward of [`conv_forward`]; patches are re-unfolded from `x` rather than kept.
pub fn conv_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &[T],
    k: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [n, cin, h, w] = x.shape();
    let cout = dy.channels();
    let hw = h * w;
    let kk = cin * k * k;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut patches = if k > 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
    let mut dcols = if need_dx && k > 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
    for i in 0..n {
        let g = dy.item(i);
        for (co, row) in g.chunks_exact(hw).enumerate() {
            dbias[co] += row.iter().copied().sum::<T>();
        }
        let cols: &[T] = if k > 1 {
            im2col(x.item(i), cin, h, w, k, &mut patches);
            &patches
        } else {
            x.item(i)
        };
        // dW += dY · patchesᵀ
        T::gemm(cout, hw, kk, T::one(), g, hw as isize, 1, cols, 1, hw as isize, T::one(), dweight, kk as isize, 1);
        if let Some(dx) = dx.as_mut() {
            if k > 1 {
                // dcols = Wᵀ · dY
                T::gemm(kk, cout, hw, T::one(), weight, 1, kk as isize, g, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                col2im(&dcols, cin, h, w, k, dx.item_mut(i));
            } else {
                T::gemm(kk, cout, hw, T::one(), weight, 1, kk as isize, g, hw as isize, 1, T::zero(), dx.item_mut(i), hw as isize, 1);
            }
        }
    }
    dx
}

/// 2×2 stride-2 transposed convolution, weights `cin × (cout·4)`.
pub fn upconv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros([n, cout, oh, ow]);
    let mut tmp = vec![T::zero(); cout * 4 * hw];
    for i in 0..n {
        let c4 = cout * 4;
        T::gemm(c4, cin, hw, T::one(), weight, 1, c4 as isize, x.item(i), hw as isize, 1, T::zero(), &mut tmp, hw as isize, 1);
        let out = y.item_mut(i);
        for co in 0..cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let src = &tmp[(co * 4 + d) * hw..][..hw];
                for yy in 0..h {
                    for xx in 0..w {
                        plane[(2 * yy + dy) * ow + 2 * xx + dx] = src[yy * w + xx] + bias[co];
                    }
                }
            }
        }
    }
    y
}

pub fn upconv_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let cout = dy.channels();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let c4 = cout * 4;
    let mut dx = Tensor::zeros(x.shape());
    let mut dtmp = vec![T::zero(); c4 * hw];
    for i in 0..n {
        let g = dy.item(i);
        for co in 0..cout {
            let plane = &g[co * oh * ow..(co + 1) * oh * ow];
            dbias[co] += plane.iter().copied().sum::<T>();
            for d in 0..4 {
                let (ddy, ddx) = (d / 2, d % 2);
                let dst = &mut dtmp[(co * 4 + d) * hw..][..hw];
                for yy in 0..h {
                    for xx in 0..w {
                        dst[yy * w + xx] = plane[(2 * yy + ddy) * ow + 2 * xx + ddx];
                    }
                }
            }
        }
        // dW[cin, c4] += x · dtmpᵀ
        T::gemm(cin, hw, c4, T::one(), x.item(i), hw as isize, 1, &dtmp, 1, hw as isize, T::one(), dweight, c4 as isize, 1);
        // dx = W · dtmp
        T::gemm(cin, c4, hw, T::one(), weight, c4 as isize, 1, &dtmp, hw as isize, 1, T::zero(), dx.item_mut(i), hw as isize, 1);
    }
    dx
}

/// Per-channel batch statistics kept for the backward pass and the running-stat update.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch normalisation with statistics over `N×H×W`.
///
/// With `running = Some((mean, var))` the given statistics are used and no cache is produced.
pub fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (Tensor<T>, Option<BnCache<T>>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let m = T::from_usize(n * hw).unwrap();
    let eps = T::from_f64_lossy(BN_EPS);
    let mut y = Tensor::zeros(x.shape());
    match running {
        Some((rm, rv)) => {
            for i in 0..n {
                let src = x.item(i);
                let dst = y.item_mut(i);
                for ch in 0..c {
                    let scale = gamma[ch] / (rv[ch] + eps).sqrt();
                    let shift = beta[ch] - rm[ch] * scale;
                    for (d, &s) in dst[ch * hw..(ch + 1) * hw].iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
                        *d = s * scale + shift;
                    }
                }
            }
            (y, None)
        }
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for i in 0..n {
                let src = x.item(i);
                for ch in 0..c {
                    mean[ch] += src[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
                }
            }
            for v in &mut mean {
                *v /= m;
            }
            for i in 0..n {
                let src = x.item(i);
                for ch in 0..c {
                    let mu = mean[ch];
                    var[ch] += src[ch * hw..(ch + 1) * hw].iter().map(|&s| (s - mu) * (s - mu)).sum::<T>();
                }
            }
            for v in &mut var {
                *v /= m;
            }
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = Tensor::zeros(x.shape());
            for i in 0..n {
                let src = x.item(i);
                let xh = xhat.item_mut(i);
                for ch in 0..c {
                    for (d, &s) in xh[ch * hw..(ch + 1) * hw].iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
                        *d = (s - mean[ch]) * inv_std[ch];
                    }
                }
                let dst = y.item_mut(i);
                for ch in 0..c {
                    for (d, &s) in dst[ch * hw..(ch + 1) * hw].iter_mut().zip(&xh[ch * hw..(ch + 1) * hw]) {
                        *d = gamma[ch] * s + beta[ch];
                    }
                }
            }
            (y, Some(BnCache { xhat, inv_std, mean, var }))
        }
    }
}

pub fn bn_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let m = T::from_usize(n * hw).unwrap();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for i in 0..n {
        let g = dy.item(i);
        let xh = cache.xhat.item(i);
        for ch in 0..c {
            let r = ch * hw..(ch + 1) * hw;
            sum_dy[ch] += g[r.clone()].iter().copied().sum::<T>();
            sum_dy_xhat[ch] += g[r.clone()].iter().zip(&xh[r]).map(|(&a, &b)| a * b).sum::<T>();
        }
    }
    for ch in 0..c {
        dgamma[ch] += sum_dy_xhat[ch];
        dbeta[ch] += sum_dy[ch];
    }
    let mut dx = Tensor::zeros(dy.shape());
    for i in 0..n {
        let g = dy.item(i);
        let xh = cache.xhat.item(i);
        let d = dx.item_mut(i);
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / m;
            let (a, b) = (sum_dy[ch], sum_dy_xhat[ch]);
            let r = ch * hw..(ch + 1) * hw;
            for ((o, &gy), &xv) in d[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                *o = k * (m * gy - a - xv * b);
            }
        }
    }
    dx
}

pub fn relu_forward<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.as_mut_slice() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Scalar>(dy: &mut Tensor<T>, y: &Tensor<T>) {
    for (g, &o) in dy.as_mut_slice().iter_mut().zip(y.as_slice()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling; also returns the winning position (0..4) of each output.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u8; n * c * oh * ow];
    let src = x.as_slice();
    let dst = y.as_mut_slice();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for yy in 0..oh {
            for xx in 0..ow {
                let mut best = plane[2 * yy * w + 2 * xx];
                let mut bi = 0u8;
                for d in 1..4u8 {
                    let v = plane[(2 * yy + (d / 2) as usize) * w + 2 * xx + (d % 2) as usize];
                    if v > best {
                        best = v;
                        bi = d;
                    }
                }
                let o = p * oh * ow + yy * ow + xx;
                dst[o] = best;
                arg[o] = bi;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u8], in_shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(in_shape);
    let g = dy.as_slice();
    let d = dx.as_mut_slice();
    for p in 0..n * c {
        for yy in 0..oh {
            for xx in 0..ow {
                let o = p * oh * ow + yy * ow + xx;
                let a = arg[o] as usize;
                d[p * h * w + (2 * yy + a / 2) * w + 2 * xx + a % 2] += g[o];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    let cb = b.channels();
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    let split = ca * h * w;
    for i in 0..n {
        let dst = out.item_mut(i);
        dst[..split].copy_from_slice(a.item(i));
        dst[split..].copy_from_slice(b.item(i));
    }
    out
}

pub fn split<T: Scalar>(x: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let mut a = Tensor::zeros([n, ca, h, w]);
    let mut b = Tensor::zeros([n, c - ca, h, w]);
    let cut = ca * h * w;
    for i in 0..n {
        let src = x.item(i);
        a.item_mut(i).copy_from_slice(&src[..cut]);
        b.item_mut(i).copy_from_slice(&src[cut..]);
    }
    (a, b)
}

pub fn add_assign<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    for (d, &s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += s;
    }
}
