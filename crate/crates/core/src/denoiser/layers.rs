//! Forward and reverse-mode kernels for the network's building blocks.
//!
//! Backward functions accumulate (`+=`) into parameter gradients and return
//! the gradient with respect to the layer input.

use crate::tensor::{Feat, Real};

pub const NORM_EPS: f64 = 1e-5;

/// Lower a padded `k x k` same-size convolution input to a `(cin*k*k) x (h*w)` matrix.
fn im2col<F: Real>(x: &Feat<F>, k: usize) -> Vec<F> {
    let (h, w) = (x.h, x.w);
    let pad = (k / 2) as isize;
    let n = h * w;
    let mut col = vec![F::zero(); x.c * k * k * n];
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    for xx in x0..x1 {
                        dst[y * w + xx] = srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<F: Real>(col: &[F], k: usize, dx: &mut Feat<F>) {
    let (h, w) = (dx.h, dx.w);
    let pad = (k / 2) as isize;
    let n = h * w;
    for ci in 0..dx.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                let oy = ky as isize - pad;
                let ox = kx as isize - pad;
                let dst = dx.channel_mut(ci);
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                    for xx in x0..x1 {
                        dst[sy as usize * w + (xx as isize + ox) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
}

/// Same-padding stride-1 convolution. `weight` is `[cout][cin][k][k]`.
pub fn conv2d<F: Real>(x: &Feat<F>, weight: &[F], bias: &[F], cout: usize, k: usize) -> Feat<F> {
    let kk = x.c * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let n = x.plane();
    let mut out = Feat::zeros(cout, x.h, x.w);
    for (co, &b) in bias.iter().enumerate() {
        out.channel_mut(co).fill(b);
    }
    if k == 1 {
        F::gemm(cout, kk, n, F::one(), weight, (kk as isize, 1), &x.data, (n as isize, 1), F::one(), &mut out.data);
    } else {
        let col = im2col(x, k);
        F::gemm(cout, kk, n, F::one(), weight, (kk as isize, 1), &col, (n as isize, 1), F::one(), &mut out.data);
    }
    out
}

pub fn conv2d_backward<F: Real>(
    x: &Feat<F>,
    weight: &[F],
    cout: usize,
    k: usize,
    dout: &Feat<F>,
    dweight: &mut [F],
    dbias: &mut [F],
) -> Feat<F> {
    let kk = x.c * k * k;
    let n = x.plane();
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dout.channel(co).iter().copied().sum::<F>();
    }
    let mut dx = Feat::zeros(x.c, x.h, x.w);
    if k == 1 {
        // dW += dout * x^T ; dx = W^T * dout
        F::gemm(cout, n, kk, F::one(), &dout.data, (n as isize, 1), &x.data, (1, n as isize), F::one(), dweight);
        F::gemm(kk, cout, n, F::one(), weight, (1, kk as isize), &dout.data, (n as isize, 1), F::zero(), &mut dx.data);
    } else {
        let col = im2col(x, k);
        F::gemm(cout, n, kk, F::one(), &dout.data, (n as isize, 1), &col, (1, n as isize), F::one(), dweight);
        let mut dcol = vec![F::zero(); kk * n];
        F::gemm(kk, cout, n, F::one(), weight, (1, kk as isize), &dout.data, (n as isize, 1), F::zero(), &mut dcol);
        col2im_add(&dcol, k, &mut dx);
    }
    dx
}

pub struct NormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

pub fn group_norm<F: Real>(x: &Feat<F>, gamma: &[F], beta: &[F], groups: usize) -> (Feat<F>, NormCache<F>) {
    let per = x.c / groups;
    let m = per * x.plane();
    let eps = F::real(NORM_EPS);
    let count = F::from_usize(m).unwrap();
    let mut xhat = vec![F::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(groups);
    let mut out = Feat::zeros(x.c, x.h, x.w);
    for g in 0..groups {
        let span = g * m..(g + 1) * m;
        let xs = &x.data[span.clone()];
        let mean = xs.iter().copied().sum::<F>() / count;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / count;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (dst, &v) in xhat[span].iter_mut().zip(xs) {
            *dst = (v - mean) * is;
        }
    }
    let p = x.plane();
    for c in 0..x.c {
        let (ga, be) = (gamma[c], beta[c]);
        let src = &xhat[c * p..(c + 1) * p];
        for (o, &v) in out.channel_mut(c).iter_mut().zip(src) {
            *o = ga * v + be;
        }
    }
    (out, NormCache { xhat, inv_std })
}

pub fn group_norm_backward<F: Real>(
    cache: &NormCache<F>,
    gamma: &[F],
    groups: usize,
    dout: &Feat<F>,
    dgamma: &mut [F],
    dbeta: &mut [F],
) -> Feat<F> {
    let p = dout.plane();
    let per = dout.c / groups;
    let m = per * p;
    let count = F::from_usize(m).unwrap();
    let mut dxhat = vec![F::zero(); dout.data.len()];
    for c in 0..dout.c {
        let dy = dout.channel(c);
        let xh = &cache.xhat[c * p..(c + 1) * p];
        let mut sg = F::zero();
        let mut sb = F::zero();
        for (&d, &v) in dy.iter().zip(xh) {
            sg += d * v;
            sb += d;
        }
        dgamma[c] += sg;
        dbeta[c] += sb;
        for (dst, &d) in dxhat[c * p..(c + 1) * p].iter_mut().zip(dy) {
            *dst = d * gamma[c];
        }
    }
    let mut dx = Feat::zeros(dout.c, dout.h, dout.w);
    for g in 0..groups {
        let span = g * m..(g + 1) * m;
        let dxh = &dxhat[span.clone()];
        let xh = &cache.xhat[span.clone()];
        let mean_d = dxh.iter().copied().sum::<F>() / count;
        let mean_dx = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / count;
        let is = cache.inv_std[g];
        for ((dst, &a), &b) in dx.data[span].iter_mut().zip(dxh).zip(xh) {
            *dst = is * (a - mean_d - b * mean_dx);
        }
    }
    dx
}

#[inline]
fn sigmoid<F: Real>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

pub fn silu<F: Real>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_feat<F: Real>(x: &Feat<F>) -> Feat<F> {
    Feat { c: x.c, h: x.h, w: x.w, data: silu(&x.data) }
}

pub fn silu_backward<F: Real>(x: &[F], dout: &[F]) -> Vec<F> {
    x.iter()
        .zip(dout)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (F::one() + v * (F::one() - s))
        })
        .collect()
}

pub fn silu_backward_feat<F: Real>(x: &Feat<F>, dout: &Feat<F>) -> Feat<F> {
    Feat { c: x.c, h: x.h, w: x.w, data: silu_backward(&x.data, &dout.data) }
}

/// `y = W x + b`, `W` is `[dout][din]`.
pub fn dense<F: Real>(x: &[F], weight: &[F], bias: &[F]) -> Vec<F> {
    let din = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| b + weight[o * din..(o + 1) * din].iter().zip(x).map(|(&w, &v)| w * v).sum::<F>())
        .collect()
}

pub fn dense_backward<F: Real>(x: &[F], weight: &[F], dout: &[F], dweight: &mut [F], dbias: &mut [F]) -> Vec<F> {
    let din = x.len();
    let mut dx = vec![F::zero(); din];
    for (o, &d) in dout.iter().enumerate() {
        dbias[o] += d;
        let row = &weight[o * din..(o + 1) * din];
        let drow = &mut dweight[o * din..(o + 1) * din];
        for i in 0..din {
            drow[i] += d * x[i];
            dx[i] += d * row[i];
        }
    }
    dx
}

/// 2x2 average pooling.
pub fn avg_pool2<F: Real>(x: &Feat<F>) -> Feat<F> {
    let (h, w) = (x.h / 2, x.w / 2);
    let quarter = F::real(0.25);
    let mut out = Feat::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                let a = src[2 * i * x.w + 2 * j] + src[2 * i * x.w + 2 * j + 1];
                let b = src[(2 * i + 1) * x.w + 2 * j] + src[(2 * i + 1) * x.w + 2 * j + 1];
                dst[i * w + j] = (a + b) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<F: Real>(dout: &Feat<F>) -> Feat<F> {
    let (h, w) = (dout.h * 2, dout.w * 2);
    let quarter = F::real(0.25);
    let mut dx = Feat::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let src = dout.channel(c);
        let dst = dx.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / 2) * dout.w + j / 2] * quarter;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Real>(x: &Feat<F>) -> Feat<F> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Feat::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / 2) * x.w + j / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(dout: &Feat<F>) -> Feat<F> {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut dx = Feat::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let src = dout.channel(c);
        let dst = dx.channel_mut(c);
        for i in 0..dout.h {
            for j in 0..dout.w {
                dst[(i / 2) * w + j / 2] += src[i * dout.w + j];
            }
        }
    }
    dx
}

pub fn concat<F: Real>(a: &Feat<F>, b: &Feat<F>) -> Feat<F> {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat { c: a.c + b.c, h: a.h, w: a.w, data }
}

pub fn split_channels<F: Real>(x: Feat<F>, first: usize) -> (Feat<F>, Feat<F>) {
    let cut = first * x.plane();
    let mut data = x.data;
    let tail = data.split_off(cut);
    (Feat { c: first, h: x.h, w: x.w, data }, Feat { c: x.c - first, h: x.h, w: x.w, data: tail })
}
