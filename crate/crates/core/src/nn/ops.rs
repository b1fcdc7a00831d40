//! Forward and reverse kernels for the non-convolutional layers.

use super::tensor::{Dims, Tensor};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics computed during a training-mode pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

fn channel_iter<T: Scalar>(x: &Tensor<T>, c: usize) -> impl Iterator<Item = &T> {
    (0..x.dims().n).flat_map(move |n| x.channel(n, c).iter())
}

pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> BatchStats<T> {
    let d = x.dims();
    let count = d.n * d.voxels();
    let inv = T::one() / T::lit(count as f64);
    let mut mean = Vec::with_capacity(d.c);
    let mut var = Vec::with_capacity(d.c);
    for c in 0..d.c {
        let m = channel_iter(x, c).copied().sum::<T>() * inv;
        let v = channel_iter(x, c).map(|&v| (v - m) * (v - m)).sum::<T>() * inv;
        mean.push(m);
        var.push(v);
    }
    BatchStats { mean, var, count }
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel.
pub fn batchnorm_apply<T: Scalar>(x: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let d = x.dims();
    let mut y = Tensor::zeros(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let (m, s, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
            let scale = g * s;
            let shift = b - m * scale;
            for (o, &v) in y.channel_mut(n, c).iter_mut().zip(x.channel(n, c)) {
                *o = v * scale + shift;
            }
        }
    }
    y
}

pub fn inv_std<T: Scalar>(var: &[T]) -> Vec<T> {
    let eps = T::lit(BN_EPS);
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the mean and variance
/// are functions of `x` and contribute to `dx`; otherwise they are frozen.
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = x.dims();
    let m = T::lit((d.n * d.voxels()) as f64);
    let mut dx = Tensor::zeros(d);
    let mut dgamma = vec![T::zero(); d.c];
    let mut dbeta = vec![T::zero(); d.c];
    for c in 0..d.c {
        let (mu, s) = (mean[c], inv_std[c]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..d.n {
            for (&g, &v) in dy.channel(n, c).iter().zip(x.channel(n, c)) {
                sum_dy += g;
                sum_dy_xhat += g * (v - mu) * s;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let k = gamma[c] * s;
        for n in 0..d.n {
            let xs = x.channel(n, c);
            let gs = dy.channel(n, c);
            let out = dx.channel_mut(n, c);
            if batch_stats {
                let a = sum_dy / m;
                let b = sum_dy_xhat / m;
                for ((o, &g), &v) in out.iter_mut().zip(gs).zip(xs) {
                    let xhat = (v - mu) * s;
                    *o = k * (g - a - xhat * b);
                }
            } else {
                for (o, &g) in out.iter_mut().zip(gs) {
                    *o = k * g;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn prelu_forward<T: Scalar>(x: &Tensor<T>, slope: &[T]) -> Tensor<T> {
    let d = x.dims();
    let mut y = Tensor::zeros(d);
    for n in 0..d.n {
        for c in 0..d.c {
            let a = slope[c];
            for (o, &v) in y.channel_mut(n, c).iter_mut().zip(x.channel(n, c)) {
                *o = if v > T::zero() { v } else { a * v };
            }
        }
    }
    y
}

pub fn prelu_backward<T: Scalar>(x: &Tensor<T>, slope: &[T], dy: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let d = x.dims();
    let mut dx = Tensor::zeros(d);
    let mut da = vec![T::zero(); d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let a = slope[c];
            let mut acc = T::zero();
            for ((o, &g), &v) in dx.channel_mut(n, c).iter_mut().zip(dy.channel(n, c)).zip(x.channel(n, c)) {
                if v > T::zero() {
                    *o = g;
                } else {
                    *o = a * g;
                    acc += v * g;
                }
            }
            da[c] += acc;
        }
    }
    (dx, da)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (o, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *o = T::zero();
        }
    }
    dx
}

/// Softmax over the channel axis at every voxel.
pub fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.dims();
    let v = d.voxels();
    let mut y = Tensor::zeros(d);
    for n in 0..d.n {
        let xi = x.item(n);
        let yi = y.item_mut(n);
        for p in 0..v {
            let mut mx = T::neg_infinity();
            for c in 0..d.c {
                mx = mx.max(xi[c * v + p]);
            }
            let mut z = T::zero();
            for c in 0..d.c {
                let e = (xi[c * v + p] - mx).exp();
                yi[c * v + p] = e;
                z += e;
            }
            let inv = T::one() / z;
            for c in 0..d.c {
                yi[c * v + p] *= inv;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = y.dims();
    let v = d.voxels();
    let mut dx = Tensor::zeros(d);
    for n in 0..d.n {
        let yi = y.item(n);
        let gi = dy.item(n);
        let di = dx.item_mut(n);
        for p in 0..v {
            let mut dot = T::zero();
            for c in 0..d.c {
                dot += yi[c * v + p] * gi[c * v + p];
            }
            for c in 0..d.c {
                di[c * v + p] = yi[c * v + p] * (gi[c * v + p] - dot);
            }
        }
    }
    dx
}

pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let first = xs[0].dims();
    let c: usize = xs.iter().map(|t| t.dims().c).sum();
    for t in xs {
        assert_eq!(t.dims().n, first.n, "concat: batch mismatch");
        assert_eq!(t.dims().spatial, first.spatial, "concat: spatial mismatch");
    }
    let d = first.with_channels(c);
    let mut y = Vec::with_capacity(d.len());
    for n in 0..first.n {
        for t in xs {
            y.extend_from_slice(t.item(n));
        }
    }
    Tensor::from_vec(d, y)
}

pub fn split_channels<T: Scalar>(dy: &Tensor<T>, parts: &[usize]) -> Vec<Tensor<T>> {
    let d = dy.dims();
    let v = d.voxels();
    let mut out: Vec<Tensor<T>> = parts.iter().map(|&c| Tensor::zeros(d.with_channels(c))).collect();
    for n in 0..d.n {
        let src = dy.item(n);
        let mut off = 0;
        for (t, &c) in out.iter_mut().zip(parts) {
            t.item_mut(n).copy_from_slice(&src[off..off + c * v]);
            off += c * v;
        }
    }
    out
}

fn pooled(sp: [usize; 3], f: [usize; 3]) -> [usize; 3] {
    [sp[0] / f[0], sp[1] / f[1], sp[2] / f[2]]
}

pub fn avgpool_forward<T: Scalar>(x: &Tensor<T>, f: [usize; 3]) -> Tensor<T> {
    let d = x.dims();
    let [nx, ny, _] = d.spatial;
    let out = pooled(d.spatial, f);
    let inv = T::one() / T::lit((f[0] * f[1] * f[2]) as f64);
    let mut y = Tensor::zeros(d.with_spatial(out));
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.channel(n, c);
            let dst = y.channel_mut(n, c);
            for oz in 0..out[2] {
                for oy in 0..out[1] {
                    for ox in 0..out[0] {
                        let mut acc = T::zero();
                        for dz in 0..f[2] {
                            for dy in 0..f[1] {
                                let row = ((oz * f[2] + dz) * ny + oy * f[1] + dy) * nx + ox * f[0];
                                for dx in 0..f[0] {
                                    acc += src[row + dx];
                                }
                            }
                        }
                        dst[(oz * out[1] + oy) * out[0] + ox] = acc * inv;
                    }
                }
            }
        }
    }
    y
}

pub fn avgpool_backward<T: Scalar>(in_dims: Dims, f: [usize; 3], dy: &Tensor<T>) -> Tensor<T> {
    let [nx, ny, _] = in_dims.spatial;
    let out = dy.dims().spatial;
    let inv = T::one() / T::lit((f[0] * f[1] * f[2]) as f64);
    let mut dx = Tensor::zeros(in_dims);
    for n in 0..in_dims.n {
        for c in 0..in_dims.c {
            let src = dy.channel(n, c);
            let dst = dx.channel_mut(n, c);
            for oz in 0..out[2] {
                for oy in 0..out[1] {
                    for ox in 0..out[0] {
                        let g = src[(oz * out[1] + oy) * out[0] + ox] * inv;
                        for dz in 0..f[2] {
                            for dy_ in 0..f[1] {
                                let row = ((oz * f[2] + dz) * ny + oy * f[1] + dy_) * nx + ox * f[0];
                                for dx_ in 0..f[0] {
                                    dst[row + dx_] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Max pooling; also returns the flat in-plane index of each winner.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, f: [usize; 3]) -> (Tensor<T>, Vec<u32>) {
    let d = x.dims();
    let [nx, ny, _] = d.spatial;
    let out = pooled(d.spatial, f);
    let mut y = Tensor::zeros(d.with_spatial(out));
    let mut arg = Vec::with_capacity(y.dims().len());
    for n in 0..d.n {
        for c in 0..d.c {
            let src = x.channel(n, c);
            let dst = y.channel_mut(n, c);
            for oz in 0..out[2] {
                for oy in 0..out[1] {
                    for ox in 0..out[0] {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for dz in 0..f[2] {
                            for dy in 0..f[1] {
                                let row = ((oz * f[2] + dz) * ny + oy * f[1] + dy) * nx + ox * f[0];
                                for dx in 0..f[0] {
                                    if src[row + dx] > best {
                                        best = src[row + dx];
                                        at = row + dx;
                                    }
                                }
                            }
                        }
                        dst[(oz * out[1] + oy) * out[0] + ox] = best;
                        arg.push(at as u32);
                    }
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Scalar>(in_dims: Dims, arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(in_dims);
    let vo = dy.dims().voxels();
    for n in 0..in_dims.n {
        for c in 0..in_dims.c {
            let g = dy.channel(n, c);
            let idx = &arg[(n * in_dims.c + c) * vo..(n * in_dims.c + c + 1) * vo];
            let dst = dx.channel_mut(n, c);
            for (&i, &v) in idx.iter().zip(g) {
                dst[i as usize] += v;
            }
        }
    }
    dx
}

/// Two-tap linear interpolation weights for one axis using voxel-centre
/// alignment: output sample `o` sits at source coordinate
/// `(o + 0.5) * n_in / n_out - 0.5`, clamped to the edge voxels.
pub fn linear_taps<T: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

fn axis_strides(sp: [usize; 3], axis: usize) -> (usize, usize, usize) {
    // (outer count, axis stride, inner count) for x-fastest layout
    match axis {
        0 => (sp[1] * sp[2], 1, 1),
        1 => (sp[2], sp[0], sp[0]),
        _ => (1, sp[0] * sp[1], sp[0] * sp[1]),
    }
}

/// Linear resampling along one axis for `planes` stacked volumes.
fn resize_axis<T: Scalar>(src: &[T], planes: usize, sp: [usize; 3], axis: usize, n_out: usize) -> (Vec<T>, [usize; 3]) {
    let mut osp = sp;
    osp[axis] = n_out;
    if n_out == sp[axis] {
        return (src.to_vec(), osp);
    }
    let taps = linear_taps::<T>(sp[axis], n_out);
    let (vin, vout) = (sp.iter().product::<usize>(), osp.iter().product::<usize>());
    let mut out = vec![T::zero(); planes * vout];
    let (outer, _, inner) = axis_strides(sp, axis);
    let (n_in, stride_in, stride_out) = (sp[axis], inner, inner);
    for p in 0..planes {
        let s = &src[p * vin..(p + 1) * vin];
        let d = &mut out[p * vout..(p + 1) * vout];
        for o in 0..outer {
            let (sb, db) = (o * n_in * inner, o * n_out * inner);
            for (k, &(i0, i1, w)) in taps.iter().enumerate() {
                let (r0, r1) = (sb + i0 * stride_in, sb + i1 * stride_in);
                let dr = db + k * stride_out;
                for j in 0..inner {
                    let a = s[r0 + j];
                    d[dr + j] = a + (s[r1 + j] - a) * w;
                }
            }
        }
    }
    (out, osp)
}

fn resize_axis_adjoint<T: Scalar>(g: &[T], planes: usize, sp_in: [usize; 3], axis: usize, n_out: usize) -> Vec<T> {
    let mut osp = sp_in;
    osp[axis] = n_out;
    if n_out == sp_in[axis] {
        return g.to_vec();
    }
    let taps = linear_taps::<T>(sp_in[axis], n_out);
    let (vin, vout) = (sp_in.iter().product::<usize>(), osp.iter().product::<usize>());
    let mut out = vec![T::zero(); planes * vin];
    let (outer, _, inner) = axis_strides(sp_in, axis);
    let n_in = sp_in[axis];
    for p in 0..planes {
        let s = &g[p * vout..(p + 1) * vout];
        let d = &mut out[p * vin..(p + 1) * vin];
        for o in 0..outer {
            let (sb, db) = (o * n_out * inner, o * n_in * inner);
            for (k, &(i0, i1, w)) in taps.iter().enumerate() {
                let sr = sb + k * inner;
                for j in 0..inner {
                    let v = s[sr + j];
                    d[db + i0 * inner + j] += v * (T::one() - w);
                    d[db + i1 * inner + j] += v * w;
                }
            }
        }
    }
    out
}

/// Separable trilinear resampling of every channel plane to `out`.
pub fn resize_forward<T: Scalar>(x: &Tensor<T>, out: [usize; 3]) -> Tensor<T> {
    let d = x.dims();
    let planes = d.n * d.c;
    let (a, sp) = resize_axis(x.data(), planes, d.spatial, 0, out[0]);
    let (b, sp) = resize_axis(&a, planes, sp, 1, out[1]);
    let (c, sp) = resize_axis(&b, planes, sp, 2, out[2]);
    Tensor::from_vec(d.with_spatial(sp), c)
}

pub fn resize_backward<T: Scalar>(in_dims: Dims, dy: &Tensor<T>) -> Tensor<T> {
    let planes = in_dims.n * in_dims.c;
    let out = dy.dims().spatial;
    let s0 = in_dims.spatial;
    let s1 = [out[0], s0[1], s0[2]];
    let s2 = [out[0], out[1], s0[2]];
    let g2 = resize_axis_adjoint(dy.data(), planes, s2, 2, out[2]);
    let g1 = resize_axis_adjoint(&g2, planes, s1, 1, out[1]);
    let g0 = resize_axis_adjoint(&g1, planes, s0, 0, out[0]);
    Tensor::from_vec(in_dims, g0)
}

/// Multiplies channel `c` of every batch item by `mask[c]`.
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let d = x.dims();
    let mut y = x.clone();
    for n in 0..d.n {
        for (c, &m) in mask.iter().enumerate() {
            y.channel_mut(n, c).iter_mut().for_each(|v| *v *= m);
        }
    }
    y
}
