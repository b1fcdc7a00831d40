//! Strided, zero-padded 3-D convolution via im2col + GEMM, and the
//! non-overlapping transposed convolution used for U-Net up-sampling.
//!
//! Weights are `[c_out][c_in][kz][ky][kx]` for convolutions and
//! `[c_in][c_out][kz][ky][kx]` for transposed convolutions, stored in a
//! [`Tensor`] whose batch axis is the leading weight axis.

use super::shifted::Padded;
use super::tensor::{Dims, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Stride-1 convolution that preserves spatial size (odd kernels).
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            kernel,
            stride: [1; 3],
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn strided(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            kernel,
            stride,
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn out_spatial(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`,
/// i.e. outputs `o` with `0 <= o*s - p + k < n`.
#[inline]
fn valid_range(n: usize, out: usize, s: usize, p: usize, k: usize) -> (usize, usize) {
    // o*s + k >= p  and  o*s + k < n + p
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], cin: usize, inp: [usize; 3], g: &ConvGeom, out: [usize; 3], col: &mut [T]) {
    let [nx, ny, nz] = inp;
    let [ox, oy, oz] = out;
    let [kx, ky, kz] = g.kernel;
    let p = ox * oy * oz;
    let vin = nx * ny * nz;
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * vin..(c + 1) * vin];
        for dz in 0..kz {
            let (z0, z1) = valid_range(nz, oz, g.stride[2], g.pad[2], dz);
            for dy in 0..ky {
                let (y0, y1) = valid_range(ny, oy, g.stride[1], g.pad[1], dy);
                for dx in 0..kx {
                    let (x0, x1) = valid_range(nx, ox, g.stride[0], g.pad[0], dx);
                    let dst = &mut col[row * p..(row + 1) * p];
                    row += 1;
                    if z0 >= z1 || y0 >= y1 || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    for oz_i in 0..oz {
                        let plane = &mut dst[oz_i * ox * oy..(oz_i + 1) * ox * oy];
                        if oz_i < z0 || oz_i >= z1 {
                            plane.fill(T::zero());
                            continue;
                        }
                        let iz = oz_i * g.stride[2] + dz - g.pad[2];
                        for oy_i in 0..oy {
                            let line = &mut plane[oy_i * ox..(oy_i + 1) * ox];
                            if oy_i < y0 || oy_i >= y1 {
                                line.fill(T::zero());
                                continue;
                            }
                            let iy = oy_i * g.stride[1] + dy - g.pad[1];
                            let src = &xc[(iz * ny + iy) * nx..(iz * ny + iy + 1) * nx];
                            line[..x0].fill(T::zero());
                            line[x1..].fill(T::zero());
                            let ix0 = x0 * g.stride[0] + dx - g.pad[0];
                            if g.stride[0] == 1 {
                                line[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for (j, o) in line[x0..x1].iter_mut().enumerate() {
                                    *o = src[ix0 + j * g.stride[0]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], cin: usize, inp: [usize; 3], g: &ConvGeom, out: [usize; 3], dx_out: &mut [T]) {
    let [nx, ny, nz] = inp;
    let [ox, oy, oz] = out;
    let [kx, ky, kz] = g.kernel;
    let p = ox * oy * oz;
    let vin = nx * ny * nz;
    let mut row = 0;
    for c in 0..cin {
        let xc = &mut dx_out[c * vin..(c + 1) * vin];
        for dz in 0..kz {
            let (z0, z1) = valid_range(nz, oz, g.stride[2], g.pad[2], dz);
            for dy in 0..ky {
                let (y0, y1) = valid_range(ny, oy, g.stride[1], g.pad[1], dy);
                for dx in 0..kx {
                    let (x0, x1) = valid_range(nx, ox, g.stride[0], g.pad[0], dx);
                    let src = &col[row * p..(row + 1) * p];
                    row += 1;
                    if z0 >= z1 || y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    for oz_i in z0..z1 {
                        let iz = oz_i * g.stride[2] + dz - g.pad[2];
                        for oy_i in y0..y1 {
                            let iy = oy_i * g.stride[1] + dy - g.pad[1];
                            let line = &src[(oz_i * oy + oy_i) * ox..(oz_i * oy + oy_i + 1) * ox];
                            let dst = &mut xc[(iz * ny + iy) * nx..(iz * ny + iy + 1) * nx];
                            let ix0 = x0 * g.stride[0] + dx - g.pad[0];
                            for (j, &v) in line[x0..x1].iter().enumerate() {
                                dst[ix0 + j * g.stride[0]] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let xd = x.dims();
    let wd = w.dims();
    assert_eq!(wd.c, xd.c, "conv: weight expects {} input channels, got {}", wd.c, xd.c);
    assert_eq!(wd.spatial, g.kernel);
    let out_sp = g.out_spatial(xd.spatial).expect("conv: kernel larger than padded input");
    let cout = wd.n;
    let ck = xd.c * g.taps();
    let p: usize = out_sp.iter().product();
    let mut y = Tensor::zeros(Dims::new(xd.n, cout, out_sp));
    if Padded::applies(g) {
        let pd = Padded::new(xd.spatial, g);
        let wp = pd.pack_weights(w.data(), cout, xd.c, false);
        let mut yp = vec![T::zero(); cout * pd.stride()];
        for n in 0..xd.n {
            let xp = pd.pad(x.item(n), xd.c);
            pd.accumulate(&xp, xd.c, &wp, cout, &mut yp);
            pd.crop_into(&yp, cout, y.item_mut(n), false);
        }
        add_bias(&mut y, bias);
        return y;
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * p] };
    for n in 0..xd.n {
        let cols: &[T] = if g.is_pointwise() {
            x.item(n)
        } else {
            im2col(x.item(n), xd.c, xd.spatial, g, out_sp, &mut col);
            &col
        };
        T::gemm(cout, ck, p, T::one(), w.data(), ck as isize, 1, cols, p as isize, 1, T::zero(), y.item_mut(n), p as isize, 1);
    }
    add_bias(&mut y, bias);
    y
}

fn add_bias<T: Scalar>(y: &mut Tensor<T>, bias: Option<&Tensor<T>>) {
    let Some(b) = bias else { return };
    let d = y.dims();
    for n in 0..d.n {
        for (o, &bo) in b.data().iter().enumerate() {
            y.channel_mut(n, o).iter_mut().for_each(|v| *v += bo);
        }
    }
}

pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    g: &ConvGeom,
    dy: &Tensor<T>,
) -> ConvGrads<T> {
    let xd = x.dims();
    let wd = w.dims();
    let out_sp = dy.dims().spatial;
    let cout = wd.n;
    let ck = xd.c * g.taps();
    let p: usize = out_sp.iter().product();
    let mut dx = Tensor::zeros(xd);
    let mut dw = Tensor::zeros(wd);
    if Padded::applies(g) {
        let pd = Padded::new(xd.spatial, g);
        let wt = pd.pack_weights(w.data(), cout, xd.c, true);
        let mut dxp = vec![T::zero(); xd.c * pd.stride()];
        for n in 0..xd.n {
            let xp = pd.pad(x.item(n), xd.c);
            let dyp = pd.pad(dy.item(n), cout);
            pd.weight_grad(&dyp, cout, &xp, xd.c, dw.data_mut());
            pd.accumulate(&dyp, cout, &wt, xd.c, &mut dxp);
            pd.crop_into(&dxp, xd.c, dx.item_mut(n), false);
        }
        let db = has_bias.then(|| bias_grad(dy));
        return ConvGrads { dx, dw, db };
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * p] };
    let mut dcol = vec![T::zero(); ck * p];
    for n in 0..xd.n {
        let dyn_ = dy.item(n);
        let cols: &[T] = if g.is_pointwise() {
            x.item(n)
        } else {
            im2col(x.item(n), xd.c, xd.spatial, g, out_sp, &mut col);
            &col
        };
        // dW += dY * col^T
        T::gemm(cout, p, ck, T::one(), dyn_, p as isize, 1, cols, 1, p as isize, T::one(), dw.data_mut(), ck as isize, 1);
        // dcol = W^T * dY
        T::gemm(ck, cout, p, T::one(), w.data(), 1, ck as isize, dyn_, p as isize, 1, T::zero(), &mut dcol, p as isize, 1);
        if g.is_pointwise() {
            dx.item_mut(n).copy_from_slice(&dcol);
        } else {
            col2im(&dcol, xd.c, xd.spatial, g, out_sp, dx.item_mut(n));
        }
    }
    let db = has_bias.then(|| bias_grad(dy));
    ConvGrads { dx, dw, db }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let d = dy.dims();
    let mut db = Tensor::zeros(Dims::new(1, d.c, [1, 1, 1]));
    for n in 0..d.n {
        for c in 0..d.c {
            db.data_mut()[c] += dy.channel(n, c).iter().copied().sum::<T>();
        }
    }
    db
}

/// Transposed convolution whose stride equals its kernel, so output
/// windows never overlap: every input voxel expands into one
/// `kernel`-sized output block.
pub fn upconv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, kernel: [usize; 3]) -> Tensor<T> {
    let xd = x.dims();
    let wd = w.dims();
    assert_eq!(wd.n, xd.c);
    assert_eq!(wd.spatial, kernel);
    let cout = wd.c;
    let taps: usize = kernel.iter().product();
    let out_sp = [xd.spatial[0] * kernel[0], xd.spatial[1] * kernel[1], xd.spatial[2] * kernel[2]];
    let pin = xd.voxels();
    let mut y = Tensor::zeros(Dims::new(xd.n, cout, out_sp));
    let mut col = vec![T::zero(); cout * taps * pin];
    for n in 0..xd.n {
        // col[(co,t), p] = sum_ci W[ci,(co,t)] * x[ci,p]
        T::gemm(cout * taps, xd.c, pin, T::one(), w.data(), 1, (cout * taps) as isize, x.item(n), pin as isize, 1, T::zero(), &mut col, pin as isize, 1);
        let yn = y.item_mut(n);
        scatter_blocks(&col, cout, xd.spatial, kernel, yn);
        if let Some(b) = bias {
            let vout: usize = out_sp.iter().product();
            for (o, chunk) in yn.chunks_mut(vout).enumerate() {
                let bo = b.data()[o];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    y
}

/// Expands block-column layout `[(c, tap)][voxel_in]` into the volume.
fn scatter_blocks<T: Scalar>(col: &[T], channels: usize, inp: [usize; 3], kernel: [usize; 3], vol: &mut [T]) {
    let [nx, ny, nz] = inp;
    let [kx, ky, kz] = kernel;
    let (ox, oy) = (nx * kx, ny * ky);
    let vout = ox * oy * nz * kz;
    let pin = nx * ny * nz;
    let taps = kx * ky * kz;
    for c in 0..channels {
        let dst = &mut vol[c * vout..(c + 1) * vout];
        for t in 0..taps {
            let (dx, dy, dz) = (t % kx, (t / kx) % ky, t / (kx * ky));
            let src = &col[(c * taps + t) * pin..(c * taps + t + 1) * pin];
            for z in 0..nz {
                for y in 0..ny {
                    let o_base = ((z * kz + dz) * oy + (y * ky + dy)) * ox + dx;
                    let s_base = (z * ny + y) * nx;
                    for x in 0..nx {
                        dst[o_base + x * kx] = src[s_base + x];
                    }
                }
            }
        }
    }
}

fn gather_blocks<T: Scalar>(vol: &[T], channels: usize, inp: [usize; 3], kernel: [usize; 3], col: &mut [T]) {
    let [nx, ny, nz] = inp;
    let [kx, ky, kz] = kernel;
    let (ox, oy) = (nx * kx, ny * ky);
    let vout = ox * oy * nz * kz;
    let pin = nx * ny * nz;
    let taps = kx * ky * kz;
    for c in 0..channels {
        let src = &vol[c * vout..(c + 1) * vout];
        for t in 0..taps {
            let (dx, dy, dz) = (t % kx, (t / kx) % ky, t / (kx * ky));
            let dst = &mut col[(c * taps + t) * pin..(c * taps + t + 1) * pin];
            for z in 0..nz {
                for y in 0..ny {
                    let o_base = ((z * kz + dz) * oy + (y * ky + dy)) * ox + dx;
                    let s_base = (z * ny + y) * nx;
                    for x in 0..nx {
                        dst[s_base + x] = src[o_base + x * kx];
                    }
                }
            }
        }
    }
}

pub fn upconv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    kernel: [usize; 3],
    dy: &Tensor<T>,
) -> ConvGrads<T> {
    let xd = x.dims();
    let wd = w.dims();
    let cout = wd.c;
    let taps: usize = kernel.iter().product();
    let pin = xd.voxels();
    let ct = cout * taps;
    let mut dx = Tensor::zeros(xd);
    let mut dw = Tensor::zeros(wd);
    let mut dcol = vec![T::zero(); ct * pin];
    for n in 0..xd.n {
        gather_blocks(dy.item(n), cout, xd.spatial, kernel, &mut dcol);
        // dW[ci, j] += sum_p x[ci,p] * dcol[j,p]
        T::gemm(xd.c, pin, ct, T::one(), x.item(n), pin as isize, 1, &dcol, 1, pin as isize, T::one(), dw.data_mut(), ct as isize, 1);
        // dx[ci,p] = sum_j W[ci,j] * dcol[j,p]
        T::gemm(xd.c, ct, pin, T::one(), w.data(), ct as isize, 1, &dcol, pin as isize, 1, T::zero(), dx.item_mut(n), pin as isize, 1);
    }
    let db = has_bias.then(|| {
        let vout = dy.dims().voxels();
        let mut db = Tensor::zeros(Dims::new(1, cout, [1, 1, 1]));
        for n in 0..xd.n {
            for (o, chunk) in dy.item(n).chunks(vout).enumerate() {
                db.data_mut()[o] += chunk.iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}
