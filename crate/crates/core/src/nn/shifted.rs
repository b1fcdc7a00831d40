//! Stride-1 "same" convolution on a zero-padded grid.
//!
//! On the padded grid every kernel tap is a constant linear offset, so the
//! convolution becomes a sum of shifted axpys over one contiguous index
//! range. This avoids the 27x im2col buffer, which makes small output
//! channel counts (dense-block growth rates) memory-bound.

use super::conv::ConvGeom;
use crate::scalar::Scalar;

/// Output channels computed together.
const OB: usize = 4;
/// Voxels per register tile.
const L: usize = 16;

/// Geometry of the padded grid shared by input, output and gradients.
pub(crate) struct Padded {
    spatial: [usize; 3],
    pad: [usize; 3],
    dims: [usize; 3],
    /// Channel stride in the padded buffers, including tail slack for
    /// whole tiles past the interior range.
    stride: usize,
    lo: usize,
    hi: usize,
    offsets: Vec<isize>,
}

impl Padded {
    pub(crate) fn applies(g: &ConvGeom) -> bool {
        g.stride == [1; 3] && g.kernel != [1; 3] && (0..3).all(|a| g.kernel[a] % 2 == 1 && g.pad[a] == g.kernel[a] / 2)
    }

    pub(crate) fn new(spatial: [usize; 3], g: &ConvGeom) -> Self {
        let pad = g.pad;
        let dims = [0, 1, 2].map(|a| spatial[a] + 2 * pad[a]);
        let plane = dims[0] * dims[1];
        let at = |x: usize, y: usize, z: usize| z * plane + y * dims[0] + x;
        let lo = at(pad[0], pad[1], pad[2]);
        let hi = at(pad[0] + spatial[0] - 1, pad[1] + spatial[1] - 1, pad[2] + spatial[2] - 1) + 1;
        let mut offsets = Vec::with_capacity(g.taps());
        for dz in 0..g.kernel[2] {
            for dy in 0..g.kernel[1] {
                for dx in 0..g.kernel[0] {
                    offsets.push(at(dx, dy, dz) as isize - lo as isize);
                }
            }
        }
        let stride = dims.iter().product::<usize>() + 2 * L;
        Self {
            spatial,
            pad,
            dims,
            stride,
            lo,
            hi,
            offsets,
        }
    }

    /// Copies `channels` unpadded channels into a zeroed padded buffer
    /// holding a whole number of channel tiles.
    pub(crate) fn pad<T: Scalar>(&self, x: &[T], channels: usize) -> Vec<T> {
        let [nx, ny, nz] = self.spatial;
        let mut out = vec![T::zero(); channels.div_ceil(OB) * OB * self.stride];
        for c in 0..channels {
            for z in 0..nz {
                for y in 0..ny {
                    let src = &x[((c * nz + z) * ny + y) * nx..][..nx];
                    let dst = c * self.stride + ((z + self.pad[2]) * self.dims[1] + y + self.pad[1]) * self.dims[0] + self.pad[0];
                    out[dst..dst + nx].copy_from_slice(src);
                }
            }
        }
        out
    }

    /// Adds (or copies) the interior of a padded buffer into `out`.
    pub(crate) fn crop_into<T: Scalar>(&self, padded: &[T], channels: usize, out: &mut [T], accumulate: bool) {
        let [nx, ny, nz] = self.spatial;
        for c in 0..channels {
            for z in 0..nz {
                for y in 0..ny {
                    let dst = &mut out[((c * nz + z) * ny + y) * nx..][..nx];
                    let s = c * self.stride + ((z + self.pad[2]) * self.dims[1] + y + self.pad[1]) * self.dims[0] + self.pad[0];
                    let src = &padded[s..s + nx];
                    if accumulate {
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    } else {
                        dst.copy_from_slice(src);
                    }
                }
            }
        }
    }

    pub(crate) fn stride(&self) -> usize {
        self.stride
    }

    /// Rearranges `w[o][i][t]` into tiles of [`OB`] output channels,
    /// optionally flipping taps and swapping the channel roles (for the
    /// input gradient).
    pub(crate) fn pack_weights<T: Scalar>(&self, w: &[T], cout: usize, cin: usize, transpose: bool) -> Vec<T> {
        let taps = self.offsets.len();
        let (o_n, i_n) = if transpose { (cin, cout) } else { (cout, cin) };
        let groups = o_n.div_ceil(OB);
        let mut out = vec![T::zero(); groups * i_n * taps * OB];
        for o in 0..o_n {
            for i in 0..i_n {
                for t in 0..taps {
                    let v = if transpose { w[(i * cin + o) * taps + (taps - 1 - t)] } else { w[(o * cin + i) * taps + t] };
                    out[(((o / OB) * i_n + i) * taps + t) * OB + o % OB] = v;
                }
            }
        }
        out
    }

    /// Writes `out[o][q] = sum_i sum_t wp(o, i, t) * input[i][q + offset_t]`
    /// over the interior index range; positions outside it are untouched.
    pub(crate) fn accumulate<T: Scalar>(&self, input: &[T], i_n: usize, wp: &[T], o_n: usize, out: &mut [T]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU features were just detected.
                unsafe { accumulate_avx2(self, input, i_n, wp, o_n, out) };
                return;
            }
        }
        accumulate_generic::<T, false>(self, input, i_n, wp, o_n, out);
    }

    /// `dw[o][i][t] += sum_q dy[o][q] * x[i][q + offset_t]`, with `dy` zero
    /// outside the interior.
    pub(crate) fn weight_grad<T: Scalar>(&self, dy: &[T], cout: usize, x: &[T], cin: usize, dw: &mut [T]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                // SAFETY: the required CPU features were just detected.
                unsafe { weight_grad_avx2(self, dy, cout, x, cin, dw) };
                return;
            }
        }
        weight_grad_generic::<T, false>(self, dy, cout, x, cin, dw);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn accumulate_avx2<T: Scalar>(p: &Padded, input: &[T], i_n: usize, wp: &[T], o_n: usize, out: &mut [T]) {
    accumulate_generic::<T, true>(p, input, i_n, wp, o_n, out)
}

#[inline(always)]
fn accumulate_generic<T: Scalar, const FMA: bool>(p: &Padded, input: &[T], i_n: usize, wp: &[T], o_n: usize, out: &mut [T]) {
    let taps = p.offsets.len();
    let stride = p.stride;
    let mut q0 = p.lo;
    while q0 < p.hi {
        let len = L.min(p.hi - q0);
        for g in 0..o_n.div_ceil(OB) {
            let mut acc = [[T::zero(); L]; OB];
            let wg = &wp[g * i_n * taps * OB..(g + 1) * i_n * taps * OB];
            for i in 0..i_n {
                let xi = &input[i * stride..(i + 1) * stride];
                let wi = &wg[i * taps * OB..(i + 1) * taps * OB];
                for (t, &off) in p.offsets.iter().enumerate() {
                    let base = (q0 as isize + off) as usize;
                    let x: &[T; L] = xi[base..base + L].try_into().expect("tile");
                    let w: &[T; OB] = wi[t * OB..(t + 1) * OB].try_into().expect("tile");
                    for o in 0..OB {
                        let wv = w[o];
                        for j in 0..L {
                            acc[o][j] = if FMA { wv.mul_add(x[j], acc[o][j]) } else { acc[o][j] + wv * x[j] };
                        }
                    }
                }
            }
            for (o, a) in acc.iter().enumerate() {
                let oc = g * OB + o;
                if oc < o_n {
                    out[oc * stride + q0..oc * stride + q0 + len].copy_from_slice(&a[..len]);
                }
            }
        }
        q0 += L;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_grad_avx2<T: Scalar>(p: &Padded, dy: &[T], cout: usize, x: &[T], cin: usize, dw: &mut [T]) {
    weight_grad_generic::<T, true>(p, dy, cout, x, cin, dw)
}

/// Voxels per weight-gradient block; keeps the `dy` rows in L1.
const BLOCK: usize = 2048;

#[inline(always)]
fn weight_grad_generic<T: Scalar, const FMA: bool>(p: &Padded, dy: &[T], cout: usize, x: &[T], cin: usize, dw: &mut [T]) {
    let taps = p.offsets.len();
    let stride = p.stride;
    assert!(dy.len() >= cout.div_ceil(OB) * OB * stride, "dy must be padded to whole channel tiles");
    let mut b0 = p.lo;
    while b0 < p.hi {
        let b1 = (b0 + BLOCK).min(p.hi);
        let tiles = (b1 - b0).div_ceil(L);
        for g in 0..cout.div_ceil(OB) {
            let dyg = &dy[g * OB * stride..(g + 1) * OB * stride];
            for i in 0..cin {
                let xi = &x[i * stride..(i + 1) * stride];
                for (t, &off) in p.offsets.iter().enumerate() {
                    let mut acc = [[T::zero(); L]; OB];
                    for k in 0..tiles {
                        let q = b0 + k * L;
                        let base = (q as isize + off) as usize;
                        let xv: &[T; L] = xi[base..base + L].try_into().expect("tile");
                        for (o, a) in acc.iter_mut().enumerate() {
                            let d: &[T; L] = dyg[o * stride + q..o * stride + q + L].try_into().expect("tile");
                            for j in 0..L {
                                a[j] = if FMA { d[j].mul_add(xv[j], a[j]) } else { a[j] + d[j] * xv[j] };
                            }
                        }
                    }
                    for (o, a) in acc.iter().enumerate() {
                        let oc = g * OB + o;
                        if oc < cout {
                            dw[(oc * cin + i) * taps + t] += a.iter().copied().sum::<T>();
                        }
                    }
                }
            }
        }
        b0 = b1;
    }
}
