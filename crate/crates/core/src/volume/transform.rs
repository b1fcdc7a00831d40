//! Intensity windowing and grid resampling.

use super::types::{voxel_index, LabelMask, Volume};
use crate::error::{Error, Result};
use crate::nn::ops::resize_forward;
use crate::nn::{Dims, Tensor};
use crate::scalar::Scalar;

/// Standard lung window in Hounsfield units.
pub const DEFAULT_WINDOW: (f64, f64) = (-1000.0, 400.0);

/// Clips to `[lo, hi]` and maps affinely onto `[0, 1]`.
pub fn normalize<T: Scalar>(v: &Volume<T>, lo: f64, hi: f64) -> Result<Volume<T>> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!("normalisation window needs lo < hi, got ({lo}, {hi})")));
    }
    let (lo_t, hi_t) = (T::lit(lo), T::lit(hi));
    let inv = T::one() / (hi_t - lo_t);
    let data = v.data().iter().map(|&x| (x.max(lo_t).min(hi_t) - lo_t) * inv).collect();
    Volume::new(data, v.shape(), v.spacing(), v.meta().clone())
}

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.contains(&0) {
        return Err(Error::InvalidArgument(format!("target dimensions must be >= 1, got {target:?}")));
    }
    Ok(())
}

/// Spacing that keeps `shape * spacing` fixed.
pub fn rescaled_spacing(shape: [usize; 3], spacing: [f64; 3], target: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| spacing[a] * shape[a] as f64 / target[a] as f64)
}

/// Trilinear resampling with voxel-centre alignment.
pub fn resample<T: Scalar>(v: &Volume<T>, target: [usize; 3]) -> Result<Volume<T>> {
    check_target(target)?;
    if target == v.shape() {
        return Ok(v.clone());
    }
    let t = Tensor::from_vec(Dims::new(1, 1, v.shape()), v.data().to_vec());
    let out = resize_forward(&t, target);
    Volume::new(out.into_vec(), target, rescaled_spacing(v.shape(), v.spacing(), target), v.meta().clone())
}

/// Source index of output sample `o` under nearest-neighbour mapping.
#[inline]
pub fn nearest_index(o: usize, n_in: usize, n_out: usize) -> usize {
    (((2 * o + 1) * n_in) / (2 * n_out)).min(n_in - 1)
}

/// Nearest-neighbour resampling of a flat x-fastest label grid.
pub fn resample_nearest(data: &[u8], shape: [usize; 3], target: [usize; 3]) -> Vec<u8> {
    let maps: [Vec<usize>; 3] = [0, 1, 2].map(|a| (0..target[a]).map(|o| nearest_index(o, shape[a], target[a])).collect());
    let mut out = Vec::with_capacity(target.iter().product());
    for &z in &maps[2] {
        for &y in &maps[1] {
            for &x in &maps[0] {
                out.push(data[voxel_index(shape, x, y, z)]);
            }
        }
    }
    out
}

pub fn resample_labels(m: &LabelMask, target: [usize; 3]) -> Result<LabelMask> {
    check_target(target)?;
    if target == m.shape() {
        return Ok(m.clone());
    }
    let data = resample_nearest(m.data(), m.shape(), target);
    LabelMask::new(data, target, rescaled_spacing(m.shape(), m.spacing(), target), m.meta().clone())
}
