//! Dataset split, case preparation and batch assembly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dims, Tensor};
use crate::scalar::Scalar;
use crate::volume::{load_mask, load_volume, normalize, resample, resample_labels, CaseEntry, Manifest, ScanMetadata, DEFAULT_WINDOW};

/// Deterministic shuffled split into `(train, val)`. Both keep manifest
/// order. With two or more cases each side gets at least one.
pub fn split_dataset(manifest: &Manifest, val_fraction: f64, seed: u64) -> Result<(Vec<CaseEntry>, Vec<CaseEntry>)> {
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty manifest".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n = manifest.len();
    let n_val = if n < 2 { 0 } else { ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1) };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (c, v) in manifest.cases.iter().zip(is_val) {
        if v {
            val.push(c.clone());
        } else {
            train.push(c.clone());
        }
    }
    Ok((train, val))
}

/// A case normalised to `[0, 1]` and resampled to the network grid.
#[derive(Debug, Clone)]
pub struct PreparedCase<T> {
    pub case_id: String,
    pub input: Vec<T>,
    pub labels: Vec<u8>,
    pub shape: [usize; 3],
    pub meta: ScanMetadata,
}

pub fn prepare_case<T: Scalar>(manifest: &Manifest, entry: &CaseEntry, target: [usize; 3]) -> Result<PreparedCase<T>> {
    let vol = load_volume::<T>(&manifest.volume_path(entry))?;
    let mask = load_mask(&manifest.mask_path(entry))?;
    if vol.shape() != mask.shape() {
        return Err(Error::ShapeMismatch(format!(
            "case {}: volume {:?} vs mask {:?}",
            entry.case_id,
            vol.shape(),
            mask.shape()
        )));
    }
    let vol = resample(&normalize(&vol, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?, target)?;
    let mask = resample_labels(&mask, target)?;
    Ok(PreparedCase {
        case_id: entry.case_id.clone(),
        input: vol.into_data(),
        labels: mask.into_data(),
        shape: target,
        meta: entry.metadata.clone(),
    })
}

pub fn prepare_cases<T: Scalar>(manifest: &Manifest, entries: &[CaseEntry], target: [usize; 3]) -> Result<Vec<PreparedCase<T>>> {
    entries.iter().map(|e| prepare_case(manifest, e, target)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    /// Whole volumes.
    Volume3d,
    /// Axial slices containing at least one lobe voxel.
    Slices2d,
}

/// Network input plus full-resolution labels for each item.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub labels: Vec<Vec<u8>>,
    /// `(case index, slice)` of each item; the slice is `None` for volumes.
    pub sources: Vec<(usize, Option<usize>)>,
}

impl<T: Scalar> Batch<T> {
    pub fn spatial(&self) -> [usize; 3] {
        self.input.dims().spatial
    }
}

fn slice_has_lobe(labels: &[u8], shape: [usize; 3], z: usize) -> bool {
    let plane = shape[0] * shape[1];
    labels[z * plane..(z + 1) * plane].iter().any(|&l| l != 0)
}

/// Splits cases into batches. With `shuffle = Some(seed)` the volumes or
/// slices are shuffled before batching.
pub fn make_batches<T: Scalar>(cases: &[PreparedCase<T>], mode: BatchMode, batch_size: usize, shuffle: Option<u64>) -> Result<Vec<Batch<T>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut units: Vec<(usize, Option<usize>)> = match mode {
        BatchMode::Volume3d => (0..cases.len()).map(|i| (i, None)).collect(),
        BatchMode::Slices2d => cases
            .iter()
            .enumerate()
            .flat_map(|(i, c)| (0..c.shape[2]).filter(|&z| slice_has_lobe(&c.labels, c.shape, z)).map(move |z| (i, Some(z))))
            .collect(),
    };
    if let Some(seed) = shuffle {
        units.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    units
        .chunks(batch_size)
        .map(|chunk| {
            let shape = cases[chunk[0].0].shape;
            let spatial = match mode {
                BatchMode::Volume3d => shape,
                BatchMode::Slices2d => [shape[0], shape[1], 1],
            };
            let per: usize = spatial.iter().product();
            let mut data = Vec::with_capacity(chunk.len() * per);
            let mut labels = Vec::with_capacity(chunk.len());
            for &(i, z) in chunk {
                let c = &cases[i];
                if c.shape != shape {
                    return Err(Error::ShapeMismatch(format!("case {} has shape {:?}, batch expects {:?}", c.case_id, c.shape, shape)));
                }
                let range = match z {
                    Some(z) => z * per..(z + 1) * per,
                    None => 0..per,
                };
                data.extend_from_slice(&c.input[range.clone()]);
                labels.push(c.labels[range].to_vec());
            }
            Ok(Batch {
                input: Tensor::from_vec(Dims::new(chunk.len(), 1, spatial), data),
                labels,
                sources: chunk.to_vec(),
            })
        })
        .collect()
}
