//! Label prediction for whole volumes (3D networks) or slice stacks (2D).

use crate::error::{Error, Result};
use crate::metrics::{dice_labels, LobeDice, N_LOBES};
use crate::networks::{argmax_labels, Mode, Network, Parameters};
use crate::nn::{Dims, Tensor};
use crate::scalar::Scalar;
use crate::volume::{load_volume, normalize, resample, resample_nearest, LabelMask, Manifest, CaseEntry, Volume, DEFAULT_WINDOW};

/// Slices per forward pass when a 2D network walks a volume.
const SLICE_CHUNK: usize = 16;

/// Label maps (one per pathway, coarsest first) for a normalised input on
/// the network grid, up-sampled to `shape`.
pub fn predict_grid<T: Scalar>(net: &Network, params: &Parameters<T>, input: &[T], shape: [usize; 3]) -> Result<Vec<Vec<u8>>> {
    let voxels: usize = shape.iter().product();
    if input.len() != voxels {
        return Err(Error::ShapeMismatch(format!("input has {} voxels, grid {shape:?} needs {voxels}", input.len())));
    }
    if !net.spec().kind.is_2d() {
        let x = Tensor::from_vec(Dims::new(1, 1, shape), input.to_vec());
        return net
            .forward(params, &x, Mode::Infer)?
            .iter()
            .map(|p| Ok(resample_nearest(&argmax_labels(p, 0)?, p.dims().spatial, shape)))
            .collect();
    }
    let plane = [shape[0], shape[1], 1];
    let per = shape[0] * shape[1];
    let mut out = vec![vec![0u8; voxels]; net.heads().len()];
    let zs: Vec<usize> = (0..shape[2]).collect();
    for chunk in zs.chunks(SLICE_CHUNK) {
        let data = chunk.iter().flat_map(|&z| input[z * per..(z + 1) * per].iter().copied()).collect();
        let x = Tensor::from_vec(Dims::new(chunk.len(), 1, plane), data);
        for (h, p) in net.forward(params, &x, Mode::Infer)?.iter().enumerate() {
            for (i, &z) in chunk.iter().enumerate() {
                let labels = resample_nearest(&argmax_labels(p, i)?, p.dims().spatial, plane);
                out[h][z * per..(z + 1) * per].copy_from_slice(&labels);
            }
        }
    }
    Ok(out)
}

/// The grid a volume of `shape` is resampled to before inference: the
/// network input for 3D models, the in-plane size with the original slice
/// count for slice-wise models.
pub fn inference_grid(net: &Network, shape: [usize; 3]) -> [usize; 3] {
    let s = net.spec().spatial();
    if net.spec().kind.is_2d() {
        [s[0], s[1], shape[2]]
    } else {
        s
    }
}

/// Predicts per-pathway label masks on the volume's own grid and geometry.
pub fn predict_volume<T: Scalar>(net: &Network, params: &Parameters<T>, vol: &Volume<T>) -> Result<Vec<LabelMask>> {
    let grid = inference_grid(net, vol.shape());
    let x = resample(&normalize(vol, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1)?, grid)?;
    predict_grid(net, params, x.data(), grid)?
        .into_iter()
        .map(|labels| LabelMask::new(resample_nearest(&labels, grid, vol.shape()), vol.shape(), vol.spacing(), vol.meta().clone()))
        .collect()
}

pub fn predict_case<T: Scalar>(net: &Network, params: &Parameters<T>, manifest: &Manifest, entry: &CaseEntry) -> Result<Vec<LabelMask>> {
    let vol = load_volume::<T>(&manifest.volume_path(entry))?;
    let vol = Volume::new(vol.data().to_vec(), vol.shape(), vol.spacing(), entry.metadata.clone())?;
    predict_volume(net, params, &vol)
}

/// Mean of per-case lobe Dice scores.
pub fn mean_dice(scores: &[LobeDice]) -> Result<LobeDice> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("cannot average an empty score list".into()));
    }
    let n = scores.len() as f64;
    let lobes: [f64; N_LOBES] = std::array::from_fn(|l| scores.iter().map(|s| s.lobes[l]).sum::<f64>() / n);
    Ok(LobeDice {
        lobes,
        overall: scores.iter().map(|s| s.overall).sum::<f64>() / n,
    })
}

/// Per-pathway Dice of `predictions` against `truth`.
pub fn pathway_dice(predictions: &[Vec<u8>], truth: &[u8]) -> Result<Vec<LobeDice>> {
    predictions.iter().map(|p| dice_labels(p, truth)).collect()
}
