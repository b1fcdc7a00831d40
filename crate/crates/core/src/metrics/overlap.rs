use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::LabelMask;

pub const N_LOBES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LobeDice {
    /// RUL, RML, RLL, LUL, LLL.
    pub lobes: [f64; N_LOBES],
    /// Unweighted mean of the five lobes.
    pub overall: f64,
}

/// Per-label counts `(|P|, |T|, |P & T|)` for labels 0..=5.
fn counts(pred: &[u8], truth: &[u8]) -> Result<[[usize; 3]; 6]> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!("prediction has {} voxels, truth {}", pred.len(), truth.len())));
    }
    let mut c = [[0usize; 3]; 6];
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p as usize, t as usize);
        if p >= 6 || t >= 6 {
            return Err(Error::InvalidLabel(p.max(t) as u8));
        }
        c[p][0] += 1;
        c[t][1] += 1;
        if p == t {
            c[p][2] += 1;
        }
    }
    Ok(c)
}

/// Dice `2|P & T| / (|P| + |T|)` for lobes 1..=5 on raw label grids; a
/// lobe absent from both scores 1.
pub fn dice_labels(pred: &[u8], truth: &[u8]) -> Result<LobeDice> {
    let c = counts(pred, truth)?;
    let lobes: [f64; N_LOBES] = std::array::from_fn(|i| {
        let [p, t, both] = c[i + 1];
        if p + t == 0 {
            1.0
        } else {
            2.0 * both as f64 / (p + t) as f64
        }
    });
    Ok(LobeDice {
        lobes,
        overall: lobes.iter().sum::<f64>() / N_LOBES as f64,
    })
}

/// Jaccard `|P & T| / |P | T|` per lobe with the same empty convention.
pub fn jaccard_labels(pred: &[u8], truth: &[u8]) -> Result<[f64; N_LOBES]> {
    let c = counts(pred, truth)?;
    Ok(std::array::from_fn(|i| {
        let [p, t, both] = c[i + 1];
        if p + t == 0 {
            1.0
        } else {
            both as f64 / (p + t - both) as f64
        }
    }))
}

pub fn dice_per_lobe(pred: &LabelMask, truth: &LabelMask) -> Result<LobeDice> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape())));
    }
    dice_labels(pred.data(), truth.data())
}

pub fn jaccard_to_dice(j: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&j) {
        return Err(Error::InvalidArgument(format!("jaccard score must lie in [0, 1], got {j}")));
    }
    Ok(2.0 * j / (1.0 + j))
}

pub fn dice_to_jaccard(d: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::InvalidArgument(format!("dice score must lie in [0, 1], got {d}")));
    }
    Ok(d / (2.0 - d))
}
