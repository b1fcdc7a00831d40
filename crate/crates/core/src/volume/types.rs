use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const N_CLASSES: usize = 6;
pub const LOBE_NAMES: [&str; 5] = ["RUL", "RML", "RLL", "LUL", "LLL"];

/// Scanner manufacturer bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Vendor {
    GE,
    Philips,
    Siemens,
    Toshiba,
    Synthetic,
}

impl Vendor {
    pub const CLINICAL: [Vendor; 4] = [Vendor::GE, Vendor::Philips, Vendor::Siemens, Vendor::Toshiba];
}

/// Reconstruction kernel bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconKernel {
    Soft,
    Lung,
    Bone,
    Synthetic,
}

impl ReconKernel {
    pub const CLINICAL: [ReconKernel; 3] = [ReconKernel::Soft, ReconKernel::Lung, ReconKernel::Bone];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetadata {
    pub z_spacing: f64,
    pub vendor: Vendor,
    pub recon_kernel: ReconKernel,
    pub case_id: String,
}

impl ScanMetadata {
    pub fn synthetic(case_id: impl Into<String>, z_spacing: f64) -> Self {
        Self {
            z_spacing,
            vendor: Vendor::Synthetic,
            recon_kernel: ReconKernel::Synthetic,
            case_id: case_id.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.z_spacing > 0.0 && self.z_spacing.is_finite()) {
            return Err(Error::InvalidArgument(format!("z_spacing must be positive, got {}", self.z_spacing)));
        }
        if self.case_id.is_empty() {
            return Err(Error::InvalidArgument("case_id must be non-empty".into()));
        }
        Ok(())
    }
}

pub fn validate_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| *s > 0.0 && s.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidSpacing(spacing))
    }
}

fn validate_shape(shape: [usize; 3], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::ShapeMismatch(format!("every dimension must be >= 1, got {shape:?}")));
    }
    if shape.iter().product::<usize>() != len {
        return Err(Error::ShapeMismatch(format!("shape {shape:?} does not match {len} voxels")));
    }
    Ok(())
}

/// Flat index of voxel `(x, y, z)` in an x-fastest grid.
#[inline]
pub fn voxel_index(shape: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

/// CT intensity grid (Hounsfield units until normalised).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    data: Vec<T>,
    shape: [usize; 3],
    spacing: [f64; 3],
    meta: ScanMetadata,
}

impl<T: Scalar> Volume<T> {
    pub fn new(data: Vec<T>, shape: [usize; 3], spacing: [f64; 3], meta: ScanMetadata) -> Result<Self> {
        validate_shape(shape, data.len())?;
        validate_spacing(spacing)?;
        meta.validate()?;
        Ok(Self { data, shape, spacing, meta })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], meta: ScanMetadata, value: T) -> Result<Self> {
        Self::new(vec![value; shape.iter().product()], shape, spacing, meta)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn meta(&self) -> &ScanMetadata {
        &self.meta
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[voxel_index(self.shape, x, y, z)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Lobe label grid: 0 background, 1 RUL, 2 RML, 3 RLL, 4 LUL, 5 LLL.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    data: Vec<u8>,
    shape: [usize; 3],
    spacing: [f64; 3],
    meta: ScanMetadata,
}

impl LabelMask {
    pub fn new(data: Vec<u8>, shape: [usize; 3], spacing: [f64; 3], meta: ScanMetadata) -> Result<Self> {
        validate_shape(shape, data.len())?;
        validate_spacing(spacing)?;
        meta.validate()?;
        if let Some(&bad) = data.iter().find(|&&l| l as usize >= N_CLASSES) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self { data, shape, spacing, meta })
    }

    /// Same labels on a grid with different spacing and metadata.
    pub fn with_geometry(self, spacing: [f64; 3], meta: ScanMetadata) -> Result<Self> {
        Self::new(self.data, self.shape, spacing, meta)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn meta(&self) -> &ScanMetadata {
        &self.meta
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[voxel_index(self.shape, x, y, z)]
    }

    /// Voxel count per label 0..=5.
    pub fn histogram(&self) -> [usize; N_CLASSES] {
        let mut h = [0; N_CLASSES];
        for &l in &self.data {
            h[l as usize] += 1;
        }
        h
    }

    /// Volume of one voxel in millilitres (spacing is in mm).
    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    pub fn same_grid<T: Scalar>(&self, v: &Volume<T>) -> bool {
        self.shape == v.shape && self.spacing == v.spacing
    }
}
