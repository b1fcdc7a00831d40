//! CT volumes, lobe masks, their file formats and the dataset manifest.

mod io;
mod manifest;
pub mod nifti;
mod transform;
mod types;

pub use io::{load_mask, load_volume, save_mask, save_volume, sidecar_path, Format, Sidecar};
pub use manifest::{CaseEntry, Manifest};
pub use transform::{nearest_index, normalize, resample, resample_labels, resample_nearest, rescaled_spacing, DEFAULT_WINDOW};
pub use types::{validate_spacing, voxel_index, LabelMask, ReconKernel, ScanMetadata, Vendor, Volume, LOBE_NAMES, N_CLASSES};
