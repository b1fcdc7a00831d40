//! Reading and writing volumes and masks.
//!
//! Two on-disk encodings are supported, selected by extension:
//! NIfTI-1 (`.nii`, `.nii.gz`) and raw little-endian arrays (`.raw`). Both
//! carry a JSON sidecar with the same stem holding the scan metadata; for
//! raw files the sidecar also holds shape, dtype and spacing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::nifti;
use super::types::{validate_spacing, LabelMask, ReconKernel, ScanMetadata, Vendor, Volume};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Nifti,
    Raw,
}

impl Format {
    pub fn of(path: &Path) -> Result<Self> {
        let s = path.to_string_lossy();
        if s.ends_with(".nii") || s.ends_with(".nii.gz") {
            Ok(Format::Nifti)
        } else if s.ends_with(".raw") {
            Ok(Format::Raw)
        } else {
            Err(Error::Unsupported(format!("unrecognised volume extension: {s}")))
        }
    }
}

/// Sidecar document written next to every volume file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    pub vendor: Vendor,
    pub recon_kernel: ReconKernel,
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_spacing: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name
        .strip_suffix(".nii.gz")
        .or_else(|| name.strip_suffix(".nii"))
        .or_else(|| name.strip_suffix(".raw"))
        .unwrap_or(&name);
    path.with_file_name(format!("{stem}.json"))
}

fn read_sidecar(path: &Path) -> Result<Option<Sidecar>> {
    let p = sidecar_path(path);
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map(Some).map_err(|e| Error::json(p.display().to_string(), e))
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let p = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::json("sidecar", e))?;
    text.push('\n');
    std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn metadata_from(sidecar: Option<&Sidecar>, path: &Path, spacing: [f64; 3]) -> ScanMetadata {
    match sidecar {
        Some(s) => ScanMetadata {
            z_spacing: s.z_spacing.unwrap_or(spacing[2]),
            vendor: s.vendor,
            recon_kernel: s.recon_kernel,
            case_id: s.case_id.clone(),
        },
        None => {
            let stem = sidecar_path(path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "case".into());
            ScanMetadata::synthetic(stem, spacing[2])
        }
    }
}

fn sidecar_for(meta: &ScanMetadata, spacing: [f64; 3], raw: Option<([usize; 3], &str)>) -> Sidecar {
    Sidecar {
        shape: raw.map(|r| r.0),
        dtype: raw.map(|r| r.1.to_string()),
        spacing: Some(spacing),
        vendor: meta.vendor,
        recon_kernel: meta.recon_kernel,
        case_id: meta.case_id.clone(),
        z_spacing: Some(meta.z_spacing),
    }
}

struct Decoded {
    shape: [usize; 3],
    spacing: [f64; 3],
    values: Vec<f64>,
    meta: ScanMetadata,
}

fn decode_any(path: &Path) -> Result<Decoded> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    match Format::of(path)? {
        Format::Nifti => {
            let g = nifti::read(path)?;
            let side = read_sidecar(path)?;
            // the header stores float32 spacing; the sidecar keeps full precision
            let spacing = match side.as_ref().and_then(|s| s.spacing) {
                Some(exact) if exact.iter().zip(&g.spacing).all(|(a, b)| (a - b).abs() <= 1e-6 * b.abs()) => exact,
                _ => g.spacing,
            };
            let meta = metadata_from(side.as_ref(), path, spacing);
            Ok(Decoded {
                shape: g.shape,
                spacing,
                values: g.values,
                meta,
            })
        }
        Format::Raw => {
            let side = read_sidecar(path)?.ok_or_else(|| Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: "raw volume without JSON sidecar".into(),
            })?;
            let malformed = |reason: &str| Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: reason.to_string(),
            };
            let shape = side.shape.ok_or_else(|| malformed("sidecar lacks shape"))?;
            let spacing = side.spacing.ok_or_else(|| malformed("sidecar lacks spacing"))?;
            validate_spacing(spacing)?;
            let dtype = side.dtype.clone().ok_or_else(|| malformed("sidecar lacks dtype"))?;
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let count: usize = shape.iter().product();
            let values = decode_raw(&bytes, &dtype, count).map_err(|r| malformed(&r))?;
            let meta = metadata_from(Some(&side), path, spacing);
            Ok(Decoded { shape, spacing, values, meta })
        }
    }
}

fn decode_raw(bytes: &[u8], dtype: &str, count: usize) -> std::result::Result<Vec<f64>, String> {
    let width = match dtype {
        "uint8" => 1,
        "int16" => 2,
        "float32" => 4,
        "float64" => 8,
        other => return Err(format!("unsupported raw dtype {other}")),
    };
    if bytes.len() != count * width {
        return Err(format!("raw payload has {} bytes, expected {}", bytes.len(), count * width));
    }
    Ok(bytes
        .chunks_exact(width)
        .map(|c| match dtype {
            "uint8" => c[0] as f64,
            "int16" => i16::from_le_bytes([c[0], c[1]]) as f64,
            "float32" => f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
            _ => f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]),
        })
        .collect())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a CT volume; intensities are returned unchanged.
pub fn load_volume<T: Scalar>(path: &Path) -> Result<Volume<T>> {
    let d = decode_any(path)?;
    if d.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData(path.to_path_buf()));
    }
    let data = d.values.into_iter().map(T::lit).collect();
    Volume::new(data, d.shape, d.spacing, d.meta)
}

/// Writes a volume in the scalar's own float width.
pub fn save_volume<T: Scalar>(v: &Volume<T>, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(v.data().len() * T::BYTES);
    for &x in v.data() {
        x.write_le(&mut payload);
    }
    let (code, dtype) = match T::DTYPE {
        DType::F32 => (nifti::DT_FLOAT32, "float32"),
        DType::F64 => (nifti::DT_FLOAT64, "float64"),
    };
    match Format::of(path)? {
        Format::Nifti => {
            let bytes = nifti::encode(v.shape(), v.spacing(), code, &payload, "pdvseg volume");
            nifti::write(path, &bytes)?;
            write_sidecar(path, &sidecar_for(v.meta(), v.spacing(), None))
        }
        Format::Raw => {
            write_bytes(path, &payload)?;
            write_sidecar(path, &sidecar_for(v.meta(), v.spacing(), Some((v.shape(), dtype))))
        }
    }
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let d = decode_any(path)?;
    let mut data = Vec::with_capacity(d.values.len());
    for v in d.values {
        if !(v.fract() == 0.0 && (0.0..=255.0).contains(&v)) {
            return Err(Error::InvalidLabel(v.clamp(0.0, 255.0) as u8));
        }
        data.push(v as u8);
    }
    LabelMask::new(data, d.shape, d.spacing, d.meta)
}

pub fn save_mask(m: &LabelMask, path: &Path) -> Result<()> {
    match Format::of(path)? {
        Format::Nifti => {
            let bytes = nifti::encode(m.shape(), m.spacing(), nifti::DT_UINT8, m.data(), "pdvseg labels");
            nifti::write(path, &bytes)?;
            write_sidecar(path, &sidecar_for(m.meta(), m.spacing(), None))
        }
        Format::Raw => {
            write_bytes(path, m.data())?;
            write_sidecar(path, &sidecar_for(m.meta(), m.spacing(), Some((m.shape(), "uint8"))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ScanMetadata {
        ScanMetadata {
            z_spacing: 1.25,
            vendor: Vendor::Siemens,
            recon_kernel: ReconKernel::Lung,
            case_id: "case-a".into(),
        }
    }

    #[test]
    fn raw_constant_volume_loads_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.raw");
        let payload: Vec<u8> = std::iter::repeat_n((-1000.0f32).to_le_bytes(), 64).flatten().collect();
        std::fs::write(&path, payload).unwrap();
        std::fs::write(
            dir.path().join("c.json"),
            r#"{"shape":[4,4,4],"dtype":"float32","spacing":[1,1,1],"vendor":"GE","recon_kernel":"soft","case_id":"c"}"#,
        )
        .unwrap();
        let v: Volume<f32> = load_volume(&path).unwrap();
        assert_eq!(v.shape(), [4, 4, 4]);
        assert!(v.data().iter().all(|&x| x == -1000.0));
        assert_eq!(v.meta().vendor, Vendor::GE);
    }

    #[test]
    fn volume_round_trips_through_every_format() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..60).map(|i| i as f32 * 3.5 - 100.0).collect();
        let v = Volume::new(data, [5, 4, 3], [0.7, 0.8, 1.25], meta()).unwrap();
        for name in ["v.nii", "v.nii.gz", "v.raw"] {
            let p = dir.path().join(name);
            save_volume(&v, &p).unwrap();
            let back: Volume<f32> = load_volume(&p).unwrap();
            assert_eq!(back, v, "{name}");
        }
    }

    #[test]
    fn mask_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..24).map(|i| (i % 6) as u8).collect();
        let m = LabelMask::new(data, [2, 3, 4], [1.0, 1.0, 2.0], meta()).unwrap();
        for name in ["m.nii.gz", "m.raw"] {
            let p = dir.path().join(name);
            save_mask(&m, &p).unwrap();
            assert_eq!(load_mask(&p).unwrap(), m);
        }
    }

    #[test]
    fn zero_z_spacing_in_header_is_invalid_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, nifti::encode([2, 2, 2], [1.0, 1.0, 0.0], nifti::DT_FLOAT32, &[0u8; 32], "")).unwrap();
        let err = load_volume::<f32>(&p).unwrap_err();
        assert!(matches!(err, Error::InvalidSpacing(_)));
        assert!(err.to_string().contains("invalid spacing"));
    }

    #[test]
    fn missing_file_and_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_volume::<f32>(&dir.path().join("nope.nii")), Err(Error::MissingFile(_))));
        let p = dir.path().join("short.nii");
        std::fs::write(&p, [0u8; 100]).unwrap();
        assert!(matches!(load_volume::<f32>(&p), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nii");
        std::fs::write(&p, nifti::encode([2, 1, 1], [1.0; 3], nifti::DT_UINT8, &[1, 9], "")).unwrap();
        assert!(matches!(load_mask(&p), Err(Error::InvalidLabel(9))));
    }

    #[cfg(unix)]
    #[test]
    fn read_only_directory_gives_io_error() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let ro = dir.path().join("ro");
        std::fs::create_dir(&ro).unwrap();
        std::fs::set_permissions(&ro, std::fs::Permissions::from_mode(0o555)).unwrap();
        let v = Volume::new(vec![0.0f32; 8], [2, 2, 2], [1.0; 3], meta()).unwrap();
        let res = save_volume(&v, &ro.join("v.nii"));
        // root ignores directory permissions; only assert when they bite
        if std::fs::write(ro.join("probe"), b"x").is_err() {
            assert!(matches!(res, Err(Error::Io { .. })));
        }
        let missing_parent = dir.path().join("absent").join("v.nii");
        assert!(matches!(save_volume(&v, &missing_parent), Err(Error::Io { .. })));
    }
}
