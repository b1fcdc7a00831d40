//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) encoding of 3-D grids.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_INT8: i16 = 256;
pub const DT_UINT16: i16 = 512;

/// Decoded grid: values as `f64` plus the header fields we carry.
#[derive(Debug, Clone)]
pub struct NiftiGrid {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub datatype: i16,
    pub values: Vec<f64>,
}

pub fn is_gzip_path(path: &Path) -> bool {
    path.to_string_lossy().ends_with(".gz")
}

pub fn read(path: &Path) -> Result<NiftiGrid> {
    let raw = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| malformed(path, format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    decode(&bytes).map_err(|reason| match reason {
        DecodeError::Spacing(s) => Error::InvalidSpacing(s),
        DecodeError::Header(r) => malformed(path, r),
    })
}

fn malformed(path: &Path, reason: String) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    }
}

enum DecodeError {
    Header(String),
    Spacing([f64; 3]),
}

struct Reader<'a> {
    b: &'a [u8],
    le: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let a = [self.b[off], self.b[off + 1]];
        if self.le { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }
    }
    fn i32(&self, off: usize) -> i32 {
        let a = [self.b[off], self.b[off + 1], self.b[off + 2], self.b[off + 3]];
        if self.le { i32::from_le_bytes(a) } else { i32::from_be_bytes(a) }
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_bits(self.i32(off) as u32)
    }
}

fn decode(b: &[u8]) -> std::result::Result<NiftiGrid, DecodeError> {
    if b.len() < HEADER_SIZE {
        return Err(DecodeError::Header(format!("file has {} bytes, header needs {HEADER_SIZE}", b.len())));
    }
    let le = i32::from_le_bytes([b[0], b[1], b[2], b[3]]) == HEADER_SIZE as i32;
    let r = Reader { b, le };
    if r.i32(0) != HEADER_SIZE as i32 {
        return Err(DecodeError::Header("sizeof_hdr is not 348".into()));
    }
    if &b[344..347] != b"n+1" {
        return Err(DecodeError::Header("magic is not n+1 (only single-file NIfTI-1 is supported)".into()));
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(DecodeError::Header(format!("dim[0] = {ndim}")));
    }
    let mut shape = [1usize; 3];
    for (a, s) in shape.iter_mut().enumerate() {
        if (a as i16) < ndim {
            let d = r.i16(42 + 2 * a);
            if d < 1 {
                return Err(DecodeError::Header(format!("dim[{}] = {d}", a + 1)));
            }
            *s = d as usize;
        }
    }
    for a in 3..ndim as usize {
        if r.i16(42 + 2 * a) > 1 {
            return Err(DecodeError::Header("volumes with more than 3 non-singleton dimensions are not supported".into()));
        }
    }
    let spacing = [r.f32(80) as f64, r.f32(84) as f64, r.f32(88) as f64];
    if !spacing.iter().all(|s| *s > 0.0 && s.is_finite()) {
        return Err(DecodeError::Spacing(spacing));
    }
    let datatype = r.i16(70);
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(DecodeError::Header(format!("unsupported datatype {other}"))),
    };
    let offset = r.f32(108) as usize;
    if offset < HEADER_SIZE {
        return Err(DecodeError::Header(format!("vox_offset {offset} inside header")));
    }
    let count: usize = shape.iter().product();
    let end = offset + count * width;
    if b.len() < end {
        return Err(DecodeError::Header(format!("data truncated: need {end} bytes, have {}", b.len())));
    }
    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() { (1.0, 0.0) } else { (slope, inter) };
    let data = &b[offset..end];
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let s = &data[i * width..(i + 1) * width];
        let v = match datatype {
            DT_UINT8 => s[0] as f64,
            DT_INT8 => s[0] as i8 as f64,
            DT_INT16 => {
                let a = [s[0], s[1]];
                (if le { i16::from_le_bytes(a) } else { i16::from_be_bytes(a) }) as f64
            }
            DT_UINT16 => {
                let a = [s[0], s[1]];
                (if le { u16::from_le_bytes(a) } else { u16::from_be_bytes(a) }) as f64
            }
            DT_INT32 => {
                let a = [s[0], s[1], s[2], s[3]];
                (if le { i32::from_le_bytes(a) } else { i32::from_be_bytes(a) }) as f64
            }
            DT_FLOAT32 => {
                let a = [s[0], s[1], s[2], s[3]];
                (if le { f32::from_le_bytes(a) } else { f32::from_be_bytes(a) }) as f64
            }
            _ => {
                let mut a = [0u8; 8];
                a.copy_from_slice(s);
                if le { f64::from_le_bytes(a) } else { f64::from_be_bytes(a) }
            }
        };
        values.push(v * slope + inter);
    }
    Ok(NiftiGrid {
        shape,
        spacing,
        datatype,
        values,
    })
}

/// Encodes a little-endian NIfTI-1 file. `payload` must already be the
/// voxel bytes for `datatype`.
pub fn encode(shape: [usize; 3], spacing: [f64; 3], datatype: i16, payload: &[u8], descrip: &str) -> Vec<u8> {
    let bitpix: i16 = match datatype {
        DT_UINT8 | DT_INT8 => 8,
        DT_INT16 | DT_UINT16 => 16,
        DT_INT32 | DT_FLOAT32 => 32,
        _ => 64,
    };
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for (a, &s) in shape.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * a, s as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for (a, &s) in spacing.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * a, s as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    let d = descrip.as_bytes();
    let n = d.len().min(79);
    h[148..148 + n].copy_from_slice(&d[..n]);
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for (row, base) in [280usize, 296, 312].iter().enumerate() {
        put_f32(&mut h, base + 4 * row, spacing[row] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(payload);
    h
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    if is_gzip_path(path) {
        // mtime stays 0 so identical inputs give identical archives
        let mut enc = GzEncoder::new(w, Compression::new(6));
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        w = enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_round_trips() {
        let payload: Vec<u8> = (0u8..24).collect();
        let bytes = encode([2, 3, 4], [0.5, 0.75, 2.5], DT_UINT8, &payload, "test");
        assert_eq!(bytes.len(), VOX_OFFSET + 24);
        let g = decode(&bytes).ok().unwrap();
        assert_eq!(g.shape, [2, 3, 4]);
        assert_eq!(g.spacing, [0.5, 0.75, 2.5]);
        assert_eq!(g.values, (0..24).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn zero_spacing_is_rejected() {
        let bytes = encode([2, 2, 2], [1.0, 1.0, 0.0], DT_UINT8, &[0; 8], "");
        assert!(matches!(decode(&bytes), Err(DecodeError::Spacing(_))));
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let bytes = encode([2, 2, 2], [1.0; 3], DT_FLOAT32, &[0; 31], "");
        assert!(matches!(decode(&bytes), Err(DecodeError::Header(_))));
    }
}
