//! Versioned binary checkpoints: magic, format version, scalar type, the
//! network spec as JSON, every named tensor, and a trailing SHA-256 of all
//! preceding bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{NetKind, NetworkSpec, Parameters};
use crate::nn::{Dims, Tensor};
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 8] = b"PDVSEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn encode_checkpoint<T: Scalar>(spec: &NetworkSpec, params: &Parameters<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    let json = serde_json::to_vec(spec).map_err(|e| Error::json("checkpoint spec", e))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let entries: Vec<(u8, &String, &Tensor<T>)> = params
        .trainable
        .iter()
        .map(|(k, v)| (0u8, k, v))
        .chain(params.buffers.iter().map(|(k, v)| (1u8, k, v)))
        .collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (kind, name, t) in entries {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let d = t.dims();
        for v in [d.n, d.c, d.spatial[0], d.spatial[1], d.spatial[2]] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(path: &Path, spec: &NetworkSpec, params: &Parameters<T>) -> Result<()> {
    let bytes = encode_checkpoint(spec, params)?;
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::CorruptCheckpoint("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes; stored values are converted to `T`.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(NetworkSpec, Parameters<T>)> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing checkpoint signature".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::CorruptCheckpoint("file truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch (truncated or modified file)".into()));
    }
    let mut r = Reader { bytes: body, pos: 12 };
    let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| Error::CorruptCheckpoint("unknown scalar type".into()))?;
    let json_len = r.u64()? as usize;
    let spec: NetworkSpec = serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::json("checkpoint spec", e))?;
    let count = r.u32()?;
    let mut trainable = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for _ in 0..count {
        let kind = r.take(1)?[0];
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        let mut d = [0usize; 5];
        for v in d.iter_mut() {
            *v = r.u64()? as usize;
        }
        let dims = Dims::new(d[0], d[1], [d[2], d[3], d[4]]);
        let data: Vec<T> = match dtype {
            DType::F32 => r.take(dims.len() * 4)?.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => r.take(dims.len() * 8)?.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        let t = Tensor::from_vec(dims, data);
        match kind {
            0 => trainable.insert(name, t),
            1 => buffers.insert(name, t),
            _ => return Err(Error::CorruptCheckpoint(format!("unknown tensor kind {kind}"))),
        };
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after tensors".into()));
    }
    Ok((spec, Parameters { trainable, buffers }))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(NetworkSpec, Parameters<T>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks that it holds a `kind` network.
pub fn load_checkpoint_expecting<T: Scalar>(path: &Path, kind: NetKind) -> Result<(NetworkSpec, Parameters<T>)> {
    let (spec, params) = load_checkpoint(path)?;
    if spec.kind != kind {
        return Err(Error::SpecMismatch {
            expected: kind.to_string(),
            found: spec.kind.to_string(),
        });
    }
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::build;

    #[test]
    fn encode_decode_round_trip_is_exact() {
        let spec = NetworkSpec::dvnet([8, 8, 8]);
        let (_, params, _) = build::<f32>(&spec, 3).unwrap();
        let bytes = encode_checkpoint(&spec, &params).unwrap();
        let (s2, p2) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(s2, spec);
        assert_eq!(p2, params);
    }

    #[test]
    fn damaged_bytes_are_rejected() {
        let spec = NetworkSpec::unet2d([16, 16]);
        let (_, params, _) = build::<f32>(&spec, 3).unwrap();
        let bytes = encode_checkpoint(&spec, &params).unwrap();
        assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() / 2]), Err(Error::CorruptCheckpoint(_))));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode_checkpoint::<f32>(&flipped), Err(Error::CorruptCheckpoint(_))));
        let mut old = bytes;
        old[8] = 99;
        assert!(matches!(decode_checkpoint::<f32>(&old), Err(Error::VersionMismatch { found: 99, .. })));
        assert!(matches!(decode_checkpoint::<f32>(b"nonsense"), Err(Error::CorruptCheckpoint(_))));
    }
}
