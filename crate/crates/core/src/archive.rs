//! Checksummed little-endian tensor archive.
//!
//! Layout: magic `VTPA`, `u32` version, `u32` record count, then per record
//! `u32` name length, name bytes, `u8` dtype tag, `u32` rank, `u64` dims,
//! `u64` byte length and raw data; finally the SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VTPA";
pub const VERSION: u32 = 1;

fn dtype_tag(d: DType) -> Result<u8> {
    Ok(match d {
        DType::F32 => 0,
        DType::F64 => 1,
        DType::U32 => 2,
        DType::I64 => 3,
        other => return Err(Error::InvalidArgument(format!("unsupported archive dtype {other:?}"))),
    })
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U32 => flat.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::I64 => flat.to_vec1::<i64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::InvalidArgument(format!("unsupported archive dtype {other:?}"))),
    })
}

pub fn encode(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype_tag(t.dtype())?);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let bytes = tensor_bytes(t)?;
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode(bytes: &[u8], origin: &Path, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 + 32 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing archive header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32().ok_or_else(|| corrupt("truncated"))?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32().ok_or_else(|| corrupt("truncated"))?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let trunc = || corrupt("truncated record");
        let nlen = r.u32().ok_or_else(trunc)? as usize;
        let name = String::from_utf8(r.take(nlen).ok_or_else(trunc)?.to_vec()).map_err(|_| corrupt("non-utf8 name"))?;
        let tag = *r.take(1).ok_or_else(trunc)?.first().ok_or_else(trunc)?;
        let rank = r.u32().ok_or_else(trunc)? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Option<Vec<_>>>().ok_or_else(trunc)?;
        let len = r.u64().ok_or_else(trunc)? as usize;
        let data = r.take(len).ok_or_else(trunc)?;
        let n: usize = dims.iter().product();
        let t = match tag {
            0 if len == 4 * n => {
                let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, device)?
            }
            1 if len == 8 * n => {
                let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, device)?
            }
            2 if len == 4 * n => {
                let v: Vec<u32> = data.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, device)?
            }
            3 if len == 8 * n => {
                let v: Vec<i64> = data.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, device)?
            }
            _ => return Err(corrupt(&format!("record {name}: bad dtype tag or length"))),
        };
        out.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(out)
}

/// Writes the archive and returns its SHA-256 as hex.
pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let bytes = encode(tensors)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load(path: &Path, device: &Device) -> Result<BTreeMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, device)
}

/// SHA-256 over names, shapes and values of a tensor map.
pub fn content_hash(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(encode(tensors)?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let dev = Device::Cpu;
        let mut m = BTreeMap::new();
        m.insert("a".into(), Tensor::new(&[[1.5f32, -0.0], [f32::MIN_POSITIVE, 3.0]], &dev).unwrap());
        m.insert("b".into(), Tensor::new(&[0.1f64, 1e-300], &dev).unwrap());
        m.insert("c".into(), Tensor::new(&[7u32], &dev).unwrap());
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = sample();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes, Path::new("x"), &Device::Cpu).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_and_version_detected() {
        let mut bytes = encode(&sample()).unwrap();
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(decode(&flipped, Path::new("x"), &Device::Cpu), Err(Error::Corrupt { .. })));
        bytes[4] = 9;
        let n = bytes.len();
        let digest = Sha256::digest(&bytes[..n - 32]);
        bytes[n - 32..].copy_from_slice(&digest);
        assert!(matches!(
            decode(&bytes, Path::new("x"), &Device::Cpu),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }
}
