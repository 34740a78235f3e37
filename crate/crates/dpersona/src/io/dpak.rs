//! DPAK: a minimal named-array container with bit-exact round-trips.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..6            magic "DPAK\x01\x00"
//! bytes 6..10           u32 header length
//! bytes 10..10+hlen     header JSON: {"entries":[{name,dtype,shape,offset,len}..]}
//! remainder             payload; entry offsets are relative to its start
//! ```
//!
//! Dtypes are `f32`, `f64`, `u8`, stored row-major. Entries are written in
//! name order so equal contents produce identical bytes. The parser treats
//! its input as untrusted: every offset, length, and shape product is
//! validated before any allocation sized from the file.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::FormatError;

const MAGIC: &[u8; 6] = b"DPAK\x01\x00";
const MAX_HEADER_LEN: usize = 16 << 20;

/// One array in an archive.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
}

impl ArrayData {
    pub fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U8(_) => "u8",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::F64(a) => a.shape(),
            ArrayData::U8(a) => a.shape(),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            ArrayData::F32(a) => a.len() * 4,
            ArrayData::F64(a) => a.len() * 8,
            ArrayData::U8(a) => a.len(),
        }
    }

    fn append_bytes(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(a) => {
                for v in a.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            ArrayData::F64(a) => {
                for v in a.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            ArrayData::U8(a) => out.extend(a.iter().copied()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryMeta {
    name: String,
    dtype: String,
    shape: Vec<u64>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    entries: Vec<EntryMeta>,
}

/// Serializes entries to the container format.
pub fn encode_archive(entries: &BTreeMap<String, ArrayData>) -> Vec<u8> {
    let mut metas = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, data) in entries {
        assert!(!name.is_empty(), "entry names must be nonempty");
        let len = data.byte_len() as u64;
        metas.push(EntryMeta {
            name: name.clone(),
            dtype: data.dtype().to_string(),
            shape: data.shape().iter().map(|&s| s as u64).collect(),
            offset,
            len,
        });
        offset += len;
    }
    let header = serde_json::to_vec(&Header { entries: metas }).unwrap();
    let mut out = Vec::with_capacity(10 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(header.len()).expect("header too large").to_le_bytes());
    out.extend_from_slice(&header);
    for data in entries.values() {
        data.append_bytes(&mut out);
    }
    out
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        "u8" => Some(1),
        _ => None,
    }
}

fn bad(name: &str, reason: impl Into<String>) -> FormatError {
    FormatError::BadEntry {
        name: name.to_string(),
        reason: reason.into(),
    }
}

/// Parses untrusted bytes into named arrays.
pub fn parse_archive(bytes: &[u8]) -> Result<BTreeMap<String, ArrayData>, FormatError> {
    if bytes.len() < 10 {
        return Err(FormatError::Truncated);
    }
    if &bytes[..6] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if hlen > MAX_HEADER_LEN {
        return Err(FormatError::Header("header length over cap".into()));
    }
    let payload_start = 10usize
        .checked_add(hlen)
        .ok_or_else(|| FormatError::Header("header length overflow".into()))?;
    if payload_start > bytes.len() {
        return Err(FormatError::Truncated);
    }
    let header: Header = serde_json::from_slice(&bytes[10..payload_start])
        .map_err(|e| FormatError::Header(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut out = BTreeMap::new();
    for meta in header.entries {
        if meta.name.is_empty() {
            return Err(FormatError::Header("empty entry name".into()));
        }
        let size = dtype_size(&meta.dtype)
            .ok_or_else(|| bad(&meta.name, format!("unknown dtype {:?}", meta.dtype)))?;
        let mut elems: u64 = 1;
        for &s in &meta.shape {
            elems = elems
                .checked_mul(s)
                .ok_or_else(|| bad(&meta.name, "shape product overflow"))?;
        }
        let expect_len = elems
            .checked_mul(size as u64)
            .ok_or_else(|| bad(&meta.name, "byte length overflow"))?;
        if expect_len != meta.len {
            return Err(bad(&meta.name, "length does not match shape"));
        }
        let end = meta
            .offset
            .checked_add(meta.len)
            .ok_or_else(|| bad(&meta.name, "offset overflow"))?;
        if end > payload.len() as u64 {
            return Err(bad(&meta.name, "data extends past end of file"));
        }
        let raw = &payload[meta.offset as usize..end as usize];
        let shape: Vec<usize> = meta.shape.iter().map(|&s| s as usize).collect();
        let dim = IxDyn(&shape);
        let data = match meta.dtype.as_str() {
            "f32" => ArrayData::F32(
                ArrayD::from_shape_vec(
                    dim,
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
                .unwrap(),
            ),
            "f64" => ArrayData::F64(
                ArrayD::from_shape_vec(
                    dim,
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
                .unwrap(),
            ),
            "u8" => ArrayData::U8(ArrayD::from_shape_vec(dim, raw.to_vec()).unwrap()),
            _ => unreachable!(),
        };
        if out.insert(meta.name.clone(), data).is_some() {
            return Err(bad(&meta.name, "duplicate entry name"));
        }
    }
    Ok(out)
}

pub fn write_archive(
    path: &Path,
    entries: &BTreeMap<String, ArrayData>,
) -> Result<(), FormatError> {
    Ok(std::fs::write(path, encode_archive(entries))?)
}

pub fn read_archive(path: &Path) -> Result<BTreeMap<String, ArrayData>, FormatError> {
    parse_archive(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn sample_entries() -> BTreeMap<String, ArrayData> {
        let mut m = BTreeMap::new();
        m.insert(
            "floats".to_string(),
            ArrayData::F32(ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![
                1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 1e30,
            ]).unwrap()),
        );
        m.insert(
            "bytes".to_string(),
            ArrayData::U8(ArrayD::from_shape_vec(IxDyn(&[4]), vec![0, 1, 255, 7]).unwrap()),
        );
        m.insert(
            "wide".to_string(),
            ArrayData::F64(ArrayD::from_shape_vec(IxDyn(&[1, 2, 1]), vec![
                std::f64::consts::PI,
                -0.0,
            ]).unwrap()),
        );
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let entries = sample_entries();
        let bytes = encode_archive(&entries);
        let back = parse_archive(&bytes).unwrap();
        assert_eq!(entries.len(), back.len());
        for (name, data) in &entries {
            match (data, &back[name]) {
                (ArrayData::F32(a), ArrayData::F32(b)) => {
                    assert_eq!(a.shape(), b.shape());
                    for (x, y) in a.iter().zip(b.iter()) {
                        assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
                (ArrayData::F64(a), ArrayData::F64(b)) => {
                    assert_eq!(a.shape(), b.shape());
                    for (x, y) in a.iter().zip(b.iter()) {
                        assert_eq!(x.to_bits(), y.to_bits());
                    }
                }
                (ArrayData::U8(a), ArrayData::U8(b)) => assert_eq!(a, b),
                _ => panic!("dtype changed in round trip"),
            }
        }
        // Encoding is canonical.
        assert_eq!(bytes, encode_archive(&back));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = encode_archive(&sample_entries());
        assert!(matches!(parse_archive(&bytes[..5]), Err(FormatError::Truncated)));
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(parse_archive(&corrupt), Err(FormatError::BadMagic)));
        // Header claims more bytes than exist.
        let mut short = bytes.clone();
        short.truncate(bytes.len() - 1);
        assert!(parse_archive(&short).is_err());
    }

    #[test]
    fn rejects_mismatched_lengths_and_unknown_dtypes() {
        let make = |header: &str| {
            let mut b = Vec::new();
            b.extend_from_slice(MAGIC);
            b.extend_from_slice(&(header.len() as u32).to_le_bytes());
            b.extend_from_slice(header.as_bytes());
            b.extend_from_slice(&[0u8; 64]);
            b
        };
        let wrong_len = make(
            r#"{"entries":[{"name":"a","dtype":"f32","shape":[2],"offset":0,"len":9}]}"#,
        );
        assert!(parse_archive(&wrong_len).is_err());
        let bad_dtype = make(
            r#"{"entries":[{"name":"a","dtype":"i128","shape":[2],"offset":0,"len":32}]}"#,
        );
        assert!(parse_archive(&bad_dtype).is_err());
        let overflow = make(
            r#"{"entries":[{"name":"a","dtype":"f64","shape":[18446744073709551615,8],"offset":0,"len":8}]}"#,
        );
        assert!(parse_archive(&overflow).is_err());
        let past_end = make(
            r#"{"entries":[{"name":"a","dtype":"u8","shape":[65],"offset":0,"len":65}]}"#,
        );
        assert!(parse_archive(&past_end).is_err());
        let dup = make(
            r#"{"entries":[{"name":"a","dtype":"u8","shape":[1],"offset":0,"len":1},{"name":"a","dtype":"u8","shape":[1],"offset":1,"len":1}]}"#,
        );
        assert!(parse_archive(&dup).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dpak");
        let entries = sample_entries();
        write_archive(&path, &entries).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(entries, back);
    }
}
