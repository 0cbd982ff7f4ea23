//! Binary container shared by checkpoints and datasets: an 8-byte magic, a
//! little-endian `u64` header length, a JSON header, then a raw payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const FORMAT_VERSION: u32 = 1;

pub(crate) fn write(path: &Path, magic: &[u8; 8], header: &impl Serialize, payload: &[u8]) -> Result<()> {
    let header = serde_json::to_vec(header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(payload);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns the parsed header and the payload bytes.
pub(crate) fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated before header"));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&bytes[..8]), String::from_utf8_lossy(magic)),
        ));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header = serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::format(path, format!("header: {e}")))?;
    Ok((header, bytes[end..].to_vec()))
}

pub(crate) fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload in f32 elements.
    pub offset: usize,
}

/// Appends tensors as f32 to `payload`, returning their manifest entries.
pub(crate) fn encode_tensors<'a>(
    tensors: impl IntoIterator<Item = (String, &'a Tensor)>,
    payload: &mut Vec<u8>,
) -> Vec<TensorEntry> {
    tensors
        .into_iter()
        .map(|(name, t)| {
            let offset = payload.len() / 4;
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            }
        })
        .collect()
}

pub(crate) fn decode_tensor(path: &Path, entry: &TensorEntry, payload: &[u8]) -> Result<Tensor> {
    let count: usize = entry.shape.iter().product();
    let start = entry.offset * 4;
    let end = start + count * 4;
    if end > payload.len() {
        return Err(Error::format(path, format!("tensor {} runs past end of file", entry.name)));
    }
    let data = f32_values(&payload[start..end]).map(f64::from).collect();
    Tensor::new(&entry.shape, data).map_err(|e| Error::format(path, format!("tensor {}: {e}", entry.name)))
}

pub(crate) fn f32_values(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write(&path, b"TESTMAG1", &serde_json::json!({"a": 1}), &[1, 2, 3, 4]).unwrap();
        let (h, p): (serde_json::Value, _) = read(&path, b"TESTMAG1").unwrap();
        assert_eq!(h["a"], 1);
        assert_eq!(p, vec![1, 2, 3, 4]);
        assert!(matches!(read::<serde_json::Value>(&path, b"OTHERMG1"), Err(Error::Format { .. })));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..20]).unwrap();
        assert!(matches!(read::<serde_json::Value>(&path, b"TESTMAG1"), Err(Error::Format { .. })));
    }
}
