//! Single-file named-tensor archive.
//!
//! Layout (safetensors-compatible, F32 only): bytes 0–7 hold the u64
//! little-endian header length H, bytes 8..8+H a UTF-8 JSON object mapping
//! tensor name → `{"dtype":"F32","shape":[...],"data_offsets":[begin,end]}`
//! with offsets relative to the data region at byte 8+H. Tensor data is raw
//! little-endian IEEE-754 f32, row-major. An optional `__metadata__` object
//! of string key/values may carry the model configuration.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw f32 tensor with its declared shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor32 {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor32 {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parsed archive contents: named tensors plus optional string metadata.
#[derive(Debug, Default)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor32>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;

    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: format!("archive header: {e}"),
        })?;

    let file_len = file.metadata()?.len();
    let data_region = 8 + header_len as u64;
    let body_len = file_len.saturating_sub(data_region) as usize;

    // Tensors are read one at a time with seeks, so peak memory stays near
    // the decoded size rather than decoded plus the whole raw region.
    let mut archive = Archive::default();
    let mut raw = Vec::new();
    for (name, value) in header {
        if name == "__metadata__" {
            let meta: BTreeMap<String, String> =
                serde_json::from_value(value).map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: 0,
                    message: format!("__metadata__: {e}"),
                })?;
            archive.metadata = meta;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value).map_err(|e| Error::Load {
            name: name.clone(),
            reason: format!("bad header entry: {e}"),
        })?;
        if entry.dtype != "F32" {
            return Err(Error::Load {
                name,
                reason: format!("dtype {} unsupported, expected F32", entry.dtype),
            });
        }
        let [begin, end] = entry.data_offsets;
        let numel: usize = entry.shape.iter().product();
        if end < begin || end - begin != numel * 4 || end > body_len {
            return Err(Error::Load {
                name,
                reason: format!(
                    "data_offsets [{begin}, {end}] inconsistent with shape {:?} (data region is {body_len} bytes)",
                    entry.shape,
                ),
            });
        }
        file.seek(SeekFrom::Start(data_region + begin as u64))?;
        raw.resize(end - begin, 0);
        file.read_exact(&mut raw)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        archive
            .tensors
            .insert(name, Tensor32::new(entry.shape, data));
    }
    Ok(archive)
}

/// Read only the `__metadata__` map without loading tensor data.
pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: format!("archive header: {e}"),
        })?;
    match header.get("__metadata__") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: format!("__metadata__: {e}"),
        }),
        None => Ok(BTreeMap::new()),
    }
}

/// Write tensors (name-sorted) and optional metadata as one archive file.
pub fn write_archive(
    path: &Path,
    tensors: &BTreeMap<String, Tensor32>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert("__metadata__".to_string(), serde_json::to_value(metadata)?);
    }
    let mut offset = 0usize;
    for (name, tensor) in tensors {
        let nbytes = tensor.numel() * 4;
        header.insert(
            name.clone(),
            serde_json::to_value(HeaderEntry {
                dtype: "F32".to_string(),
                shape: tensor.shape.clone(),
                data_offsets: [offset, offset + nbytes],
            })?,
        );
        offset += nbytes;
    }
    let header_bytes = serde_json::to_vec(&serde_json::Value::Object(header))?;

    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for tensor in tensors.values() {
        let mut buf = Vec::with_capacity(tensor.data.len() * 4);
        for v in &tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
    }
    Ok(())
}

/// Load an optional name-remapping file: JSON object mapping third-party
/// checkpoint tensor names to the canonical names used here.
pub fn load_remap(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "alpha".to_string(),
            Tensor32::new(
                vec![2, 3],
                vec![1.0, -2.5, 3.25, 0.0, -0.0, f32::MIN_POSITIVE],
            ),
        );
        tensors.insert("beta".to_string(), Tensor32::new(vec![4], vec![9.0; 4]));
        let mut meta = BTreeMap::new();
        meta.insert("n_layer".to_string(), "2".to_string());
        write_archive(&path, &tensors, &meta).unwrap();

        let archive = read_archive(&path).unwrap();
        assert_eq!(archive.metadata.get("n_layer").unwrap(), "2");
        for (name, t) in &tensors {
            let got = &archive.tensors[name];
            assert_eq!(got.shape, t.shape);
            // Compare raw bits, not float equality (−0.0 must survive).
            let a: Vec<u32> = got.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_wrong_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        let header = br#"{"x":{"dtype":"F64","shape":[1],"data_offsets":[0,8]}}"#;
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&(header.len() as u64).to_le_bytes()).unwrap();
        f.write_all(header).unwrap();
        f.write_all(&[0u8; 8]).unwrap();
        match read_archive(&path) {
            Err(Error::Load { name, .. }) => assert_eq!(name, "x"),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_inconsistent_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad2.safetensors");
        let header = br#"{"x":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&(header.len() as u64).to_le_bytes()).unwrap();
        f.write_all(header).unwrap();
        f.write_all(&[0u8; 8]).unwrap();
        assert!(read_archive(&path).is_err());
    }
}
