// SPDX-License-Identifier: MIT OR Apache-2.0

//! Packed little-endian `float32` files, SHA-256 checksums and JSON manifests.
//!
//! Every binary file written by the toolkit is a bare row-major array of
//! `f32` values in little-endian byte order, with no header. Shapes, dtype and
//! checksums live in the accompanying JSON manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Manifest schema version written by this build.
pub const SCHEMA_VERSION: u32 = 1;
/// The only element type the stores hold.
pub const DTYPE: &str = "float32";
/// The only byte order the stores hold.
pub const BYTE_ORDER: &str = "little";

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Encode `data` as packed little-endian bytes.
pub fn f32_to_le_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Write `data` to `path` and return the checksum of the written bytes.
pub fn write_f32(path: &Path, data: &[f32]) -> Result<String> {
    let bytes = f32_to_le_bytes(data);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Read exactly `expected_len` values from `path`, verifying the checksum when given.
pub fn read_f32(path: &Path, expected_len: usize, expected_sha: Option<&str>) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::corrupt(
            path,
            format!("expected {} bytes, found {}", expected_len * 4, bytes.len()),
        ));
    }
    if let Some(sha) = expected_sha {
        let got = sha256_hex(&bytes);
        if !got.eq_ignore_ascii_case(sha) {
            return Err(Error::corrupt(
                path,
                format!("checksum mismatch: manifest {sha}, file {got}"),
            ));
        }
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Serialize `value` as pretty JSON.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Parse JSON from `path`.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn check_encoding(path: &Path, dtype: &str, byte_order: &str) -> Result<()> {
    if dtype != DTYPE {
        return Err(Error::corrupt(
            path,
            format!("unsupported dtype {dtype:?}, expected {DTYPE:?}"),
        ));
    }
    if byte_order != BYTE_ORDER {
        return Err(Error::corrupt(
            path,
            format!("unsupported byte order {byte_order:?}, expected {BYTE_ORDER:?}"),
        ));
    }
    Ok(())
}

/// One tensor in a [`TensorDir`] manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    /// File name relative to the manifest directory.
    pub file: String,
    /// Row-major shape.
    pub shape: Vec<usize>,
    /// Hex SHA-256 of the file.
    pub sha256: String,
}

impl TensorEntry {
    /// Number of elements implied by the shape.
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Manifest for a directory of named tensors (weights, patches).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorDir {
    /// Schema version.
    pub schema_version: u32,
    /// What the directory holds, e.g. `"vit_weights"`.
    pub kind: String,
    /// Element type, always `"float32"`.
    pub dtype: String,
    /// Byte order, always `"little"`.
    pub byte_order: String,
    /// Free-form metadata owned by the caller.
    #[serde(default)]
    pub meta: serde_json::Value,
    /// Tensors by field name.
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// A named tensor to be written into a [`TensorDir`].
pub struct NamedTensor<'a> {
    /// Field name (also used for the file name).
    pub name: &'a str,
    /// Row-major shape.
    pub shape: Vec<usize>,
    /// Values.
    pub data: &'a [f32],
}

/// Write `tensors` into `dir`, one `<name>.bin` per field plus `manifest_name`.
pub fn write_tensor_dir(
    dir: &Path,
    manifest_name: &str,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[NamedTensor<'_>],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = BTreeMap::new();
    for t in tensors {
        let numel: usize = t.shape.iter().product();
        if numel != t.data.len() {
            return Err(Error::Dimension(format!(
                "tensor {}: shape {:?} implies {} values, got {}",
                t.name,
                t.shape,
                numel,
                t.data.len()
            )));
        }
        let file = format!("{}.bin", t.name);
        let sha256 = write_f32(&dir.join(&file), t.data)?;
        entries.insert(
            t.name.to_string(),
            TensorEntry {
                file,
                shape: t.shape.clone(),
                sha256,
            },
        );
    }
    let manifest = TensorDir {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        dtype: DTYPE.to_string(),
        byte_order: BYTE_ORDER.to_string(),
        meta,
        tensors: entries,
    };
    write_json(&dir.join(manifest_name), &manifest)
}

/// A tensor directory loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedTensors {
    /// The parsed manifest.
    pub manifest: TensorDir,
    /// Values by field name.
    pub values: BTreeMap<String, Vec<f32>>,
}

impl LoadedTensors {
    /// Fetch a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let entry = self
            .manifest
            .tensors
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing tensor field {name:?}")))?;
        if entry.shape != shape {
            return Err(Error::Dimension(format!(
                "tensor {name}: expected shape {shape:?}, found {:?}",
                entry.shape
            )));
        }
        self.values
            .remove(name)
            .ok_or_else(|| Error::InvalidInput(format!("tensor field {name:?} already consumed")))
    }
}

/// Read a directory written by [`write_tensor_dir`].
pub fn read_tensor_dir(dir: &Path, manifest_name: &str) -> Result<LoadedTensors> {
    let manifest_path = dir.join(manifest_name);
    let manifest: TensorDir = read_json(&manifest_path)?;
    check_encoding(&manifest_path, &manifest.dtype, &manifest.byte_order)?;
    let mut values = BTreeMap::new();
    for (name, entry) in &manifest.tensors {
        let data = read_f32(&dir.join(&entry.file), entry.numel(), Some(&entry.sha256))?;
        values.insert(name.clone(), data);
    }
    Ok(LoadedTensors { manifest, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_encoding_is_byte_exact() {
        let bytes = f32_to_le_bytes(&[1.0, -2.5]);
        assert_eq!(bytes, vec![0, 0, 128, 63, 0, 0, 32, 192]);
    }

    #[test]
    fn read_rejects_truncation_and_bad_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let sha = write_f32(&p, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(read_f32(&p, 3, Some(&sha)).unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            read_f32(&p, 4, None),
            Err(Error::CorruptStore { .. })
        ));
        assert!(matches!(
            read_f32(&p, 3, Some("00")),
            Err(Error::CorruptStore { .. })
        ));
    }

    #[test]
    fn tensor_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        write_tensor_dir(
            dir.path(),
            "m.json",
            "test",
            serde_json::json!({"k": 1}),
            &[NamedTensor {
                name: "a",
                shape: vec![2, 3],
                data: &a,
            }],
        )
        .unwrap();
        let mut loaded = read_tensor_dir(dir.path(), "m.json").unwrap();
        assert_eq!(loaded.manifest.meta["k"], 1);
        assert!(loaded.take("a", &[3, 2]).is_err());
        assert_eq!(loaded.take("a", &[2, 3]).unwrap(), a.to_vec());
    }
}
