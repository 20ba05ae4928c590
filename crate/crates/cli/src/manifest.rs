// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reproducibility record written next to every output.

use std::fs;
use std::path::{Path, PathBuf};

use headlens::store::blob::{sha256_file, sha256_hex, write_json};
use headlens::{Error, Result};
use serde::Serialize;

/// File name used when the output is a directory.
pub const DIR_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct Digest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config: serde_json::Value,
    pub inputs: Vec<Digest>,
    pub outputs: Vec<Digest>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub wall_time_secs: f64,
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Digest of a file, or of a directory as the hash of its sorted
/// `relative path, file digest` lines. The run manifest itself is skipped.
pub fn digest(path: &Path) -> Result<Digest> {
    let meta = fs::metadata(path).map_err(|e| io(path, e))?;
    let sha256 = if meta.is_dir() {
        let mut lines = Vec::new();
        walk(path, path, &mut lines)?;
        lines.sort();
        sha256_hex(lines.concat().as_bytes())
    } else {
        sha256_file(path)?
    };
    Ok(Digest {
        path: path.to_path_buf(),
        sha256,
    })
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let p = entry.map_err(|e| io(dir, e))?.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != DIR_MANIFEST) {
            let rel = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .to_string_lossy()
                .replace('\\', "/");
            out.push(format!("{rel}\t{}\n", sha256_file(&p)?));
        }
    }
    Ok(())
}

/// `DIR/run_manifest.json` for directories, `FILE.run.json` otherwise.
pub fn manifest_path(primary_output: &Path) -> PathBuf {
    if primary_output.is_dir() {
        primary_output.join(DIR_MANIFEST)
    } else {
        let mut name = primary_output
            .file_name()
            .unwrap_or_default()
            .to_os_string();
        name.push(".run.json");
        primary_output.with_file_name(name)
    }
}

impl RunManifest {
    pub fn write(&self, primary_output: &Path) -> Result<PathBuf> {
        let path = manifest_path(primary_output);
        write_json(&path, self)?;
        Ok(path)
    }
}
