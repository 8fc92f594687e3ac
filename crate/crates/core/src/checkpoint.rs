//! Checkpoints: a JSON manifest next to a raw payload of little-endian
//! `f32` values, row-major, concatenated in manifest order.
//!
//! `<base>.json`:
//!
//! ```text
//! { "format_version": 1, "kind": "encoder", "config": {...},
//!   "entries": [ { "name": "token_embedding", "shape": [128, 64],
//!                  "dtype": "f32", "offset": 0, "length": 32768 }, ... ] }
//! ```
//!
//! `<base>.bin` holds the bytes; `offset` and `length` are in bytes.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};
use crate::numerics::{Module, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub payload: Vec<u8>,
}

pub fn manifest_path(base: &Path) -> PathBuf {
    with_suffix(base, "json")
}

pub fn payload_path(base: &Path) -> PathBuf {
    with_suffix(base, "bin")
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Checkpoint {
    /// Snapshot of several modules; tensor names are `"{prefix}.{param}"`
    /// (or bare parameter names for an empty prefix).
    pub fn from_modules<C: Serialize>(
        kind: &str,
        config: &C,
        modules: &[(&str, &dyn Module<f32>)],
    ) -> Result<Self> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (prefix, module) in modules {
            for (name, p) in module.named_params() {
                let offset = payload.len() as u64;
                p.value.write_le(&mut payload);
                entries.push(ManifestEntry {
                    name: join_name(prefix, &name),
                    shape: p.value.shape().to_vec(),
                    dtype: "f32".into(),
                    offset,
                    length: payload.len() as u64 - offset,
                });
            }
        }
        let ckpt = Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind: kind.into(),
                config: serde_json::to_value(config)?,
                entries,
            },
            payload,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Offsets are contiguous, in bounds and cover the payload exactly.
    pub fn validate(&self) -> Result<()> {
        if self.manifest.format_version != FORMAT_VERSION {
            bail!(Checkpoint, "unsupported format version {}", self.manifest.format_version);
        }
        let mut end = 0u64;
        let mut names = std::collections::HashSet::new();
        for e in &self.manifest.entries {
            if e.dtype != "f32" {
                bail!(Checkpoint, "{}: unsupported dtype {}", e.name, e.dtype);
            }
            if !names.insert(e.name.as_str()) {
                bail!(Checkpoint, "duplicate tensor name {}", e.name);
            }
            if e.offset != end {
                bail!(Checkpoint, "{}: offset {} overlaps or leaves a gap (expected {end})", e.name, e.offset);
            }
            let numel: usize = e.shape.iter().product();
            if e.length != 4 * numel as u64 {
                bail!(Checkpoint, "{}: length {} does not match shape {:?}", e.name, e.length, e.shape);
            }
            end += e.length;
        }
        if end != self.payload.len() as u64 {
            bail!(Checkpoint, "payload holds {} bytes, manifest describes {end}", self.payload.len());
        }
        Ok(())
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.manifest.config.clone())?)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.entries.iter().map(|e| e.name.as_str())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let Some(e) = self.manifest.entries.iter().find(|e| e.name == name) else {
            bail!(Checkpoint, "no tensor named {name}");
        };
        let bytes = &self.payload[e.offset as usize..(e.offset + e.length) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(e.shape.clone(), data)
    }

    /// Overwrites every parameter of `module` from the tensors stored under
    /// `prefix`. Missing names or shape mismatches are errors.
    pub fn restore_into(&self, prefix: &str, module: &mut dyn Module<f32>) -> Result<()> {
        for (name, p) in module.named_params_mut() {
            let full = join_name(prefix, &name);
            let t = self.tensor(&full)?;
            if t.shape() != p.value.shape() {
                bail!(Checkpoint, "{full}: stored shape {:?}, expected {:?}", t.shape(), p.value.shape());
            }
            p.value = t;
        }
        Ok(())
    }

    /// SHA-256 of the payload bytes, hex encoded.
    pub fn payload_hash(&self) -> String {
        Sha256::digest(&self.payload).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        self.validate()?;
        if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(manifest_path(base), serde_json::to_string_pretty(&self.manifest)?)?;
        std::fs::write(payload_path(base), &self.payload)?;
        Ok(())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let mpath = manifest_path(base);
        if !mpath.exists() {
            bail!(Dependency, "checkpoint {} not found", mpath.display());
        }
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)?;
        let payload = std::fs::read(payload_path(base))?;
        let ckpt = Self { manifest, payload };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn exists(base: &Path) -> bool {
        manifest_path(base).exists() && payload_path(base).exists()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterConfig, AlignmentAdapter};

    #[test]
    fn round_trip_is_bit_exact() {
        let a = AlignmentAdapter::<f32>::init(AdapterConfig::new(3, 8, 16), 4).unwrap();
        let ckpt = Checkpoint::from_modules("adapter", a.config(), &[("", &a)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("sub").join("adapter");
        ckpt.save(&base).unwrap();
        let back = Checkpoint::load(&base).unwrap();
        assert_eq!(back, ckpt);
        let mut b = AlignmentAdapter::<f32>::zeros(back.config().unwrap()).unwrap();
        back.restore_into("", &mut b).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
    }

    #[test]
    fn corrupted_manifest_rejected() {
        let a = AlignmentAdapter::<f32>::init(AdapterConfig::new(1, 2, 2), 0).unwrap();
        let mut ckpt = Checkpoint::from_modules("adapter", a.config(), &[("", &a)]).unwrap();
        ckpt.manifest.entries[1].offset += 4;
        assert!(matches!(ckpt.validate(), Err(crate::Error::Checkpoint(_))));
        ckpt.manifest.entries[1].offset -= 4;
        ckpt.payload.pop();
        assert!(ckpt.validate().is_err());
    }

    #[test]
    fn missing_checkpoint_is_dependency_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Checkpoint::load(&dir.path().join("nothing")),
            Err(crate::Error::Dependency(_))
        ));
    }
}
