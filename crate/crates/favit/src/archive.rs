//! Tensor archive: the on-disk model format.
//!
//! Layout (all integers little-endian):
//!   magic "FAVT" (4 bytes) | format version u32 | tensor count u32
//!   then per tensor:
//!     name length u32 | UTF-8 name | trainable u8 | rank u32 |
//!     extents u32 × rank | dtype u8 (0 = 32-bit IEEE-754) |
//!     payload, little-endian row-major
//!
//! Round-trips are byte-exact and serialization order is the bundle's
//! canonical visit order, so saving the same bundle twice produces identical
//! bytes (and identical hashes).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FAVT";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone)]
pub struct ArchiveEntry {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor<f32>,
}

pub fn write_archive<W: Write>(mut w: W, entries: &[ArchiveEntry]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.trainable as u8])?;
        let shape = e.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &ext in shape {
            w.write_all(&(ext as u32).to_le_bytes())?;
        }
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&e.tensor.to_le_bytes())?;
    }
    Ok(())
}

pub fn archive_bytes(entries: &[ArchiveEntry]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_archive(&mut buf, entries).expect("in-memory write cannot fail");
    buf
}

pub fn save_archive(path: &Path, entries: &[ArchiveEntry]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    write_archive(&mut f, entries)?;
    f.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Archive(format!("truncated file while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_archive<R: Read>(mut r: R) -> Result<Vec<ArchiveEntry>> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Archive("bad magic".into()));
    }
    let version = read_u32(&mut r, "format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Archive(format!(
            "unsupported format version {version}"
        )));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for idx in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name_buf, "name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Archive(format!("tensor {idx}: name is not UTF-8")))?;
        let mut flag = [0u8; 1];
        read_exact_or(&mut r, &mut flag, "trainable flag")?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "extent")? as usize);
        }
        let mut dtype = [0u8; 1];
        read_exact_or(&mut r, &mut dtype, "dtype")?;
        if dtype[0] != DTYPE_F32 {
            return Err(Error::Archive(format!(
                "tensor {name}: unsupported dtype code {}",
                dtype[0]
            )));
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        read_exact_or(&mut r, &mut payload, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(ArchiveEntry {
            name,
            trainable: flag[0] != 0,
            tensor: Tensor::new(shape, data),
        });
    }
    Ok(entries)
}

pub fn load_archive(path: &Path) -> Result<Vec<ArchiveEntry>> {
    let f = fs::File::open(path)
        .map_err(|e| Error::Archive(format!("cannot open {}: {e}", path.display())))?;
    read_archive(std::io::BufReader::new(f))
}

/// SHA-256 of serialized entries, as a hex string.
pub fn entries_sha256(entries: &[ArchiveEntry]) -> String {
    let mut h = Sha256::new();
    h.update(archive_bytes(entries));
    hex(&h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── Bundle integration ───────────────────────────────────────────────

impl ModelBundle<f32> {
    /// Every parameter as archive entries, canonical order. The pretext head
    /// (when present) is excluded: it exists only during backbone
    /// pre-training.
    pub fn to_entries(&self) -> Vec<ArchiveEntry> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            if !p.name.starts_with("pretext.") {
                out.push(ArchiveEntry {
                    name: p.name.clone(),
                    trainable: p.trainable,
                    tensor: p.value.clone(),
                });
            }
        });
        out
    }

    /// Backbone parameters only (patch embedding, position embedding,
    /// blocks).
    pub fn backbone_entries(&self) -> Vec<ArchiveEntry> {
        self.to_entries()
            .into_iter()
            .filter(|e| e.name.starts_with("backbone."))
            .collect()
    }

    /// Hash of the backbone sub-archive; the freeze-invariance witness.
    pub fn backbone_hash(&self) -> String {
        entries_sha256(&self.backbone_entries())
    }

    /// Apply archive entries by name. Every entry must match a known
    /// parameter and its shape; values and trainable flags are overwritten.
    pub fn load_entries(&mut self, entries: &[ArchiveEntry]) -> Result<()> {
        for e in entries {
            let mut found = false;
            let mut err: Option<Error> = None;
            self.visit_mut(&mut |p| {
                if p.name == e.name {
                    found = true;
                    if p.value.shape() != e.tensor.shape() {
                        err = Some(Error::Archive(format!(
                            "tensor {}: shape {:?} does not match model shape {:?}",
                            e.name,
                            e.tensor.shape(),
                            p.value.shape()
                        )));
                    } else {
                        p.value = e.tensor.clone();
                        p.trainable = e.trainable;
                    }
                }
            });
            if let Some(err) = err {
                return Err(err);
            }
            if !found {
                return Err(Error::Archive(format!("unknown tensor name {}", e.name)));
            }
        }
        Ok(())
    }

    /// Load a backbone archive produced by `backbone_entries`, requiring
    /// complete coverage of every backbone parameter.
    pub fn load_backbone(&mut self, entries: &[ArchiveEntry]) -> Result<()> {
        for e in entries {
            if !e.name.starts_with("backbone.") {
                return Err(Error::Archive(format!(
                    "unknown tensor name {} (not a backbone parameter)",
                    e.name
                )));
            }
        }
        self.load_entries(entries)?;
        let mut missing = Vec::new();
        self.visit(&mut |p| {
            if p.name.starts_with("backbone.") && !entries.iter().any(|e| e.name == p.name) {
                missing.push(p.name.clone());
            }
        });
        if !missing.is_empty() {
            return Err(Error::Archive(format!(
                "incomplete backbone archive, missing: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_archive(path, &self.to_entries())
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let entries = load_archive(path)?;
        self.load_entries(&entries)
    }
}
