//! The commit record of a store.
//!
//! ```text
//! "OCMF" | version | u32 body_len | JSON body | u32 crc32(body) | "COMMITTED"
//! ```
//!
//! A store is committed exactly when this file exists, parses and ends with
//! the marker. It is replaced atomically by write-to-temp plus rename.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::segment::SegmentInfo;
use crate::error::{Error, Result};

pub const MANIFEST_MAGIC: &[u8; 4] = b"OCMF";
pub const COMMIT_MARKER: &[u8; 9] = b"COMMITTED";
pub const FORMAT_VERSION: u8 = 1;
pub const FILE_NAME: &str = "MANIFEST";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub len: u64,
    pub crc: u32,
    pub keys: u64,
    pub postings: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub events: u64,
    pub objects: u64,
    /// Σ|omap| over all events.
    pub postings: u64,
    pub meta_len: u64,
    pub segments: Vec<SegmentInfo>,
    pub indexes: Vec<IndexEntry>,
    /// Attribute names and object types observed in the stored records.
    pub attribute_names: BTreeSet<String>,
    pub object_types: BTreeSet<String>,
    /// What crash recovery had to repair before this commit.
    pub recovery_notes: Vec<String>,
}

impl Manifest {
    pub fn segment_bytes(&self) -> u64 {
        self.meta_len + self.segments.iter().map(|s| s.len).sum::<u64>()
    }

    pub fn index_bytes(&self) -> u64 {
        self.indexes.iter().map(|i| i.len).sum()
    }

    pub fn index(&self, name: &str) -> Option<&IndexEntry> {
        self.indexes.iter().find(|i| i.name == name)
    }

    /// Reads the manifest; `None` when there is none or it is not committed.
    pub fn read(root: &Path) -> Result<Option<Manifest>> {
        let path = root.join(FILE_NAME);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if bytes.len() < 5 || &bytes[..4] != MANIFEST_MAGIC {
            return Ok(None);
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                file: path,
                found: bytes[4],
                expected: FORMAT_VERSION,
            });
        }
        let Some(len_bytes) = bytes.get(5..9) else {
            return Ok(None);
        };
        let body_len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        let body_end = 9 + body_len;
        if bytes.len() != body_end + 4 + COMMIT_MARKER.len() || &bytes[body_end + 4..] != COMMIT_MARKER {
            return Ok(None);
        }
        let body = &bytes[9..body_end];
        let crc = u32::from_le_bytes(bytes[body_end..body_end + 4].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            return Ok(None);
        }
        serde_json::from_slice(body)
            .map(Some)
            .map_err(|e| Error::corruption(path, 9, format!("manifest body: {e}")))
    }

    /// Atomically replaces the manifest.
    pub fn write(&self, root: &Path) -> Result<()> {
        let body = serde_json::to_vec(self).expect("manifest serializes");
        let mut bytes = Vec::with_capacity(body.len() + 32);
        bytes.extend_from_slice(MANIFEST_MAGIC);
        bytes.push(FORMAT_VERSION);
        bytes.extend_from_slice(&(body.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&body);
        bytes.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        bytes.extend_from_slice(COMMIT_MARKER);
        let tmp = root.join(format!("{FILE_NAME}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, root.join(FILE_NAME))?;
        sync_dir(root)
    }
}

pub fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)?.sync_all()?;
    Ok(())
}
