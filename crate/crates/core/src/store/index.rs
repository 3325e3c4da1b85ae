//! Immutable sorted string tables mapping keys to postings lists.
//!
//! Layout:
//!
//! ```text
//! header   "OCIX" | version | unique flag
//! entries  varint keylen | key | varint n | varint first | varint delta...
//! blocks   varint count | (varint keylen | key | varint offset)...
//! trailer  u64 blocks_offset | u64 keys | u64 postings | u32 crc32 | "OCIXDONE"
//! ```
//!
//! Entries are packed into blocks of roughly [`BLOCK_BYTES`]; the block
//! directory holds the first key and offset of each block and is loaded at
//! open, so a lookup costs one binary search and one positioned read. The
//! checksum covers every byte before it. Postings within a key are strictly
//! ascending record locations.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use crate::codec::{put_varint, Decoder};
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"OCIX";
pub const COMMIT_MAGIC: &[u8; 8] = b"OCIXDONE";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: u64 = 6;
const TRAILER_LEN: u64 = 8 + 8 + 8 + 4 + 8;
pub const BLOCK_BYTES: usize = 4096;

/// Size and checksum of a finished index file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexSummary {
    pub len: u64,
    pub crc: u32,
    pub keys: u64,
    pub postings: u64,
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
    written: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Builds an index from `(key, location)` pairs that arrive sorted.
pub struct IndexWriter {
    path: PathBuf,
    out: HashingWriter<BufWriter<File>>,
    unique: Option<&'static str>,
    blocks: Vec<(String, u64)>,
    block_fill: usize,
    key: Option<String>,
    postings: Vec<u64>,
    keys: u64,
    total_postings: u64,
    scratch: Vec<u8>,
}

impl IndexWriter {
    /// `unique` names the record kind when each key may occur only once.
    pub fn create(path: &Path, unique: Option<&'static str>) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        let mut out = HashingWriter {
            inner: BufWriter::with_capacity(1 << 20, file),
            hasher: crc32fast::Hasher::new(),
            written: 0,
        };
        out.write_all(INDEX_MAGIC)?;
        out.write_all(&[FORMAT_VERSION, u8::from(unique.is_some())])?;
        Ok(IndexWriter {
            path: path.to_owned(),
            out,
            unique,
            blocks: Vec::new(),
            block_fill: BLOCK_BYTES,
            key: None,
            postings: Vec::new(),
            keys: 0,
            total_postings: 0,
            scratch: Vec::new(),
        })
    }

    pub fn push(&mut self, key: &str, loc: u64) -> Result<()> {
        match self.key.as_deref() {
            Some(k) if k == key => {
                if let Some(kind) = self.unique {
                    return Err(Error::DuplicateId {
                        kind,
                        id: key.to_owned(),
                    });
                }
                if self.postings.last().is_some_and(|&last| last >= loc) {
                    return Err(Error::corruption(&self.path, self.out.written, "postings out of order"));
                }
                self.postings.push(loc);
            }
            Some(k) if k > key => {
                return Err(Error::corruption(&self.path, self.out.written, "index keys out of order"));
            }
            _ => {
                self.flush_entry()?;
                self.key = Some(key.to_owned());
                self.postings.push(loc);
            }
        }
        Ok(())
    }

    fn flush_entry(&mut self) -> Result<()> {
        let Some(key) = self.key.take() else {
            return Ok(());
        };
        self.scratch.clear();
        put_varint(&mut self.scratch, key.len() as u64);
        self.scratch.extend_from_slice(key.as_bytes());
        put_varint(&mut self.scratch, self.postings.len() as u64);
        let mut prev = 0;
        for &p in &self.postings {
            put_varint(&mut self.scratch, p - prev);
            prev = p;
        }
        if self.block_fill >= BLOCK_BYTES {
            self.blocks.push((key, self.out.written));
            self.block_fill = 0;
        }
        self.block_fill += self.scratch.len();
        self.out.write_all(&self.scratch)?;
        self.keys += 1;
        self.total_postings += self.postings.len() as u64;
        self.postings.clear();
        Ok(())
    }

    /// Writes the block directory and trailer, then syncs the file.
    pub fn finish(mut self) -> Result<IndexSummary> {
        self.flush_entry()?;
        let blocks_offset = self.out.written;
        let mut dir = Vec::new();
        put_varint(&mut dir, self.blocks.len() as u64);
        for (key, offset) in &self.blocks {
            put_varint(&mut dir, key.len() as u64);
            dir.extend_from_slice(key.as_bytes());
            put_varint(&mut dir, *offset);
        }
        self.out.write_all(&dir)?;
        self.out.write_all(&blocks_offset.to_le_bytes())?;
        self.out.write_all(&self.keys.to_le_bytes())?;
        self.out.write_all(&self.total_postings.to_le_bytes())?;
        let crc = self.out.hasher.clone().finalize();
        let mut inner = self.out.inner;
        inner.write_all(&crc.to_le_bytes())?;
        inner.write_all(COMMIT_MAGIC)?;
        let file = inner.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(IndexSummary {
            len: self.out.written + 12,
            crc,
            keys: self.keys,
            postings: self.total_postings,
        })
    }
}

/// Reads and checks the trailer, optionally verifying the whole-file checksum.
fn read_trailer(path: &Path, file: &mut File, verify: bool) -> Result<(IndexSummary, u64, bool)> {
    let len = file.metadata()?.len();
    let corrupt = |offset: u64, msg: &str| Error::corruption(path, offset, msg);
    let mut header = [0u8; HEADER_LEN as usize];
    if len < HEADER_LEN + TRAILER_LEN {
        return Err(corrupt(0, "index file too short"));
    }
    file.read_exact_at(&mut header, 0)?;
    if &header[..4] != INDEX_MAGIC {
        return Err(corrupt(0, "not an index file"));
    }
    if header[4] != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            file: path.to_owned(),
            found: header[4],
            expected: FORMAT_VERSION,
        });
    }
    let mut trailer = [0u8; TRAILER_LEN as usize];
    let trailer_at = len - TRAILER_LEN;
    file.read_exact_at(&mut trailer, trailer_at)?;
    if &trailer[28..] != COMMIT_MAGIC {
        return Err(corrupt(trailer_at + 28, "missing commit marker"));
    }
    let u64_at = |i: usize| u64::from_le_bytes(trailer[i..i + 8].try_into().expect("8 bytes"));
    let blocks_offset = u64_at(0);
    let keys = u64_at(8);
    let postings = u64_at(16);
    let crc = u32::from_le_bytes(trailer[24..28].try_into().expect("4 bytes"));
    if blocks_offset < HEADER_LEN || blocks_offset > trailer_at {
        return Err(corrupt(trailer_at, "block directory offset out of range"));
    }
    if verify {
        let mut hasher = crc32fast::Hasher::new();
        let mut reader = BufReader::with_capacity(1 << 20, &mut *file);
        reader.seek(SeekFrom::Start(0))?;
        let mut remaining = trailer_at + 24;
        let mut buf = vec![0u8; 1 << 16];
        while remaining > 0 {
            let n = (remaining as usize).min(buf.len());
            reader.read_exact(&mut buf[..n])?;
            hasher.update(&buf[..n]);
            remaining -= n as u64;
        }
        if hasher.finalize() != crc {
            return Err(corrupt(trailer_at + 24, "index checksum mismatch"));
        }
    }
    Ok((IndexSummary { len, crc, keys, postings }, blocks_offset, header[5] == 1))
}

/// An open index. Cheap to share across threads; every lookup is a
/// positioned read.
pub struct IndexReader {
    path: PathBuf,
    file: Option<File>,
    blocks: Vec<(String, u64)>,
    data_end: u64,
    summary: IndexSummary,
    unique: bool,
}

impl IndexReader {
    /// Opens and fully verifies an index file.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let (summary, blocks_offset, unique) = read_trailer(path, &mut file, true)?;
        let dir_len = (summary.len - TRAILER_LEN - blocks_offset) as usize;
        let mut dir = vec![0u8; dir_len];
        file.read_exact_at(&mut dir, blocks_offset)?;
        let corrupt = |e: crate::codec::DecodeError| Error::corruption(path, blocks_offset, e.0);
        let mut d = Decoder::new(&dir);
        let n = d.varint().map_err(corrupt)?;
        let mut blocks = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let key = d.string().map_err(corrupt)?;
            let offset = d.varint().map_err(corrupt)?;
            blocks.push((key, offset));
        }
        Ok(IndexReader {
            path: path.to_owned(),
            file: Some(file),
            blocks,
            data_end: blocks_offset,
            summary,
            unique,
        })
    }

    /// An index with no keys and no backing file.
    pub fn empty(path: &Path) -> Self {
        IndexReader {
            path: path.to_owned(),
            file: None,
            blocks: Vec::new(),
            data_end: HEADER_LEN,
            summary: IndexSummary {
                len: 0,
                crc: 0,
                keys: 0,
                postings: 0,
            },
            unique: false,
        }
    }

    /// Checks header, trailer and checksum without loading anything.
    pub fn verify(path: &Path) -> Result<IndexSummary> {
        let mut file = File::open(path)?;
        read_trailer(path, &mut file, true).map(|(s, _, _)| s)
    }

    pub fn summary(&self) -> IndexSummary {
        self.summary
    }

    pub fn is_unique(&self) -> bool {
        self.unique
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Postings for `key`, ascending. Empty when the key is absent.
    pub fn get(&self, key: &str) -> Result<Vec<u64>> {
        let Some(file) = &self.file else {
            return Ok(Vec::new());
        };
        let block = self.blocks.partition_point(|(first, _)| first.as_str() <= key);
        if block == 0 {
            return Ok(Vec::new());
        }
        let start = self.blocks[block - 1].1;
        let end = self.blocks.get(block).map_or(self.data_end, |b| b.1);
        let mut buf = vec![0u8; (end - start) as usize];
        file.read_exact_at(&mut buf, start)?;
        let mut d = Decoder::new(&buf);
        while !d.is_empty() {
            let (k, postings) = decode_entry(&mut d, key).map_err(|e| Error::corruption(&self.path, start, e.0))?;
            match k.cmp(key) {
                std::cmp::Ordering::Less => {}
                std::cmp::Ordering::Equal => return Ok(postings.expect("decoded for matching key")),
                std::cmp::Ordering::Greater => break,
            }
        }
        Ok(Vec::new())
    }

    /// Every `(key, postings)` pair in key order.
    pub fn iter(&self) -> Result<IndexIter> {
        let reader = match &self.file {
            Some(f) => {
                let mut f = f.try_clone()?;
                f.seek(SeekFrom::Start(HEADER_LEN))?;
                Some(BufReader::with_capacity(1 << 16, f))
            }
            None => None,
        };
        Ok(IndexIter {
            path: self.path.clone(),
            reader,
            pos: HEADER_LEN,
            end: self.data_end,
        })
    }
}

/// Decodes one entry, materialising postings only when the key equals `want`.
fn decode_entry<'a>(
    d: &mut Decoder<'a>,
    want: &str,
) -> std::result::Result<(&'a str, Option<Vec<u64>>), crate::codec::DecodeError> {
    let key = d.str()?;
    let n = d.varint()?;
    if key == want {
        let mut postings = Vec::with_capacity(n as usize);
        let mut prev = 0u64;
        for _ in 0..n {
            prev += d.varint()?;
            postings.push(prev);
        }
        Ok((key, Some(postings)))
    } else {
        for _ in 0..n {
            d.varint()?;
        }
        Ok((key, None))
    }
}

/// Sequential walk over an index's entries.
pub struct IndexIter {
    path: PathBuf,
    reader: Option<BufReader<File>>,
    pos: u64,
    end: u64,
}

impl IndexIter {
    fn read_varint(&mut self) -> Result<u64> {
        let reader = self.reader.as_mut().expect("open reader");
        let mut value = 0u64;
        for shift in (0..64).step_by(7) {
            let mut byte = [0u8; 1];
            reader.read_exact(&mut byte)?;
            self.pos += 1;
            value |= u64::from(byte[0] & 0x7f) << shift;
            if byte[0] & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::corruption(&self.path, self.pos, "varint overflow"))
    }

    fn read_entry(&mut self) -> Result<(String, Vec<u64>)> {
        let key_len = self.read_varint()? as usize;
        if self.pos + key_len as u64 > self.end {
            return Err(Error::corruption(&self.path, self.pos, "key extends past data"));
        }
        let mut key = vec![0u8; key_len];
        self.reader.as_mut().expect("open reader").read_exact(&mut key)?;
        self.pos += key_len as u64;
        let key = String::from_utf8(key).map_err(|_| Error::corruption(&self.path, self.pos, "key is not UTF-8"))?;
        let n = self.read_varint()?;
        let mut postings = Vec::with_capacity(n.min(1 << 20) as usize);
        let mut prev = 0u64;
        for _ in 0..n {
            prev += self.read_varint()?;
            postings.push(prev);
        }
        if self.pos > self.end {
            return Err(Error::corruption(&self.path, self.pos, "entry extends past data"));
        }
        Ok((key, postings))
    }
}

impl Iterator for IndexIter {
    type Item = Result<(String, Vec<u64>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.reader.is_none() || self.pos >= self.end {
            return None;
        }
        let item = self.read_entry();
        if item.is_err() {
            self.reader = None;
        }
        Some(item)
    }
}
