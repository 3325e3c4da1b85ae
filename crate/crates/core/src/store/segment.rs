//! Append-only record segments.
//!
//! A segment is a 6-byte header (`OCSG`, format version, kind) followed by
//! checksummed frames. Record frames hold one encoded record; a closed
//! segment ends with a footer frame carrying the record count and, for
//! events, the timestamp range.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{self, put_varint, Decode, Decoder, FrameRead, FrameReader, FrameWriter, FRAME_FOOTER, FRAME_RECORD};
use crate::error::{Error, Result};

pub const SEGMENT_MAGIC: &[u8; 4] = b"OCSG";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: u64 = 6;

const OFFSET_BITS: u32 = 40;
const OFFSET_MASK: u64 = (1 << OFFSET_BITS) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Events,
    Objects,
    Meta,
}

impl SegmentKind {
    fn tag(self) -> u8 {
        match self {
            SegmentKind::Events => 0,
            SegmentKind::Objects => 1,
            SegmentKind::Meta => 2,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            SegmentKind::Events => "events",
            SegmentKind::Objects => "objects",
            SegmentKind::Meta => "meta",
        }
    }

    pub fn file_name(self, seq: u32) -> String {
        match self {
            SegmentKind::Meta => "meta.seg".to_owned(),
            _ => format!("{}-{seq:03}.seg", self.prefix()),
        }
    }
}

/// Packs a segment sequence number and byte offset into one sortable value.
/// Records later in the collection always get larger locations.
pub fn location(seq: u32, offset: u64) -> u64 {
    debug_assert!(offset <= OFFSET_MASK);
    (u64::from(seq) << OFFSET_BITS) | offset
}

pub fn split_location(loc: u64) -> (u32, u64) {
    ((loc >> OFFSET_BITS) as u32, loc & OFFSET_MASK)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub name: String,
    pub kind: SegmentKind,
    pub seq: u32,
    /// Committed length in bytes, footer included.
    pub len: u64,
    pub records: u64,
    pub min_ts: Option<i64>,
    pub max_ts: Option<i64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Footer {
    pub records: u64,
    pub min_ts: Option<i64>,
    pub max_ts: Option<i64>,
}

impl Footer {
    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20);
        put_varint(&mut buf, self.records);
        match (self.min_ts, self.max_ts) {
            (Some(lo), Some(hi)) => {
                buf.push(1);
                buf.extend_from_slice(&lo.to_le_bytes());
                buf.extend_from_slice(&hi.to_le_bytes());
            }
            _ => buf.push(0),
        }
        buf
    }

    fn decode(payload: &[u8]) -> std::result::Result<Self, codec::DecodeError> {
        let mut d = Decoder::new(payload);
        let records = d.varint()?;
        let (min_ts, max_ts) = match d.u8()? {
            1 => (Some(d.i64_le()?), Some(d.i64_le()?)),
            _ => (None, None),
        };
        Ok(Footer { records, min_ts, max_ts })
    }

    fn observe(&mut self, ts: Option<i64>) {
        self.records += 1;
        if let Some(t) = ts {
            self.min_ts = Some(self.min_ts.map_or(t, |m| m.min(t)));
            self.max_ts = Some(self.max_ts.map_or(t, |m| m.max(t)));
        }
    }
}

fn write_header(file: &mut File, kind: SegmentKind) -> Result<()> {
    let mut header = Vec::with_capacity(HEADER_LEN as usize);
    header.extend_from_slice(SEGMENT_MAGIC);
    header.push(FORMAT_VERSION);
    header.push(kind.tag());
    file.write_all(&header)?;
    Ok(())
}

fn check_header(path: &Path, header: &[u8], kind: SegmentKind) -> Result<()> {
    if header.len() < HEADER_LEN as usize || &header[..4] != SEGMENT_MAGIC {
        return Err(Error::corruption(path, 0, "not a segment file"));
    }
    if header[4] != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            file: path.to_owned(),
            found: header[4],
            expected: FORMAT_VERSION,
        });
    }
    if header[5] != kind.tag() {
        return Err(Error::corruption(path, 5, "segment kind does not match file name"));
    }
    Ok(())
}

/// Appends records to a numbered series of segments, rolling over at
/// `max_bytes`.
pub struct SegmentWriter {
    dir: PathBuf,
    kind: SegmentKind,
    max_bytes: u64,
    seq: u32,
    current: Option<(FrameWriter<BufWriter<File>>, Footer)>,
    closed: Vec<SegmentInfo>,
}

impl SegmentWriter {
    pub fn new(dir: &Path, kind: SegmentKind, max_bytes: u64) -> Self {
        SegmentWriter {
            dir: dir.to_owned(),
            kind,
            max_bytes: max_bytes.max(HEADER_LEN + 64),
            seq: 0,
            current: None,
            closed: Vec::new(),
        }
    }

    fn open_next(&mut self) -> Result<()> {
        let path = self.dir.join(self.kind.file_name(self.seq));
        let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
        write_header(&mut file, self.kind)?;
        let writer = FrameWriter::new(BufWriter::with_capacity(1 << 20, file), HEADER_LEN);
        self.current = Some((writer, Footer::default()));
        Ok(())
    }

    fn close_current(&mut self) -> Result<()> {
        if let Some((mut w, footer)) = self.current.take() {
            w.write_frame(FRAME_FOOTER, &footer.encode())?;
            let len = w.position();
            let file = w.into_inner().into_inner().map_err(|e| e.into_error())?;
            file.sync_all()?;
            self.closed.push(SegmentInfo {
                name: self.kind.file_name(self.seq),
                kind: self.kind,
                seq: self.seq,
                len,
                records: footer.records,
                min_ts: footer.min_ts,
                max_ts: footer.max_ts,
            });
            self.seq += 1;
        }
        Ok(())
    }

    /// Appends an encoded record and returns its location.
    pub fn append(&mut self, payload: &[u8], ts: Option<i64>) -> Result<u64> {
        let frame_len = (codec::frame_overhead(payload.len()) + payload.len()) as u64;
        if let Some((w, footer)) = &self.current {
            if footer.records > 0 && w.position() + frame_len > self.max_bytes {
                self.close_current()?;
            }
        }
        if self.current.is_none() {
            self.open_next()?;
        }
        let (w, footer) = self.current.as_mut().expect("open segment");
        let offset = w.write_frame(FRAME_RECORD, payload)?;
        footer.observe(ts);
        Ok(location(self.seq, offset))
    }

    /// Writes footers, syncs and returns the segment descriptors.
    pub fn finish(mut self) -> Result<Vec<SegmentInfo>> {
        self.close_current()?;
        Ok(std::mem::take(&mut self.closed))
    }

    /// Flushes and syncs without writing a footer; used to simulate a crash.
    pub(crate) fn crash(mut self, torn_tail: &[u8]) -> Result<()> {
        if let Some((mut w, _)) = self.current.take() {
            w.get_mut().write_all(torn_tail)?;
            let file = w.into_inner().into_inner().map_err(|e| e.into_error())?;
            file.sync_all()?;
        }
        Ok(())
    }
}

/// A committed segment opened for reading.
pub struct SegmentFile {
    pub path: PathBuf,
    pub info: SegmentInfo,
    file: File,
}

impl SegmentFile {
    pub fn open(dir: &Path, info: &SegmentInfo) -> Result<Self> {
        let path = dir.join(&info.name);
        let mut file = File::open(&path)?;
        let mut header = [0u8; HEADER_LEN as usize];
        let n = codec::read_full(&mut file, &mut header)?;
        check_header(&path, &header[..n], info.kind)?;
        Ok(SegmentFile {
            path,
            info: info.clone(),
            file,
        })
    }

    /// Reads the record frame at `offset`.
    pub fn read_at(&self, offset: u64) -> Result<Vec<u8>> {
        let corrupt = |msg: &str| Error::corruption(&self.path, offset, msg);
        if offset < HEADER_LEN || offset >= self.info.len {
            return Err(corrupt("location outside committed segment"));
        }
        let avail = (self.info.len - offset) as usize;
        let mut buf = vec![0u8; avail.min(512)];
        self.file.read_exact_at(&mut buf, offset)?;
        let mut d = Decoder::new(&buf);
        let len = d.varint().map_err(|_| corrupt("bad frame header"))? as usize;
        let total = d.position() + 1 + len + 4;
        if total > avail {
            return Err(corrupt("frame extends past committed length"));
        }
        if total > buf.len() {
            buf.resize(total, 0);
            self.file.read_exact_at(&mut buf, offset)?;
        }
        let (kind, payload, _) = codec::parse_frame(&buf).map_err(|e| corrupt(&e.0))?;
        if kind != FRAME_RECORD {
            return Err(corrupt("location does not point at a record"));
        }
        Ok(payload.to_vec())
    }

    pub fn read_record<T: Decode>(&self, offset: u64) -> Result<T> {
        let payload = self.read_at(offset)?;
        T::from_bytes(&payload).map_err(|e| Error::corruption(&self.path, offset, e.0))
    }

    /// Sequential reader over the committed frames.
    pub fn frames(&self) -> Result<FrameReader<BufReader<File>>> {
        let mut file = self.file.try_clone()?;
        file.seek(SeekFrom::Start(HEADER_LEN))?;
        Ok(FrameReader::new(
            BufReader::with_capacity(1 << 20, file),
            HEADER_LEN,
            Some(self.info.len),
        ))
    }
}

/// Sequential scan over every record of a series of segments.
pub struct SegmentScan<T> {
    segments: Vec<std::sync::Arc<SegmentFile>>,
    next_segment: usize,
    current: Option<(u32, PathBuf, FrameReader<BufReader<File>>)>,
    done: bool,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Decode> SegmentScan<T> {
    pub fn new(segments: Vec<std::sync::Arc<SegmentFile>>) -> Self {
        SegmentScan {
            segments,
            next_segment: 0,
            current: None,
            done: false,
            _marker: std::marker::PhantomData,
        }
    }

    /// Next `(location, record)`.
    pub fn next_located(&mut self) -> Option<Result<(u64, T)>> {
        if self.done {
            return None;
        }
        loop {
            if self.current.is_none() {
                let seg = self.segments.get(self.next_segment)?;
                self.next_segment += 1;
                match seg.frames() {
                    Ok(frames) => self.current = Some((seg.info.seq, seg.path.clone(), frames)),
                    Err(e) => {
                        self.done = true;
                        return Some(Err(e));
                    }
                }
            }
            let (seq, path, frames) = self.current.as_mut().expect("current segment");
            let outcome = match frames.next_frame() {
                Ok(FrameRead::Frame { kind: FRAME_FOOTER, .. }) | Ok(FrameRead::End) => {
                    self.current = None;
                    continue;
                }
                Ok(FrameRead::Frame { offset, kind: _, payload }) => T::from_bytes(&payload)
                    .map(|r| (location(*seq, offset), r))
                    .map_err(|e| Error::corruption(path.as_path(), offset, e.0)),
                Ok(FrameRead::Torn { offset, reason }) => Err(Error::corruption(path.as_path(), offset, reason)),
                Err(e) => Err(e.into()),
            };
            if outcome.is_err() {
                self.done = true;
            }
            return Some(outcome);
        }
    }
}

/// What a recovery walk found in one segment file.
#[derive(Debug)]
pub struct WalkResult {
    pub info: SegmentInfo,
    /// Byte offset and reason of a discarded tail, if any.
    pub torn: Option<(u64, u64, String)>,
    pub had_footer: bool,
}

/// Walks a segment that may end in a torn write, truncates the file to its
/// last complete frame and makes sure it ends with a footer.
pub fn recover_segment(dir: &Path, kind: SegmentKind, seq: u32, decode_ts: impl Fn(&[u8]) -> Option<i64>) -> Result<WalkResult> {
    let name = kind.file_name(seq);
    let path = dir.join(&name);
    let mut file = OpenOptions::new().read(true).write(true).open(&path)?;
    let file_len = file.metadata()?.len();
    let mut header = [0u8; HEADER_LEN as usize];
    let n = codec::read_full(&mut file, &mut header)?;
    if n < HEADER_LEN as usize {
        // Crashed before the header was complete: rewrite it as empty.
        file.set_len(0)?;
        file.seek(SeekFrom::Start(0))?;
        write_header(&mut file, kind)?;
    } else {
        check_header(&path, &header, kind)?;
    }

    let mut footer = Footer::default();
    let mut stored_footer = None;
    let mut torn = None;
    let mut valid_end = HEADER_LEN;
    {
        let mut reader = file.try_clone()?;
        reader.seek(SeekFrom::Start(HEADER_LEN))?;
        let mut frames = FrameReader::new(BufReader::new(reader), HEADER_LEN, None);
        loop {
            match frames.next_frame()? {
                FrameRead::Frame { kind: FRAME_FOOTER, payload, offset } => {
                    stored_footer = Footer::decode(&payload).ok();
                    if stored_footer.is_none() {
                        torn = Some((offset, file_len.saturating_sub(offset), "undecodable footer".to_owned()));
                        break;
                    }
                    valid_end = frames.position();
                    break;
                }
                FrameRead::Frame { payload, .. } => {
                    footer.observe(decode_ts(&payload));
                    valid_end = frames.position();
                }
                FrameRead::End => break,
                FrameRead::Torn { offset, reason } => {
                    torn = Some((offset, file_len - offset, reason));
                    break;
                }
            }
        }
    }
    if torn.is_none() && valid_end < file_len && stored_footer.is_some() {
        torn = Some((valid_end, file_len - valid_end, "bytes after footer".to_owned()));
    }
    let had_footer = stored_footer.is_some();
    if valid_end < file_len || n < HEADER_LEN as usize {
        file.set_len(valid_end)?;
    }
    let mut len = valid_end;
    if !had_footer {
        file.seek(SeekFrom::Start(valid_end))?;
        let mut w = FrameWriter::new(BufWriter::new(&mut file), valid_end);
        w.write_frame(FRAME_FOOTER, &footer.encode())?;
        len = w.position();
        w.into_inner().flush()?;
    }
    file.sync_all()?;
    Ok(WalkResult {
        info: SegmentInfo {
            name,
            kind,
            seq,
            len,
            records: footer.records,
            min_ts: footer.min_ts,
            max_ts: footer.max_ts,
        },
        torn,
        had_footer,
    })
}

/// Sequence numbers of the `kind` segments present in `dir`, ascending.
pub fn list_segments(dir: &Path, kind: SegmentKind) -> Result<Vec<u32>> {
    let mut seqs = Vec::new();
    if !dir.exists() {
        return Ok(seqs);
    }
    let prefix = format!("{}-", kind.prefix());
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(rest) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".seg")) {
            if let Ok(seq) = rest.parse::<u32>() {
                seqs.push(seq);
            }
        }
    }
    seqs.sort_unstable();
    Ok(seqs)
}

/// Writes the single-frame metadata segment.
pub fn write_meta_segment(dir: &Path, payload: &[u8]) -> Result<u64> {
    let path = dir.join(SegmentKind::Meta.file_name(0));
    let mut file = File::create(&path)?;
    write_header(&mut file, SegmentKind::Meta)?;
    let mut w = FrameWriter::new(BufWriter::new(file), HEADER_LEN);
    w.write_frame(FRAME_RECORD, payload)?;
    let len = w.position();
    w.into_inner().into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(len)
}

/// Reads the metadata payload, or `None` if the segment is missing or torn.
pub fn read_meta_segment(dir: &Path) -> Result<Option<Vec<u8>>> {
    let path = dir.join(SegmentKind::Meta.file_name(0));
    let mut file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN as usize {
        return Ok(None);
    }
    check_header(&path, &bytes, SegmentKind::Meta)?;
    match codec::parse_frame(&bytes[HEADER_LEN as usize..]) {
        Ok((FRAME_RECORD, payload, _)) => Ok(Some(payload.to_vec())),
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locations_order_by_segment_then_offset() {
        assert!(location(0, 999_999) < location(1, 6));
        assert_eq!(split_location(location(7, 123)), (7, 123));
    }

    #[test]
    fn writer_rolls_over_and_reader_finds_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = SegmentWriter::new(dir.path(), SegmentKind::Objects, 200);
        let mut locs = Vec::new();
        for i in 0..50u64 {
            locs.push(w.append(format!("record-{i:03}").as_bytes(), None).unwrap());
        }
        let infos = w.finish().unwrap();
        assert!(infos.len() > 1);
        assert_eq!(infos.iter().map(|i| i.records).sum::<u64>(), 50);
        let files: Vec<_> = infos.iter().map(|i| SegmentFile::open(dir.path(), i).unwrap()).collect();
        for (i, loc) in locs.iter().enumerate() {
            let (seq, off) = split_location(*loc);
            assert_eq!(files[seq as usize].read_at(off).unwrap(), format!("record-{i:03}").as_bytes());
        }
        assert!(locs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn recovery_drops_torn_tail_and_adds_footer() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = SegmentWriter::new(dir.path(), SegmentKind::Objects, 1 << 20);
        for i in 0..10u64 {
            w.append(format!("r{i}").as_bytes(), None).unwrap();
        }
        w.crash(&[5, 1, b'x']).unwrap();
        let result = recover_segment(dir.path(), SegmentKind::Objects, 0, |_| None).unwrap();
        assert_eq!(result.info.records, 10);
        assert!(!result.had_footer);
        let (offset, bytes, _) = result.torn.unwrap();
        assert_eq!(bytes, 3);
        assert_eq!(result.info.len, offset + footer_len(10));
        // Recovered segment is clean.
        let again = recover_segment(dir.path(), SegmentKind::Objects, 0, |_| None).unwrap();
        assert!(again.torn.is_none() && again.had_footer);
        assert_eq!(again.info.len, result.info.len);
    }

    fn footer_len(records: u64) -> u64 {
        let payload = Footer { records, ..Footer::default() }.encode();
        (codec::frame_overhead(payload.len()) + payload.len()) as u64
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let infos = {
            let mut w = SegmentWriter::new(dir.path(), SegmentKind::Events, 1 << 20);
            w.append(b"x", Some(1)).unwrap();
            w.finish().unwrap()
        };
        let path = dir.path().join(&infos[0].name);
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 99;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            SegmentFile::open(dir.path(), &infos[0]),
            Err(Error::UnsupportedVersion { found: 99, .. })
        ));
    }
}
