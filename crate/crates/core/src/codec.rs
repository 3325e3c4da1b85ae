//! Binary record encoding shared by segments, index builders and spill files.
//!
//! Values are tag-length-value: one tag byte per attribute value, LEB128
//! varint lengths, UTF-8 strings, little-endian fixed-width timestamps and
//! floats. Records are wrapped in checksummed frames (see [`FrameWriter`]).

use std::fmt;
use std::io::{self, Read, Write};

use crate::model::{AttributeMap, AttributeValue, EventRecord, LogMetadata, ObjectRecord, Timestamp};

const TAG_STRING: u8 = 0;
const TAG_TIMESTAMP: u8 = 1;
const TAG_INTEGER: u8 = 2;
const TAG_FLOAT: u8 = 3;
const TAG_BOOLEAN: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError(pub String);

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

type DecodeResult<T> = Result<T, DecodeError>;

pub fn put_varint(buf: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        buf.push((v as u8) | 0x80);
        v >>= 7;
    }
    buf.push(v as u8);
}

pub fn varint_len(v: u64) -> usize {
    let bits = 64 - (v | 1).leading_zeros() as usize;
    bits.div_ceil(7)
}

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

/// Cursor over an encoded byte slice.
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn u8(&mut self) -> DecodeResult<u8> {
        let b = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| DecodeError("unexpected end of record".into()))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn bytes(&mut self, n: usize) -> DecodeResult<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| DecodeError("unexpected end of record".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn varint(&mut self) -> DecodeResult<u64> {
        let mut out = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.u8()?;
            out |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(out);
            }
        }
        Err(DecodeError("varint overflow".into()))
    }

    pub fn i64_le(&mut self) -> DecodeResult<i64> {
        let b = self.bytes(8)?;
        Ok(i64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> DecodeResult<&'a str> {
        let n = self.varint()? as usize;
        let b = self.bytes(n)?;
        std::str::from_utf8(b).map_err(|_| DecodeError("invalid utf-8 in string".into()))
    }

    pub fn string(&mut self) -> DecodeResult<String> {
        self.str().map(str::to_owned)
    }
}

/// Types with a binary form. `encoded_len` must equal the number of bytes
/// `encode` appends; memory accounting in the aggregation engine relies on it.
pub trait Encode {
    fn encode(&self, buf: &mut Vec<u8>);
    fn encoded_len(&self) -> usize;

    fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.encode(&mut buf);
        buf
    }
}

pub trait Decode: Sized {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self>;

    fn from_bytes(bytes: &[u8]) -> DecodeResult<Self> {
        let mut d = Decoder::new(bytes);
        let v = Self::decode(&mut d)?;
        if !d.is_empty() {
            return Err(DecodeError("trailing bytes after record".into()));
        }
        Ok(v)
    }
}

impl Encode for str {
    fn encode(&self, buf: &mut Vec<u8>) {
        put_varint(buf, self.len() as u64);
        buf.extend_from_slice(self.as_bytes());
    }

    fn encoded_len(&self) -> usize {
        varint_len(self.len() as u64) + self.len()
    }
}

impl Encode for String {
    fn encode(&self, buf: &mut Vec<u8>) {
        self.as_str().encode(buf)
    }

    fn encoded_len(&self) -> usize {
        self.as_str().encoded_len()
    }
}

impl Decode for String {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        d.string()
    }
}

impl Encode for u64 {
    fn encode(&self, buf: &mut Vec<u8>) {
        put_varint(buf, *self)
    }

    fn encoded_len(&self) -> usize {
        varint_len(*self)
    }
}

impl Decode for u64 {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        d.varint()
    }
}

impl Encode for i64 {
    fn encode(&self, buf: &mut Vec<u8>) {
        put_varint(buf, zigzag(*self))
    }

    fn encoded_len(&self) -> usize {
        varint_len(zigzag(*self))
    }
}

impl Decode for i64 {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        d.varint().map(unzigzag)
    }
}

impl Encode for Timestamp {
    fn encode(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.as_micros().to_le_bytes());
    }

    fn encoded_len(&self) -> usize {
        8
    }
}

impl Decode for Timestamp {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        d.i64_le().map(Timestamp::from_micros)
    }
}

impl<A: Encode, B: Encode> Encode for (A, B) {
    fn encode(&self, buf: &mut Vec<u8>) {
        self.0.encode(buf);
        self.1.encode(buf);
    }

    fn encoded_len(&self) -> usize {
        self.0.encoded_len() + self.1.encoded_len()
    }
}

impl<A: Decode, B: Decode> Decode for (A, B) {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        Ok((A::decode(d)?, B::decode(d)?))
    }
}

impl<A: Encode, B: Encode, C: Encode> Encode for (A, B, C) {
    fn encode(&self, buf: &mut Vec<u8>) {
        self.0.encode(buf);
        self.1.encode(buf);
        self.2.encode(buf);
    }

    fn encoded_len(&self) -> usize {
        self.0.encoded_len() + self.1.encoded_len() + self.2.encoded_len()
    }
}

impl<A: Decode, B: Decode, C: Decode> Decode for (A, B, C) {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        Ok((A::decode(d)?, B::decode(d)?, C::decode(d)?))
    }
}

impl<T: Encode> Encode for Vec<T> {
    fn encode(&self, buf: &mut Vec<u8>) {
        put_varint(buf, self.len() as u64);
        for item in self {
            item.encode(buf);
        }
    }

    fn encoded_len(&self) -> usize {
        varint_len(self.len() as u64) + self.iter().map(Encode::encoded_len).sum::<usize>()
    }
}

impl<T: Decode> Decode for Vec<T> {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        let n = d.varint()? as usize;
        // Cap the reservation: a corrupt count must not allocate gigabytes.
        let mut out = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            out.push(T::decode(d)?);
        }
        Ok(out)
    }
}

impl Encode for AttributeValue {
    fn encode(&self, buf: &mut Vec<u8>) {
        match self {
            AttributeValue::String(s) => {
                buf.push(TAG_STRING);
                s.encode(buf);
            }
            AttributeValue::Timestamp(t) => {
                buf.push(TAG_TIMESTAMP);
                t.encode(buf);
            }
            AttributeValue::Integer(i) => {
                buf.push(TAG_INTEGER);
                i.encode(buf);
            }
            AttributeValue::Float(x) => {
                buf.push(TAG_FLOAT);
                buf.extend_from_slice(&x.to_le_bytes());
            }
            AttributeValue::Boolean(b) => {
                buf.push(TAG_BOOLEAN);
                buf.push(u8::from(*b));
            }
        }
    }

    fn encoded_len(&self) -> usize {
        1 + match self {
            AttributeValue::String(s) => s.encoded_len(),
            AttributeValue::Timestamp(_) | AttributeValue::Float(_) => 8,
            AttributeValue::Integer(i) => i.encoded_len(),
            AttributeValue::Boolean(_) => 1,
        }
    }
}

impl Decode for AttributeValue {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        Ok(match d.u8()? {
            TAG_STRING => AttributeValue::String(d.string()?),
            TAG_TIMESTAMP => AttributeValue::Timestamp(Timestamp::decode(d)?),
            TAG_INTEGER => AttributeValue::Integer(i64::decode(d)?),
            TAG_FLOAT => AttributeValue::Float(f64::from_le_bytes(d.bytes(8)?.try_into().expect("8 bytes"))),
            TAG_BOOLEAN => match d.u8()? {
                0 => AttributeValue::Boolean(false),
                1 => AttributeValue::Boolean(true),
                b => return Err(DecodeError(format!("invalid boolean byte {b}"))),
            },
            tag => return Err(DecodeError(format!("unknown attribute tag {tag}"))),
        })
    }
}

impl Encode for AttributeMap {
    fn encode(&self, buf: &mut Vec<u8>) {
        put_varint(buf, self.len() as u64);
        for (k, v) in self {
            k.encode(buf);
            v.encode(buf);
        }
    }

    fn encoded_len(&self) -> usize {
        varint_len(self.len() as u64) + self.iter().map(|(k, v)| k.encoded_len() + v.encoded_len()).sum::<usize>()
    }
}

impl Decode for AttributeMap {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        let n = d.varint()?;
        let mut map = AttributeMap::new();
        for _ in 0..n {
            let k = d.string()?;
            let v = AttributeValue::decode(d)?;
            map.insert(k, v);
        }
        Ok(map)
    }
}

impl Encode for EventRecord {
    fn encode(&self, buf: &mut Vec<u8>) {
        self.id.encode(buf);
        self.activity.encode(buf);
        self.timestamp.encode(buf);
        self.omap.encode(buf);
        self.vmap.encode(buf);
    }

    fn encoded_len(&self) -> usize {
        self.id.encoded_len()
            + self.activity.encoded_len()
            + 8
            + self.omap.encoded_len()
            + self.vmap.encoded_len()
    }
}

impl Decode for EventRecord {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        Ok(EventRecord {
            id: d.string()?,
            activity: d.string()?,
            timestamp: Timestamp::decode(d)?,
            omap: Vec::decode(d)?,
            vmap: AttributeMap::decode(d)?,
        })
    }
}

impl Encode for ObjectRecord {
    fn encode(&self, buf: &mut Vec<u8>) {
        self.id.encode(buf);
        self.otype.encode(buf);
        self.ovmap.encode(buf);
    }

    fn encoded_len(&self) -> usize {
        self.id.encoded_len() + self.otype.encoded_len() + self.ovmap.encoded_len()
    }
}

impl Decode for ObjectRecord {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        Ok(ObjectRecord {
            id: d.string()?,
            otype: d.string()?,
            ovmap: AttributeMap::decode(d)?,
        })
    }
}

impl Encode for LogMetadata {
    fn encode(&self, buf: &mut Vec<u8>) {
        self.version.encode(buf);
        self.ordering.encode(buf);
        put_varint(buf, self.attribute_names.len() as u64);
        for a in &self.attribute_names {
            a.encode(buf);
        }
        put_varint(buf, self.object_types.len() as u64);
        for t in &self.object_types {
            t.encode(buf);
        }
        self.global_event.encode(buf);
        self.global_object.encode(buf);
        self.extra.encode(buf);
    }

    fn encoded_len(&self) -> usize {
        self.version.encoded_len()
            + self.ordering.encoded_len()
            + varint_len(self.attribute_names.len() as u64)
            + self.attribute_names.iter().map(|a| a.encoded_len()).sum::<usize>()
            + varint_len(self.object_types.len() as u64)
            + self.object_types.iter().map(|t| t.encoded_len()).sum::<usize>()
            + self.global_event.encoded_len()
            + self.global_object.encoded_len()
            + self.extra.encoded_len()
    }
}

impl Decode for LogMetadata {
    fn decode(d: &mut Decoder<'_>) -> DecodeResult<Self> {
        let version = d.string()?;
        let ordering = d.string()?;
        let attribute_names = Vec::<String>::decode(d)?.into_iter().collect();
        let object_types = Vec::<String>::decode(d)?.into_iter().collect();
        Ok(LogMetadata {
            version,
            ordering,
            attribute_names,
            object_types,
            global_event: AttributeMap::decode(d)?,
            global_object: AttributeMap::decode(d)?,
            extra: AttributeMap::decode(d)?,
        })
    }
}

pub const FRAME_RECORD: u8 = 1;
pub const FRAME_FOOTER: u8 = 2;

/// Bytes a frame adds around its payload.
pub fn frame_overhead(payload_len: usize) -> usize {
    varint_len(payload_len as u64) + 1 + 4
}

/// Writes `varint(len) | kind | payload | crc32(kind ++ payload)` frames.
pub struct FrameWriter<W: Write> {
    inner: W,
    written: u64,
    scratch: Vec<u8>,
}

impl<W: Write> FrameWriter<W> {
    pub fn new(inner: W, already_written: u64) -> Self {
        FrameWriter {
            inner,
            written: already_written,
            scratch: Vec::new(),
        }
    }

    /// Offset the next frame will start at.
    pub fn position(&self) -> u64 {
        self.written
    }

    pub fn write_frame(&mut self, kind: u8, payload: &[u8]) -> io::Result<u64> {
        let start = self.written;
        self.scratch.clear();
        put_varint(&mut self.scratch, payload.len() as u64);
        self.scratch.push(kind);
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&[kind]);
        hasher.update(payload);
        self.inner.write_all(&self.scratch)?;
        self.inner.write_all(payload)?;
        self.inner.write_all(&hasher.finalize().to_le_bytes())?;
        self.written += (self.scratch.len() + payload.len() + 4) as u64;
        Ok(start)
    }

    pub fn write_record<T: Encode + ?Sized>(&mut self, record: &T) -> io::Result<u64> {
        let payload = {
            let mut buf = Vec::with_capacity(record.encoded_len());
            record.encode(&mut buf);
            buf
        };
        self.write_frame(FRAME_RECORD, &payload)
    }

    pub fn get_ref(&self) -> &W {
        &self.inner
    }

    pub fn get_mut(&mut self) -> &mut W {
        &mut self.inner
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Outcome of reading one frame.
#[derive(Debug)]
pub enum FrameRead {
    Frame { offset: u64, kind: u8, payload: Vec<u8> },
    /// Clean end of input at a frame boundary.
    End,
    /// Incomplete or checksum-failing bytes starting at `offset`.
    Torn { offset: u64, reason: String },
}

/// Sequential frame reader. Stops at `limit` bytes when one is given.
pub struct FrameReader<R: Read> {
    inner: R,
    pos: u64,
    limit: Option<u64>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R, start: u64, limit: Option<u64>) -> Self {
        FrameReader {
            inner,
            pos: start,
            limit,
        }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn next_frame(&mut self) -> io::Result<FrameRead> {
        let offset = self.pos;
        if self.limit.is_some_and(|l| offset >= l) {
            return Ok(FrameRead::End);
        }
        let torn = |reason: &str| FrameRead::Torn {
            offset,
            reason: reason.to_owned(),
        };

        let mut len = 0u64;
        let mut header_len = 0usize;
        let mut byte = [0u8; 1];
        loop {
            match read_full(&mut self.inner, &mut byte)? {
                0 if header_len == 0 => return Ok(FrameRead::End),
                0 => return Ok(torn("truncated frame header")),
                _ => {}
            }
            if header_len >= 10 {
                return Ok(torn("frame length overflow"));
            }
            len |= u64::from(byte[0] & 0x7f) << (7 * header_len);
            header_len += 1;
            if byte[0] & 0x80 == 0 {
                break;
            }
        }
        let total = header_len as u64 + 1 + len + 4;
        if self.limit.is_some_and(|l| offset + total > l) {
            return Ok(torn("frame extends past committed length"));
        }
        if len > (1 << 32) {
            return Ok(torn("implausible frame length"));
        }
        if read_full(&mut self.inner, &mut byte)? == 0 {
            return Ok(torn("truncated frame kind"));
        }
        let kind = byte[0];
        let mut payload = vec![0u8; len as usize];
        if read_full(&mut self.inner, &mut payload)? < payload.len() {
            return Ok(torn("truncated frame payload"));
        }
        let mut crc = [0u8; 4];
        if read_full(&mut self.inner, &mut crc)? < 4 {
            return Ok(torn("truncated frame checksum"));
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&[kind]);
        hasher.update(&payload);
        if hasher.finalize() != u32::from_le_bytes(crc) {
            return Ok(torn("frame checksum mismatch"));
        }
        self.pos += total;
        Ok(FrameRead::Frame { offset, kind, payload })
    }
}

/// Like `read_exact` but reports how much was read instead of failing on EOF.
pub(crate) fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Parses a frame that sits entirely inside `buf` at offset 0. Returns the
/// kind, the payload and the frame length.
pub(crate) fn parse_frame(buf: &[u8]) -> Result<(u8, &[u8], usize), DecodeError> {
    let mut d = Decoder::new(buf);
    let len = d.varint()? as usize;
    let kind = d.u8()?;
    let payload = d.bytes(len)?;
    let crc = d.bytes(4)?;
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&[kind]);
    hasher.update(payload);
    if hasher.finalize().to_le_bytes() != crc {
        return Err(DecodeError("frame checksum mismatch".into()));
    }
    Ok((kind, payload, d.position()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::sample_log;
    use proptest::prelude::*;

    #[test]
    fn varint_lengths() {
        for v in [0u64, 1, 127, 128, 16383, 16384, u64::MAX] {
            let mut buf = Vec::new();
            put_varint(&mut buf, v);
            assert_eq!(buf.len(), varint_len(v), "{v}");
            assert_eq!(Decoder::new(&buf).varint().unwrap(), v);
        }
    }

    #[test]
    fn sample_records_round_trip_and_lengths_agree() {
        let log = sample_log();
        for e in &log.events {
            let bytes = e.to_bytes();
            assert_eq!(bytes.len(), e.encoded_len());
            assert_eq!(&EventRecord::from_bytes(&bytes).unwrap(), e);
        }
        for o in &log.objects {
            assert_eq!(&ObjectRecord::from_bytes(&o.to_bytes()).unwrap(), o);
        }
        let bytes = log.metadata.to_bytes();
        assert_eq!(bytes.len(), log.metadata.encoded_len());
        assert_eq!(LogMetadata::from_bytes(&bytes).unwrap(), log.metadata);
    }

    #[test]
    fn torn_frames_are_detected() {
        let mut w = FrameWriter::new(Vec::new(), 0);
        w.write_frame(FRAME_RECORD, b"hello").unwrap();
        w.write_frame(FRAME_RECORD, b"world").unwrap();
        let bytes = w.into_inner();
        for cut in 0..bytes.len() {
            let mut r = FrameReader::new(&bytes[..cut], 0, None);
            let mut frames = 0;
            loop {
                match r.next_frame().unwrap() {
                    FrameRead::Frame { .. } => frames += 1,
                    FrameRead::End => {
                        assert!(cut == 0 || cut == 11, "clean end at {cut}");
                        break;
                    }
                    FrameRead::Torn { offset, .. } => {
                        assert_eq!(offset, if cut < 11 { 0 } else { 11 });
                        break;
                    }
                }
            }
            assert_eq!(frames, usize::from(cut >= 11));
        }
        let mut flipped = bytes.clone();
        flipped[3] ^= 0xff;
        assert!(matches!(
            FrameReader::new(&flipped[..], 0, None).next_frame().unwrap(),
            FrameRead::Torn { .. }
        ));
    }

    fn attr() -> impl Strategy<Value = AttributeValue> {
        prop_oneof![
            ".*".prop_map(AttributeValue::String),
            any::<i64>().prop_map(|m| AttributeValue::Timestamp(Timestamp::from_micros(m))),
            any::<i64>().prop_map(AttributeValue::Integer),
            any::<f64>().prop_map(AttributeValue::Float),
            any::<bool>().prop_map(AttributeValue::Boolean),
        ]
    }

    proptest! {
        #[test]
        fn event_encoding_round_trips(
            id in ".{0,12}",
            activity in ".{0,12}",
            ts in any::<i64>(),
            omap in proptest::collection::vec("[a-z0-9]{1,6}", 0..6),
            vmap in proptest::collection::btree_map(".{0,8}", attr(), 0..5),
        ) {
            let e = EventRecord::new(id, activity, Timestamp::from_micros(ts), omap, vmap);
            let bytes = e.to_bytes();
            prop_assert_eq!(bytes.len(), e.encoded_len());
            prop_assert_eq!(EventRecord::from_bytes(&bytes).unwrap(), e);
        }
    }
}
