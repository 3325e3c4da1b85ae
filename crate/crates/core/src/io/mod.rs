//! Streaming readers and writers for JSON-OCEL and XML-OCEL.
//!
//! Parsers run on a producer thread and hand records over a bounded channel,
//! so a log is never held in memory as a whole. A [`RecordStream`] always
//! knows its [`LogMetadata`] before the first record is pulled.

mod json;
mod xml;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::Arc;
use std::thread;

use crate::codec::{Decode, Decoder, Encode, FrameRead, FrameReader, FrameWriter};
use crate::error::{Error, Result};
use crate::model::{EventRecord, LogMetadata, ObjectRecord, OcelLog};
use crate::spill::{ExternalSorter, MemoryBudget};

pub use json::{parse_json, serialize_json};
pub use xml::{parse_xml, serialize_xml};

/// Records the parser thread may queue ahead of the consumer.
pub const CHANNEL_CAPACITY: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Xml,
}

impl Format {
    pub fn name(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Xml => "xml",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Record {
    Event(EventRecord),
    Object(ObjectRecord),
}

impl Encode for Record {
    fn encode(&self, buf: &mut Vec<u8>) {
        match self {
            Record::Event(e) => {
                buf.push(0);
                e.encode(buf);
            }
            Record::Object(o) => {
                buf.push(1);
                o.encode(buf);
            }
        }
    }

    fn encoded_len(&self) -> usize {
        1 + match self {
            Record::Event(e) => e.encoded_len(),
            Record::Object(o) => o.encoded_len(),
        }
    }
}

impl Decode for Record {
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, crate::codec::DecodeError> {
        match d.u8()? {
            0 => EventRecord::decode(d).map(Record::Event),
            1 => ObjectRecord::decode(d).map(Record::Object),
            t => Err(crate::codec::DecodeError(format!("unknown record tag {t}"))),
        }
    }
}

type RecordIter = Box<dyn Iterator<Item = Result<Record>> + Send>;

/// Metadata followed by a pull-based sequence of events and objects.
pub struct RecordStream {
    metadata: LogMetadata,
    records: RecordIter,
    buffered: Option<Arc<BufferGauge>>,
}

impl RecordStream {
    pub fn new<I>(metadata: LogMetadata, records: I) -> Self
    where
        I: Iterator<Item = Result<Record>> + Send + 'static,
    {
        RecordStream {
            metadata,
            records: Box::new(records),
            buffered: None,
        }
    }

    /// Objects first, then events, in the order they appear in `log`.
    pub fn from_log(log: OcelLog) -> Self {
        let objects = log.objects.into_iter().map(|o| Ok(Record::Object(o)));
        let events = log.events.into_iter().map(|e| Ok(Record::Event(e)));
        RecordStream::new(log.metadata, objects.chain(events))
    }

    pub fn metadata(&self) -> &LogMetadata {
        &self.metadata
    }

    /// Most records ever queued between the parser thread and the consumer.
    /// Besides the channel itself this counts one record blocked in `send`
    /// and one just received, so it is at most `CHANNEL_CAPACITY + 2`.
    /// `None` for streams that are not backed by a parser.
    pub fn buffered_high_water(&self) -> Option<usize> {
        self.buffered.as_ref().map(|g| g.high_water.load(Ordering::Relaxed))
    }

    pub fn into_parts(self) -> (LogMetadata, RecordIter) {
        (self.metadata, self.records)
    }

    /// Drains the stream into memory.
    pub fn collect_log(self) -> Result<OcelLog> {
        let mut log = OcelLog {
            metadata: self.metadata,
            ..OcelLog::default()
        };
        for record in self.records {
            match record? {
                Record::Event(e) => log.events.push(e),
                Record::Object(o) => log.objects.push(o),
            }
        }
        Ok(log)
    }
}

impl Iterator for RecordStream {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Result<Record>> {
        self.records.next()
    }
}

#[derive(Default, Debug)]
struct BufferGauge {
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
}

enum Message {
    Metadata(LogMetadata),
    Record(Record),
    Failed(Error),
}

/// Assembles metadata from the document's global sections and forwards
/// records to the consumer.
///
/// Global sections may appear after the record sections. Until all three
/// have been seen, records are parked in a temporary spill file so that the
/// consumer still receives metadata first without the parser holding the
/// log in memory.
pub(crate) struct Emitter {
    tx: SyncSender<Message>,
    gauge: Arc<BufferGauge>,
    metadata: LogMetadata,
    seen_log: bool,
    seen_event_defaults: bool,
    seen_object_defaults: bool,
    metadata_sent: bool,
    parked: Option<(tempfile::NamedTempFile, FrameWriter<BufWriter<File>>)>,
    /// Error raised inside a serde/quick-xml callback, reported in place of
    /// the wrapper error the library produces.
    pub(crate) failure: Option<Error>,
}

impl Emitter {
    pub(crate) fn metadata_mut(&mut self) -> &mut LogMetadata {
        &mut self.metadata
    }

    pub(crate) fn saw_global_log(&mut self) -> Result<()> {
        self.seen_log = true;
        self.maybe_release()
    }

    pub(crate) fn saw_global_event(&mut self) -> Result<()> {
        self.seen_event_defaults = true;
        self.maybe_release()
    }

    pub(crate) fn saw_global_object(&mut self) -> Result<()> {
        self.seen_object_defaults = true;
        self.maybe_release()
    }

    fn maybe_release(&mut self) -> Result<()> {
        if !self.metadata_sent && self.seen_log && self.seen_event_defaults && self.seen_object_defaults {
            self.release()?;
        }
        Ok(())
    }

    fn send(&self, msg: Message) -> Result<()> {
        let is_record = matches!(msg, Message::Record(_));
        if is_record {
            let now = self.gauge.in_flight.fetch_add(1, Ordering::Relaxed) + 1;
            self.gauge.high_water.fetch_max(now, Ordering::Relaxed);
        }
        self.tx.send(msg).map_err(|_| Error::Cancelled)
    }

    /// Sends metadata and replays anything parked.
    fn release(&mut self) -> Result<()> {
        self.metadata_sent = true;
        self.send(Message::Metadata(self.metadata.clone()))?;
        if let Some((file, writer)) = self.parked.take() {
            writer.into_inner().flush()?;
            let mut frames = FrameReader::new(BufReader::new(File::open(file.path())?), 0, None);
            loop {
                match frames.next_frame()? {
                    FrameRead::Frame { offset, payload, .. } => {
                        let record = Record::from_bytes(&payload)
                            .map_err(|e| Error::corruption(file.path(), offset, e.0))?;
                        self.send(Message::Record(record))?;
                    }
                    FrameRead::End => break,
                    FrameRead::Torn { offset, reason } => return Err(Error::corruption(file.path(), offset, reason)),
                }
            }
        }
        Ok(())
    }

    pub(crate) fn emit(&mut self, record: Record) -> Result<()> {
        if self.metadata_sent {
            return self.send(Message::Record(record));
        }
        if self.parked.is_none() {
            let file = tempfile::NamedTempFile::new()?;
            let writer = FrameWriter::new(BufWriter::new(file.reopen()?), 0);
            self.parked = Some((file, writer));
        }
        let (_, writer) = self.parked.as_mut().expect("parked file");
        writer.write_record(&record)?;
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if !self.metadata_sent {
            self.release()?;
        }
        Ok(())
    }
}

/// Runs `parse` on a producer thread and returns once metadata is known.
pub(crate) fn spawn_parser<F>(name: &str, parse: F) -> Result<RecordStream>
where
    F: FnOnce(&mut Emitter) -> Result<()> + Send + 'static,
{
    let (tx, rx) = sync_channel(CHANNEL_CAPACITY);
    let gauge = Arc::new(BufferGauge::default());
    let thread_gauge = gauge.clone();
    thread::Builder::new().name(format!("ocel-{name}-parser")).spawn(move || {
        let mut emitter = Emitter {
            tx: tx.clone(),
            gauge: thread_gauge,
            metadata: LogMetadata::default(),
            seen_log: false,
            seen_event_defaults: false,
            seen_object_defaults: false,
            metadata_sent: false,
            parked: None,
            failure: None,
        };
        let outcome = parse(&mut emitter).and_then(|()| emitter.finish());
        if let Err(e) = outcome {
            let e = emitter.failure.take().unwrap_or(e);
            if !matches!(e, Error::Cancelled) {
                let _ = tx.send(Message::Failed(e));
            }
        }
    })?;

    match rx.recv() {
        Ok(Message::Metadata(metadata)) => Ok(RecordStream {
            metadata,
            records: Box::new(ChannelRecords {
                rx,
                gauge: gauge.clone(),
                done: false,
            }),
            buffered: Some(gauge),
        }),
        Ok(Message::Failed(e)) => Err(e),
        Ok(Message::Record(_)) => unreachable!("records are never sent before metadata"),
        Err(_) => Err(Error::Io(io::Error::other("parser thread exited without a result"))),
    }
}

struct ChannelRecords {
    rx: Receiver<Message>,
    gauge: Arc<BufferGauge>,
    done: bool,
}

impl Iterator for ChannelRecords {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Result<Record>> {
        if self.done {
            return None;
        }
        match self.rx.recv() {
            Ok(Message::Record(r)) => {
                self.gauge.in_flight.fetch_sub(1, Ordering::Relaxed);
                Some(Ok(r))
            }
            Ok(Message::Failed(e)) => {
                self.done = true;
                Some(Err(e))
            }
            Ok(Message::Metadata(_)) => unreachable!("metadata is sent once"),
            Err(_) => {
                self.done = true;
                None
            }
        }
    }
}

/// Byte stream with gzip transparently removed.
pub type Input = Box<dyn BufRead + Send>;

/// Wraps `reader`, decompressing it if it starts with the gzip magic bytes.
pub fn decompressing<R: Read + Send + 'static>(reader: R) -> io::Result<Input> {
    let mut buffered = BufReader::with_capacity(256 * 1024, reader);
    let head = buffered.fill_buf()?;
    if head.starts_with(&[0x1f, 0x8b]) {
        let decoder = flate2::bufread::MultiGzDecoder::new(buffered);
        Ok(Box::new(BufReader::with_capacity(256 * 1024, decoder)))
    } else {
        Ok(Box::new(buffered))
    }
}

/// Looks at the first significant byte: `{` means JSON, `<` means XML.
/// Leading whitespace and a UTF-8 byte-order mark are consumed.
pub fn sniff_format(input: &mut dyn BufRead) -> io::Result<Option<Format>> {
    let mut at_start = true;
    loop {
        let buf = input.fill_buf()?;
        if buf.is_empty() {
            return Ok(None);
        }
        if at_start && buf.starts_with(&[0xef, 0xbb, 0xbf]) {
            input.consume(3);
            at_start = false;
            continue;
        }
        at_start = false;
        match buf.iter().position(|b| !b.is_ascii_whitespace()) {
            Some(i) => {
                let format = match buf[i] {
                    b'{' => Some(Format::Json),
                    b'<' => Some(Format::Xml),
                    _ => None,
                };
                input.consume(i);
                return Ok(format);
            }
            None => {
                let n = buf.len();
                input.consume(n);
            }
        }
    }
}

/// Opens a file (plain or gzip) and parses it, sniffing the format unless
/// one is given.
pub fn parse_path(path: &Path, format: Option<Format>) -> Result<RecordStream> {
    let file = File::open(path)?;
    parse_reader(file, format)
}

pub fn parse_reader<R: Read + Send + 'static>(reader: R, format: Option<Format>) -> Result<RecordStream> {
    let mut input = decompressing(reader)?;
    let format = match format {
        Some(f) => f,
        None => sniff_format(&mut input)?.ok_or_else(|| Error::Parse {
            format: "ocel",
            position: "byte offset 0".into(),
            message: "input is neither JSON nor XML".into(),
        })?,
    };
    match format {
        Format::Json => parse_json(input),
        Format::Xml => parse_xml(input),
    }
}

pub fn serialize<W: Write>(stream: RecordStream, sink: W, format: Format) -> Result<()> {
    match format {
        Format::Json => serialize_json(stream, sink),
        Format::Xml => serialize_xml(stream, sink),
    }
}

/// Event ordered by `(timestamp, id)` only; used to put records into
/// canonical output order.
pub(crate) struct ByTime(pub(crate) EventRecord);

impl PartialEq for ByTime {
    fn eq(&self, other: &Self) -> bool {
        self.0.sort_key() == other.0.sort_key()
    }
}
impl Eq for ByTime {}
impl PartialOrd for ByTime {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ByTime {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.sort_key().cmp(&other.0.sort_key())
    }
}
impl Encode for ByTime {
    fn encode(&self, buf: &mut Vec<u8>) {
        self.0.encode(buf)
    }
    fn encoded_len(&self) -> usize {
        self.0.encoded_len()
    }
}
impl Decode for ByTime {
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, crate::codec::DecodeError> {
        EventRecord::decode(d).map(ByTime)
    }
}

pub(crate) struct ById(pub(crate) ObjectRecord);

impl PartialEq for ById {
    fn eq(&self, other: &Self) -> bool {
        self.0.id == other.0.id
    }
}
impl Eq for ById {}
impl PartialOrd for ById {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ById {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.id.cmp(&other.0.id)
    }
}
impl Encode for ById {
    fn encode(&self, buf: &mut Vec<u8>) {
        self.0.encode(buf)
    }
    fn encoded_len(&self) -> usize {
        self.0.encoded_len()
    }
}
impl Decode for ById {
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, crate::codec::DecodeError> {
        ObjectRecord::decode(d).map(ById)
    }
}

/// Memory the serializers may use to reorder records before spilling.
const SERIALIZER_BUDGET: u64 = 64 << 20;

/// Splits a stream into objects (by id) and events (by time), spilling to
/// the system temp directory when the log is large.
pub(crate) fn canonical_order(
    stream: RecordStream,
) -> Result<(
    LogMetadata,
    impl Iterator<Item = Result<ObjectRecord>>,
    impl Iterator<Item = Result<EventRecord>>,
)> {
    let tmp = std::env::temp_dir();
    let budget = MemoryBudget::new(SERIALIZER_BUDGET / 2)?;
    let mut objects = ExternalSorter::new(budget.fresh(), &tmp)?;
    let mut events = ExternalSorter::new(budget, &tmp)?;
    let (metadata, records) = stream.into_parts();
    for record in records {
        match record? {
            Record::Event(e) => events.push(ByTime(e))?,
            Record::Object(o) => objects.push(ById(o))?,
        }
    }
    let objects = objects.finish()?.map(|r| r.map(|o| o.0));
    let events = events.finish()?.map(|r| r.map(|e| e.0));
    Ok((metadata, objects, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn sniffing() {
        let mut input: Box<dyn BufRead> = Box::new(Cursor::new(b"\xef\xbb\xbf  \n {}".to_vec()));
        assert_eq!(sniff_format(&mut input).unwrap(), Some(Format::Json));
        let mut input: Box<dyn BufRead> = Box::new(Cursor::new(b"<?xml?>".to_vec()));
        assert_eq!(sniff_format(&mut input).unwrap(), Some(Format::Xml));
        let mut input: Box<dyn BufRead> = Box::new(Cursor::new(b"   ".to_vec()));
        assert_eq!(sniff_format(&mut input).unwrap(), None);
    }

    #[test]
    fn gzip_is_detected() {
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        gz.write_all(b"{\"ocel:events\": {}}").unwrap();
        let bytes = gz.finish().unwrap();
        let mut input = decompressing(Cursor::new(bytes)).unwrap();
        let mut text = String::new();
        input.read_to_string(&mut text).unwrap();
        assert_eq!(text, "{\"ocel:events\": {}}");
    }
}
