use std::fmt;
use std::io::{self, Read, Write};

use serde::de::{self, DeserializeSeed, Deserializer, MapAccess, Visitor};
use serde_json::{Map, Value};

use super::{canonical_order, spawn_parser, Emitter, Record, RecordStream};
use crate::error::{Error, Result};
use crate::model::{AttributeMap, AttributeValue, EventRecord, LogMetadata, ObjectRecord, Timestamp};

const GLOBAL_LOG: &str = "ocel:global-log";
const GLOBAL_EVENT: &str = "ocel:global-event";
const GLOBAL_OBJECT: &str = "ocel:global-object";
const EVENTS: &str = "ocel:events";
const OBJECTS: &str = "ocel:objects";

/// Counts bytes handed to serde_json so errors can carry a byte offset.
struct CountingReader<R> {
    inner: R,
    count: std::sync::Arc<std::sync::atomic::AtomicU64>,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count.fetch_add(n as u64, std::sync::atomic::Ordering::Relaxed);
        Ok(n)
    }
}

/// Parses a JSON-OCEL document. `source` should be buffered; it is read one
/// byte at a time.
pub fn parse_json<R: Read + Send + 'static>(source: R) -> Result<RecordStream> {
    spawn_parser("json", move |emitter| {
        let count = std::sync::Arc::new(std::sync::atomic::AtomicU64::new(0));
        let reader = CountingReader {
            inner: source,
            count: count.clone(),
        };
        let mut de = serde_json::Deserializer::from_reader(reader);
        let outcome = de
            .deserialize_map(DocumentVisitor { emitter: &mut *emitter })
            .and_then(|()| de.end());
        match outcome {
            Ok(()) => Ok(()),
            Err(e) => {
                if let Some(inner) = emitter.failure.take() {
                    return Err(inner);
                }
                if e.is_io() {
                    return Err(Error::Io(e.into()));
                }
                let offset = count.load(std::sync::atomic::Ordering::Relaxed);
                let message = strip_position(&e.to_string());
                Err(if e.is_data() {
                    Error::schema("document", message)
                } else {
                    Error::Parse {
                        format: "json",
                        position: format!("byte offset {offset} (line {}, column {})", e.line(), e.column()),
                        message,
                    }
                })
            }
        }
    })
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_owned(),
        None => msg.to_owned(),
    }
}

/// Stores `err` in the emitter and returns a placeholder serde error.
fn fail<E: de::Error>(emitter: &mut Emitter, err: Error) -> E {
    let msg = err.to_string();
    emitter.failure = Some(err);
    E::custom(msg)
}

struct DocumentVisitor<'a> {
    emitter: &'a mut Emitter,
}

impl<'de> Visitor<'de> for DocumentVisitor<'_> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a JSON-OCEL document object")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<(), A::Error> {
        let emitter = self.emitter;
        while let Some(key) = map.next_key::<String>()? {
            let outcome = match key.as_str() {
                GLOBAL_LOG => {
                    let section: Map<String, Value> = map.next_value()?;
                    read_global_log(emitter.metadata_mut(), section).and_then(|()| emitter.saw_global_log())
                }
                GLOBAL_EVENT => {
                    let section: Map<String, Value> = map.next_value()?;
                    let defaults = attribute_map(section, "ocel:global-event");
                    emitter.metadata_mut().global_event.extend(defaults);
                    emitter.saw_global_event()
                }
                GLOBAL_OBJECT => {
                    let section: Map<String, Value> = map.next_value()?;
                    let defaults = attribute_map(section, "ocel:global-object");
                    emitter.metadata_mut().global_object.extend(defaults);
                    emitter.saw_global_object()
                }
                EVENTS => {
                    map.next_value_seed(RecordsSeed {
                        emitter: &mut *emitter,
                        kind: RecordKind::Event,
                    })?;
                    Ok(())
                }
                OBJECTS => {
                    map.next_value_seed(RecordsSeed {
                        emitter: &mut *emitter,
                        kind: RecordKind::Object,
                    })?;
                    Ok(())
                }
                _ => {
                    let value: Value = map.next_value()?;
                    if let Some(v) = to_attribute(&key, value) {
                        emitter.metadata_mut().extra.insert(key, v);
                    }
                    Ok(())
                }
            };
            if let Err(e) = outcome {
                return Err(fail(emitter, e));
            }
        }
        Ok(())
    }
}

fn read_global_log(meta: &mut LogMetadata, section: Map<String, Value>) -> Result<()> {
    for (key, value) in section {
        match key.as_str() {
            "ocel:version" => meta.version = scalar_text(value),
            "ocel:ordering" => meta.ordering = scalar_text(value),
            "ocel:attribute-names" => meta.attribute_names.extend(string_list(value, GLOBAL_LOG, &key)?),
            "ocel:object-types" => meta.object_types.extend(string_list(value, GLOBAL_LOG, &key)?),
            _ => {
                if let Some(v) = to_attribute(&key, value) {
                    meta.extra.insert(key, v);
                }
            }
        }
    }
    Ok(())
}

fn scalar_text(value: Value) -> String {
    match value {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

fn string_list(value: Value, record: &str, key: &str) -> Result<Vec<String>> {
    match value {
        Value::Array(items) => items
            .into_iter()
            .map(|item| match item {
                Value::String(s) => Ok(s),
                other => Err(Error::schema(record, format!("{key} entries must be strings, found {other}"))),
            })
            .collect(),
        other => Err(Error::schema(record, format!("{key} must be a list, found {other}"))),
    }
}

/// JSON scalar to attribute. Integers stay integers, numbers with a fraction
/// or exponent become floats, and strings become timestamps only under the
/// `ocel:timestamp` key. Nulls are dropped; arrays and objects are kept as
/// their JSON text.
fn to_attribute(key: &str, value: Value) -> Option<AttributeValue> {
    Some(match value {
        Value::Null => return None,
        Value::Bool(b) => AttributeValue::Boolean(b),
        Value::Number(n) => match n.as_i64() {
            Some(i) => AttributeValue::Integer(i),
            None => AttributeValue::Float(n.as_f64().unwrap_or(f64::NAN)),
        },
        Value::String(s) => {
            if key == "ocel:timestamp" {
                if let Some(t) = Timestamp::parse(&s) {
                    return Some(AttributeValue::Timestamp(t));
                }
            }
            AttributeValue::String(s)
        }
        other @ (Value::Array(_) | Value::Object(_)) => AttributeValue::String(other.to_string()),
    })
}

fn attribute_map(section: Map<String, Value>, _record: &str) -> AttributeMap {
    section
        .into_iter()
        .filter_map(|(k, v)| to_attribute(&k, v).map(|v| (k, v)))
        .collect()
}

#[derive(Clone, Copy)]
enum RecordKind {
    Event,
    Object,
}

struct RecordsSeed<'a> {
    emitter: &'a mut Emitter,
    kind: RecordKind,
}

impl<'de> DeserializeSeed<'de> for RecordsSeed<'_> {
    type Value = ();

    fn deserialize<D: Deserializer<'de>>(self, deserializer: D) -> Result<(), D::Error> {
        deserializer.deserialize_map(self)
    }
}

impl<'de> Visitor<'de> for RecordsSeed<'_> {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a map from record id to record")
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<(), A::Error> {
        while let Some(id) = map.next_key::<String>()? {
            let body: Map<String, Value> = map.next_value()?;
            let record = match self.kind {
                RecordKind::Event => event_from_json(id, body).map(Record::Event),
                RecordKind::Object => object_from_json(id, body).map(Record::Object),
            };
            if let Err(e) = record.and_then(|r| self.emitter.emit(r)) {
                return Err(fail(self.emitter, e));
            }
        }
        Ok(())
    }
}

fn event_from_json(id: String, body: Map<String, Value>) -> Result<EventRecord> {
    let record = || format!("event {id}");
    let mut activity = None;
    let mut timestamp = None;
    let mut omap = Vec::new();
    let mut vmap = AttributeMap::new();
    for (key, value) in body {
        match key.as_str() {
            "ocel:activity" => match value {
                Value::String(s) => activity = Some(s),
                other => return Err(Error::schema(record(), format!("ocel:activity must be a string, found {other}"))),
            },
            "ocel:timestamp" => match &value {
                Value::String(s) => {
                    timestamp = Some(
                        Timestamp::parse(s)
                            .ok_or_else(|| Error::schema(record(), format!("unparseable ocel:timestamp {s:?}")))?,
                    )
                }
                other => {
                    return Err(Error::schema(record(), format!("ocel:timestamp must be a string, found {other}")))
                }
            },
            "ocel:omap" => omap = string_list(value, &record(), "ocel:omap")?,
            "ocel:vmap" => match value {
                Value::Object(m) => vmap.extend(attribute_map(m, &record())),
                other => return Err(Error::schema(record(), format!("ocel:vmap must be an object, found {other}"))),
            },
            _ => {
                if let Some(v) = to_attribute(&key, value) {
                    vmap.insert(key, v);
                }
            }
        }
    }
    let activity = activity.ok_or_else(|| Error::schema(record(), "missing ocel:activity"))?;
    let timestamp = timestamp.ok_or_else(|| Error::schema(record(), "missing ocel:timestamp"))?;
    Ok(EventRecord::new(id, activity, timestamp, omap, vmap))
}

fn object_from_json(id: String, body: Map<String, Value>) -> Result<ObjectRecord> {
    let record = || format!("object {id}");
    let mut otype = None;
    let mut ovmap = AttributeMap::new();
    for (key, value) in body {
        match key.as_str() {
            "ocel:type" => match value {
                Value::String(s) => otype = Some(s),
                other => return Err(Error::schema(record(), format!("ocel:type must be a string, found {other}"))),
            },
            "ocel:ovmap" => match value {
                Value::Object(m) => ovmap.extend(attribute_map(m, &record())),
                other => return Err(Error::schema(record(), format!("ocel:ovmap must be an object, found {other}"))),
            },
            _ => {
                if let Some(v) = to_attribute(&key, value) {
                    ovmap.insert(key, v);
                }
            }
        }
    }
    let otype = otype.ok_or_else(|| Error::schema(record(), "missing ocel:type"))?;
    Ok(ObjectRecord::new(id, otype, ovmap))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    serde_json::to_writer(&mut *w, s).map_err(|e| Error::Io(e.into()))
}

fn write_value<W: Write>(w: &mut W, v: &AttributeValue) -> Result<()> {
    match v {
        AttributeValue::String(s) => write_str(w, s),
        AttributeValue::Timestamp(t) => write_str(w, &t.to_iso()),
        AttributeValue::Integer(i) => Ok(write!(w, "{i}")?),
        AttributeValue::Float(x) => serde_json::to_writer(&mut *w, x).map_err(|e| Error::Io(e.into())),
        AttributeValue::Boolean(b) => Ok(write!(w, "{b}")?),
    }
}

fn write_map<W: Write>(w: &mut W, map: &AttributeMap) -> Result<()> {
    w.write_all(b"{")?;
    for (i, (k, v)) in map.iter().enumerate() {
        if i > 0 {
            w.write_all(b", ")?;
        }
        write_str(w, k)?;
        w.write_all(b": ")?;
        write_value(w, v)?;
    }
    w.write_all(b"}")?;
    Ok(())
}

fn write_list<'a, W: Write>(w: &mut W, items: impl IntoIterator<Item = &'a String>) -> Result<()> {
    w.write_all(b"[")?;
    for (i, s) in items.into_iter().enumerate() {
        if i > 0 {
            w.write_all(b", ")?;
        }
        write_str(w, s)?;
    }
    w.write_all(b"]")?;
    Ok(())
}

/// Writes a canonical JSON-OCEL document: globals first, events in
/// `(timestamp, id)` order, objects in id order, sorted attribute keys.
pub fn serialize_json<W: Write>(stream: RecordStream, sink: W) -> Result<()> {
    let mut w = io::BufWriter::with_capacity(256 * 1024, sink);
    let (meta, objects, events) = canonical_order(stream)?;

    w.write_all(b"{\n  \"ocel:global-event\": ")?;
    write_map(&mut w, &meta.global_event)?;
    w.write_all(b",\n  \"ocel:global-object\": ")?;
    write_map(&mut w, &meta.global_object)?;
    w.write_all(b",\n  \"ocel:global-log\": {\n    \"ocel:attribute-names\": ")?;
    write_list(&mut w, &meta.attribute_names)?;
    w.write_all(b",\n    \"ocel:object-types\": ")?;
    write_list(&mut w, &meta.object_types)?;
    w.write_all(b",\n    \"ocel:version\": ")?;
    write_str(&mut w, &meta.version)?;
    w.write_all(b",\n    \"ocel:ordering\": ")?;
    write_str(&mut w, &meta.ordering)?;
    for (k, v) in &meta.extra {
        w.write_all(b",\n    ")?;
        write_str(&mut w, k)?;
        w.write_all(b": ")?;
        write_value(&mut w, v)?;
    }
    w.write_all(b"\n  },\n  \"ocel:events\": {")?;
    for (i, event) in events.enumerate() {
        let e = event?;
        w.write_all(if i == 0 { b"\n    " } else { b",\n    " })?;
        write_str(&mut w, &e.id)?;
        w.write_all(b": {\"ocel:activity\": ")?;
        write_str(&mut w, &e.activity)?;
        w.write_all(b", \"ocel:timestamp\": ")?;
        write_str(&mut w, &e.timestamp.to_iso())?;
        w.write_all(b", \"ocel:omap\": ")?;
        write_list(&mut w, &e.omap)?;
        w.write_all(b", \"ocel:vmap\": ")?;
        write_map(&mut w, &e.vmap)?;
        w.write_all(b"}")?;
    }
    w.write_all(b"\n  },\n  \"ocel:objects\": {")?;
    for (i, object) in objects.enumerate() {
        let o = object?;
        w.write_all(if i == 0 { b"\n    " } else { b",\n    " })?;
        write_str(&mut w, &o.id)?;
        w.write_all(b": {\"ocel:type\": ")?;
        write_str(&mut w, &o.otype)?;
        w.write_all(b", \"ocel:ovmap\": ")?;
        write_map(&mut w, &o.ovmap)?;
        w.write_all(b"}")?;
    }
    w.write_all(b"\n  }\n}\n")?;
    w.flush()?;
    Ok(())
}
