use std::io::{self, BufRead, Write};

use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::{canonical_order, spawn_parser, Emitter, Record, RecordStream};
use crate::error::{Error, Result};
use crate::model::{AttributeMap, AttributeValue, EventRecord, ObjectRecord, Timestamp};

/// Tracks the line number of the bytes quick-xml has consumed.
struct LineCounter<R> {
    inner: R,
    line: u64,
}

impl<R: BufRead> io::Read for LineCounter<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.line += buf[..n].iter().filter(|&&b| b == b'\n').count() as u64;
        Ok(n)
    }
}

impl<R: BufRead> BufRead for LineCounter<R> {
    fn fill_buf(&mut self) -> io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        if let Ok(buf) = self.inner.fill_buf() {
            let amt = amt.min(buf.len());
            self.line += buf[..amt].iter().filter(|&&b| b == b'\n').count() as u64;
        }
        self.inner.consume(amt)
    }
}

enum Node {
    Open {
        name: String,
        attrs: Vec<(String, String)>,
        empty: bool,
    },
    Close,
    Eof,
}

struct XmlParser<R: BufRead> {
    reader: Reader<LineCounter<R>>,
    buf: Vec<u8>,
}

impl<R: BufRead> XmlParser<R> {
    fn line(&self) -> u64 {
        self.reader.get_ref().line + 1
    }

    fn syntax(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            format: "xml",
            position: format!("line {}", self.line()),
            message: message.into(),
        }
    }

    fn open(&self, start: &BytesStart<'_>, empty: bool) -> Result<Node> {
        let name = String::from_utf8_lossy(start.local_name().as_ref()).into_owned();
        let mut attrs = Vec::new();
        for attr in start.attributes() {
            let attr = attr.map_err(|e| self.syntax(e.to_string()))?;
            let key = String::from_utf8_lossy(attr.key.local_name().as_ref()).into_owned();
            let value = attr.unescape_value().map_err(|e| self.syntax(e.to_string()))?.into_owned();
            attrs.push((key, value));
        }
        Ok(Node::Open { name, attrs, empty })
    }

    fn next(&mut self) -> Result<Node> {
        loop {
            self.buf.clear();
            let event = match self.reader.read_event_into(&mut self.buf) {
                Ok(ev) => ev.into_owned(),
                Err(quick_xml::Error::Io(e)) => return Err(Error::Io(io::Error::new(e.kind(), e.to_string()))),
                Err(e) => return Err(self.syntax(e.to_string())),
            };
            return match event {
                Event::Start(s) => self.open(&s, false),
                Event::Empty(s) => self.open(&s, true),
                Event::End(_) => Ok(Node::Close),
                Event::Eof => Ok(Node::Eof),
                Event::Text(t) => {
                    if t.iter().all(u8::is_ascii_whitespace) {
                        continue;
                    }
                    Err(self.syntax("unexpected text content"))
                }
                _ => continue,
            };
        }
    }

    /// Skips the rest of an element whose start tag was just read.
    fn skip_element(&mut self, empty: bool) -> Result<()> {
        if empty {
            return Ok(());
        }
        let mut depth = 1usize;
        while depth > 0 {
            match self.next()? {
                Node::Open { empty: false, .. } => depth += 1,
                Node::Open { empty: true, .. } => {}
                Node::Close => depth -= 1,
                Node::Eof => return Err(self.syntax("unexpected end of document")),
            }
        }
        Ok(())
    }
}

fn attr<'a>(attrs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    attrs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn strip_ocel(key: &str) -> &str {
    key.strip_prefix("ocel:").unwrap_or(key)
}

/// Typed value element to attribute.
fn typed_value(tag: &str, attrs: &[(String, String)], record: &str) -> Result<(String, AttributeValue)> {
    let key = attr(attrs, "key").ok_or_else(|| Error::schema(record, format!("<{tag}> without key attribute")))?;
    let raw = attr(attrs, "value").ok_or_else(|| Error::schema(record, format!("<{tag} key={key:?}> without value")))?;
    let bad = |what: &str| Error::schema(record, format!("invalid {what} value {raw:?} for key {key:?}"));
    let value = match tag {
        "string" => AttributeValue::String(raw.to_owned()),
        "date" => AttributeValue::Timestamp(Timestamp::parse(raw).ok_or_else(|| bad("date"))?),
        "int" => AttributeValue::Integer(raw.trim().parse().map_err(|_| bad("int"))?),
        "float" => AttributeValue::Float(raw.trim().parse().map_err(|_| bad("float"))?),
        "boolean" => match raw.trim().to_ascii_lowercase().as_str() {
            "true" => AttributeValue::Boolean(true),
            "false" => AttributeValue::Boolean(false),
            _ => return Err(bad("boolean")),
        },
        other => return Err(Error::schema(record, format!("unknown value element <{other}>"))),
    };
    Ok((key.to_owned(), value))
}

/// Reads the children of a `<list>` (or any container of typed values).
fn read_values<R: BufRead>(p: &mut XmlParser<R>, record: &str) -> Result<Vec<(String, AttributeValue)>> {
    let mut out = Vec::new();
    loop {
        match p.next()? {
            Node::Open { name, attrs, empty } => {
                let value = typed_value(&name, &attrs, record)?;
                p.skip_element(empty)?;
                out.push(value);
            }
            Node::Close => return Ok(out),
            Node::Eof => return Err(p.syntax("unexpected end of document")),
        }
    }
}

fn text_of(value: AttributeValue) -> String {
    match value {
        AttributeValue::String(s) => s,
        other => other.to_string(),
    }
}

fn parse_global<R: BufRead>(p: &mut XmlParser<R>, scope: &str, emitter: &mut Emitter) -> Result<()> {
    let record = format!("global scope {scope:?}");
    match scope {
        "event" | "object" => {
            let values = read_values(p, &record)?;
            let meta = emitter.metadata_mut();
            let target = if scope == "event" {
                &mut meta.global_event
            } else {
                &mut meta.global_object
            };
            target.extend(values);
            if scope == "event" {
                emitter.saw_global_event()
            } else {
                emitter.saw_global_object()
            }
        }
        "log" => {
            loop {
                match p.next()? {
                    Node::Open { name, attrs, empty } if name == "list" => {
                        let key = attr(&attrs, "key").unwrap_or_default().to_owned();
                        let items = if empty { Vec::new() } else { read_values(p, &record)? };
                        let items = items.into_iter().map(|(_, v)| text_of(v));
                        let meta = emitter.metadata_mut();
                        match strip_ocel(&key) {
                            "attribute-names" => meta.attribute_names.extend(items),
                            "object-types" => meta.object_types.extend(items),
                            other => return Err(Error::schema(&record, format!("unexpected list {other:?}"))),
                        }
                    }
                    Node::Open { name, attrs, empty } => {
                        let (key, value) = typed_value(&name, &attrs, &record)?;
                        p.skip_element(empty)?;
                        let meta = emitter.metadata_mut();
                        match strip_ocel(&key) {
                            "version" => meta.version = text_of(value),
                            "ordering" => meta.ordering = text_of(value),
                            _ => {
                                meta.extra.insert(key, value);
                            }
                        }
                    }
                    Node::Close => break,
                    Node::Eof => return Err(p.syntax("unexpected end of document")),
                }
            }
            emitter.saw_global_log()
        }
        other => Err(Error::schema("document", format!("unknown global scope {other:?}"))),
    }
}

fn parse_event<R: BufRead>(p: &mut XmlParser<R>, ordinal: usize) -> Result<EventRecord> {
    let mut id: Option<String> = None;
    let mut activity = None;
    let mut timestamp = None;
    let mut omap = Vec::new();
    let mut vmap = AttributeMap::new();
    let label = |id: &Option<String>| match id {
        Some(id) => format!("event {id}"),
        None => format!("event #{ordinal}"),
    };
    loop {
        match p.next()? {
            Node::Open { name, attrs, empty } if name == "list" => {
                let key = attr(&attrs, "key").unwrap_or_default().to_owned();
                let items = if empty { Vec::new() } else { read_values(p, &label(&id))? };
                match strip_ocel(&key) {
                    "omap" => omap.extend(items.into_iter().map(|(_, v)| text_of(v))),
                    "vmap" => vmap.extend(items),
                    other => return Err(Error::schema(label(&id), format!("unexpected list {other:?}"))),
                }
            }
            Node::Open { name, attrs, empty } => {
                let (key, value) = typed_value(&name, &attrs, &label(&id))?;
                p.skip_element(empty)?;
                match strip_ocel(&key) {
                    "id" => id = Some(text_of(value)),
                    "activity" => activity = Some(text_of(value)),
                    "timestamp" => {
                        timestamp = Some(match value {
                            AttributeValue::Timestamp(t) => t,
                            other => {
                                let text = text_of(other);
                                Timestamp::parse(&text).ok_or_else(|| {
                                    Error::schema(label(&id), format!("unparseable timestamp {text:?}"))
                                })?
                            }
                        })
                    }
                    _ => {
                        vmap.insert(key, value);
                    }
                }
            }
            Node::Close => break,
            Node::Eof => return Err(p.syntax("unexpected end of document")),
        }
    }
    let record = label(&id);
    let id = id.ok_or_else(|| Error::schema(&record, "missing id"))?;
    let activity = activity.ok_or_else(|| Error::schema(&record, "missing ocel:activity"))?;
    let timestamp = timestamp.ok_or_else(|| Error::schema(&record, "missing ocel:timestamp"))?;
    Ok(EventRecord::new(id, activity, timestamp, omap, vmap))
}

fn parse_object<R: BufRead>(p: &mut XmlParser<R>, ordinal: usize) -> Result<ObjectRecord> {
    let mut id: Option<String> = None;
    let mut otype = None;
    let mut ovmap = AttributeMap::new();
    let label = |id: &Option<String>| match id {
        Some(id) => format!("object {id}"),
        None => format!("object #{ordinal}"),
    };
    loop {
        match p.next()? {
            Node::Open { name, attrs, empty } if name == "list" => {
                let key = attr(&attrs, "key").unwrap_or_default().to_owned();
                let items = if empty { Vec::new() } else { read_values(p, &label(&id))? };
                match strip_ocel(&key) {
                    "ovmap" => ovmap.extend(items),
                    other => return Err(Error::schema(label(&id), format!("unexpected list {other:?}"))),
                }
            }
            Node::Open { name, attrs, empty } => {
                let (key, value) = typed_value(&name, &attrs, &label(&id))?;
                p.skip_element(empty)?;
                match strip_ocel(&key) {
                    "id" => id = Some(text_of(value)),
                    "type" => otype = Some(text_of(value)),
                    _ => {
                        ovmap.insert(key, value);
                    }
                }
            }
            Node::Close => break,
            Node::Eof => return Err(p.syntax("unexpected end of document")),
        }
    }
    let record = label(&id);
    let id = id.ok_or_else(|| Error::schema(&record, "missing id"))?;
    let otype = otype.ok_or_else(|| Error::schema(&record, "missing ocel:type"))?;
    Ok(ObjectRecord::new(id, otype, ovmap))
}

fn parse_records<R: BufRead>(p: &mut XmlParser<R>, emitter: &mut Emitter, child: &str) -> Result<()> {
    let mut ordinal = 0;
    loop {
        match p.next()? {
            Node::Open { name, empty, .. } if name == child => {
                ordinal += 1;
                if empty {
                    return Err(Error::schema(format!("{child} #{ordinal}"), "empty record element"));
                }
                let record = if child == "event" {
                    Record::Event(parse_event(p, ordinal)?)
                } else {
                    Record::Object(parse_object(p, ordinal)?)
                };
                emitter.emit(record)?;
            }
            Node::Open { name, .. } => {
                return Err(Error::schema("document", format!("unexpected <{name}> among {child}s")));
            }
            Node::Close => return Ok(()),
            Node::Eof => return Err(p.syntax("unexpected end of document")),
        }
    }
}

fn parse_document<R: BufRead>(p: &mut XmlParser<R>, emitter: &mut Emitter) -> Result<()> {
    match p.next()? {
        Node::Open { empty: true, .. } => return Ok(()),
        Node::Open { .. } => {}
        Node::Close => return Err(p.syntax("unexpected closing tag")),
        Node::Eof => return Err(p.syntax("empty document")),
    }
    loop {
        match p.next()? {
            Node::Open { name, attrs, empty } => match name.as_str() {
                "global" => {
                    let scope = attr(&attrs, "scope").unwrap_or_default().to_owned();
                    if empty {
                        match scope.as_str() {
                            "event" => emitter.saw_global_event()?,
                            "object" => emitter.saw_global_object()?,
                            "log" => emitter.saw_global_log()?,
                            _ => {}
                        }
                    } else {
                        parse_global(p, &scope, emitter)?;
                    }
                }
                "events" if !empty => parse_records(p, emitter, "event")?,
                "objects" if !empty => parse_records(p, emitter, "object")?,
                "events" | "objects" => {}
                _ => p.skip_element(empty)?,
            },
            Node::Close => break,
            Node::Eof => return Err(p.syntax("unexpected end of document")),
        }
    }
    match p.next()? {
        Node::Eof => Ok(()),
        _ => Err(p.syntax("content after the root element")),
    }
}

/// Parses an XML-OCEL document.
pub fn parse_xml<R: BufRead + Send + 'static>(source: R) -> Result<RecordStream> {
    spawn_parser("xml", move |emitter| {
        let mut parser = XmlParser {
            reader: Reader::from_reader(LineCounter { inner: source, line: 0 }),
            buf: Vec::with_capacity(1024),
        };
        parse_document(&mut parser, emitter)
    })
}

fn value_element<W: Write>(w: &mut W, indent: &str, key: &str, value: &AttributeValue) -> io::Result<()> {
    let (tag, text) = match value {
        AttributeValue::String(s) => ("string", s.clone()),
        AttributeValue::Timestamp(t) => ("date", t.to_iso()),
        AttributeValue::Integer(i) => ("int", i.to_string()),
        AttributeValue::Float(x) => ("float", format!("{x:?}")),
        AttributeValue::Boolean(b) => ("boolean", b.to_string()),
    };
    writeln!(w, "{indent}<{tag} key=\"{}\" value=\"{}\"/>", escape(key), escape(text.as_str()))
}

fn string_list<'a, W: Write>(
    w: &mut W,
    indent: &str,
    key: &str,
    item_key: &str,
    items: impl ExactSizeIterator<Item = &'a String>,
) -> io::Result<()> {
    if items.len() == 0 {
        return writeln!(w, "{indent}<list key=\"{key}\"/>");
    }
    writeln!(w, "{indent}<list key=\"{key}\">")?;
    let inner = format!("{indent}  ");
    for item in items {
        value_element(w, &inner, item_key, &AttributeValue::String(item.clone()))?;
    }
    writeln!(w, "{indent}</list>")
}

fn attribute_list<W: Write>(w: &mut W, indent: &str, key: &str, map: &AttributeMap) -> io::Result<()> {
    if map.is_empty() {
        return writeln!(w, "{indent}<list key=\"{key}\"/>");
    }
    writeln!(w, "{indent}<list key=\"{key}\">")?;
    let inner = format!("{indent}  ");
    for (k, v) in map {
        value_element(w, &inner, k, v)?;
    }
    writeln!(w, "{indent}</list>")
}

/// Writes a canonical XML-OCEL document: globals first, events in
/// `(timestamp, id)` order, objects in id order.
pub fn serialize_xml<W: Write>(stream: RecordStream, sink: W) -> Result<()> {
    let mut w = io::BufWriter::with_capacity(256 * 1024, sink);
    let (meta, objects, events) = canonical_order(stream)?;

    writeln!(w, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>")?;
    writeln!(w, "<log>")?;
    for (scope, defaults) in [("event", &meta.global_event), ("object", &meta.global_object)] {
        writeln!(w, "  <global scope=\"{scope}\">")?;
        for (k, v) in defaults {
            value_element(&mut w, "    ", k, v)?;
        }
        writeln!(w, "  </global>")?;
    }
    writeln!(w, "  <global scope=\"log\">")?;
    string_list(&mut w, "    ", "attribute-names", "attribute-name", meta.attribute_names.iter())?;
    string_list(&mut w, "    ", "object-types", "object-type", meta.object_types.iter())?;
    value_element(&mut w, "    ", "version", &AttributeValue::String(meta.version.clone()))?;
    value_element(&mut w, "    ", "ordering", &AttributeValue::String(meta.ordering.clone()))?;
    for (k, v) in &meta.extra {
        value_element(&mut w, "    ", k, v)?;
    }
    writeln!(w, "  </global>")?;

    writeln!(w, "  <events>")?;
    for event in events {
        let e = event?;
        writeln!(w, "    <event>")?;
        value_element(&mut w, "      ", "id", &AttributeValue::String(e.id))?;
        value_element(&mut w, "      ", "activity", &AttributeValue::String(e.activity))?;
        value_element(&mut w, "      ", "timestamp", &AttributeValue::Timestamp(e.timestamp))?;
        string_list(&mut w, "      ", "omap", "object-id", e.omap.iter())?;
        attribute_list(&mut w, "      ", "vmap", &e.vmap)?;
        writeln!(w, "    </event>")?;
    }
    writeln!(w, "  </events>")?;

    writeln!(w, "  <objects>")?;
    for object in objects {
        let o = object?;
        writeln!(w, "    <object>")?;
        value_element(&mut w, "      ", "id", &AttributeValue::String(o.id))?;
        value_element(&mut w, "      ", "type", &AttributeValue::String(o.otype))?;
        attribute_list(&mut w, "      ", "ovmap", &o.ovmap)?;
        writeln!(w, "    </object>")?;
    }
    writeln!(w, "  </objects>")?;
    writeln!(w, "</log>")?;
    w.flush()?;
    Ok(())
}
