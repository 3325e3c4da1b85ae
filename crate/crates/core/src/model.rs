//! In-memory OCEL 1.0 data model.
//!
//! Records are plain value types. Parsers build them through the
//! constructors, which apply the ingest normalisations (omap de-duplication);
//! [`validate`] reports anything that still breaks the standard's invariants.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};

/// Pseudo object type assigned to object ids that are referenced by an event
/// but never declared.
pub const UNKNOWN_OBJECT_TYPE: &str = "⊥unknown";

/// A UTC instant stored as microseconds since the UNIX epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const fn from_micros(micros: i64) -> Self {
        Timestamp(micros)
    }

    pub const fn from_secs(secs: i64) -> Self {
        Timestamp(secs * 1_000_000)
    }

    pub const fn as_micros(self) -> i64 {
        self.0
    }

    /// Parses the ISO-8601 shapes found in OCEL files. Inputs without an
    /// offset are taken as UTC; precision beyond microseconds is truncated.
    pub fn parse(text: &str) -> Option<Self> {
        let text = text.trim();
        if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
            return Some(Self::from_datetime(dt.with_timezone(&Utc)));
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f%:z", "%Y-%m-%d %H:%M:%S%.f%:z", "%Y-%m-%dT%H:%M:%S%.f%z", "%Y-%m-%d %H:%M:%S%.f%z"] {
            if let Ok(dt) = DateTime::parse_from_str(text, fmt) {
                return Some(Self::from_datetime(dt.with_timezone(&Utc)));
            }
        }
        for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
            if let Ok(naive) = NaiveDateTime::parse_from_str(text, fmt) {
                return Some(Self::from_datetime(naive.and_utc()));
            }
        }
        NaiveDate::parse_from_str(text, "%Y-%m-%d")
            .ok()
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .map(|naive| Self::from_datetime(naive.and_utc()))
    }

    fn from_datetime(dt: DateTime<Utc>) -> Self {
        Timestamp(dt.timestamp_micros())
    }

    /// Canonical text form: RFC 3339 in UTC, millisecond precision unless
    /// the value needs microseconds.
    pub fn to_iso(self) -> String {
        match DateTime::<Utc>::from_timestamp_micros(self.0) {
            Some(dt) => {
                let precision = if self.0.rem_euclid(1000) == 0 {
                    SecondsFormat::Millis
                } else {
                    SecondsFormat::Micros
                };
                dt.to_rfc3339_opts(precision, true)
            }
            None => format!("{}us", self.0),
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

/// A typed attribute value from a vmap, ovmap or global default map.
#[derive(Clone, Debug)]
pub enum AttributeValue {
    String(String),
    Timestamp(Timestamp),
    Integer(i64),
    Float(f64),
    Boolean(bool),
}

impl AttributeValue {
    pub fn type_name(&self) -> &'static str {
        match self {
            AttributeValue::String(_) => "string",
            AttributeValue::Timestamp(_) => "timestamp",
            AttributeValue::Integer(_) => "integer",
            AttributeValue::Float(_) => "float",
            AttributeValue::Boolean(_) => "boolean",
        }
    }
}

// Floats compare by bit pattern so that equality is reflexive and exact,
// which is what round-trip checks want.
impl PartialEq for AttributeValue {
    fn eq(&self, other: &Self) -> bool {
        use AttributeValue::*;
        match (self, other) {
            (String(a), String(b)) => a == b,
            (Timestamp(a), Timestamp(b)) => a == b,
            (Integer(a), Integer(b)) => a == b,
            (Float(a), Float(b)) => a.to_bits() == b.to_bits(),
            (Boolean(a), Boolean(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for AttributeValue {}

impl fmt::Display for AttributeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::String(s) => f.write_str(s),
            AttributeValue::Timestamp(t) => write!(f, "{t}"),
            AttributeValue::Integer(i) => write!(f, "{i}"),
            AttributeValue::Float(x) => write!(f, "{x:?}"),
            AttributeValue::Boolean(b) => write!(f, "{b}"),
        }
    }
}

impl From<&str> for AttributeValue {
    fn from(s: &str) -> Self {
        AttributeValue::String(s.to_owned())
    }
}

impl From<String> for AttributeValue {
    fn from(s: String) -> Self {
        AttributeValue::String(s)
    }
}

impl From<i64> for AttributeValue {
    fn from(i: i64) -> Self {
        AttributeValue::Integer(i)
    }
}

impl From<f64> for AttributeValue {
    fn from(x: f64) -> Self {
        AttributeValue::Float(x)
    }
}

impl From<bool> for AttributeValue {
    fn from(b: bool) -> Self {
        AttributeValue::Boolean(b)
    }
}

impl From<Timestamp> for AttributeValue {
    fn from(t: Timestamp) -> Self {
        AttributeValue::Timestamp(t)
    }
}

pub type AttributeMap = BTreeMap<String, AttributeValue>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub id: String,
    pub activity: String,
    pub timestamp: Timestamp,
    pub omap: Vec<String>,
    pub vmap: AttributeMap,
}

impl EventRecord {
    /// Builds an event, dropping repeated object ids from `omap` (first
    /// occurrence wins).
    pub fn new(
        id: impl Into<String>,
        activity: impl Into<String>,
        timestamp: Timestamp,
        omap: impl IntoIterator<Item = impl Into<String>>,
        vmap: AttributeMap,
    ) -> Self {
        EventRecord {
            id: id.into(),
            activity: activity.into(),
            timestamp,
            omap: dedup_preserving_order(omap.into_iter().map(Into::into)),
            vmap,
        }
    }

    /// The total-order key of the events collection.
    pub fn sort_key(&self) -> (Timestamp, &str) {
        (self.timestamp, &self.id)
    }
}

pub(crate) fn dedup_preserving_order(ids: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for id in ids {
        // Small omaps dominate; skip the hash set until it pays off.
        if out.len() < 8 {
            if !out.contains(&id) {
                out.push(id);
            }
            continue;
        }
        if seen.is_empty() {
            seen.extend(out.iter().cloned());
        }
        if seen.insert(id.clone()) {
            out.push(id);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectRecord {
    pub id: String,
    pub otype: String,
    pub ovmap: AttributeMap,
}

impl ObjectRecord {
    pub fn new(id: impl Into<String>, otype: impl Into<String>, ovmap: AttributeMap) -> Self {
        ObjectRecord {
            id: id.into(),
            otype: otype.into(),
            ovmap,
        }
    }
}

/// Log-level header (`ocel:global-log` plus the global default maps).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogMetadata {
    pub version: String,
    pub ordering: String,
    pub attribute_names: BTreeSet<String>,
    pub object_types: BTreeSet<String>,
    pub global_event: AttributeMap,
    pub global_object: AttributeMap,
    /// Unrecognised `ocel:global-log` entries and unknown top-level keys,
    /// kept so they survive an export.
    pub extra: AttributeMap,
}

impl Default for LogMetadata {
    fn default() -> Self {
        LogMetadata {
            version: "1.0".to_owned(),
            ordering: "timestamp".to_owned(),
            attribute_names: BTreeSet::new(),
            object_types: BTreeSet::new(),
            global_event: AttributeMap::new(),
            global_object: AttributeMap::new(),
            extra: AttributeMap::new(),
        }
    }
}

impl LogMetadata {
    /// Adds every attribute name and object type used by `log` to the
    /// declared sets.
    pub fn absorb(&mut self, log_events: &[EventRecord], log_objects: &[ObjectRecord]) {
        for e in log_events {
            self.attribute_names.extend(e.vmap.keys().cloned());
        }
        for o in log_objects {
            self.attribute_names.extend(o.ovmap.keys().cloned());
            self.object_types.insert(o.otype.clone());
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OcelLog {
    pub metadata: LogMetadata,
    pub events: Vec<EventRecord>,
    pub objects: Vec<ObjectRecord>,
}

impl OcelLog {
    pub fn new(metadata: LogMetadata, events: Vec<EventRecord>, objects: Vec<ObjectRecord>) -> Self {
        OcelLog {
            metadata,
            events,
            objects,
        }
    }

    /// Checks the log against the OCEL 1.0 invariants. Never mutates.
    pub fn validate(&self, strict: bool) -> ValidationReport {
        validate(self, strict)
    }

    /// Events sorted ascending by `(timestamp, id)`; stable for equal keys.
    pub fn sort_events(mut self) -> Self {
        self.events.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        self
    }

    /// Semantic equality: same metadata, same event multiset and same object
    /// multiset, independent of record order.
    pub fn semantically_eq(&self, other: &OcelLog) -> bool {
        if self.metadata != other.metadata
            || self.events.len() != other.events.len()
            || self.objects.len() != other.objects.len()
        {
            return false;
        }
        fn multiset<T: Ord + Clone>(items: &[T]) -> Vec<T> {
            let mut v = items.to_vec();
            v.sort();
            v
        }
        fn events(log: &OcelLog) -> Vec<EventKey<'_>> {
            multiset(&log.events.iter().map(EventKey::from).collect::<Vec<_>>())
        }
        fn objects(log: &OcelLog) -> Vec<ObjectKey<'_>> {
            multiset(&log.objects.iter().map(ObjectKey::from).collect::<Vec<_>>())
        }
        events(self) == events(other) && objects(self) == objects(other)
    }
}

// Orderable views used for multiset comparison.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
struct EventKey<'a> {
    id: &'a str,
    activity: &'a str,
    timestamp: Timestamp,
    omap: &'a [String],
    vmap: Vec<(&'a str, String)>,
}

impl<'a> From<&'a EventRecord> for EventKey<'a> {
    fn from(e: &'a EventRecord) -> Self {
        EventKey {
            id: &e.id,
            activity: &e.activity,
            timestamp: e.timestamp,
            omap: &e.omap,
            vmap: attr_key(&e.vmap),
        }
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
struct ObjectKey<'a> {
    id: &'a str,
    otype: &'a str,
    ovmap: Vec<(&'a str, String)>,
}

impl<'a> From<&'a ObjectRecord> for ObjectKey<'a> {
    fn from(o: &'a ObjectRecord) -> Self {
        ObjectKey {
            id: &o.id,
            otype: &o.otype,
            ovmap: attr_key(&o.ovmap),
        }
    }
}

fn attr_key(map: &AttributeMap) -> Vec<(&str, String)> {
    map.iter()
        .map(|(k, v)| {
            let repr = match v {
                AttributeValue::Float(x) => format!("float:{:x}", x.to_bits()),
                other => format!("{}:{other}", other.type_name()),
            };
            (k.as_str(), repr)
        })
        .collect()
}

/// One broken invariant. Reports are sorted, so the variant order below is
/// also the report order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Violation {
    EmptyEventId,
    DuplicateEventId(String),
    EmptyObjectId,
    DuplicateObjectId(String),
    EmptyObjectType { object: String },
    DuplicateOmapEntry { event: String, object: String },
    EmptyOmap { event: String },
    EmptyAttributeName { record: String },
    DanglingObjectReference { event: String, object: String },
    UndeclaredObjectType(String),
    UndeclaredAttributeName(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyEventId => write!(f, "event with empty id"),
            Violation::DuplicateEventId(id) => write!(f, "duplicate event id {id}"),
            Violation::EmptyObjectId => write!(f, "object with empty id"),
            Violation::DuplicateObjectId(id) => write!(f, "duplicate object id {id}"),
            Violation::EmptyObjectType { object } => write!(f, "object {object} has an empty type"),
            Violation::DuplicateOmapEntry { event, object } => {
                write!(f, "object {object} listed twice in omap of event {event}")
            }
            Violation::EmptyOmap { event } => write!(f, "event {event} references no objects"),
            Violation::EmptyAttributeName { record } => write!(f, "empty attribute name in {record}"),
            Violation::DanglingObjectReference { event, object } => {
                write!(f, "dangling object reference {object} in event {event}")
            }
            Violation::UndeclaredObjectType(t) => write!(f, "object type {t} missing from ocel:object-types"),
            Violation::UndeclaredAttributeName(a) => {
                write!(f, "attribute {a} missing from ocel:attribute-names")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn validate(log: &OcelLog, strict: bool) -> ValidationReport {
    let mut violations = BTreeSet::new();

    let mut object_ids: HashMap<&str, &ObjectRecord> = HashMap::with_capacity(log.objects.len());
    for o in &log.objects {
        if o.id.is_empty() {
            violations.insert(Violation::EmptyObjectId);
        }
        if o.otype.is_empty() {
            violations.insert(Violation::EmptyObjectType { object: o.id.clone() });
        }
        if object_ids.insert(&o.id, o).is_some() {
            violations.insert(Violation::DuplicateObjectId(o.id.clone()));
        }
        if o.ovmap.keys().any(String::is_empty) {
            violations.insert(Violation::EmptyAttributeName {
                record: format!("object {}", o.id),
            });
        }
        if strict {
            if !log.metadata.object_types.contains(&o.otype) {
                violations.insert(Violation::UndeclaredObjectType(o.otype.clone()));
            }
            for k in o.ovmap.keys() {
                if !log.metadata.attribute_names.contains(k) {
                    violations.insert(Violation::UndeclaredAttributeName(k.clone()));
                }
            }
        }
    }

    let mut event_ids = HashSet::with_capacity(log.events.len());
    for e in &log.events {
        if e.id.is_empty() {
            violations.insert(Violation::EmptyEventId);
        }
        if !event_ids.insert(e.id.as_str()) {
            violations.insert(Violation::DuplicateEventId(e.id.clone()));
        }
        if e.omap.is_empty() {
            violations.insert(Violation::EmptyOmap { event: e.id.clone() });
        }
        let mut seen = HashSet::with_capacity(e.omap.len());
        for oid in &e.omap {
            if !seen.insert(oid.as_str()) {
                violations.insert(Violation::DuplicateOmapEntry {
                    event: e.id.clone(),
                    object: oid.clone(),
                });
            }
            if !object_ids.contains_key(oid.as_str()) {
                violations.insert(Violation::DanglingObjectReference {
                    event: e.id.clone(),
                    object: oid.clone(),
                });
            }
        }
        if e.vmap.keys().any(String::is_empty) {
            violations.insert(Violation::EmptyAttributeName {
                record: format!("event {}", e.id),
            });
        }
        if strict {
            for k in e.vmap.keys() {
                if !log.metadata.attribute_names.contains(k) {
                    violations.insert(Violation::UndeclaredAttributeName(k.clone()));
                }
            }
        }
    }

    ValidationReport {
        violations: violations.into_iter().collect(),
    }
}

/// Sorts events ascending by `(timestamp, id)`.
pub fn sort_events(log: OcelLog) -> OcelLog {
    log.sort_events()
}
