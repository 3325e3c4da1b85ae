//! Embedded on-disk store for one log.
//!
//! ```text
//! <root>/segments/meta.seg            log metadata
//! <root>/segments/events-NNN.seg      events in (timestamp, id) order
//! <root>/segments/objects-NNN.seg     objects in id order
//! <root>/index/{event_id,activity,omap,object_id,object_type}.idx
//! <root>/MANIFEST                     commit record
//! <root>/LOCK                         writer lock
//! ```
//!
//! Because segments are in canonical order and locations grow with position,
//! every postings list is already in (timestamp, id) order for events and id
//! order for objects.

mod audit;
pub mod index;
mod ingest;
pub mod manifest;
pub mod segment;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use audit::AuditReport;
pub use ingest::{IngestStats, StoreOptions, StoreWriter};

use crate::codec::Decode;
use crate::error::{Error, Result};
use crate::io::{Record, RecordStream};
use crate::model::{EventRecord, LogMetadata, ObjectRecord};
use index::{IndexReader, IndexWriter};
use manifest::Manifest;
use segment::{SegmentFile, SegmentKind, SegmentScan};

pub(crate) const SEGMENTS_DIR: &str = "segments";
pub(crate) const INDEX_DIR: &str = "index";
pub(crate) const SORTING_DIR: &str = "sorting";
pub(crate) const TMP_DIR: &str = "tmp";
pub(crate) const LOCK_FILE: &str = "LOCK";

/// The five secondary indexes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IndexKind {
    EventId,
    Activity,
    /// One posting per (object id, event) membership.
    Omap,
    ObjectId,
    ObjectType,
}

impl IndexKind {
    pub const ALL: [IndexKind; 5] = [
        IndexKind::EventId,
        IndexKind::Activity,
        IndexKind::Omap,
        IndexKind::ObjectId,
        IndexKind::ObjectType,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IndexKind::EventId => "event_id",
            IndexKind::Activity => "activity",
            IndexKind::Omap => "omap",
            IndexKind::ObjectId => "object_id",
            IndexKind::ObjectType => "object_type",
        }
    }

    fn unique_kind(self) -> Option<&'static str> {
        match self {
            IndexKind::EventId => Some("event"),
            IndexKind::ObjectId => Some("object"),
            _ => None,
        }
    }

    fn points_at_events(self) -> bool {
        matches!(self, IndexKind::EventId | IndexKind::Activity | IndexKind::Omap)
    }

    pub fn path(self, root: &Path) -> PathBuf {
        root.join(INDEX_DIR).join(format!("{}.idx", self.name()))
    }
}

struct Inner {
    root: PathBuf,
    manifest: Manifest,
    metadata: LogMetadata,
    events: Vec<Arc<SegmentFile>>,
    objects: Vec<Arc<SegmentFile>>,
    indexes: Vec<IndexReader>,
    touched: AtomicU64,
}

/// A read handle on the committed state of a store.
///
/// Cloning is cheap and clones share the records-touched counter. The
/// handle is `Send + Sync`; every scan is an independent iterator.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.inner.root)
            .field("events", &self.inner.manifest.events)
            .field("objects", &self.inner.manifest.objects)
            .finish()
    }
}

impl Store {
    /// Locks `root` for writing. See [`StoreWriter::ingest`].
    pub fn create(root: &Path, options: StoreOptions) -> Result<StoreWriter> {
        StoreWriter::create(root, options)
    }

    /// Creates a store at `root` holding `stream`, then opens it.
    pub fn import(root: &Path, stream: RecordStream, options: StoreOptions) -> Result<(Store, IngestStats)> {
        let stats = StoreWriter::create(root, options)?.ingest(stream)?;
        Ok((Store::open(root)?, stats))
    }

    /// Opens the last committed state.
    ///
    /// A store without a valid commit is repaired first (torn segment tails
    /// cut off, indexes rebuilt). If a writer currently holds the lock and
    /// nothing has been committed yet, the result is an empty view.
    pub fn open(root: &Path) -> Result<Store> {
        if !root.is_dir() {
            return Err(Error::NoStore(root.to_owned()));
        }
        let committed = Manifest::read(root)?;
        let mut previous_notes = Vec::new();
        if let Some(m) = committed {
            match Store::load(root, m.clone()) {
                Ok(store) => return Ok(store),
                Err(e @ Error::UnsupportedVersion { .. }) => return Err(e),
                Err(e) => {
                    log::warn!("committed state of {} is inconsistent ({e}); recovering", root.display());
                    previous_notes = m.recovery_notes;
                    previous_notes.push(format!("committed state failed verification: {e}"));
                }
            }
        } else if !root.join(SEGMENTS_DIR).exists() {
            // A held lock means a writer is creating the store right now.
            if root.join(LOCK_FILE).exists() && matches!(ingest::acquire_lock(root), Err(Error::Locked(_))) {
                return Ok(Store::empty(root));
            }
            return Err(Error::NoStore(root.to_owned()));
        }
        let _lock = match ingest::acquire_lock(root) {
            Ok(lock) => lock,
            Err(Error::Locked(_)) => return Ok(Store::empty(root)),
            Err(e) => return Err(e),
        };
        // Another process may have finished recovery while we waited.
        if let Some(m) = Manifest::read(root)? {
            if let Ok(store) = Store::load(root, m) {
                return Ok(store);
            }
        }
        let manifest = ingest::recover(root, previous_notes)?;
        Store::load(root, manifest)
    }

    fn empty(root: &Path) -> Store {
        Store {
            inner: Arc::new(Inner {
                root: root.to_owned(),
                manifest: Manifest::default(),
                metadata: LogMetadata::default(),
                events: Vec::new(),
                objects: Vec::new(),
                indexes: IndexKind::ALL.iter().map(|k| IndexReader::empty(&k.path(root))).collect(),
                touched: AtomicU64::new(0),
            }),
        }
    }

    fn load(root: &Path, manifest: Manifest) -> Result<Store> {
        let seg_dir = root.join(SEGMENTS_DIR);
        let meta_path = seg_dir.join(SegmentKind::Meta.file_name(0));
        let payload = segment::read_meta_segment(&seg_dir)?
            .ok_or_else(|| Error::corruption(&meta_path, 0, "metadata segment missing or torn"))?;
        let metadata =
            LogMetadata::from_bytes(&payload).map_err(|e| Error::corruption(&meta_path, segment::HEADER_LEN, e.0))?;

        let mut events = Vec::new();
        let mut objects = Vec::new();
        for info in &manifest.segments {
            let seg = SegmentFile::open(&seg_dir, info)?;
            let actual = std::fs::metadata(&seg.path)?.len();
            if actual != info.len {
                return Err(Error::corruption(
                    &seg.path,
                    actual.min(info.len),
                    format!("length {actual} differs from committed {}", info.len),
                ));
            }
            let list = match info.kind {
                SegmentKind::Events => &mut events,
                _ => &mut objects,
            };
            if info.seq as usize != list.len() {
                return Err(Error::corruption(&seg.path, 0, "segment sequence has a gap"));
            }
            list.push(Arc::new(seg));
        }

        let mut indexes = Vec::new();
        for kind in IndexKind::ALL {
            let path = kind.path(root);
            let reader = IndexReader::open(&path)?;
            let expected = manifest
                .index(kind.name())
                .ok_or_else(|| Error::corruption(&path, 0, "index not listed in manifest"))?;
            let s = reader.summary();
            if s.len != expected.len || s.crc != expected.crc {
                return Err(Error::corruption(&path, 0, "index does not match manifest"));
            }
            indexes.push(reader);
        }

        Ok(Store {
            inner: Arc::new(Inner {
                root: root.to_owned(),
                manifest,
                metadata,
                events,
                objects,
                indexes,
                touched: AtomicU64::new(0),
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    /// Metadata as it was ingested.
    pub fn metadata(&self) -> &LogMetadata {
        &self.inner.metadata
    }

    /// Stored metadata with attribute names and object types observed in the
    /// records added.
    pub fn export_metadata(&self) -> LogMetadata {
        let mut metadata = self.inner.metadata.clone();
        let m = &self.inner.manifest;
        metadata.attribute_names.extend(m.attribute_names.iter().cloned());
        metadata.object_types.extend(m.object_types.iter().cloned());
        metadata
    }

    pub fn event_count(&self) -> u64 {
        self.inner.manifest.events
    }

    pub fn object_count(&self) -> u64 {
        self.inner.manifest.objects
    }

    /// Σ|omap| over all events.
    pub fn postings_count(&self) -> u64 {
        self.inner.manifest.postings
    }

    pub fn segment_bytes(&self) -> u64 {
        self.inner.manifest.segment_bytes()
    }

    pub fn index_bytes(&self) -> u64 {
        self.inner.manifest.index_bytes()
    }

    /// Object types of the stored objects, sorted.
    pub fn object_types(&self) -> impl Iterator<Item = &str> {
        self.inner.manifest.object_types.iter().map(String::as_str)
    }

    /// What crash recovery repaired before the current commit.
    pub fn recovery_notes(&self) -> &[String] {
        &self.inner.manifest.recovery_notes
    }

    pub fn index_reader(&self, kind: IndexKind) -> &IndexReader {
        let i = IndexKind::ALL.iter().position(|k| *k == kind).expect("listed kind");
        &self.inner.indexes[i]
    }

    /// Records decoded through this handle and its clones since the last
    /// reset.
    pub fn records_touched(&self) -> u64 {
        self.inner.touched.load(Ordering::Relaxed)
    }

    pub fn reset_records_touched(&self) {
        self.inner.touched.store(0, Ordering::Relaxed);
    }

    fn read_at<T: Decode>(&self, kind: SegmentKind, loc: u64) -> Result<T> {
        let (seq, offset) = segment::split_location(loc);
        let segments = match kind {
            SegmentKind::Events => &self.inner.events,
            _ => &self.inner.objects,
        };
        let seg = segments.get(seq as usize).ok_or_else(|| {
            Error::corruption(
                self.inner.root.join(SEGMENTS_DIR).join(kind.file_name(seq)),
                offset,
                "index points at a missing segment",
            )
        })?;
        self.inner.touched.fetch_add(1, Ordering::Relaxed);
        seg.read_record(offset)
    }

    pub fn get_event(&self, id: &str) -> Result<Option<EventRecord>> {
        match self.index_reader(IndexKind::EventId).get(id)?.first() {
            Some(&loc) => self.read_at(SegmentKind::Events, loc).map(Some),
            None => Ok(None),
        }
    }

    pub fn get_object(&self, id: &str) -> Result<Option<ObjectRecord>> {
        match self.index_reader(IndexKind::ObjectId).get(id)?.first() {
            Some(&loc) => self.read_at(SegmentKind::Objects, loc).map(Some),
            None => Ok(None),
        }
    }

    /// The type of object `id`, if it is stored.
    pub fn object_type_of(&self, id: &str) -> Result<Option<String>> {
        Ok(self.get_object(id)?.map(|o| o.otype))
    }

    fn lookup<T: Decode>(&self, kind: IndexKind, key: &str) -> Result<Lookup<T>> {
        let postings = self.index_reader(kind).get(key)?;
        let segment = if kind.points_at_events() {
            SegmentKind::Events
        } else {
            SegmentKind::Objects
        };
        Ok(Lookup {
            store: self.clone(),
            segment,
            postings: postings.into_iter(),
            _marker: std::marker::PhantomData,
        })
    }

    /// Events with this activity, in (timestamp, id) order.
    pub fn scan_events_by_activity(&self, activity: &str) -> Result<Lookup<EventRecord>> {
        self.lookup(IndexKind::Activity, activity)
    }

    /// Events whose omap contains `object_id`, in (timestamp, id) order.
    pub fn scan_events_by_object(&self, object_id: &str) -> Result<Lookup<EventRecord>> {
        self.lookup(IndexKind::Omap, object_id)
    }

    /// Objects of this type, in id order.
    pub fn scan_objects_by_type(&self, otype: &str) -> Result<Lookup<ObjectRecord>> {
        self.lookup(IndexKind::ObjectType, otype)
    }

    /// Every event in (timestamp, id) order.
    pub fn scan_events(&self) -> Scan<EventRecord> {
        Scan {
            store: self.clone(),
            inner: SegmentScan::new(self.inner.events.clone()),
        }
    }

    /// Every object in id order.
    pub fn scan_objects(&self) -> Scan<ObjectRecord> {
        Scan {
            store: self.clone(),
            inner: SegmentScan::new(self.inner.objects.clone()),
        }
    }

    /// Metadata, then all objects, then all events.
    pub fn export(&self) -> RecordStream {
        let objects = self.scan_objects().map(|r| r.map(Record::Object));
        let events = self.scan_events().map(|r| r.map(Record::Event));
        RecordStream::new(self.export_metadata(), objects.chain(events))
    }

    /// Checks segments and indexes against each other. Problems are
    /// reported, never returned as errors.
    pub fn audit(&self) -> AuditReport {
        audit::audit(self)
    }
}

/// Records found through an index lookup.
pub struct Lookup<T> {
    store: Store,
    segment: SegmentKind,
    postings: std::vec::IntoIter<u64>,
    _marker: std::marker::PhantomData<T>,
}

impl<T> Lookup<T> {
    /// Number of records still to be yielded.
    pub fn remaining(&self) -> usize {
        self.postings.len()
    }
}

impl<T: Decode> Iterator for Lookup<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Result<T>> {
        let loc = self.postings.next()?;
        Some(self.store.read_at(self.segment, loc))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.postings.len(), Some(self.postings.len()))
    }
}

/// Sequential scan of a whole collection.
pub struct Scan<T> {
    store: Store,
    inner: SegmentScan<T>,
}

impl<T: Decode> Scan<T> {
    /// Next record together with its location.
    pub fn next_located(&mut self) -> Option<Result<(u64, T)>> {
        let item = self.inner.next_located()?;
        self.store.inner.touched.fetch_add(1, Ordering::Relaxed);
        Some(item)
    }
}

impl<T: Decode> Iterator for Scan<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Result<T>> {
        self.next_located().map(|r| r.map(|(_, t)| t))
    }
}

/// Rewrites one index of a committed store through `edit` and recommits the
/// manifest, so that the store opens without recovery. Test fixture for
/// exercising the audit.
#[doc(hidden)]
pub fn tamper_index(root: &Path, kind: IndexKind, mut edit: impl FnMut(&str, &mut Vec<u64>)) -> Result<()> {
    let mut manifest = Manifest::read(root)?.ok_or_else(|| Error::NoStore(root.to_owned()))?;
    let path = kind.path(root);
    let entries: Vec<(String, Vec<u64>)> = IndexReader::open(&path)?.iter()?.collect::<Result<_>>()?;
    let tmp = path.with_extension("idx.tmp");
    let mut w = IndexWriter::create(&tmp, None)?;
    for (key, mut postings) in entries {
        edit(&key, &mut postings);
        for p in postings {
            w.push(&key, p)?;
        }
    }
    let s = w.finish()?;
    std::fs::rename(&tmp, &path)?;
    let entry = manifest
        .indexes
        .iter_mut()
        .find(|i| i.name == kind.name())
        .ok_or_else(|| Error::corruption(&path, 0, "index not listed in manifest"))?;
    entry.len = s.len;
    entry.crc = s.crc;
    entry.keys = s.keys;
    entry.postings = s.postings;
    manifest.write(root)
}
