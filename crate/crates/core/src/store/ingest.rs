//! Writing a log into a store, and rebuilding a store after a crash.
//!
//! Commit protocol: metadata and record segments are written and fsynced,
//! segments are rewritten into canonical order if the input was not already
//! in it, the five indexes are built from the final segments and fsynced,
//! and only then is the manifest renamed into place. Anything without a
//! manifest that matches it is uncommitted and gets rebuilt from segments.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use super::index::IndexWriter;
use super::manifest::{sync_dir, IndexEntry, Manifest};
use super::segment::{self, SegmentFile, SegmentInfo, SegmentKind, SegmentScan, SegmentWriter};
use super::{IndexKind, LOCK_FILE, SEGMENTS_DIR, SORTING_DIR, TMP_DIR, INDEX_DIR};
use crate::codec::{Decode, Encode};
use crate::error::{Error, Result};
use crate::io::{ById, ByTime, Record, RecordStream};
use crate::model::{EventRecord, LogMetadata, ObjectRecord};
use crate::spill::{ExternalSorter, MemoryBudget};

/// Tuning knobs for writing a store.
#[derive(Clone, Debug)]
pub struct StoreOptions {
    /// A segment is closed once appending would take it past this size.
    pub segment_max_bytes: u64,
    /// Memory for re-sorting records and building indexes, shared by all
    /// sorters of one ingest.
    pub sort_budget: u64,
    /// Simulates a crash after this many records: segments are left with a
    /// torn tail, index files half-written and no manifest.
    #[doc(hidden)]
    pub crash_after_records: Option<u64>,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            segment_max_bytes: 64 << 20,
            sort_budget: 64 << 20,
            crash_after_records: None,
        }
    }
}

/// Outcome of a successful ingest.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub events: u64,
    pub objects: u64,
    /// Σ|omap| over the ingested events.
    pub postings: u64,
    pub segment_bytes: u64,
    pub index_bytes: u64,
    pub wall_time: Duration,
}

impl std::fmt::Display for IngestStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "events={} objects={} postings={} segment_bytes={} index_bytes={} seconds={:.3}",
            self.events,
            self.objects,
            self.postings,
            self.segment_bytes,
            self.index_bytes,
            self.wall_time.as_secs_f64()
        )
    }
}

pub(crate) fn acquire_lock(root: &Path) -> Result<File> {
    let file = OpenOptions::new().create(true).truncate(false).write(true).open(root.join(LOCK_FILE))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(TryLockError::WouldBlock) => Err(Error::Locked(root.to_owned())),
        Err(TryLockError::Error(e)) => Err(e.into()),
    }
}

/// Exclusive write access to an empty store directory.
pub struct StoreWriter {
    root: PathBuf,
    options: StoreOptions,
    _lock: File,
}

const SIMULATED_CRASH: &str = "simulated crash";

impl StoreWriter {
    /// Creates the directory if needed and locks it. Fails if another writer
    /// holds the lock or the directory already holds a log.
    pub fn create(root: &Path, options: StoreOptions) -> Result<Self> {
        if options.segment_max_bytes == 0 {
            return Err(Error::Config("segment size must be positive".into()));
        }
        if options.sort_budget < IndexKind::ALL.len() as u64 {
            return Err(Error::Config("sort budget is too small".into()));
        }
        fs::create_dir_all(root)?;
        let lock = acquire_lock(root)?;
        let populated = root.join(super::manifest::FILE_NAME).exists()
            || fs::read_dir(root.join(SEGMENTS_DIR)).is_ok_and(|mut d| d.next().is_some());
        if populated {
            return Err(Error::AlreadyPopulated(root.to_owned()));
        }
        Ok(StoreWriter {
            root: root.to_owned(),
            options,
            _lock: lock,
        })
    }

    /// Writes every record of `stream`, builds the indexes and commits.
    ///
    /// On failure the partial state is removed, leaving an empty store.
    pub fn ingest(self, stream: RecordStream) -> Result<IngestStats> {
        let start = Instant::now();
        match self.ingest_inner(stream) {
            Ok(manifest) => Ok(IngestStats {
                events: manifest.events,
                objects: manifest.objects,
                postings: manifest.postings,
                segment_bytes: manifest.segment_bytes(),
                index_bytes: manifest.index_bytes(),
                wall_time: start.elapsed(),
            }),
            Err(Error::Io(e)) if e.to_string() == SIMULATED_CRASH && self.options.crash_after_records.is_some() => {
                Err(Error::Io(e))
            }
            Err(e) => {
                remove_partial_state(&self.root);
                Err(e)
            }
        }
    }

    fn ingest_inner(&self, stream: RecordStream) -> Result<Manifest> {
        let seg_dir = self.root.join(SEGMENTS_DIR);
        fs::create_dir_all(&seg_dir)?;
        fs::create_dir_all(self.root.join(INDEX_DIR))?;
        let (metadata, records) = stream.into_parts();
        let meta_len = segment::write_meta_segment(&seg_dir, &metadata.to_bytes())?;

        let max = self.options.segment_max_bytes;
        let mut events = SegmentWriter::new(&seg_dir, SegmentKind::Events, max);
        let mut objects = SegmentWriter::new(&seg_dir, SegmentKind::Objects, max);
        let mut events_sorted = true;
        let mut objects_sorted = true;
        let mut last_event: Option<(i64, String)> = None;
        let mut last_object: Option<String> = None;
        let mut buf = Vec::new();
        let mut written = 0u64;
        for record in records {
            buf.clear();
            match record? {
                Record::Event(e) => {
                    e.encode(&mut buf);
                    let ts = e.timestamp.as_micros();
                    events.append(&buf, Some(ts))?;
                    if let Some((last_ts, last_id)) = &mut last_event {
                        if (ts, e.id.as_str()) <= (*last_ts, last_id.as_str()) {
                            events_sorted = false;
                        }
                        *last_ts = ts;
                        last_id.clone_from(&e.id);
                    } else {
                        last_event = Some((ts, e.id));
                    }
                }
                Record::Object(o) => {
                    o.encode(&mut buf);
                    objects.append(&buf, None)?;
                    if let Some(last) = &mut last_object {
                        if o.id.as_str() <= last.as_str() {
                            objects_sorted = false;
                        }
                        last.clone_from(&o.id);
                    } else {
                        last_object = Some(o.id);
                    }
                }
            }
            written += 1;
            if self.options.crash_after_records == Some(written) {
                return Err(self.crash(events, objects));
            }
        }
        let mut segments = events.finish()?;
        segments.extend(objects.finish()?);
        sync_dir(&seg_dir)?;
        finalize(
            &self.root,
            &self.options,
            meta_len,
            segments,
            [Some(events_sorted), Some(objects_sorted)],
            Vec::new(),
        )
    }

    fn crash(&self, events: SegmentWriter, objects: SegmentWriter) -> Error {
        let outcome = (|| -> Result<()> {
            // A frame header announcing 200 bytes of which only 3 arrived.
            events.crash(&[200, 1, 1, 0, 0, 1])?;
            objects.crash(&[])?;
            for kind in IndexKind::ALL {
                fs::write(kind.path(&self.root), b"OCIX\x01\x00partial")?;
            }
            Ok(())
        })();
        match outcome {
            Ok(()) => Error::Io(std::io::Error::other(SIMULATED_CRASH)),
            Err(e) => e,
        }
    }
}

fn remove_partial_state(root: &Path) {
    for dir in [SEGMENTS_DIR, INDEX_DIR, SORTING_DIR, TMP_DIR] {
        fs::remove_dir_all(root.join(dir)).ok();
    }
    fs::remove_file(root.join(super::manifest::FILE_NAME)).ok();
}

/// Puts segments into canonical order, builds the indexes and commits.
fn finalize(
    root: &Path,
    options: &StoreOptions,
    meta_len: u64,
    segments: Vec<SegmentInfo>,
    sorted: [Option<bool>; 2],
    recovery_notes: Vec<String>,
) -> Result<Manifest> {
    let tmp = root.join(TMP_DIR);
    fs::create_dir_all(&tmp)?;
    let seg_dir = root.join(SEGMENTS_DIR);
    let (mut event_segs, mut object_segs): (Vec<_>, Vec<_>) =
        segments.into_iter().partition(|s| s.kind == SegmentKind::Events);

    let sorter_budget = options.sort_budget / IndexKind::ALL.len() as u64;
    let ordered = match sorted[0] {
        Some(s) => s,
        None => is_sorted::<EventRecord, _>(&seg_dir, &event_segs, |e| (e.timestamp, e.id))?,
    };
    if !ordered {
        event_segs = rewrite_sorted::<ByTime>(root, SegmentKind::Events, &event_segs, options, |e| {
            Some(e.0.timestamp.as_micros())
        })?;
    }
    let ordered = match sorted[1] {
        Some(s) => s,
        None => is_sorted::<ObjectRecord, _>(&seg_dir, &object_segs, |o| o.id)?,
    };
    if !ordered {
        object_segs = rewrite_sorted::<ById>(root, SegmentKind::Objects, &object_segs, options, |_| None)?;
    }

    let collected = collect_postings(&seg_dir, &event_segs, &object_segs, sorter_budget, &tmp)?;
    let index_dir = root.join(INDEX_DIR);
    fs::create_dir_all(&index_dir)?;
    let mut indexes = Vec::new();
    for (kind, sorter) in IndexKind::ALL.into_iter().zip(collected.sorters) {
        let mut w = IndexWriter::create(&kind.path(root), kind.unique_kind())?;
        for item in sorter.finish()? {
            let (key, loc) = item?;
            w.push(&key, loc)?;
        }
        let s = w.finish()?;
        indexes.push(IndexEntry {
            name: kind.name().to_owned(),
            len: s.len,
            crc: s.crc,
            keys: s.keys,
            postings: s.postings,
        });
    }
    sync_dir(&index_dir)?;

    let mut segments = event_segs;
    segments.extend(object_segs);
    let manifest = Manifest {
        events: collected.events,
        objects: collected.objects,
        postings: collected.postings,
        meta_len,
        segments,
        indexes,
        attribute_names: collected.attribute_names,
        object_types: collected.object_types,
        recovery_notes,
    };
    manifest.write(root)?;
    fs::remove_dir_all(&tmp).ok();
    Ok(manifest)
}

fn open_all(dir: &Path, infos: &[SegmentInfo]) -> Result<Vec<std::sync::Arc<SegmentFile>>> {
    infos
        .iter()
        .map(|i| SegmentFile::open(dir, i).map(std::sync::Arc::new))
        .collect()
}

fn is_sorted<T: Decode, K: Ord>(dir: &Path, infos: &[SegmentInfo], key: impl Fn(T) -> K) -> Result<bool> {
    let mut scan = SegmentScan::<T>::new(open_all(dir, infos)?);
    let mut last: Option<K> = None;
    while let Some(item) = scan.next_located() {
        let k = key(item?.1);
        if last.as_ref().is_some_and(|l| *l >= k) {
            return Ok(false);
        }
        last = Some(k);
    }
    Ok(true)
}

/// Rewrites one collection in sorted order through the external sorter,
/// then swaps the sorted files in.
///
/// The swap is restartable: a `DONE` marker written after the sorted files
/// are durable records how many there are, and [`complete_sort_swap`] can be
/// rerun any number of times after a crash.
fn rewrite_sorted<T: Encode + Decode + Ord>(
    root: &Path,
    kind: SegmentKind,
    infos: &[SegmentInfo],
    options: &StoreOptions,
    ts: impl Fn(&T) -> Option<i64>,
) -> Result<Vec<SegmentInfo>> {
    let seg_dir = root.join(SEGMENTS_DIR);
    let sorting = root.join(SORTING_DIR);
    fs::remove_dir_all(&sorting).ok();
    fs::create_dir_all(&sorting)?;
    let budget = MemoryBudget::new(options.sort_budget)?;
    let mut sorter = ExternalSorter::<T>::new(budget, &root.join(TMP_DIR))?;
    let mut scan = SegmentScan::<T>::new(open_all(&seg_dir, infos)?);
    while let Some(item) = scan.next_located() {
        sorter.push(item?.1)?;
    }
    drop(scan);
    let mut writer = SegmentWriter::new(&sorting, kind, options.segment_max_bytes);
    let mut buf = Vec::new();
    for item in sorter.finish()? {
        let item = item?;
        buf.clear();
        item.encode(&mut buf);
        writer.append(&buf, ts(&item))?;
    }
    let sorted = writer.finish()?;
    sync_dir(&sorting)?;
    {
        let mut marker = File::create(sorting.join("DONE"))?;
        write!(marker, "{} {}", kind.prefix(), sorted.len())?;
        marker.sync_all()?;
    }
    sync_dir(&sorting)?;
    complete_sort_swap(root)?;
    Ok(sorted)
}

/// Finishes an interrupted segment swap, or discards an unfinished sort.
pub(crate) fn complete_sort_swap(root: &Path) -> Result<()> {
    let sorting = root.join(SORTING_DIR);
    let seg_dir = root.join(SEGMENTS_DIR);
    let marker = match fs::read_to_string(sorting.join("DONE")) {
        Ok(m) => m,
        Err(_) => {
            fs::remove_dir_all(&sorting).ok();
            return Ok(());
        }
    };
    let (prefix, count) = marker
        .split_once(' ')
        .and_then(|(p, c)| Some((p.to_owned(), c.trim().parse::<u32>().ok()?)))
        .ok_or_else(|| Error::corruption(sorting.join("DONE"), 0, "unreadable sort marker"))?;
    let kind = match prefix.as_str() {
        "events" => SegmentKind::Events,
        "objects" => SegmentKind::Objects,
        _ => return Err(Error::corruption(sorting.join("DONE"), 0, "unknown segment kind")),
    };
    for seq in segment::list_segments(&sorting, kind)? {
        let name = kind.file_name(seq);
        fs::rename(sorting.join(&name), seg_dir.join(&name))?;
    }
    for seq in segment::list_segments(&seg_dir, kind)? {
        if seq >= count {
            fs::remove_file(seg_dir.join(kind.file_name(seq)))?;
        }
    }
    sync_dir(&seg_dir)?;
    fs::remove_dir_all(&sorting)?;
    Ok(())
}

/// Index entries plus the totals gathered while walking the segments.
pub(crate) struct Collected {
    /// One sorter per [`IndexKind::ALL`] entry.
    pub sorters: Vec<ExternalSorter<(String, u64)>>,
    pub events: u64,
    pub objects: u64,
    pub postings: u64,
    pub attribute_names: BTreeSet<String>,
    pub object_types: BTreeSet<String>,
}

pub(crate) fn collect_postings(
    seg_dir: &Path,
    event_segs: &[SegmentInfo],
    object_segs: &[SegmentInfo],
    sorter_budget: u64,
    spill_dir: &Path,
) -> Result<Collected> {
    let mut sorters = Vec::new();
    for _ in IndexKind::ALL {
        sorters.push(ExternalSorter::new(MemoryBudget::new(sorter_budget)?, spill_dir)?);
    }
    let mut c = Collected {
        sorters: Vec::new(),
        events: 0,
        objects: 0,
        postings: 0,
        attribute_names: BTreeSet::new(),
        object_types: BTreeSet::new(),
    };
    let [event_id, activity, omap, object_id, object_type] = &mut sorters[..] else {
        unreachable!("five index kinds")
    };
    let mut scan = SegmentScan::<EventRecord>::new(open_all(seg_dir, event_segs)?);
    while let Some(item) = scan.next_located() {
        let (loc, e) = item?;
        c.events += 1;
        c.postings += e.omap.len() as u64;
        for name in e.vmap.keys() {
            if !c.attribute_names.contains(name) {
                c.attribute_names.insert(name.clone());
            }
        }
        for o in e.omap {
            omap.push((o, loc))?;
        }
        activity.push((e.activity, loc))?;
        event_id.push((e.id, loc))?;
    }
    let mut scan = SegmentScan::<ObjectRecord>::new(open_all(seg_dir, object_segs)?);
    while let Some(item) = scan.next_located() {
        let (loc, o) = item?;
        c.objects += 1;
        for name in o.ovmap.keys() {
            if !c.attribute_names.contains(name) {
                c.attribute_names.insert(name.clone());
            }
        }
        if !c.object_types.contains(&o.otype) {
            c.object_types.insert(o.otype.clone());
        }
        object_type.push((o.otype, loc))?;
        object_id.push((o.id, loc))?;
    }
    c.sorters = sorters;
    Ok(c)
}

/// Repairs a store that has no valid commit: finishes or discards segment
/// swaps, truncates torn segment tails, then rebuilds indexes and manifest.
/// The caller must hold the lock.
pub(crate) fn recover(root: &Path, previous_notes: Vec<String>) -> Result<Manifest> {
    let seg_dir = root.join(SEGMENTS_DIR);
    let mut notes = previous_notes;
    complete_sort_swap(root)?;
    fs::remove_dir_all(root.join(TMP_DIR)).ok();
    fs::create_dir_all(&seg_dir)?;

    let meta_len = match segment::read_meta_segment(&seg_dir)? {
        Some(_) => fs::metadata(seg_dir.join(SegmentKind::Meta.file_name(0)))?.len(),
        None => {
            notes.push("metadata segment missing or torn; default metadata written".to_owned());
            segment::write_meta_segment(&seg_dir, &LogMetadata::default().to_bytes())?
        }
    };

    let mut segments = Vec::new();
    for kind in [SegmentKind::Events, SegmentKind::Objects] {
        for seq in segment::list_segments(&seg_dir, kind)? {
            let walk = segment::recover_segment(&seg_dir, kind, seq, |payload| match kind {
                SegmentKind::Events => EventRecord::from_bytes(payload).ok().map(|e| e.timestamp.as_micros()),
                _ => None,
            })?;
            if let Some((offset, bytes, reason)) = &walk.torn {
                notes.push(format!(
                    "discarded {bytes} bytes at offset {offset} of {} ({reason})",
                    walk.info.name
                ));
            }
            segments.push(walk.info);
        }
    }
    notes.push("indexes rebuilt from segments".to_owned());
    finalize(root, &StoreOptions::default(), meta_len, segments, [None, None], notes)
}
