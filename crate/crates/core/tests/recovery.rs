mod common;

use std::fs;
use std::path::Path;

use ocelstore::gen::{self, GenSpec};
use ocelstore::io::RecordStream;
use ocelstore::model::OcelLog;
use ocelstore::store::{self, IndexKind, Store, StoreOptions};
use ocelstore::testing::sample_log;
use ocelstore::Error;
use proptest::prelude::*;

/// Ingests `log` and stops abruptly after `after` records, leaving a torn
/// segment tail and half-written indexes.
fn crash_during_ingest(root: &Path, log: &OcelLog, after: u64, segment_max_bytes: u64) {
    let options = StoreOptions {
        segment_max_bytes,
        crash_after_records: Some(after),
        ..StoreOptions::default()
    };
    let err = Store::import(root, RecordStream::from_log(log.clone()), options).unwrap_err();
    assert!(err.to_string().contains("simulated crash"), "{err}");
}

/// The records that reached the segments before the crash: objects come
/// first in the stream, then events.
fn written_prefix(log: &OcelLog, after: u64) -> OcelLog {
    let after = after as usize;
    let objects = log.objects.iter().take(after).cloned().collect();
    let events = log.events.iter().take(after.saturating_sub(log.objects.len())).cloned().collect();
    OcelLog::new(log.metadata.clone(), events, objects)
}

fn check_recovered(root: &Path, expected: &OcelLog) {
    let store = Store::open(root).unwrap();
    let report = store.audit();
    assert!(report.is_healthy(), "{report}");
    assert!(!store.recovery_notes().is_empty());
    assert_eq!(store.event_count(), expected.events.len() as u64);
    assert_eq!(store.object_count(), expected.objects.len() as u64);
    for e in &expected.events {
        assert_eq!(store.get_event(&e.id).unwrap().as_ref(), Some(e));
    }
    for o in &expected.objects {
        assert_eq!(store.get_object(&o.id).unwrap().as_ref(), Some(o));
    }
    for (object, steps) in common::lifecycles(expected) {
        let got: Vec<String> = store.scan_events_by_object(&object).unwrap().map(|e| e.unwrap().id).collect();
        let want: Vec<String> = steps.into_iter().map(|s| s.1).collect();
        assert_eq!(got, want);
    }
    drop(store);

    // Recovery is committed: a second open needs no further repair.
    let again = Store::open(root).unwrap();
    assert_eq!(again.event_count(), expected.events.len() as u64);
    assert!(again.audit().is_healthy());
}

#[test]
fn crash_in_events_keeps_written_prefix() {
    let log = gen::log(&GenSpec::default().scaled_to(2000)).unwrap();
    let after = log.objects.len() as u64 + 1234;
    let dir = tempfile::tempdir().unwrap();
    crash_during_ingest(dir.path(), &log, after, 8 * 1024);
    check_recovered(dir.path(), &written_prefix(&log, after));
    let notes = Store::open(dir.path()).unwrap().recovery_notes().join("\n");
    assert!(notes.contains("discarded"), "{notes}");
    assert!(notes.contains("indexes rebuilt"), "{notes}");
}

#[test]
fn crash_during_objects_keeps_objects_only() {
    let log = sample_log();
    let dir = tempfile::tempdir().unwrap();
    crash_during_ingest(dir.path(), &log, 2, 1 << 20);
    check_recovered(dir.path(), &written_prefix(&log, 2));
}

#[test]
fn new_writer_is_refused_after_recovery() {
    let log = sample_log();
    let dir = tempfile::tempdir().unwrap();
    crash_during_ingest(dir.path(), &log, 5, 1 << 20);
    drop(Store::open(dir.path()).unwrap());
    let err = Store::create(dir.path(), StoreOptions::default()).err().unwrap();
    assert!(matches!(err, Error::AlreadyPopulated(_)), "{err}");
}

#[test]
fn lost_index_files_are_rebuilt() {
    let log = gen::log(&GenSpec::default().scaled_to(500)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    drop(common::import(dir.path(), &log));
    fs::remove_file(IndexKind::Omap.path(dir.path())).unwrap();
    fs::write(IndexKind::Activity.path(dir.path()), b"garbage").unwrap();
    let store = Store::open(dir.path()).unwrap();
    assert!(store.audit().is_healthy());
    assert!(store.recovery_notes().iter().any(|n| n.contains("failed verification")));
    assert_eq!(store.scan_events().count(), 500);
    let lifecycles = common::lifecycles(&log);
    let (object, steps) = lifecycles.iter().next().unwrap();
    assert_eq!(store.scan_events_by_object(object).unwrap().count(), steps.len());
}

#[test]
fn truncated_committed_segment_is_repaired() {
    let log = gen::log(&GenSpec::default().scaled_to(1000)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    drop(common::import(dir.path(), &log));
    let seg = dir.path().join("segments").join("events-000.seg");
    let len = fs::metadata(&seg).unwrap().len();
    fs::OpenOptions::new().write(true).open(&seg).unwrap().set_len(len - 100).unwrap();

    let store = Store::open(dir.path()).unwrap();
    assert!(store.audit().is_healthy(), "{}", store.audit());
    let kept = store.event_count();
    assert!(kept > 900 && kept < 1000, "kept {kept}");
    let mut events = log.events.clone();
    events.sort_by(|a, b| (a.timestamp, &a.id).cmp(&(b.timestamp, &b.id)));
    let stored: Vec<_> = store.scan_events().map(Result::unwrap).collect();
    assert_eq!(stored[..], events[..kept as usize]);
}

#[test]
fn audit_reports_tampered_postings() {
    let log = sample_log();
    let dir = tempfile::tempdir().unwrap();
    drop(common::import(dir.path(), &log));
    store::tamper_index(dir.path(), IndexKind::Activity, |key, postings| {
        if key == "Change Order" {
            postings.clear();
        }
    })
    .unwrap();
    let report = Store::open(dir.path()).unwrap().audit();
    assert!(!report.is_healthy());
    assert!(report.violations.iter().any(|v| v.contains("Change Order")), "{report}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn any_crash_point_recovers_the_written_prefix(seed in 0u64..1000, fraction in 0.0f64..1.0, seg_kib in 1u64..16) {
        let spec = GenSpec { seed, ..GenSpec::default().scaled_to(300) };
        let log = gen::log(&spec).unwrap();
        let total = (log.objects.len() + log.events.len()) as u64;
        let after = 1 + ((total - 1) as f64 * fraction) as u64;
        let dir = tempfile::tempdir().unwrap();
        crash_during_ingest(dir.path(), &log, after, seg_kib * 1024);
        check_recovered(dir.path(), &written_prefix(&log, after));
    }
}
