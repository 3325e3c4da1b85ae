mod common;

use std::collections::BTreeSet;

use ocelstore::gen::{self, GenSpec};
use ocelstore::io::RecordStream;
use ocelstore::model::{AttributeMap, EventRecord, LogMetadata, ObjectRecord, OcelLog, Timestamp};
use ocelstore::store::{IndexKind, Store, StoreOptions};
use ocelstore::testing::sample_log;
use ocelstore::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn sorted_events(log: &OcelLog) -> Vec<EventRecord> {
    let mut v = log.events.clone();
    v.sort_by(|a, b| (a.timestamp, &a.id).cmp(&(b.timestamp, &b.id)));
    v
}

fn sorted_objects(log: &OcelLog) -> Vec<ObjectRecord> {
    let mut v = log.objects.clone();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Every index-backed query equals filtering the in-memory log.
fn check_queries(store: &Store, log: &OcelLog) {
    let events = sorted_events(log);
    let objects = sorted_objects(log);
    assert_eq!(store.event_count(), events.len() as u64);
    assert_eq!(store.object_count(), objects.len() as u64);
    assert_eq!(store.scan_events().collect::<Result<Vec<_>, _>>().unwrap(), events);
    assert_eq!(store.scan_objects().collect::<Result<Vec<_>, _>>().unwrap(), objects);

    for e in &events {
        assert_eq!(store.get_event(&e.id).unwrap().as_ref(), Some(e));
    }
    for o in &objects {
        assert_eq!(store.get_object(&o.id).unwrap().as_ref(), Some(o));
        assert_eq!(store.object_type_of(&o.id).unwrap().as_deref(), Some(o.otype.as_str()));
    }
    assert_eq!(store.get_event("no-such-event").unwrap(), None);
    assert_eq!(store.get_object("no-such-object").unwrap(), None);

    let activities: BTreeSet<&str> = events.iter().map(|e| e.activity.as_str()).collect();
    for a in activities.iter().copied().chain(["no-such-activity"]) {
        let got: Vec<EventRecord> = store.scan_events_by_activity(a).unwrap().collect::<Result<_, _>>().unwrap();
        let want: Vec<EventRecord> = events.iter().filter(|e| e.activity == a).cloned().collect();
        assert_eq!(got, want, "activity {a}");
    }
    let referenced: BTreeSet<&str> = events.iter().flat_map(|e| e.omap.iter().map(String::as_str)).collect();
    for o in referenced.iter().copied().chain(["no-such-object"]) {
        let got: Vec<EventRecord> = store.scan_events_by_object(o).unwrap().collect::<Result<_, _>>().unwrap();
        let want: Vec<EventRecord> = common::events_of(log, o).into_iter().cloned().collect();
        assert_eq!(got, want, "object {o}");
    }
    let types: BTreeSet<&str> = objects.iter().map(|o| o.otype.as_str()).collect();
    assert_eq!(store.object_types().collect::<BTreeSet<_>>(), types);
    for t in types {
        let got: Vec<ObjectRecord> = store.scan_objects_by_type(t).unwrap().collect::<Result<_, _>>().unwrap();
        let want: Vec<ObjectRecord> = objects.iter().filter(|o| o.otype == t).cloned().collect();
        assert_eq!(got, want, "type {t}");
    }
    let postings: u64 = events.iter().map(|e| e.omap.len() as u64).sum();
    assert_eq!(store.postings_count(), postings);
    assert_eq!(store.index_reader(IndexKind::Omap).summary().postings, postings);
    assert!(store.audit().is_healthy(), "{}", store.audit());
}

#[test]
fn sample_store_queries() {
    let dir = tempfile::tempdir().unwrap();
    let log = sample_log();
    let store = common::import(dir.path(), &log);
    check_queries(&store, &log);
    let create: Vec<String> = store
        .scan_events_by_activity("Create Order")
        .unwrap()
        .map(|e| e.unwrap().id)
        .collect();
    assert_eq!(create, ["e1", "e2"]);
}

#[test]
fn generated_store_queries_across_many_segments() {
    let dir = tempfile::tempdir().unwrap();
    let log = gen::log(&GenSpec::default().scaled_to(4000)).unwrap();
    let options = StoreOptions {
        segment_max_bytes: 16 * 1024,
        ..StoreOptions::default()
    };
    let (store, stats) = Store::import(dir.path(), RecordStream::from_log(log.clone()), options).unwrap();
    assert!(store.segment_bytes() > 10 * 16 * 1024, "expected many segments");
    assert_eq!(stats.events, 4000);
    check_queries(&store, &log);
}

#[test]
fn unsorted_input_is_stored_in_canonical_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut log = gen::log(&GenSpec::default().scaled_to(3000)).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    log.events.shuffle(&mut rng);
    log.objects.shuffle(&mut rng);
    let options = StoreOptions {
        segment_max_bytes: 32 * 1024,
        sort_budget: 64 * 1024,
        ..StoreOptions::default()
    };
    let (store, _) = Store::import(dir.path(), RecordStream::from_log(log.clone()), options).unwrap();
    check_queries(&store, &log);
    assert!(!dir.path().join("sorting").exists());
}

#[test]
fn reopened_store_answers_the_same() {
    let dir = tempfile::tempdir().unwrap();
    let log = gen::log(&GenSpec::default().scaled_to(500)).unwrap();
    drop(common::import(dir.path(), &log));
    let store = Store::open(dir.path()).unwrap();
    check_queries(&store, &log);
    assert!(store.recovery_notes().is_empty());
}

#[test]
fn duplicate_ids_are_rejected_and_leave_no_store() {
    let at = Timestamp::from_secs(0);
    let events = vec![
        EventRecord::new("e1", "A", at, ["o1"], AttributeMap::new()),
        EventRecord::new("e1", "B", at, ["o1"], AttributeMap::new()),
    ];
    let log = OcelLog::new(LogMetadata::default(), events, Vec::new());
    let dir = tempfile::tempdir().unwrap();
    let err = Store::import(dir.path(), RecordStream::from_log(log), StoreOptions::default()).unwrap_err();
    assert!(matches!(err, Error::DuplicateId { kind: "event", ref id } if id == "e1"), "{err}");
    assert!(err.is_data_error());
    assert!(matches!(Store::open(dir.path()), Err(Error::NoStore(_))));
}

#[test]
fn records_touched_counts_lookups() {
    let dir = tempfile::tempdir().unwrap();
    let log = gen::log(&GenSpec::default().scaled_to(2000)).unwrap();
    let store = common::import(dir.path(), &log);
    store.reset_records_touched();
    let n = store.scan_events_by_object("order-0").unwrap().count() as u64;
    assert_eq!(store.records_touched(), n);
    store.reset_records_touched();
    let all = store.scan_events().count() as u64;
    assert_eq!(store.records_touched(), all);
}

#[test]
fn concurrent_readers_agree() {
    let dir = tempfile::tempdir().unwrap();
    let log = gen::log(&GenSpec::default().scaled_to(1000)).unwrap();
    let store = common::import(dir.path(), &log);
    let handles: Vec<_> = (0..4)
        .map(|i| {
            let store = store.clone();
            std::thread::spawn(move || {
                store
                    .scan_events_by_object(&format!("order-{i}"))
                    .unwrap()
                    .map(|e| e.unwrap().id)
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        let want: Vec<String> = common::events_of(&log, &format!("order-{i}")).iter().map(|e| e.id.clone()).collect();
        assert_eq!(h.join().unwrap(), want);
    }
}

fn arbitrary_log() -> impl Strategy<Value = OcelLog> {
    let event = ("[A-D]", -5i64..5, prop::collection::vec("o[0-9]", 0..5));
    (
        prop::collection::vec(event, 0..60),
        prop::collection::btree_map("o[0-9]", "[xyz]", 0..10),
    )
        .prop_map(|(events, objects)| {
            let events: Vec<EventRecord> = events
                .into_iter()
                .enumerate()
                .map(|(i, (a, t, omap))| {
                    EventRecord::new(format!("ev{i}"), a, Timestamp::from_secs(t * 3600), omap, AttributeMap::new())
                })
                .collect();
            let objects: Vec<ObjectRecord> =
                objects.into_iter().rev().map(|(id, t)| ObjectRecord::new(id, t, AttributeMap::new())).collect();
            let mut metadata = LogMetadata::default();
            metadata.absorb(&events, &objects);
            OcelLog::new(metadata, events, objects)
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, ..ProptestConfig::default() })]

    #[test]
    fn index_queries_equal_full_scan_filters(log in arbitrary_log(), segment_kib in 1u64..8) {
        let dir = tempfile::tempdir().unwrap();
        let options = StoreOptions { segment_max_bytes: segment_kib * 256, sort_budget: 4096, ..StoreOptions::default() };
        let (store, _) = Store::import(dir.path(), RecordStream::from_log(log.clone()), options).unwrap();
        check_queries(&store, &log);
    }
}
