//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Cursor};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ocelstore::agg;
use ocelstore::codec::Encode;
use ocelstore::gen::{self, GenSpec};
use ocelstore::io::{self, Format, RecordStream};
use ocelstore::mining::{self, Mdfg, TypeSelection};
use ocelstore::model::OcelLog;
use ocelstore::store::{Store, StoreOptions};
use ocelstore::testing::sample_log;
use ocelstore::MemoryBudget;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn scratch() -> tempfile::TempDir {
    tempfile::Builder::new().prefix("ocelstore-acceptance-").tempdir().expect("scratch directory")
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure!(elapsed < limit, "{what} took {:.1} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64());
    Ok(())
}

fn lifecycles_of(log: &OcelLog, budget: &MemoryBudget, spill: &Path) -> Result<common::Lifecycles, String> {
    let events = log.clone().sort_events().events.into_iter().map(Ok);
    let entries = agg::unwind_group(events, budget, spill).map_err(|e| e.to_string())?;
    entries
        .map(|e| {
            e.map(|e| {
                let steps = e.lifecycle.into_iter().map(|s| (s.timestamp, s.event_id, s.activity)).collect();
                (e.object_id, steps)
            })
            .map_err(|e| e.to_string())
        })
        .collect()
}

/// Lifecycles of the sample order/invoice log through unwind/group.
fn criterion_1() -> Outcome {
    let started = Instant::now();
    let dir = scratch();
    let got = lifecycles_of(&sample_log(), &MemoryBudget::unlimited(), dir.path())?;
    let expected = [
        ("i1", vec!["Emit Invoice", "Record Payment"]),
        ("o1", vec!["Create Order", "Payment"]),
        ("o2", vec!["Create Order", "Change Order", "Cancel Order"]),
    ];
    let got: Vec<(String, Vec<String>)> = got.iter().map(|(o, s)| (o.clone(), common::activities(s))).collect();
    ensure!(
        got.len() == expected.len() && got.iter().zip(&expected).all(|(g, e)| g.0 == e.0 && g.1 == e.1),
        "lifecycles {got:?}"
    );
    within(started.elapsed(), Duration::from_secs(1), "sample unwind")?;
    Ok(format!("3 lifecycles exact in {:.3} s", started.elapsed().as_secs_f64()))
}

fn log_spaced(i: usize, count: usize, lo: f64, hi: f64) -> u64 {
    (lo * (hi / lo).powf(i as f64 / (count - 1) as f64)).round() as u64
}

/// Generated logs through serialize, parse, ingest, export, serialize and
/// parse again, in both formats.
fn criterion_2() -> Outcome {
    let started = Instant::now();
    let mut events = 0;
    for i in 0..50 {
        let n = log_spaced(i, 50, 10.0, 10_000.0);
        let base = GenSpec {
            seed: 1000 + i as u64,
            n_object_types: 1 + (i as u32 % 5),
            vmap_attributes: i as u32 % 4,
            ..GenSpec::default()
        };
        let log = gen::log(&base.scaled_to(n)).map_err(|e| e.to_string())?;
        events += log.events.len();
        for format in [Format::Json, Format::Xml] {
            let dir = scratch();
            let mut text = Vec::new();
            io::serialize(RecordStream::from_log(log.clone()), &mut text, format).map_err(|e| e.to_string())?;
            let parsed = io::parse_reader(Cursor::new(text), None).map_err(|e| e.to_string())?;
            let (store, _) = Store::import(dir.path(), parsed, StoreOptions::default()).map_err(|e| e.to_string())?;
            let mut exported = Vec::new();
            io::serialize(store.export(), &mut exported, format).map_err(|e| e.to_string())?;
            let back = io::parse_reader(Cursor::new(exported), Some(format))
                .and_then(RecordStream::collect_log)
                .map_err(|e| e.to_string())?;
            ensure!(back.semantically_eq(&log), "log {i} ({n} events) differs after {format:?} round trip");
        }
    }
    within(started.elapsed(), Duration::from_secs(120), "round trips")?;
    Ok(format!(
        "50 logs ({events} events) x 2 formats equal in {:.1} s",
        started.elapsed().as_secs_f64()
    ))
}

/// Mining results against brute-force oracles.
fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut lookups = 0;
    for i in 0..20 {
        let n = log_spaced(i, 20, 500.0, 100_000.0);
        let mut spec = GenSpec {
            seed: 2000 + i as u64,
            n_object_types: 2 + (i as u32 % 4),
            activities_per_type: 3 + (i as u32 % 6),
            ..GenSpec::default()
        }
        .scaled_to(n);
        if i % 3 == 0 {
            // Fewer seconds than events: many equal timestamps.
            spec.span_secs = (n / 4) as i64;
        }
        let log = gen::log(&spec).map_err(|e| e.to_string())?;
        let dir = scratch();
        let store = common::import(&dir.path().join("db"), &log);
        let spill = dir.path().join("spill");
        let budget = MemoryBudget::new(4 << 20).map_err(|e| e.to_string())?;
        let ctx = |what: &str| format!("log {i} ({n} events): {what}");

        let got = mining::mdfg(&store, &TypeSelection::All, &budget, &spill).map_err(|e| e.to_string())?;
        ensure!(got == common::mdfg(&log, None), "{}", ctx("mdfg differs"));
        let only: BTreeSet<String> = log.objects.iter().map(|o| o.otype.clone()).take(1).collect();
        let got = mining::mdfg(&store, &TypeSelection::Only(only.clone()), &budget, &spill).map_err(|e| e.to_string())?;
        ensure!(got == common::mdfg(&log, Some(&only)), "{}", ctx("single-type mdfg differs"));
        let got = mining::activity_stats(&store, &budget, &spill).map_err(|e| e.to_string())?;
        ensure!(got == common::activity_stats(&log), "{}", ctx("activity stats differ"));
        let got = mining::object_type_stats(&store).map_err(|e| e.to_string())?;
        ensure!(got == common::object_type_stats(&log), "{}", ctx("object type stats differ"));
        let got = mining::time_between_activities(&store, &budget, &spill).map_err(|e| e.to_string())?;
        common::times_match(&got, &common::times(&log), 1e-9).map_err(|e| ctx(&e))?;
        for (object, steps) in common::lifecycles(&log) {
            let entry = mining::lifecycle(&store, &object).map_err(|e| e.to_string())?;
            let got: Option<Vec<_>> =
                entry.map(|e| e.lifecycle.into_iter().map(|s| (s.timestamp, s.event_id, s.activity)).collect());
            ensure!(got.as_ref() == Some(&steps), "{}", ctx(&format!("lifecycle of {object} differs")));
            lookups += 1;
        }
    }
    within(started.elapsed(), Duration::from_secs(300), "oracle comparison")?;
    Ok(format!(
        "20 logs, 5 analyses and {lookups} lifecycles equal in {:.1} s",
        started.elapsed().as_secs_f64()
    ))
}

struct Ingested {
    store: Store,
    json_bytes: u64,
    ingest: Duration,
}

/// Writes the JSON log of `spec`, then times parsing plus ingest.
fn ingest_json(spec: &GenSpec, dir: &Path) -> Result<Ingested, String> {
    let json = dir.join("log.json");
    let file = BufWriter::new(File::create(&json).map_err(|e| e.to_string())?);
    let stats = gen::generate(spec, file, Format::Json).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let stream = io::parse_path(&json, Some(Format::Json)).map_err(|e| e.to_string())?;
    let (store, _) = Store::import(&dir.join("db"), stream, StoreOptions::default()).map_err(|e| e.to_string())?;
    let ingest = started.elapsed();
    fs::remove_file(&json).ok();
    Ok(Ingested {
        store,
        json_bytes: stats.bytes,
        ingest,
    })
}

const MILLION: u64 = 1_000_000;

/// Timing of the 1M-event ingest, shared with the scaling criterion.
struct LargeRun {
    ingest: Duration,
}

/// Bounded-memory multi-DFG on a 1M-event log.
fn criterion_4(large: &mut Option<LargeRun>) -> Outcome {
    let started = Instant::now();
    let dir = scratch();
    let ingested = ingest_json(&GenSpec::default().scaled_to(MILLION), dir.path())?;
    *large = Some(LargeRun {
        ingest: ingested.ingest,
    });
    let store = ingested.store;
    let spill: PathBuf = dir.path().join("spill");

    // One record: the largest stored event.
    let mut record = 0u64;
    for e in store.scan_events() {
        record = record.max(e.map_err(|e| e.to_string())?.encoded_len() as u64);
    }

    let limit = 64 << 20;
    let budget = MemoryBudget::new(limit).map_err(|e| e.to_string())?;
    let bounded = mining::mdfg(&store, &TypeSelection::All, &budget, &spill).map_err(|e| e.to_string())?;
    let unlimited = MemoryBudget::unlimited();
    let reference: Mdfg = mining::mdfg(&store, &TypeSelection::All, &unlimited, &spill).map_err(|e| e.to_string())?;

    let high_water = budget.high_water();
    ensure!(
        high_water <= limit + record,
        "high water {high_water} exceeds budget {limit} + record {record}"
    );
    ensure!(budget.spill_bytes() > 0, "nothing was spilled");
    ensure!(unlimited.spill_bytes() == 0, "unlimited run spilled");
    ensure!(bounded == reference, "bounded and unlimited results differ");
    ensure!(bounded.events == MILLION, "{} events", bounded.events);
    within(started.elapsed(), Duration::from_secs(600), "1M-event run")?;
    Ok(format!(
        "high water {high_water} <= {limit} + {record}, spilled {} bytes, results equal, {:.1} s",
        budget.spill_bytes(),
        started.elapsed().as_secs_f64()
    ))
}

/// Segment bytes against input JSON bytes.
fn criterion_5() -> Outcome {
    let mut worst: f64 = 0.0;
    let sizes = [1_000u64, 3_000, 10_000, 30_000, 100_000];
    for (i, &n) in sizes.iter().enumerate() {
        for vmap_attributes in [0, 2, 6] {
            let spec = GenSpec {
                seed: 5000 + i as u64,
                vmap_attributes,
                ..GenSpec::default()
            }
            .scaled_to(n);
            let dir = scratch();
            let run = ingest_json(&spec, dir.path())?;
            let segments = run.store.segment_bytes();
            ensure!(
                segments < run.json_bytes,
                "{n} events, {vmap_attributes} attributes: {segments} segment bytes >= {} JSON bytes",
                run.json_bytes
            );
            worst = worst.max(segments as f64 / run.json_bytes as f64);
        }
    }
    Ok(format!("15 logs of 1k-100k events, largest segment/JSON ratio {worst:.3}"))
}

/// Growth of ingest time from 100k to 1M events.
fn criterion_6(large: &Option<LargeRun>) -> Outcome {
    let large_ingest = match large {
        Some(run) => run.ingest,
        None => {
            let dir = scratch();
            ingest_json(&GenSpec::default().scaled_to(MILLION), dir.path())?.ingest
        }
    };
    let dir = scratch();
    let small = ingest_json(&GenSpec::default().scaled_to(MILLION / 10), dir.path())?.ingest;
    let ratio = large_ingest.as_secs_f64() / small.as_secs_f64();
    ensure!(
        (5.0..=20.0).contains(&ratio),
        "ratio {ratio:.2} ({:.2} s / {:.2} s) outside [5, 20]",
        large_ingest.as_secs_f64(),
        small.as_secs_f64()
    );
    Ok(format!(
        "ratio {ratio:.2} ({:.2} s for 1M, {:.2} s for 100k)",
        large_ingest.as_secs_f64(),
        small.as_secs_f64()
    ))
}

/// Lifecycle lookups through the omap index touch few events.
fn criterion_7() -> Outcome {
    let log = gen::log(&GenSpec::default().scaled_to(100_000)).map_err(|e| e.to_string())?;
    let dir = scratch();
    let store = common::import(dir.path(), &log);
    let oracle = common::lifecycles(&log);
    let mut objects: Vec<&String> = log.objects.iter().map(|o| &o.id).collect();
    objects.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    store.reset_records_touched();
    for object in objects.iter().take(100) {
        let entry = mining::lifecycle(&store, object).map_err(|e| e.to_string())?;
        let got: Option<Vec<_>> =
            entry.map(|e| e.lifecycle.into_iter().map(|s| (s.timestamp, s.event_id, s.activity)).collect());
        ensure!(got.as_ref() == oracle.get(*object), "lifecycle of {object} differs from the full scan");
    }
    let touched = store.records_touched();
    let total = store.event_count();
    let share = touched as f64 / total as f64;
    ensure!(share < 0.05, "{touched} of {total} events touched ({:.2}%)", share * 100.0);
    Ok(format!(
        "100 lifecycles exact, {touched} of {total} events touched in total ({:.2}%)",
        share * 100.0
    ))
}

/// Recovery after a torn segment tail and half-written indexes.
fn criterion_8() -> Outcome {
    let log = gen::log(&GenSpec::default().scaled_to(20_000)).map_err(|e| e.to_string())?;
    let dir = scratch();
    let after = log.objects.len() as u64 + 12_345;
    let options = StoreOptions {
        segment_max_bytes: 256 * 1024,
        crash_after_records: Some(after),
        ..StoreOptions::default()
    };
    match Store::import(dir.path(), RecordStream::from_log(log.clone()), options) {
        Err(e) if e.to_string().contains("simulated crash") => {}
        other => return Err(format!("expected a simulated crash, got {other:?}")),
    }
    let store = Store::open(dir.path()).map_err(|e| e.to_string())?;
    let report = store.audit();
    ensure!(report.is_healthy(), "audit after recovery:\n{report}");
    ensure!(!store.recovery_notes().is_empty(), "no recovery notes");

    let kept = (after as usize) - log.objects.len();
    let written = OcelLog::new(log.metadata.clone(), log.events[..kept].to_vec(), log.objects.clone());
    ensure!(store.event_count() == kept as u64, "{} events after recovery, expected {kept}", store.event_count());
    ensure!(store.object_count() == log.objects.len() as u64, "objects lost");
    for e in &written.events {
        let got = store.get_event(&e.id).map_err(|e| e.to_string())?;
        ensure!(got.as_ref() == Some(e), "event {} not recovered", e.id);
    }
    for o in &written.objects {
        let got = store.get_object(&o.id).map_err(|e| e.to_string())?;
        ensure!(got.as_ref() == Some(o), "object {} not recovered", o.id);
    }
    for (object, steps) in common::lifecycles(&written) {
        let got: Vec<String> = store
            .scan_events_by_object(&object)
            .map_err(|e| e.to_string())?
            .map(|e| e.map(|e| e.id))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        ensure!(got == steps.into_iter().map(|s| s.1).collect::<Vec<_>>(), "postings of {object} differ");
    }
    let discarded = log.events.get(kept).map(|e| store.get_event(&e.id));
    ensure!(matches!(discarded, Some(Ok(None))), "uncommitted event is visible");
    Ok(format!(
        "{} events and {} objects queryable, {} recovery note(s)",
        kept,
        log.objects.len(),
        store.recovery_notes().len()
    ))
}

const DESCRIPTIONS: [&str; 8] = [
    "sample lifecycles",
    "round-trip fidelity",
    "oracle equivalence",
    "budget compliance and spill equivalence",
    "compactness",
    "ingest scaling shape",
    "index effectiveness",
    "crash consistency",
];

fn main() -> ExitCode {
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    panic::set_hook(Box::new(|info| eprintln!("{info}")));

    let mut large = None;
    let mut failures = 0;
    for n in 1..=8 {
        if !wanted(n) {
            continue;
        }
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(&mut large),
            5 => criterion_5(),
            6 => criterion_6(&large),
            7 => criterion_7(),
            _ => criterion_8(),
        }))
        .unwrap_or_else(|_| Err("panicked".to_owned()));
        match outcome {
            Ok(detail) => println!("PASS {n} {}: {detail}", DESCRIPTIONS[n - 1]),
            Err(detail) => {
                failures += 1;
                println!("FAIL {n} {}: {detail}", DESCRIPTIONS[n - 1]);
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
