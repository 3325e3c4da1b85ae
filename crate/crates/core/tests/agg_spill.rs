mod common;

use std::collections::{BTreeSet, HashMap};

use ocelstore::agg::{self, LifecycleEntry, Unwinder};
use ocelstore::gen::{self, GenSpec};
use ocelstore::model::{EventRecord, OcelLog};
use ocelstore::{Error, MemoryBudget};
use proptest::prelude::*;

fn sorted_events(log: &OcelLog) -> Vec<EventRecord> {
    let mut v = log.events.clone();
    v.sort_by(|a, b| (a.timestamp, &a.id).cmp(&(b.timestamp, &b.id)));
    v
}

fn as_triples(entries: Vec<LifecycleEntry>) -> common::Lifecycles {
    entries
        .into_iter()
        .map(|e| {
            let steps = e.lifecycle.into_iter().map(|s| (s.timestamp, s.event_id, s.activity)).collect();
            (e.object_id, steps)
        })
        .collect()
}

fn unwind(log: &OcelLog, budget: &MemoryBudget, bits: u32) -> (Vec<LifecycleEntry>, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let mut u = Unwinder::with_partition_bits(budget, dir.path(), bits);
    for e in sorted_events(log) {
        u.push(&e, |_| Ok(true)).unwrap();
    }
    let entries = u.finish().unwrap().collect::<Result<Vec<_>, _>>().unwrap();
    (entries, dir)
}

#[test]
fn spilled_result_equals_in_memory_result() {
    let log = gen::log(&GenSpec::default().scaled_to(20_000)).unwrap();
    let (unlimited, _d1) = unwind(&log, &MemoryBudget::unlimited(), 6);
    let budget = MemoryBudget::new(256 * 1024).unwrap();
    let (spilled, dir) = unwind(&log, &budget, 6);
    assert!(budget.spill_bytes() > 0);
    assert!(budget.spill_count() > 1);
    assert!(budget.high_water() <= 256 * 1024 + 256, "{}", budget.high_water());
    assert_eq!(spilled, unlimited);
    assert_eq!(as_triples(spilled), common::lifecycles(&log));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0, "spill directory not cleaned up");
    let postings: u64 = log.events.iter().map(|e| e.omap.len() as u64).sum();
    assert_eq!(unlimited.iter().map(|e| e.lifecycle.len() as u64).sum::<u64>(), postings);
}

#[test]
fn filtered_unwind_keeps_only_selected_types() {
    let log = gen::log(&GenSpec::default().scaled_to(3000)).unwrap();
    let types: HashMap<String, String> = log.objects.iter().map(|o| (o.id.clone(), o.otype.clone())).collect();
    let wanted = BTreeSet::from(["item".to_owned()]);
    let dir = tempfile::tempdir().unwrap();
    let budget = MemoryBudget::new(64 * 1024).unwrap();
    let entries = agg::unwind_group_filtered(
        sorted_events(&log).into_iter().map(Ok),
        &wanted,
        |o| Ok(types.get(o).cloned()),
        &budget,
        dir.path(),
    )
    .unwrap()
    .collect::<Result<Vec<_>, _>>()
    .unwrap();
    let want: common::Lifecycles = common::lifecycles(&log)
        .into_iter()
        .filter(|(o, _)| types[o] == "item")
        .collect();
    assert!(!want.is_empty());
    assert_eq!(as_triples(entries), want);
}

#[test]
fn budget_below_one_entry_is_a_configuration_error() {
    let log = gen::log(&GenSpec::default().scaled_to(100)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let budget = MemoryBudget::new(8).unwrap();
    let result = agg::unwind_group(sorted_events(&log).into_iter().map(Ok), &budget, dir.path());
    let err = match result {
        Ok(entries) => entries.collect::<Result<Vec<_>, _>>().unwrap_err(),
        Err(e) => e,
    };
    assert!(matches!(err, Error::Config(_)), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn any_budget_gives_the_same_lifecycles(seed in 0u64..10_000, kib in 1u64..48, bits in 0u32..8) {
        let spec = GenSpec { seed, ..GenSpec::default().scaled_to(1500) };
        let log = gen::log(&spec).unwrap();
        let budget = MemoryBudget::new(kib * 1024).unwrap();
        let (entries, _dir) = unwind(&log, &budget, bits);
        // One (object, step) item of these logs is well under 256 bytes.
        prop_assert!(budget.high_water() <= kib * 1024 + 256, "high water {}", budget.high_water());
        prop_assert_eq!(as_triples(entries), common::lifecycles(&log));
    }
}
