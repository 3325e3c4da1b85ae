//! Brute-force, in-memory reference implementations. They share no code
//! with the store, the aggregation engine or the mining module; they only
//! read an `OcelLog` held entirely in memory.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ocelstore::io::RecordStream;
use ocelstore::mining::{ActivityStat, Mdfg, ObjectTypeStat, PairTimes, TypeDfg};
use ocelstore::model::{EventRecord, OcelLog, Timestamp, UNKNOWN_OBJECT_TYPE};
use ocelstore::store::{Store, StoreOptions};

/// (timestamp, event id, activity) triples per object, sorted.
pub type Lifecycles = BTreeMap<String, Vec<(Timestamp, String, String)>>;

pub fn lifecycles(log: &OcelLog) -> Lifecycles {
    let mut out: Lifecycles = BTreeMap::new();
    for e in &log.events {
        for o in &e.omap {
            out.entry(o.clone())
                .or_default()
                .push((e.timestamp, e.id.clone(), e.activity.clone()));
        }
    }
    for steps in out.values_mut() {
        steps.sort();
    }
    out
}

pub fn activities(steps: &[(Timestamp, String, String)]) -> Vec<String> {
    steps.iter().map(|s| s.2.clone()).collect()
}

fn type_map(log: &OcelLog) -> HashMap<&str, &str> {
    log.objects.iter().map(|o| (o.id.as_str(), o.otype.as_str())).collect()
}

/// All stored object types, plus the unknown type when an omap entry has
/// no object record.
pub fn mdfg(log: &OcelLog, only: Option<&BTreeSet<String>>) -> Mdfg {
    let types = type_map(log);
    let type_of = |o: &str| types.get(o).copied().unwrap_or(UNKNOWN_OBJECT_TYPE).to_owned();
    let mut result = Mdfg {
        events: log.events.len() as u64,
        types: BTreeMap::new(),
    };
    match only {
        Some(set) => {
            for t in set {
                result.types.insert(t.clone(), TypeDfg::default());
            }
        }
        None => {
            for o in &log.objects {
                result.types.entry(o.otype.clone()).or_default();
            }
        }
    }
    let wanted = |t: &str| only.is_none_or(|s| s.contains(t));

    for (object, steps) in lifecycles(log) {
        let t = type_of(&object);
        if !wanted(&t) {
            continue;
        }
        let dfg = result.types.entry(t).or_default();
        for i in 1..steps.len() {
            *dfg.arcs.entry((steps[i - 1].2.clone(), steps[i].2.clone())).or_insert(0) += 1;
        }
        let seen: BTreeSet<&String> = steps.iter().map(|s| &s.2).collect();
        for a in seen {
            *dfg.node_objects.entry(a.clone()).or_insert(0) += 1;
        }
    }
    for e in &log.events {
        let touched: BTreeSet<String> = e.omap.iter().map(|o| type_of(o)).filter(|t| wanted(t)).collect();
        for t in touched {
            *result
                .types
                .get_mut(&t)
                .expect("type registered with its lifecycles")
                .node_events
                .entry(e.activity.clone())
                .or_insert(0) += 1;
        }
    }
    result
}

pub fn activity_stats(log: &OcelLog) -> BTreeMap<String, ActivityStat> {
    let mut objects: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    let mut out: BTreeMap<String, ActivityStat> = BTreeMap::new();
    for e in &log.events {
        let s = out.entry(e.activity.clone()).or_default();
        s.event_count += 1;
        s.total_objects += e.omap.len() as u64;
        objects.entry(e.activity.clone()).or_default().extend(e.omap.iter().map(String::as_str));
    }
    for (a, set) in objects {
        out.get_mut(&a).unwrap().unique_objects = set.len() as u64;
    }
    out
}

pub fn object_type_stats(log: &OcelLog) -> BTreeMap<String, ObjectTypeStat> {
    let referenced: BTreeSet<&str> = log.events.iter().flat_map(|e| e.omap.iter().map(String::as_str)).collect();
    let mut out: BTreeMap<String, ObjectTypeStat> = BTreeMap::new();
    for o in &log.objects {
        let s = out.entry(o.otype.clone()).or_default();
        s.object_count += 1;
        s.referenced_count += u64::from(referenced.contains(o.id.as_str()));
    }
    out
}

/// Two-pass mean and population standard deviation; lower median.
pub fn times(log: &OcelLog) -> BTreeMap<(String, String), PairTimes> {
    let mut deltas: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for steps in lifecycles(log).values() {
        for w in steps.windows(2) {
            let micros = w[1].0.as_micros() - w[0].0.as_micros();
            deltas
                .entry((w[0].2.clone(), w[1].2.clone()))
                .or_default()
                .push(micros as f64 / 1e6);
        }
    }
    deltas
        .into_iter()
        .map(|(k, mut d)| {
            d.sort_by(f64::total_cmp);
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let t = PairTimes {
                n: d.len() as u64,
                min: d[0],
                max: d[d.len() - 1],
                mean,
                median: d[(d.len() - 1) / 2],
                stdev: var.sqrt(),
            };
            (k, t)
        })
        .collect()
}

/// Relative comparison with an absolute floor for values near zero.
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

pub fn times_match(
    got: &BTreeMap<(String, String), PairTimes>,
    want: &BTreeMap<(String, String), PairTimes>,
    rel: f64,
) -> Result<(), String> {
    if got.keys().ne(want.keys()) {
        return Err("activity pairs differ".into());
    }
    for (k, w) in want {
        let g = &got[k];
        let fields = [
            ("min", g.min, w.min),
            ("max", g.max, w.max),
            ("mean", g.mean, w.mean),
            ("median", g.median, w.median),
            ("stdev", g.stdev, w.stdev),
        ];
        if g.n != w.n {
            return Err(format!("{k:?}: n {} != {}", g.n, w.n));
        }
        for (name, x, y) in fields {
            if !close(x, y, rel) {
                return Err(format!("{k:?}: {name} {x} != {y}"));
            }
        }
    }
    Ok(())
}

/// Events of `log` that contain `object`, in (timestamp, id) order.
pub fn events_of<'a>(log: &'a OcelLog, object: &str) -> Vec<&'a EventRecord> {
    let mut v: Vec<&EventRecord> = log.events.iter().filter(|e| e.omap.iter().any(|o| o == object)).collect();
    v.sort_by(|a, b| (a.timestamp, &a.id).cmp(&(b.timestamp, &b.id)));
    v
}

pub fn import(root: &Path, log: &OcelLog) -> Store {
    Store::import(root, RecordStream::from_log(log.clone()), StoreOptions::default())
        .expect("import")
        .0
}
