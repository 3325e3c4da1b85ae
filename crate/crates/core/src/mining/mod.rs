//! Object-centric discovery and statistics over a [`Store`].
//!
//! Everything is computed from sequential scans, index walks and the
//! bounded-memory unwind in [`crate::agg`]; no operation holds a whole
//! collection in memory. Result maps are ordered, so rendering them is
//! deterministic.

pub mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::agg::{self, LifecycleEntry, LifecycleStep, Lifecycles};
use crate::error::{Error, Result};
use crate::model::UNKNOWN_OBJECT_TYPE;
use crate::spill::{ExternalSorter, MemoryBudget};
use crate::store::{IndexKind, Store};

/// Directly-follows graph of one object type.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TypeDfg {
    /// (a, b) → number of adjacent steps a, b in lifecycles of this type.
    pub arcs: BTreeMap<(String, String), u64>,
    /// activity → events with that activity touching ≥1 object of the type.
    pub node_events: BTreeMap<String, u64>,
    /// activity → distinct objects of the type that went through it.
    pub node_objects: BTreeMap<String, u64>,
}

/// One directly-follows graph per object type.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Mdfg {
    pub types: BTreeMap<String, TypeDfg>,
    /// Events in the store.
    pub events: u64,
}

/// Which object types to compute graphs for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TypeSelection {
    /// Every stored type, plus [`UNKNOWN_OBJECT_TYPE`] if some omap entry
    /// refers to an object that is not stored.
    All,
    Only(BTreeSet<String>),
}

impl TypeSelection {
    pub fn only<I: IntoIterator<Item = S>, S: Into<String>>(types: I) -> Self {
        TypeSelection::Only(types.into_iter().map(Into::into).collect())
    }
}

/// Pairs lifecycles (ascending object id) with object types from the
/// id-ordered object scan. Dangling ids get [`UNKNOWN_OBJECT_TYPE`].
struct Typed {
    lifecycles: Lifecycles,
    objects: std::iter::Peekable<crate::store::Scan<crate::model::ObjectRecord>>,
}

impl Typed {
    fn new(store: &Store, lifecycles: Lifecycles) -> Self {
        Typed {
            lifecycles,
            objects: store.scan_objects().peekable(),
        }
    }
}

impl Iterator for Typed {
    type Item = Result<(String, LifecycleEntry)>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = match self.lifecycles.next()? {
            Ok(e) => e,
            Err(e) => return Some(Err(e)),
        };
        loop {
            match self.objects.peek() {
                Some(Ok(o)) if o.id < entry.object_id => {
                    self.objects.next();
                }
                Some(Ok(o)) if o.id == entry.object_id => {
                    let otype = o.otype.clone();
                    return Some(Ok((otype, entry)));
                }
                Some(Err(_)) => {
                    let err = self.objects.next().expect("peeked").expect_err("peeked error");
                    return Some(Err(err));
                }
                _ => return Some(Ok((UNKNOWN_OBJECT_TYPE.to_owned(), entry))),
            }
        }
    }
}

fn all_lifecycles(store: &Store, budget: &MemoryBudget, spill_dir: &Path) -> Result<Lifecycles> {
    agg::unwind_group(store.scan_events(), budget, spill_dir)
}

/// Computes the directly-follows graph of every selected object type.
///
/// The result does not depend on `budget`; only memory use and spill
/// volume do.
pub fn mdfg(store: &Store, selection: &TypeSelection, budget: &MemoryBudget, spill_dir: &Path) -> Result<Mdfg> {
    let mut result = Mdfg {
        events: store.event_count(),
        ..Mdfg::default()
    };
    let wanted: Option<&BTreeSet<String>> = match selection {
        TypeSelection::All => {
            for t in store.object_types() {
                result.types.insert(t.to_owned(), TypeDfg::default());
            }
            None
        }
        TypeSelection::Only(types) => {
            let known: BTreeSet<&str> = store.object_types().collect();
            if let Some(t) = types.iter().find(|t| !known.contains(t.as_str()) && *t != UNKNOWN_OBJECT_TYPE) {
                return Err(Error::UnknownObjectType(t.clone()));
            }
            for t in types {
                result.types.insert(t.clone(), TypeDfg::default());
            }
            Some(types)
        }
    };

    // (type, event id, activity) for every kept step; deduplicated on
    // (type, event id) afterwards to count events rather than memberships.
    let mut memberships = ExternalSorter::<(String, String, String)>::new(budget.clone(), spill_dir)?;
    for item in Typed::new(store, all_lifecycles(store, budget, spill_dir)?) {
        let (otype, entry) = item?;
        if wanted.is_some_and(|w| !w.contains(&otype)) {
            continue;
        }
        let dfg = result.types.entry(otype.clone()).or_default();
        for pair in entry.lifecycle.windows(2) {
            *dfg.arcs
                .entry((pair[0].activity.clone(), pair[1].activity.clone()))
                .or_insert(0) += 1;
        }
        let distinct: BTreeSet<&str> = entry.activities().collect();
        for activity in distinct {
            *dfg.node_objects.entry(activity.to_owned()).or_insert(0) += 1;
        }
        for step in entry.lifecycle {
            memberships.push((otype.clone(), step.event_id, step.activity))?;
        }
    }
    let mut last: Option<(String, String)> = None;
    for item in memberships.finish()? {
        let (otype, event_id, activity) = item?;
        if last.as_ref().is_some_and(|(t, e)| *t == otype && *e == event_id) {
            continue;
        }
        if let Some(dfg) = result.types.get_mut(&otype) {
            *dfg.node_events.entry(activity).or_insert(0) += 1;
        }
        last = Some((otype, event_id));
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActivityStat {
    pub event_count: u64,
    /// Σ|omap| over the activity's events.
    pub total_objects: u64,
    /// Distinct object ids over the activity's events.
    pub unique_objects: u64,
}

/// Per-activity event and object counts, from one scan over the events.
pub fn activity_stats(store: &Store, budget: &MemoryBudget, spill_dir: &Path) -> Result<BTreeMap<String, ActivityStat>> {
    let mut stats: BTreeMap<String, ActivityStat> = BTreeMap::new();
    let mut pairs = ExternalSorter::<(String, String)>::new(budget.clone(), spill_dir)?;
    for event in store.scan_events() {
        let event = event?;
        let stat = match stats.get_mut(&event.activity) {
            Some(s) => s,
            None => stats.entry(event.activity.clone()).or_default(),
        };
        stat.event_count += 1;
        stat.total_objects += event.omap.len() as u64;
        for object in event.omap {
            pairs.push((event.activity.clone(), object))?;
        }
    }
    let mut last: Option<(String, String)> = None;
    for pair in pairs.finish()? {
        let pair = pair?;
        if last.as_ref() != Some(&pair) {
            if let Some(s) = stats.get_mut(&pair.0) {
                s.unique_objects += 1;
            }
            last = Some(pair);
        }
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ObjectTypeStat {
    pub object_count: u64,
    /// Objects of the type that appear in at least one omap.
    pub referenced_count: u64,
}

/// Objects per type, joined against the keys of the omap index.
pub fn object_type_stats(store: &Store) -> Result<BTreeMap<String, ObjectTypeStat>> {
    let mut stats: BTreeMap<String, ObjectTypeStat> = BTreeMap::new();
    let mut referenced = store.index_reader(IndexKind::Omap).iter()?.peekable();
    for object in store.scan_objects() {
        let object = object?;
        let mut is_referenced = false;
        loop {
            match referenced.peek() {
                Some(Ok((key, _))) if *key < object.id => {
                    referenced.next();
                }
                Some(Ok((key, _))) => {
                    is_referenced = *key == object.id;
                    break;
                }
                Some(Err(_)) => return Err(referenced.next().expect("peeked").expect_err("peeked error")),
                None => break,
            }
        }
        let stat = match stats.get_mut(&object.otype) {
            Some(s) => s,
            None => stats.entry(object.otype.clone()).or_default(),
        };
        stat.object_count += 1;
        stat.referenced_count += u64::from(is_referenced);
    }
    Ok(stats)
}

/// Summary of the time between two directly-following activities, in
/// seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairTimes {
    pub n: u64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Lower median: element `(n - 1) / 2` of the sorted deltas.
    pub median: f64,
    /// Population standard deviation.
    pub stdev: f64,
}

const MICROS_PER_SEC: f64 = 1_000_000.0;

/// Time between directly-following activities over all object lifecycles,
/// regardless of object type.
pub fn time_between_activities(
    store: &Store,
    budget: &MemoryBudget,
    spill_dir: &Path,
) -> Result<BTreeMap<(String, String), PairTimes>> {
    let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut deltas = ExternalSorter::<(String, String, i64)>::new(budget.clone(), spill_dir)?;
    for entry in all_lifecycles(store, budget, spill_dir)? {
        let entry = entry?;
        for pair in entry.lifecycle.windows(2) {
            let [a, b] = pair else { unreachable!("windows of two") };
            let delta = b.timestamp.as_micros() - a.timestamp.as_micros();
            let key = (a.activity.clone(), b.activity.clone());
            deltas.push((key.0.clone(), key.1.clone(), delta))?;
            *counts.entry(key).or_insert(0) += 1;
        }
    }

    let mut result = BTreeMap::new();
    let mut sorted = deltas.finish()?.peekable();
    for (key, n) in counts {
        let mut t = PairTimes { n, ..PairTimes::default() };
        let (mut mean, mut m2) = (0.0f64, 0.0f64);
        for i in 0..n {
            let (_, _, delta) = sorted.next().expect("one delta per counted pair")?;
            let x = delta as f64 / MICROS_PER_SEC;
            if i == 0 {
                t.min = x;
            }
            if i == (n - 1) / 2 {
                t.median = x;
            }
            t.max = x;
            let k = (i + 1) as f64;
            let d = x - mean;
            mean += d / k;
            m2 += d * (x - mean);
        }
        t.mean = mean;
        t.stdev = (m2 / n as f64).sqrt();
        result.insert(key, t);
    }
    Ok(result)
}

/// The lifecycle of one object, read through the omap index.
pub fn lifecycle(store: &Store, object_id: &str) -> Result<Option<LifecycleEntry>> {
    let steps: Vec<LifecycleStep> = store
        .scan_events_by_object(object_id)?
        .map(|e| {
            e.map(|e| LifecycleStep {
                timestamp: e.timestamp,
                event_id: e.id,
                activity: e.activity,
            })
        })
        .collect::<Result<_>>()?;
    Ok((!steps.is_empty()).then(|| LifecycleEntry {
        object_id: object_id.to_owned(),
        lifecycle: steps,
    }))
}
