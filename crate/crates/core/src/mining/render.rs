//! Byte-deterministic text forms of mining results: JSON, GraphViz DOT and
//! CSV. JSON object keys are sorted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::{json, Map, Value};

use super::{ActivityStat, Mdfg, ObjectTypeStat, PairTimes};
use crate::agg::LifecycleEntry;

fn pretty(value: &Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialize");
    text.push('\n');
    text
}

fn counts(map: &BTreeMap<String, u64>) -> Value {
    Value::Object(map.iter().map(|(k, v)| (k.clone(), json!(v))).collect())
}

/// `{"events": n, "types": {type: {"arcs": [...], "node_events": {...}, "node_objects": {...}}}}`
pub fn mdfg_json(m: &Mdfg) -> String {
    let mut types = Map::new();
    for (otype, dfg) in &m.types {
        let arcs: Vec<Value> = dfg
            .arcs
            .iter()
            .map(|((a, b), n)| json!({"from": a, "to": b, "count": n}))
            .collect();
        types.insert(
            otype.clone(),
            json!({
                "arcs": arcs,
                "node_events": counts(&dfg.node_events),
                "node_objects": counts(&dfg.node_objects),
            }),
        );
    }
    pretty(&json!({"events": m.events, "types": types}))
}

fn dot_id(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push('"');
    for c in text.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// One `digraph` per object type. Nodes are labelled with their event and
/// object counts, arcs with their frequency.
pub fn mdfg_dot(m: &Mdfg) -> String {
    let mut out = String::new();
    for (otype, dfg) in &m.types {
        writeln!(out, "digraph {} {{", dot_id(otype)).unwrap();
        writeln!(out, "  rankdir=LR;").unwrap();
        writeln!(out, "  node [shape=box];").unwrap();
        let mut nodes: Vec<&String> = dfg.node_objects.keys().chain(dfg.node_events.keys()).collect();
        nodes.sort();
        nodes.dedup();
        for activity in nodes {
            let events = dfg.node_events.get(activity).copied().unwrap_or(0);
            let objects = dfg.node_objects.get(activity).copied().unwrap_or(0);
            let label = format!("{activity}\nevents={events} objects={objects}");
            writeln!(out, "  {} [label={}];", dot_id(activity), dot_id(&label)).unwrap();
        }
        for ((a, b), n) in &dfg.arcs {
            writeln!(out, "  {} -> {} [label=\"{n}\"];", dot_id(a), dot_id(b)).unwrap();
        }
        writeln!(out, "}}").unwrap();
    }
    out
}

pub fn activity_stats_json(stats: &BTreeMap<String, ActivityStat>) -> String {
    let map: Map<String, Value> = stats
        .iter()
        .map(|(a, s)| {
            (
                a.clone(),
                json!({
                    "event_count": s.event_count,
                    "total_objects": s.total_objects,
                    "unique_objects": s.unique_objects,
                }),
            )
        })
        .collect();
    pretty(&Value::Object(map))
}

fn csv_text(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).expect("writing CSV to memory");
    String::from_utf8(w.into_inner().expect("flushing CSV to memory")).expect("CSV of UTF-8 fields")
}

pub fn activity_stats_csv(stats: &BTreeMap<String, ActivityStat>) -> String {
    csv_text(|w| {
        w.write_record(["activity", "event_count", "total_objects", "unique_objects"])?;
        for (a, s) in stats {
            w.write_record([
                a.clone(),
                s.event_count.to_string(),
                s.total_objects.to_string(),
                s.unique_objects.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// `{type: object_count}`.
pub fn object_type_stats_json(stats: &BTreeMap<String, ObjectTypeStat>) -> String {
    let map: Map<String, Value> = stats.iter().map(|(t, s)| (t.clone(), json!(s.object_count))).collect();
    pretty(&Value::Object(map))
}

pub fn object_type_stats_csv(stats: &BTreeMap<String, ObjectTypeStat>) -> String {
    csv_text(|w| {
        w.write_record(["object_type", "object_count", "referenced_count"])?;
        for (t, s) in stats {
            w.write_record([t.clone(), s.object_count.to_string(), s.referenced_count.to_string()])?;
        }
        Ok(())
    })
}

pub fn times_json(times: &BTreeMap<(String, String), PairTimes>) -> String {
    let rows: Vec<Value> = times
        .iter()
        .map(|((a, b), t)| {
            json!({
                "from": a,
                "to": b,
                "n": t.n,
                "min_s": t.min,
                "max_s": t.max,
                "mean_s": t.mean,
                "median_s": t.median,
                "stdev_s": t.stdev,
            })
        })
        .collect();
    pretty(&Value::Array(rows))
}

pub fn times_csv(times: &BTreeMap<(String, String), PairTimes>) -> String {
    csv_text(|w| {
        w.write_record(["from", "to", "n", "min_s", "max_s", "mean_s", "median_s", "stdev_s"])?;
        for ((a, b), t) in times {
            w.write_record([
                a.clone(),
                b.clone(),
                t.n.to_string(),
                t.min.to_string(),
                t.max.to_string(),
                t.mean.to_string(),
                t.median.to_string(),
                t.stdev.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// `{"_id": object, "lifecycle": [activity...], "steps": [{...}]}`
pub fn lifecycle_json(entry: &LifecycleEntry) -> String {
    let steps: Vec<Value> = entry
        .lifecycle
        .iter()
        .map(|s| json!({"activity": s.activity, "event_id": s.event_id, "timestamp": s.timestamp.to_iso()}))
        .collect();
    pretty(&json!({
        "_id": entry.object_id,
        "lifecycle": entry.activities().collect::<Vec<_>>(),
        "steps": steps,
    }))
}
