//! Fixtures shared by unit tests, integration tests and the CLI tests.

use crate::model::{AttributeMap, AttributeValue, EventRecord, LogMetadata, ObjectRecord, OcelLog, Timestamp};

/// The order/invoice log whose object lifecycles are
/// `o1: Create Order, Payment`, `o2: Create Order, Change Order, Cancel Order`
/// and `i1: Emit Invoice, Record Payment`. Each event touches exactly one
/// object; ids follow timestamp order.
pub fn sample_log() -> OcelLog {
    let base = Timestamp::parse("2020-01-01T09:00:00Z").unwrap().as_micros();
    let at = |minutes: i64| Timestamp::from_micros(base + minutes * 60_000_000);
    let steps = [
        ("e1", "Create Order", 0, "o1"),
        ("e2", "Create Order", 30, "o2"),
        ("e3", "Change Order", 60, "o2"),
        ("e4", "Emit Invoice", 90, "i1"),
        ("e5", "Payment", 120, "o1"),
        ("e6", "Cancel Order", 150, "o2"),
        ("e7", "Record Payment", 180, "i1"),
    ];
    let events = steps
        .iter()
        .map(|&(id, activity, minutes, object)| {
            let mut vmap = AttributeMap::new();
            if activity == "Create Order" {
                vmap.insert("price".into(), AttributeValue::Float(if object == "o1" { 250.5 } else { 99.0 }));
            }
            EventRecord::new(id, activity, at(minutes), [object], vmap)
        })
        .collect::<Vec<_>>();

    let object = |id: &str, otype: &str, amount: i64| {
        let mut ovmap = AttributeMap::new();
        ovmap.insert("amount".into(), AttributeValue::Integer(amount));
        ObjectRecord::new(id, otype, ovmap)
    };
    let objects = vec![object("i1", "invoice", 250), object("o1", "order", 2), object("o2", "order", 1)];

    let mut metadata = LogMetadata::default();
    metadata.absorb(&events, &objects);
    metadata
        .global_event
        .insert("ocel:activity".into(), AttributeValue::String("__INVALID__".into()));
    metadata
        .global_object
        .insert("ocel:type".into(), AttributeValue::String("__INVALID__".into()));
    OcelLog::new(metadata, events, objects)
}
