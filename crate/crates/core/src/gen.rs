//! Deterministic synthetic logs.
//!
//! Each object type has its own activities and a random transition matrix
//! over them. An event picks a type and one of its objects, advances that
//! object along the matrix and takes the resulting activity; the omap is
//! the chosen object plus further objects drawn uniformly from the whole
//! population. Events are emitted in time order with second-resolution
//! timestamps, so equal timestamps occur once events outnumber seconds.
//!
//! Output is a pure function of [`GenSpec`].

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{self, Format, Record, RecordStream};
use crate::model::{AttributeMap, AttributeValue, EventRecord, LogMetadata, ObjectRecord, Timestamp};

const TYPE_NAMES: [&str; 8] = ["order", "item", "package", "invoice", "customer", "delivery", "payment", "route"];
const VERBS: [&str; 12] = [
    "Create", "Check", "Approve", "Pick", "Pack", "Ship", "Bill", "Pay", "Remind", "Return", "Close", "Cancel",
];

/// 2021-01-01T00:00:00Z.
const START_SECS: i64 = 1_609_459_200;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenSpec {
    pub seed: u64,
    pub n_events: u64,
    pub n_object_types: u32,
    pub objects_per_type: u32,
    /// Inclusive bounds of the uniform omap size.
    pub omap_size: (u32, u32),
    pub activities_per_type: u32,
    /// Seconds between the first and the last event.
    pub span_secs: i64,
    pub vmap_attributes: u32,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 1,
            n_events: 10_000,
            n_object_types: 3,
            objects_per_type: 1_000,
            omap_size: (1, 4),
            activities_per_type: 5,
            span_secs: 365 * 24 * 3600,
            vmap_attributes: 2,
        }
    }
}

impl GenSpec {
    /// This spec resized to `n_events`, with the object population scaled
    /// so that lifecycles keep roughly the same length.
    pub fn scaled_to(&self, n_events: u64) -> GenSpec {
        let mean_omap = u64::from(self.omap_size.0 + self.omap_size.1).div_ceil(2);
        let objects = (n_events * mean_omap / (6 * u64::from(self.n_object_types.max(1)))).max(1);
        GenSpec {
            n_events,
            objects_per_type: u32::try_from(objects).unwrap_or(u32::MAX),
            ..self.clone()
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("generator spec: {what}")));
        if self.n_object_types == 0 || self.objects_per_type == 0 || self.activities_per_type == 0 {
            return bad("type, object and activity counts must be at least 1");
        }
        if self.omap_size.0 == 0 || self.omap_size.0 > self.omap_size.1 {
            return bad("omap size bounds must satisfy 1 <= min <= max");
        }
        if self.span_secs < 0 {
            return bad("time span must not be negative");
        }
        Ok(())
    }

    fn type_name(&self, t: u32) -> String {
        match TYPE_NAMES.get(t as usize) {
            Some(name) if self.n_object_types as usize <= TYPE_NAMES.len() => (*name).to_owned(),
            _ => format!("type{t}"),
        }
    }

    fn object_id(&self, t: u32, k: u32) -> String {
        format!("{}-{k}", self.type_name(t))
    }

    fn total_objects(&self) -> u64 {
        u64::from(self.n_object_types) * u64::from(self.objects_per_type)
    }

    pub fn metadata(&self) -> LogMetadata {
        let mut m = LogMetadata {
            object_types: (0..self.n_object_types).map(|t| self.type_name(t)).collect(),
            attribute_names: (0..self.vmap_attributes).map(|j| format!("attr{j}")).collect(),
            ..LogMetadata::default()
        };
        m.attribute_names.insert("weight".to_owned());
        m.attribute_names.insert("priority".to_owned());
        m
    }
}

struct TypeModel {
    activities: Vec<String>,
    start: WeightedIndex<f64>,
    next: Vec<WeightedIndex<f64>>,
}

fn random_row(rng: &mut ChaCha8Rng, n: usize) -> WeightedIndex<f64> {
    // Squared weights concentrate mass on a few successors.
    let weights: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().powi(2) + 0.01).collect();
    WeightedIndex::new(weights).expect("positive weights")
}

/// Event records of a spec, in (timestamp, id) order.
pub struct EventGenerator {
    spec: GenSpec,
    rng: ChaCha8Rng,
    models: Vec<TypeModel>,
    /// Current activity index of every object, by type.
    states: Vec<Vec<Option<u32>>>,
    next: u64,
}

impl EventGenerator {
    pub fn new(spec: &GenSpec) -> Result<Self> {
        spec.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.activities_per_type as usize;
        let models = (0..spec.n_object_types)
            .map(|t| {
                let name = spec.type_name(t);
                let activities = (0..n)
                    .map(|a| match VERBS.get(a) {
                        Some(verb) if n <= VERBS.len() => format!("{verb} {name}"),
                        _ => format!("Step {a} {name}"),
                    })
                    .collect();
                TypeModel {
                    activities,
                    start: random_row(&mut rng, n),
                    next: (0..n).map(|_| random_row(&mut rng, n)).collect(),
                }
            })
            .collect();
        let states = (0..spec.n_object_types)
            .map(|_| vec![None; spec.objects_per_type as usize])
            .collect();
        Ok(EventGenerator {
            spec: spec.clone(),
            rng,
            models,
            states,
            next: 0,
        })
    }

    fn timestamp(&self, i: u64) -> Timestamp {
        let n = self.spec.n_events.max(2) - 1;
        let offset = i128::from(self.spec.span_secs) * i128::from(i) / i128::from(n);
        Timestamp::from_secs(START_SECS + offset as i64)
    }

    fn value(&mut self, j: u32) -> AttributeValue {
        match j % 4 {
            0 => AttributeValue::Integer(self.rng.gen_range(0..10_000)),
            1 => AttributeValue::Float(f64::from(self.rng.gen_range(0..1_000_000)) / 100.0),
            2 => AttributeValue::String(format!("v{}", self.rng.gen_range(0..100))),
            _ => AttributeValue::Boolean(self.rng.gen()),
        }
    }
}

impl Iterator for EventGenerator {
    type Item = EventRecord;

    fn next(&mut self) -> Option<EventRecord> {
        if self.next >= self.spec.n_events {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let spec = &self.spec;
        let t = self.rng.gen_range(0..spec.n_object_types);
        let k = self.rng.gen_range(0..spec.objects_per_type);
        let model = &self.models[t as usize];
        let state = &mut self.states[t as usize][k as usize];
        let activity = match *state {
            None => model.start.sample(&mut self.rng),
            Some(a) => model.next[a as usize].sample(&mut self.rng),
        };
        *state = Some(activity as u32);
        let activity = model.activities[activity].clone();

        let size = self.rng.gen_range(spec.omap_size.0..=spec.omap_size.1);
        let size = u64::from(size).min(spec.total_objects());
        let mut omap = vec![spec.object_id(t, k)];
        while (omap.len() as u64) < size {
            let other_t = self.rng.gen_range(0..spec.n_object_types);
            let other_k = self.rng.gen_range(0..spec.objects_per_type);
            let id = spec.object_id(other_t, other_k);
            if !omap.contains(&id) {
                omap.push(id);
            }
        }
        let mut vmap = AttributeMap::new();
        for j in 0..self.spec.vmap_attributes {
            let v = self.value(j);
            vmap.insert(format!("attr{j}"), v);
        }
        let ts = self.timestamp(i);
        Some(EventRecord::new(format!("e{i}"), activity, ts, omap, vmap))
    }
}

/// The objects of a spec, in id order of generation.
pub fn objects(spec: &GenSpec) -> impl Iterator<Item = ObjectRecord> + Send + 'static {
    let spec = spec.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6f62_6a65_6374_7321);
    (0..spec.n_object_types).flat_map(move |t| {
        let spec = spec.clone();
        let weights: Vec<f64> = (0..spec.objects_per_type).map(|_| f64::from(rng.gen_range(1..10_000)) / 10.0).collect();
        let priorities: Vec<i64> = (0..spec.objects_per_type).map(|_| rng.gen_range(1..=5)).collect();
        (0..spec.objects_per_type).map(move |k| {
            let mut ovmap = AttributeMap::new();
            ovmap.insert("weight".into(), AttributeValue::Float(weights[k as usize]));
            ovmap.insert("priority".into(), AttributeValue::Integer(priorities[k as usize]));
            ObjectRecord::new(spec.object_id(t, k), spec.type_name(t), ovmap)
        })
    })
}

/// Metadata, then all objects, then all events.
pub fn records(spec: &GenSpec) -> Result<RecordStream> {
    let events = EventGenerator::new(spec)?;
    let objects = objects(spec).map(|o| Ok(Record::Object(o)));
    Ok(RecordStream::new(
        spec.metadata(),
        objects.chain(events.map(|e| Ok(Record::Event(e)))),
    ))
}

/// The whole log in memory. Convenient for tests and oracles.
pub fn log(spec: &GenSpec) -> Result<crate::model::OcelLog> {
    records(spec)?.collect_log()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GenStats {
    pub events: u64,
    pub objects: u64,
    /// Σ|omap|.
    pub postings: u64,
    pub bytes: u64,
}

struct CountingWriter<W> {
    inner: W,
    bytes: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Writes the log of `spec` to `sink` as an OCEL document.
pub fn generate<W: Write>(spec: &GenSpec, sink: W, format: Format) -> Result<GenStats> {
    let stats = std::sync::Arc::new(std::sync::Mutex::new(GenStats::default()));
    let counted = {
        let stats = stats.clone();
        let (metadata, inner) = records(spec)?.into_parts();
        RecordStream::new(
            metadata,
            inner.inspect(move |r| {
                let mut s = stats.lock().expect("stats lock");
                match r {
                    Ok(Record::Event(e)) => {
                        s.events += 1;
                        s.postings += e.omap.len() as u64;
                    }
                    Ok(Record::Object(_)) => s.objects += 1,
                    Err(_) => {}
                }
            }),
        )
    };
    let mut writer = CountingWriter { inner: sink, bytes: 0 };
    io::serialize(counted, &mut writer, format)?;
    writer.flush()?;
    let mut s = *stats.lock().expect("stats lock");
    s.bytes = writer.bytes;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenSpec {
        GenSpec {
            n_events: 500,
            objects_per_type: 40,
            ..GenSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let sa = generate(&small(), &mut a, Format::Json).unwrap();
        generate(&small(), &mut b, Format::Json).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.bytes, a.len() as u64);
        let mut c = Vec::new();
        generate(&GenSpec { seed: 2, ..small() }, &mut c, Format::Json).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_logs_are_valid() {
        let log = log(&small()).unwrap();
        assert_eq!(log.events.len(), 500);
        assert!(log.validate(true).is_valid(), "{:?}", log.validate(true));
        let postings: usize = log.events.iter().map(|e| e.omap.len()).sum();
        assert!((500..=1500).contains(&postings));
        assert!(log.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn empty_spec_is_a_valid_log() {
        let log = log(&GenSpec { n_events: 0, ..small() }).unwrap();
        assert!(log.events.is_empty());
        assert!(log.validate(true).is_valid());
    }

    #[test]
    fn bad_specs_are_rejected() {
        assert!(EventGenerator::new(&GenSpec { omap_size: (3, 2), ..small() }).is_err());
        assert!(EventGenerator::new(&GenSpec { n_object_types: 0, ..small() }).is_err());
    }
}
