use criterion::{criterion_group, criterion_main, Criterion};
use ocelstore_bench::store;

fn lookups(c: &mut Criterion) {
    let (_dir, store) = store(50_000);
    let objects: Vec<String> = (0..100).map(|k| format!("order-{}", k * 37)).collect();
    let mut group = c.benchmark_group("lookup");
    group.bench_function("lifecycle x100", |b| {
        b.iter(|| {
            objects
                .iter()
                .map(|o| ocelstore::mining::lifecycle(&store, o).unwrap().map_or(0, |e| e.lifecycle.len()))
                .sum::<usize>()
        })
    });
    group.bench_function("get_event", |b| b.iter(|| store.get_event("e25000").unwrap()));
    group.bench_function("events by activity", |b| {
        b.iter(|| store.scan_events_by_activity("Create order").unwrap().count())
    });
    group.finish();

    let mut group = c.benchmark_group("scan");
    group.sample_size(10);
    group.bench_function("all events", |b| b.iter(|| store.scan_events().count()));
    group.finish();
}

criterion_group!(benches, lookups);
criterion_main!(benches);
