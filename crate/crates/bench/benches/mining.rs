use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ocelstore::mining::{self, TypeSelection};
use ocelstore::MemoryBudget;
use ocelstore_bench::store;

fn mdfg(c: &mut Criterion) {
    let (dir, store) = store(50_000);
    let spill = dir.path().join("spill");
    let mut group = c.benchmark_group("mdfg");
    group.sample_size(10);
    for (name, budget) in [("unlimited", None), ("1MiB", Some(1u64 << 20)), ("64KiB", Some(64 << 10))] {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let budget = budget.map_or_else(MemoryBudget::unlimited, |n| MemoryBudget::new(n).unwrap());
                mining::mdfg(&store, &TypeSelection::All, &budget, &spill).unwrap()
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("statistics");
    group.sample_size(10);
    let budget = MemoryBudget::new(8 << 20).unwrap();
    group.bench_function("activities", |b| b.iter(|| mining::activity_stats(&store, &budget, &spill).unwrap()));
    group.bench_function("object types", |b| b.iter(|| mining::object_type_stats(&store).unwrap()));
    group.bench_function("times", |b| {
        b.iter(|| mining::time_between_activities(&store, &budget, &spill).unwrap())
    });
    group.finish();
}

criterion_group!(benches, mdfg);
criterion_main!(benches);
