use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ocelstore::io::{self, Format};
use ocelstore::store::{Store, StoreOptions};
use ocelstore_bench::log_file;

fn parse(c: &mut Criterion) {
    let mut group = c.benchmark_group("parse");
    group.sample_size(10);
    for format in [Format::Json, Format::Xml] {
        let (_dir, path) = log_file(20_000, format);
        group.throughput(Throughput::Bytes(std::fs::metadata(&path).unwrap().len()));
        group.bench_function(BenchmarkId::new(format.name(), 20_000), |b| {
            b.iter(|| io::parse_path(&path, Some(format)).unwrap().count())
        });
    }
    group.finish();
}

fn ingest(c: &mut Criterion) {
    let mut group = c.benchmark_group("ingest");
    group.sample_size(10);
    for events in [10_000u64, 50_000] {
        let (dir, path) = log_file(events, Format::Json);
        group.throughput(Throughput::Elements(events));
        group.bench_function(BenchmarkId::from_parameter(events), |b| {
            b.iter_batched(
                || tempfile::tempdir_in(dir.path()).unwrap(),
                |target| {
                    let stream = io::parse_path(&path, Some(Format::Json)).unwrap();
                    Store::import(target.path(), stream, StoreOptions::default()).unwrap();
                    target
                },
                criterion::BatchSize::PerIteration,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, parse, ingest);
criterion_main!(benches);
