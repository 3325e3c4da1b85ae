//! Fixtures shared by the criterion benchmarks: generated logs on disk and
//! stores built from them.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use ocelstore::gen::{self, GenSpec};
use ocelstore::io::Format;
use ocelstore::store::{Store, StoreOptions};
use tempfile::TempDir;

/// The default generator spec resized to `events`.
pub fn spec(events: u64) -> GenSpec {
    GenSpec::default().scaled_to(events)
}

/// A generated log of `events` events written in `format`. The file lives
/// as long as the returned directory.
pub fn log_file(events: u64, format: Format) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join(format!("log.{}", format.name()));
    let sink = BufWriter::new(File::create(&path).expect("create log file"));
    gen::generate(&spec(events), sink, format).expect("generate log");
    (dir, path)
}

/// A store holding a generated log of `events` events.
pub fn store(events: u64) -> (TempDir, Store) {
    let dir = tempfile::tempdir().expect("temp dir");
    let records = gen::records(&spec(events)).expect("generator spec");
    let (store, _) = Store::import(&dir.path().join("db"), records, StoreOptions::default()).expect("import");
    (dir, store)
}
