//! Embedded, disk-backed storage and process-mining library for
//! object-centric event logs (OCEL 1.0).
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: records, metadata and validation,
//! - [`io`]: streaming JSON-OCEL / XML-OCEL readers and writers,
//! - [`store`]: append-only segments plus sorted-table indexes,
//! - [`agg`]: bounded-memory unwind/group aggregation,
//! - [`mining`]: multi-DFGs and log statistics,
//! - [`gen`] and [`bench`]: synthetic logs and the scaling harness.

pub mod agg;
pub mod bench;
pub mod codec;
pub mod error;
pub mod gen;
pub mod io;
pub mod mining;
pub mod model;
pub mod spill;
pub mod store;
pub mod testing;

pub use error::{Error, Result};
pub use model::{
    AttributeMap, AttributeValue, EventRecord, LogMetadata, ObjectRecord, OcelLog, Timestamp, ValidationReport,
    Violation,
};
pub use spill::MemoryBudget;
