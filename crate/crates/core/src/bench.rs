//! Scaling harness: for each log size, generate a JSON log, time parsing
//! plus ingest (insertion and indexing), then time a multi-DFG over all
//! object types under a memory budget.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::gen::{self, GenSpec};
use crate::io::{self, Format};
use crate::mining::{self, TypeSelection};
use crate::spill::MemoryBudget;
use crate::store::{Store, StoreOptions};

pub const CSV_HEADER: &str = "size,ingest_s,json_bytes,segment_bytes,index_bytes,mdfg_s,agg_highwater_bytes,spill_bytes";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchRow {
    pub size: u64,
    pub ingest_s: f64,
    pub json_bytes: u64,
    pub segment_bytes: u64,
    pub index_bytes: u64,
    pub mdfg_s: f64,
    pub agg_highwater_bytes: u64,
    pub spill_bytes: u64,
    /// Set when this size failed; the measurements are then meaningless.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub budget: u64,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Failed sizes keep their size and leave every other column empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            if r.error.is_some() {
                writeln!(out, "{},,,,,,,", r.size).unwrap();
                continue;
            }
            writeln!(
                out,
                "{},{:.6},{},{},{},{:.6},{},{}",
                r.size, r.ingest_s, r.json_bytes, r.segment_bytes, r.index_bytes, r.mdfg_s, r.agg_highwater_bytes, r.spill_bytes
            )
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mib = |b: u64| b as f64 / (1 << 20) as f64;
        let mut out = format!(
            "{:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>12} {:>10}\n",
            "events", "ingest s", "JSON MiB", "seg MiB", "index MiB", "mDFG s", "agg peak MiB", "spill MiB"
        );
        for r in &self.rows {
            if let Some(e) = &r.error {
                writeln!(out, "{:>10} FAILED: {e}", r.size).unwrap();
                continue;
            }
            writeln!(
                out,
                "{:>10} {:>10.2} {:>10.1} {:>10.1} {:>10.1} {:>10.2} {:>12.1} {:>10.1}",
                r.size,
                r.ingest_s,
                mib(r.json_bytes),
                mib(r.segment_bytes),
                mib(r.index_bytes),
                r.mdfg_s,
                mib(r.agg_highwater_bytes),
                mib(r.spill_bytes)
            )
            .unwrap();
        }
        out
    }
}

/// Measures one size inside `work_dir`, which the caller owns.
pub fn bench_size(size: u64, template: &GenSpec, budget: u64, work_dir: &Path) -> Result<BenchRow> {
    let spec = template.scaled_to(size);
    let json_path = work_dir.join("log.json");
    let stats = gen::generate(&spec, BufWriter::new(File::create(&json_path)?), Format::Json)?;

    let started = Instant::now();
    let stream = io::parse_path(&json_path, Some(Format::Json))?;
    let (store, ingest) = Store::import(&work_dir.join("store"), stream, StoreOptions::default())?;
    let ingest_s = started.elapsed().as_secs_f64();

    let budget = MemoryBudget::new(budget)?;
    let spill = work_dir.join("spill");
    let started = Instant::now();
    mining::mdfg(&store, &TypeSelection::All, &budget, &spill)?;
    let mdfg_s = started.elapsed().as_secs_f64();

    Ok(BenchRow {
        size,
        ingest_s,
        json_bytes: stats.bytes,
        segment_bytes: ingest.segment_bytes,
        index_bytes: ingest.index_bytes,
        mdfg_s,
        agg_highwater_bytes: budget.high_water(),
        spill_bytes: budget.spill_bytes(),
        error: None,
    })
}

/// Runs every size in ascending order under `work_dir`. A failing size is
/// recorded in its row and the remaining sizes still run.
pub fn run_bench(sizes: &[u64], template: &GenSpec, budget: u64, work_dir: &Path) -> Result<BenchReport> {
    if !sizes.is_sorted() {
        return Err(Error::Config("benchmark sizes must be ascending".into()));
    }
    MemoryBudget::new(budget)?;
    let mut report = BenchReport {
        budget,
        rows: Vec::new(),
    };
    for &size in sizes {
        let dir = tempfile::Builder::new().prefix("bench-").tempdir_in(work_dir)?;
        let row = bench_size(size, template, budget, dir.path()).unwrap_or_else(|e| {
            log::error!("benchmark of {size} events failed: {e}");
            BenchRow {
                size,
                error: Some(e.to_string()),
                ..BenchRow::default()
            }
        });
        report.rows.push(row);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_fixed_columns() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_bench(&[200, 400], &GenSpec::default(), 1 << 20, dir.path()).unwrap();
        let csv = report.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.split(',').count() == 8));
        assert!(report.rows.iter().all(|r| r.error.is_none() && r.segment_bytes < r.json_bytes));
        assert!(run_bench(&[2, 1], &GenSpec::default(), 1 << 20, dir.path()).is_err());
    }
}
