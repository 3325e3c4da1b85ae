//! Memory accounting and spill-to-disk building blocks.
//!
//! All accounting is in encoded bytes (see [`crate::codec::Encode`]), not
//! allocator bytes, so budgets behave the same on every platform.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Take, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::codec::{Decode, Encode, FrameRead, FrameReader, FrameWriter, FRAME_RECORD};
use crate::error::{Error, Result};

const MAX_FAN_IN: usize = 64;

#[derive(Debug, Default)]
struct Accounting {
    used: AtomicU64,
    high_water: AtomicU64,
    spill_bytes: AtomicU64,
    spill_events: AtomicU64,
}

/// A byte budget plus a running estimate of what is held against it.
///
/// Clones share the same accounting, so one budget can be handed to several
/// phases of a computation and the high-water mark covers all of them.
#[derive(Clone, Debug)]
pub struct MemoryBudget {
    max_bytes: u64,
    acct: Arc<Accounting>,
}

impl MemoryBudget {
    pub fn new(max_bytes: u64) -> Result<Self> {
        if max_bytes == 0 {
            return Err(Error::Config("memory budget must be positive".into()));
        }
        Ok(MemoryBudget {
            max_bytes,
            acct: Arc::default(),
        })
    }

    pub fn unlimited() -> Self {
        MemoryBudget {
            max_bytes: u64::MAX,
            acct: Arc::default(),
        }
    }

    /// A budget with the same limit and fresh accounting.
    pub fn fresh(&self) -> Self {
        MemoryBudget {
            max_bytes: self.max_bytes,
            acct: Arc::default(),
        }
    }

    pub fn max_bytes(&self) -> u64 {
        self.max_bytes
    }

    pub fn is_unlimited(&self) -> bool {
        self.max_bytes == u64::MAX
    }

    pub fn used(&self) -> u64 {
        self.acct.used.load(Ordering::Relaxed)
    }

    pub fn high_water(&self) -> u64 {
        self.acct.high_water.load(Ordering::Relaxed)
    }

    pub fn spill_bytes(&self) -> u64 {
        self.acct.spill_bytes.load(Ordering::Relaxed)
    }

    /// Number of times some holder flushed its in-memory state to disk.
    pub fn spill_count(&self) -> u64 {
        self.acct.spill_events.load(Ordering::Relaxed)
    }

    pub fn fits(&self, additional: u64) -> bool {
        self.used().saturating_add(additional) <= self.max_bytes
    }

    pub fn reserve(&self, bytes: u64) {
        let now = self.acct.used.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.acct.high_water.fetch_max(now, Ordering::Relaxed);
    }

    pub fn release(&self, bytes: u64) {
        self.acct.used.fetch_sub(bytes, Ordering::Relaxed);
    }

    pub(crate) fn record_spill(&self, bytes: u64) {
        self.acct.spill_bytes.fetch_add(bytes, Ordering::Relaxed);
        self.acct.spill_events.fetch_add(1, Ordering::Relaxed);
    }
}

/// How many runs can be merged at once so that one head record per run,
/// plus `reserved` bytes, stays within what is left of `budget` with at most
/// `max_item` bytes of overshoot. Between 1 and the maximum fan-in.
pub(crate) fn fan_in(budget: &MemoryBudget, max_item: u64, reserved: u64) -> usize {
    let left = budget.max_bytes().saturating_sub(budget.used()).saturating_sub(reserved);
    let n = left.saturating_add(max_item) / max_item.max(1);
    n.clamp(1, MAX_FAN_IN as u64) as usize
}

/// Writes one sorted run of records to a file.
pub(crate) fn write_run<'a, T: Encode + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<u64> {
    let file = File::create(path)?;
    let mut w = FrameWriter::new(BufWriter::with_capacity(256 * 1024, file), 0);
    for item in items {
        w.write_record(item)?;
    }
    let bytes = w.position();
    w.into_inner().into_inner().map_err(|e| e.into_error())?.sync_data().ok();
    Ok(bytes)
}

/// Sequential reader over a run file written by [`write_run`].
pub(crate) struct RunReader<T> {
    path: PathBuf,
    frames: FrameReader<BufReader<Take<File>>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Decode> RunReader<T> {
    pub(crate) fn open(path: &Path) -> Result<Self> {
        Self::open_range(path, 0, u64::MAX)
    }

    /// Reads the run stored in `len` bytes starting at `offset`.
    pub(crate) fn open_range(path: &Path, offset: u64, len: u64) -> Result<Self> {
        let mut file = File::open(path)?;
        file.seek(SeekFrom::Start(offset))?;
        Ok(RunReader {
            path: path.to_owned(),
            frames: FrameReader::new(BufReader::with_capacity(64 * 1024, file.take(len)), offset, None),
            _marker: std::marker::PhantomData,
        })
    }

    pub(crate) fn next_item(&mut self) -> Result<Option<T>> {
        match self.frames.next_frame()? {
            FrameRead::End => Ok(None),
            FrameRead::Frame { offset, kind, payload } => {
                if kind != FRAME_RECORD {
                    return Err(Error::corruption(&self.path, offset, "unexpected frame kind in spill run"));
                }
                T::from_bytes(&payload)
                    .map(Some)
                    .map_err(|e| Error::corruption(&self.path, offset, e.0))
            }
            FrameRead::Torn { offset, reason } => Err(Error::corruption(&self.path, offset, reason)),
        }
    }
}

/// Sorts a stream of records that may not fit in memory.
///
/// Items are buffered until the budget is exhausted, then sorted and written
/// out as a run. `finish` merges the runs. Equal items keep insertion order.
pub struct ExternalSorter<T> {
    budget: MemoryBudget,
    buffer: Vec<T>,
    buffered_bytes: u64,
    max_item: u64,
    dir: tempfile::TempDir,
    runs: Vec<PathBuf>,
}

impl<T: Encode + Decode + Ord> ExternalSorter<T> {
    pub fn new(budget: MemoryBudget, spill_dir: &Path) -> Result<Self> {
        fs::create_dir_all(spill_dir)?;
        let dir = tempfile::Builder::new().prefix("ocel-sort-").tempdir_in(spill_dir)?;
        Ok(ExternalSorter {
            budget,
            buffer: Vec::new(),
            buffered_bytes: 0,
            max_item: 1,
            dir,
            runs: Vec::new(),
        })
    }

    pub fn push(&mut self, item: T) -> Result<()> {
        let size = item.encoded_len() as u64;
        if size > self.budget.max_bytes() {
            return Err(Error::Config(format!(
                "memory budget of {} bytes is smaller than a single {size}-byte entry",
                self.budget.max_bytes()
            )));
        }
        self.max_item = self.max_item.max(size);
        if !self.budget.fits(size) && !self.buffer.is_empty() {
            self.spill()?;
        }
        self.budget.reserve(size);
        self.buffered_bytes += size;
        self.buffer.push(item);
        Ok(())
    }

    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    fn spill(&mut self) -> Result<()> {
        self.buffer.sort();
        let path = self.dir.path().join(format!("run-{:05}", self.runs.len()));
        let bytes = write_run(&path, &self.buffer)?;
        self.budget.record_spill(bytes);
        self.runs.push(path);
        self.buffer = Vec::new();
        self.budget.release(self.buffered_bytes);
        self.buffered_bytes = 0;
        Ok(())
    }

    fn merge_runs(&mut self, first: usize, count: usize) -> Result<()> {
        let inputs: Vec<PathBuf> = self.runs.drain(first..first + count).collect();
        let path = self.dir.path().join(format!("merged-{:05}", self.runs.len() + inputs.len()));
        let merged = MergeIter::<T>::open(&inputs, self.budget.clone())?;
        let file = File::create(&path)?;
        let mut w = FrameWriter::new(BufWriter::with_capacity(256 * 1024, file), 0);
        for item in merged {
            w.write_record(&item?)?;
        }
        w.get_mut().flush()?;
        self.budget.record_spill(w.position());
        for p in inputs {
            fs::remove_file(p).ok();
        }
        self.runs.insert(first, path);
        Ok(())
    }

    /// Sorted output. Runs the in-memory sort when nothing was spilled.
    pub fn finish(mut self) -> Result<SortedIter<T>> {
        if self.runs.is_empty() {
            self.buffer.sort();
            let budget = self.budget.clone();
            let items = std::mem::take(&mut self.buffer).into_iter();
            return Ok(SortedIter {
                inner: SortedInner::Memory { items, budget },
                _dir: self.dir,
            });
        }
        if !self.buffer.is_empty() {
            self.spill()?;
        }
        // The returned merge holds one head per run.
        let fan_in = fan_in(&self.budget, self.max_item, 0).max(2);
        while self.runs.len() > fan_in {
            let n = fan_in.min(self.runs.len() - fan_in + 1);
            self.merge_runs(0, n)?;
        }
        let merge = MergeIter::open(&self.runs, self.budget.clone())?;
        Ok(SortedIter {
            inner: SortedInner::Merge(merge),
            _dir: self.dir,
        })
    }
}

/// K-way merge of sorted run files; ties go to the earlier run.
pub(crate) struct MergeIter<T> {
    readers: Vec<RunReader<T>>,
    heap: BinaryHeap<Reverse<(T, usize)>>,
    budget: MemoryBudget,
    failed: bool,
}

impl<T: Encode + Decode + Ord> MergeIter<T> {
    pub(crate) fn open(paths: &[PathBuf], budget: MemoryBudget) -> Result<Self> {
        let mut readers = Vec::with_capacity(paths.len());
        let mut heap = BinaryHeap::with_capacity(paths.len());
        for (i, p) in paths.iter().enumerate() {
            let mut r = RunReader::<T>::open(p)?;
            if let Some(item) = r.next_item()? {
                budget.reserve(item.encoded_len() as u64);
                heap.push(Reverse((item, i)));
            }
            readers.push(r);
        }
        Ok(MergeIter {
            readers,
            heap,
            budget,
            failed: false,
        })
    }
}

impl<T: Encode + Decode + Ord> Iterator for MergeIter<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Result<T>> {
        if self.failed {
            return None;
        }
        let Reverse((item, run)) = self.heap.pop()?;
        self.budget.release(item.encoded_len() as u64);
        match self.readers[run].next_item() {
            Ok(Some(next)) => {
                self.budget.reserve(next.encoded_len() as u64);
                self.heap.push(Reverse((next, run)));
            }
            Ok(None) => {}
            Err(e) => {
                self.failed = true;
                return Some(Err(e));
            }
        }
        Some(Ok(item))
    }
}

enum SortedInner<T> {
    Memory {
        items: std::vec::IntoIter<T>,
        budget: MemoryBudget,
    },
    Merge(MergeIter<T>),
}

/// Output of [`ExternalSorter::finish`]. Owns the spill directory.
pub struct SortedIter<T: Encode> {
    inner: SortedInner<T>,
    _dir: tempfile::TempDir,
}

impl<T: Encode + Decode + Ord> Iterator for SortedIter<T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Result<T>> {
        match &mut self.inner {
            SortedInner::Memory { items, budget } => {
                let item = items.next()?;
                budget.release(item.encoded_len() as u64);
                Some(Ok(item))
            }
            SortedInner::Merge(m) => m.next(),
        }
    }
}

impl<T: Encode> Drop for SortedIter<T> {
    fn drop(&mut self) {
        match &mut self.inner {
            SortedInner::Memory { items, budget } => {
                let rest: u64 = items.as_slice().iter().map(|i| i.encoded_len() as u64).sum();
                budget.release(rest);
            }
            SortedInner::Merge(m) => {
                let rest: u64 = m.heap.iter().map(|Reverse((i, _))| i.encoded_len() as u64).sum();
                m.budget.release(rest);
                m.heap.clear();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sort_with_budget(items: &[(String, u64)], budget: u64) -> (Vec<(String, u64)>, MemoryBudget) {
        let dir = tempfile::tempdir().unwrap();
        let budget = MemoryBudget::new(budget).unwrap();
        let mut sorter = ExternalSorter::new(budget.clone(), dir.path()).unwrap();
        for item in items {
            sorter.push(item.clone()).unwrap();
        }
        let out = sorter.finish().unwrap().collect::<Result<Vec<_>>>().unwrap();
        (out, budget)
    }

    #[test]
    fn zero_budget_is_rejected() {
        assert!(matches!(MemoryBudget::new(0), Err(Error::Config(_))));
    }

    #[test]
    fn entry_larger_than_budget_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut sorter = ExternalSorter::new(MemoryBudget::new(4).unwrap(), dir.path()).unwrap();
        assert!(matches!(sorter.push(("abcdefgh".to_string(), 1u64)), Err(Error::Config(_))));
    }

    #[test]
    fn spilling_sort_matches_in_memory_sort() {
        let items: Vec<(String, u64)> = (0..5000u64).map(|i| (format!("k{}", (i * 7919) % 613), i)).collect();
        let mut expected = items.clone();
        expected.sort();
        let (small, budget) = sort_with_budget(&items, 512);
        assert_eq!(small, expected);
        assert!(budget.spill_bytes() > 0);
        assert!(budget.high_water() <= 512 + 16);
        assert_eq!(budget.used(), 0);
        let (big, budget) = sort_with_budget(&items, 1 << 30);
        assert_eq!(big, expected);
        assert_eq!(budget.spill_bytes(), 0);
        assert_eq!(budget.used(), 0);
    }

    #[test]
    fn many_runs_are_merged_in_passes() {
        let items: Vec<(String, u64)> = (0..3000u64).rev().map(|i| (format!("{i:06}"), i)).collect();
        let dir = tempfile::tempdir().unwrap();
        let mut sorter = ExternalSorter::new(MemoryBudget::new(40).unwrap(), dir.path()).unwrap();
        for item in &items {
            sorter.push(item.clone()).unwrap();
        }
        assert!(sorter.run_count() > MAX_FAN_IN);
        let out = sorter.finish().unwrap().collect::<Result<Vec<_>>>().unwrap();
        let mut expected = items;
        expected.sort();
        assert_eq!(out, expected);
    }

    proptest! {
        #[test]
        fn external_sort_is_a_sort(keys in proptest::collection::vec(0u64..50, 0..400), budget in 24u64..400) {
            let items: Vec<(String, u64)> = keys.iter().enumerate().map(|(i, k)| (format!("{k}"), i as u64)).collect();
            let mut expected = items.clone();
            expected.sort();
            let (out, _) = sort_with_budget(&items, budget);
            prop_assert_eq!(out, expected);
        }
    }
}
