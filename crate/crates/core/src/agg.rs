//! Bounded-memory unwind/group: for every object id appearing in an omap,
//! the time-ordered list of events that contain it.
//!
//! Groups are accumulated in a hash table whose size is charged to a
//! [`MemoryBudget`] in encoded bytes. When the next insert would exceed the
//! budget the table is flushed: entries are hash-partitioned on object id
//! into `2^k` partition files, each flush appending one sorted run per
//! partition. After the input ends every partition's runs are merged into
//! one file of complete groups, and a final merge across partitions yields
//! the groups in ascending object id order.
//!
//! Spill files live in a private subdirectory of the caller's spill
//! directory. It is removed when the result is dropped and renamed with a
//! `.failed` suffix if any step fails.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fs::{self, File};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::codec::{Decode, DecodeError, Decoder, Encode, FrameWriter};
use crate::error::{Error, Result};
use crate::model::{EventRecord, Timestamp, UNKNOWN_OBJECT_TYPE};
use crate::spill::{self, MemoryBudget, RunReader};

/// Default number of partition bits: 64 partition files.
pub const DEFAULT_PARTITION_BITS: u32 = 6;

/// One event in an object's lifecycle.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LifecycleStep {
    pub timestamp: Timestamp,
    pub event_id: String,
    pub activity: String,
}

impl Encode for LifecycleStep {
    fn encode(&self, buf: &mut Vec<u8>) {
        self.timestamp.encode(buf);
        self.event_id.encode(buf);
        self.activity.encode(buf);
    }

    fn encoded_len(&self) -> usize {
        self.timestamp.encoded_len() + self.event_id.encoded_len() + self.activity.encoded_len()
    }
}

impl Decode for LifecycleStep {
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, DecodeError> {
        Ok(LifecycleStep {
            timestamp: Timestamp::decode(d)?,
            event_id: String::decode(d)?,
            activity: String::decode(d)?,
        })
    }
}

/// All events of one object, ascending by (timestamp, event id). Never empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LifecycleEntry {
    pub object_id: String,
    pub lifecycle: Vec<LifecycleStep>,
}

impl LifecycleEntry {
    pub fn activities(&self) -> impl Iterator<Item = &str> {
        self.lifecycle.iter().map(|s| s.activity.as_str())
    }
}

type Group = (String, Vec<LifecycleStep>);

/// Budget charge for a new key in the group table. The constant covers the
/// length prefix of the step list.
fn key_cost(key: &str) -> u64 {
    (key.encoded_len() + 4) as u64
}

fn group_cost(key: &str, steps: &[LifecycleStep]) -> u64 {
    key_cost(key) + steps.iter().map(|s| s.encoded_len() as u64).sum::<u64>()
}

/// Stable across runs and platforms: `DefaultHasher::new` uses fixed keys.
fn partition_of(key: &str, bits: u32) -> usize {
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    (h.finish() & ((1 << bits) - 1)) as usize
}

static SPILL_DIRS: AtomicU64 = AtomicU64::new(0);

/// A spill subdirectory owned by one aggregation.
struct SpillDir {
    path: PathBuf,
    failed: bool,
}

impl SpillDir {
    fn create(parent: &Path) -> Result<Self> {
        fs::create_dir_all(parent)?;
        loop {
            let n = SPILL_DIRS.fetch_add(1, Ordering::Relaxed);
            let path = parent.join(format!("unwind-{}-{n}", std::process::id()));
            match fs::create_dir(&path) {
                Ok(()) => return Ok(SpillDir { path, failed: false }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for SpillDir {
    fn drop(&mut self) {
        if self.failed {
            let mut target = self.path.clone().into_os_string();
            target.push(".failed");
            fs::rename(&self.path, target).ok();
        } else {
            fs::remove_dir_all(&self.path).ok();
        }
    }
}

/// One frame of a spill run. A key opens a group and the steps after it
/// belong to that group. Keys ascend within a run and never repeat.
enum RunItem {
    Key(String),
    Step(LifecycleStep),
}

impl Encode for RunItem {
    fn encode(&self, buf: &mut Vec<u8>) {
        match self {
            RunItem::Key(k) => {
                buf.push(0);
                k.encode(buf);
            }
            RunItem::Step(s) => {
                buf.push(1);
                s.encode(buf);
            }
        }
    }

    fn encoded_len(&self) -> usize {
        1 + match self {
            RunItem::Key(k) => k.encoded_len(),
            RunItem::Step(s) => s.encoded_len(),
        }
    }
}

impl Decode for RunItem {
    fn decode(d: &mut Decoder<'_>) -> std::result::Result<Self, DecodeError> {
        match d.u8()? {
            0 => String::decode(d).map(RunItem::Key),
            1 => LifecycleStep::decode(d).map(RunItem::Step),
            t => Err(DecodeError(format!("unknown spill item tag {t}"))),
        }
    }
}

fn write_group(w: &mut FrameWriter<BufWriter<File>>, key: String, steps: Vec<LifecycleStep>) -> Result<()> {
    w.write_record(&RunItem::Key(key))?;
    for s in steps {
        w.write_record(&RunItem::Step(s))?;
    }
    Ok(())
}

/// A run file range: path, offset, length.
type RunRange = (PathBuf, u64, u64);

/// Reads a run as (key, step) pairs.
struct StepReader {
    path: PathBuf,
    run: RunReader<RunItem>,
    key: Option<String>,
}

impl StepReader {
    fn open((path, offset, len): &RunRange) -> Result<Self> {
        Ok(StepReader {
            path: path.clone(),
            run: RunReader::open_range(path, *offset, *len)?,
            key: None,
        })
    }

    fn next(&mut self) -> Result<Option<(String, LifecycleStep)>> {
        loop {
            match self.run.next_item()? {
                None => return Ok(None),
                Some(RunItem::Key(k)) => self.key = Some(k),
                Some(RunItem::Step(s)) => {
                    let key = self
                        .key
                        .clone()
                        .ok_or_else(|| Error::corruption(&self.path, 0, "spill run starts with a step"))?;
                    return Ok(Some((key, s)));
                }
            }
        }
    }
}

fn head_cost(key: &str, step: &LifecycleStep) -> u64 {
    key_cost(key) + step.encoded_len() as u64
}

/// Merges runs by key; steps of one key come out in run order. Only the
/// head pair of each run is held, charged to the budget.
struct StepMerge {
    readers: Vec<StepReader>,
    heap: BinaryHeap<Reverse<(String, usize, LifecycleStep)>>,
    budget: MemoryBudget,
}

impl StepMerge {
    fn open(sources: &[RunRange], budget: &MemoryBudget) -> Result<Self> {
        let mut merge = StepMerge {
            readers: Vec::with_capacity(sources.len()),
            heap: BinaryHeap::with_capacity(sources.len()),
            budget: budget.clone(),
        };
        for (i, source) in sources.iter().enumerate() {
            merge.readers.push(StepReader::open(source)?);
            merge.refill(i)?;
        }
        Ok(merge)
    }

    fn refill(&mut self, run: usize) -> Result<()> {
        if let Some((key, step)) = self.readers[run].next()? {
            self.budget.reserve(head_cost(&key, &step));
            self.heap.push(Reverse((key, run, step)));
        }
        Ok(())
    }

    fn peek_key(&self) -> Option<&str> {
        self.heap.peek().map(|Reverse((k, _, _))| k.as_str())
    }

    fn next(&mut self) -> Result<Option<(String, LifecycleStep)>> {
        let Some(Reverse((key, run, step))) = self.heap.pop() else {
            return Ok(None);
        };
        self.budget.release(head_cost(&key, &step));
        self.refill(run)?;
        Ok(Some((key, step)))
    }
}

impl Drop for StepMerge {
    fn drop(&mut self) {
        for Reverse((key, _, step)) in self.heap.drain() {
            self.budget.release(head_cost(&key, &step));
        }
    }
}

/// Merges `sources` into one run at `out`. With `limit`, groups are
/// complete and one larger than `limit` bytes is a configuration error.
/// Returns the output length and the cost of the largest group written.
fn merge_runs(sources: &[RunRange], out: &Path, budget: &MemoryBudget, limit: Option<u64>) -> Result<(u64, u64)> {
    let mut merge = StepMerge::open(sources, budget)?;
    let mut w = FrameWriter::new(BufWriter::with_capacity(256 * 1024, File::create(out)?), 0);
    let mut current: Option<String> = None;
    let mut cost = 0u64;
    let mut largest = 0u64;
    let mut close = |key: &Option<String>, cost: u64| -> Result<()> {
        if let (Some(key), Some(max)) = (key, limit) {
            if cost > max {
                return Err(Error::Config(format!(
                    "memory budget of {max} bytes is smaller than the {cost}-byte lifecycle of object {key:?}"
                )));
            }
        }
        largest = largest.max(cost);
        Ok(())
    };
    while let Some((key, step)) = merge.next()? {
        if current.as_deref() != Some(key.as_str()) {
            close(&current, cost)?;
            cost = key_cost(&key);
            w.write_record(&RunItem::Key(key.clone()))?;
            current = Some(key);
        }
        cost += step.encoded_len() as u64;
        w.write_record(&RunItem::Step(step))?;
    }
    close(&current, cost)?;
    let len = w.position();
    w.into_inner().into_inner().map_err(|e| e.into_error())?;
    budget.record_spill(len);
    Ok((len, largest))
}

/// Merges the first `fan_in` sources into one until at most `target`
/// remain. `stem` names the intermediate files; merged inputs other than
/// `stem` itself are deleted.
fn reduce_runs(sources: &mut Vec<RunRange>, target: usize, fan_in: usize, stem: &Path, budget: &MemoryBudget) -> Result<()> {
    let mut pass = 0;
    while sources.len() > target.max(1) {
        let out = stem.with_extension(format!("pass{pass}"));
        pass += 1;
        let n = fan_in.min(sources.len() - target.max(1) + 1);
        let chunk: Vec<RunRange> = sources.drain(..n).collect();
        let (len, _) = merge_runs(&chunk, &out, budget, None)?;
        for (path, _, _) in &chunk {
            if path != stem {
                fs::remove_file(path).ok();
            }
        }
        sources.push((out, 0, len));
    }
    Ok(())
}

struct Partition {
    path: PathBuf,
    writer: FrameWriter<BufWriter<File>>,
    runs: Vec<(u64, u64)>,
}

/// Incremental unwind/group. Feed events in (timestamp, id) order with
/// [`Unwinder::push`], then call [`Unwinder::finish`].
pub struct Unwinder {
    budget: MemoryBudget,
    parent: PathBuf,
    bits: u32,
    table: HashMap<String, Vec<LifecycleStep>>,
    table_bytes: u64,
    /// Largest (key, step) pair seen: the unit of merge overshoot.
    max_item: u64,
    dir: Option<SpillDir>,
    partitions: Vec<Partition>,
    steps: u64,
}

impl Unwinder {
    pub fn new(budget: &MemoryBudget, spill_dir: &Path) -> Self {
        Unwinder::with_partition_bits(budget, spill_dir, DEFAULT_PARTITION_BITS)
    }

    pub fn with_partition_bits(budget: &MemoryBudget, spill_dir: &Path, bits: u32) -> Self {
        Unwinder {
            budget: budget.clone(),
            parent: spill_dir.to_owned(),
            bits: bits.min(12),
            table: HashMap::new(),
            table_bytes: 0,
            max_item: 1,
            dir: None,
            partitions: Vec::new(),
            steps: 0,
        }
    }

    /// Number of (object, event) pairs accepted so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Adds one lifecycle step for each omap entry accepted by `keep`.
    pub fn push(&mut self, event: &EventRecord, mut keep: impl FnMut(&str) -> Result<bool>) -> Result<()> {
        for object in &event.omap {
            if !keep(object)? {
                continue;
            }
            let step = LifecycleStep {
                timestamp: event.timestamp,
                event_id: event.id.clone(),
                activity: event.activity.clone(),
            };
            self.insert(object, step)?;
        }
        Ok(())
    }

    fn insert(&mut self, object: &str, step: LifecycleStep) -> Result<()> {
        let step_cost = step.encoded_len() as u64;
        let worst = step_cost + key_cost(object);
        if worst > self.budget.max_bytes() {
            return Err(Error::Config(format!(
                "memory budget of {} bytes is smaller than a single {worst}-byte lifecycle entry",
                self.budget.max_bytes()
            )));
        }
        self.max_item = self.max_item.max(worst);
        let mut cost = step_cost + if self.table.contains_key(object) { 0 } else { key_cost(object) };
        if !self.budget.fits(cost) {
            self.flush()?;
            cost = worst;
        }
        self.budget.reserve(cost);
        self.table_bytes += cost;
        self.steps += 1;
        match self.table.get_mut(object) {
            Some(steps) => steps.push(step),
            None => {
                self.table.insert(object.to_owned(), vec![step]);
            }
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let outcome = self.flush_table();
        if outcome.is_err() {
            if let Some(dir) = &mut self.dir {
                dir.failed = true;
            }
        }
        outcome
    }

    /// Writes the table out as one sorted run per non-empty partition.
    fn flush_table(&mut self) -> Result<()> {
        if self.table.is_empty() {
            return Ok(());
        }
        if self.dir.is_none() {
            let dir = SpillDir::create(&self.parent)?;
            for p in 0..1usize << self.bits {
                let path = dir.path.join(format!("part-{p:04}"));
                let writer = FrameWriter::new(BufWriter::with_capacity(64 * 1024, File::create(&path)?), 0);
                self.partitions.push(Partition {
                    path,
                    writer,
                    runs: Vec::new(),
                });
            }
            self.dir = Some(dir);
        }
        let mut by_partition: Vec<Vec<Group>> = (0..self.partitions.len()).map(|_| Vec::new()).collect();
        for (key, steps) in self.table.drain() {
            by_partition[partition_of(&key, self.bits)].push((key, steps));
        }
        let mut written = 0;
        for (groups, part) in by_partition.into_iter().zip(&mut self.partitions) {
            if groups.is_empty() {
                continue;
            }
            let mut groups = groups;
            groups.sort_unstable_by(|a, b| a.0.cmp(&b.0));
            let start = part.writer.position();
            for (key, steps) in groups {
                write_group(&mut part.writer, key, steps)?;
            }
            part.writer.get_mut().flush()?;
            part.runs.push((start, part.writer.position() - start));
            written += part.writer.position() - start;
        }
        self.budget.record_spill(written);
        self.budget.release(self.table_bytes);
        self.table_bytes = 0;
        Ok(())
    }

    /// Completes the aggregation. Entries come out in ascending object id
    /// order.
    pub fn finish(mut self) -> Result<Lifecycles> {
        if self.dir.is_none() {
            let mut groups: Vec<Group> = self.table.drain().collect();
            groups.sort_unstable_by(|a, b| a.0.cmp(&b.0));
            return Ok(Lifecycles {
                inner: Source::Memory {
                    groups: groups.into_iter(),
                    budget: self.budget.clone(),
                    held: std::mem::take(&mut self.table_bytes),
                },
                _dir: None,
            });
        }
        let outcome = self.merge_partitions().and_then(|sources| StepMerge::open(&sources, &self.budget));
        let mut dir = self.dir.take().expect("spill dir exists");
        match outcome {
            Ok(merge) => Ok(Lifecycles {
                inner: Source::Merge(merge),
                _dir: Some(dir),
            }),
            Err(e) => {
                dir.failed = true;
                Err(e)
            }
        }
    }

    /// Consolidates every partition into one run of complete groups, then
    /// merges partitions until the output merge fits: one head per source
    /// plus the largest group within the budget and one item of slack.
    fn merge_partitions(&mut self) -> Result<Vec<RunRange>> {
        self.flush()?;
        let max = self.budget.max_bytes();
        let fan_in = spill::fan_in(&self.budget, self.max_item, 0).max(2);
        let mut outputs = Vec::new();
        let mut largest = 0;
        for (p, part) in std::mem::take(&mut self.partitions).into_iter().enumerate() {
            let Partition { path, writer, runs } = part;
            writer.into_inner().into_inner().map_err(|e| e.into_error())?;
            if runs.is_empty() {
                fs::remove_file(&path).ok();
                continue;
            }
            let mut sources: Vec<RunRange> = runs.into_iter().map(|(o, l)| (path.clone(), o, l)).collect();
            reduce_runs(&mut sources, fan_in, fan_in, &path, &self.budget)?;
            let out = path.with_extension("merged");
            let (len, group) = merge_runs(&sources, &out, &self.budget, Some(max))?;
            largest = largest.max(group);
            for (src, _, _) in sources {
                fs::remove_file(src).ok();
            }
            fs::remove_file(&path).ok();
            log::debug!("partition {p} consolidated");
            outputs.push((out, 0, len));
        }
        let direct = spill::fan_in(&self.budget, self.max_item, largest);
        let stem = self.dir.as_ref().expect("spill dir exists").path.join("all");
        reduce_runs(&mut outputs, direct, fan_in, &stem, &self.budget)?;
        Ok(outputs)
    }
}

enum Source {
    Memory {
        groups: std::vec::IntoIter<Group>,
        budget: MemoryBudget,
        held: u64,
    },
    Merge(StepMerge),
}

/// Output of an unwind/group, in ascending object id order.
pub struct Lifecycles {
    inner: Source,
    _dir: Option<SpillDir>,
}

/// Collects the next group from the merge; its steps are charged to the
/// budget while it is assembled.
fn next_group(merge: &mut StepMerge) -> Result<Option<Group>> {
    let Some((key, step)) = merge.next()? else {
        return Ok(None);
    };
    let mut cost = head_cost(&key, &step);
    merge.budget.reserve(cost);
    let mut steps = vec![step];
    let assembled = (|| {
        while merge.peek_key() == Some(key.as_str()) {
            let (_, step) = merge.next()?.expect("peeked");
            let c = step.encoded_len() as u64;
            merge.budget.reserve(c);
            cost += c;
            steps.push(step);
        }
        Ok(())
    })();
    merge.budget.release(cost);
    assembled.map(|()| Some((key, steps)))
}

impl Iterator for Lifecycles {
    type Item = Result<LifecycleEntry>;

    fn next(&mut self) -> Option<Result<LifecycleEntry>> {
        let (object_id, mut lifecycle) = match &mut self.inner {
            Source::Memory { groups, budget, held } => {
                let (object_id, lifecycle) = groups.next()?;
                let cost = group_cost(&object_id, &lifecycle).min(*held);
                budget.release(cost);
                *held -= cost;
                (object_id, lifecycle)
            }
            Source::Merge(m) => match next_group(m) {
                Ok(group) => group?,
                Err(e) => {
                    if let Some(dir) = &mut self._dir {
                        dir.failed = true;
                    }
                    return Some(Err(e));
                }
            },
        };
        if !lifecycle.is_sorted() {
            lifecycle.sort();
        }
        Some(Ok(LifecycleEntry { object_id, lifecycle }))
    }
}

impl Drop for Lifecycles {
    fn drop(&mut self) {
        if let Source::Memory { budget, held, .. } = &mut self.inner {
            budget.release(*held);
            *held = 0;
        }
    }
}

/// Groups the events of `events` by omap object.
///
/// Events must arrive in (timestamp, id) order. Output holds one entry per
/// distinct object id, in ascending id order.
pub fn unwind_group<I>(events: I, budget: &MemoryBudget, spill_dir: &Path) -> Result<Lifecycles>
where
    I: IntoIterator<Item = Result<EventRecord>>,
{
    let mut unwinder = Unwinder::new(budget, spill_dir);
    for event in events {
        unwinder.push(&event?, |_| Ok(true))?;
    }
    unwinder.finish()
}

/// Like [`unwind_group`], restricted to objects whose type is in `types`.
///
/// `resolve` maps an object id to its type; ids it does not know (`None`)
/// have type [`UNKNOWN_OBJECT_TYPE`].
pub fn unwind_group_filtered<I, R>(
    events: I,
    types: &std::collections::BTreeSet<String>,
    mut resolve: R,
    budget: &MemoryBudget,
    spill_dir: &Path,
) -> Result<Lifecycles>
where
    I: IntoIterator<Item = Result<EventRecord>>,
    R: FnMut(&str) -> Result<Option<String>>,
{
    let mut unwinder = Unwinder::new(budget, spill_dir);
    if types.is_empty() {
        return unwinder.finish();
    }
    for event in events {
        unwinder.push(&event?, |object| {
            let otype = resolve(object)?;
            Ok(types.contains(otype.as_deref().unwrap_or(UNKNOWN_OBJECT_TYPE)))
        })?;
    }
    unwinder.finish()
}
