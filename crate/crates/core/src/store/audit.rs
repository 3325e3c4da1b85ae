//! Full consistency check of a committed store.

use std::cmp::Ordering;
use std::fmt;

use super::ingest::collect_postings;
use super::segment::{SegmentFile, SegmentKind, HEADER_LEN};
use super::{IndexKind, Store, SEGMENTS_DIR};
use crate::codec::{Decode, FrameRead, FRAME_FOOTER};
use crate::error::Result;
use crate::model::{EventRecord, ObjectRecord};

/// Findings of [`Store::audit`]. Healthy means no violations; notes are
/// informational (for example what crash recovery repaired).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub violations: Vec<String>,
    pub notes: Vec<String>,
}

impl AuditReport {
    pub fn is_healthy(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        if self.is_healthy() {
            writeln!(f, "healthy")?;
        }
        Ok(())
    }
}

/// Memory for regenerating the expected index contents.
const AUDIT_BUDGET: u64 = 32 << 20;

pub(super) fn audit(store: &Store) -> AuditReport {
    let mut report = AuditReport {
        notes: store.recovery_notes().to_vec(),
        ..AuditReport::default()
    };
    let mut postings = 0u64;
    let segments_ok = check_segments(store, &mut report, &mut postings);
    let m = &store.inner.manifest;
    if postings != m.postings {
        report.violations.push(format!(
            "events hold {postings} omap entries but the manifest records {}",
            m.postings
        ));
    }
    for kind in IndexKind::ALL {
        let path = kind.path(&store.inner.root);
        match super::index::IndexReader::verify(&path) {
            Ok(s) if m.index(kind.name()).is_some_and(|e| e.crc == s.crc && e.len == s.len) => {}
            Ok(_) => report
                .violations
                .push(format!("{} index does not match the manifest", kind.name())),
            Err(e) => report.violations.push(format!("{} index unreadable: {e}", kind.name())),
        }
    }
    let omap = store.index_reader(IndexKind::Omap).summary().postings;
    if omap != postings {
        report.violations.push(format!(
            "omap index has {omap} postings but events hold {postings} omap entries"
        ));
    }
    if !segments_ok {
        report
            .violations
            .push("index comparison skipped because segments are damaged".to_owned());
        return report;
    }
    if let Err(e) = compare_indexes(store, &mut report) {
        report.violations.push(format!("index comparison failed: {e}"));
    }
    report
}

/// Walks every frame of every segment. Returns false if any record could
/// not be read.
fn check_segments(store: &Store, report: &mut AuditReport, postings: &mut u64) -> bool {
    let mut ok = true;
    let mut last_event: Option<(i64, String)> = None;
    let mut last_object: Option<String> = None;
    let segs = store.inner.events.iter().chain(&store.inner.objects);
    let (mut events, mut objects) = (0u64, 0u64);
    for seg in segs {
        let name = &seg.info.name;
        let mut footer_seen = false;
        let mut records = 0u64;
        let walk = (|| -> Result<()> {
            let file_len = std::fs::metadata(&seg.path)?.len();
            if file_len != seg.info.len {
                report.violations.push(format!(
                    "{name} is {file_len} bytes but {} were committed",
                    seg.info.len
                ));
            }
            let mut frames = open_frames(seg)?;
            loop {
                match frames.next_frame()? {
                    FrameRead::End => break,
                    FrameRead::Torn { offset, reason } => {
                        ok = false;
                        report.violations.push(format!("{name}: unreadable frame at offset {offset}: {reason}"));
                        break;
                    }
                    FrameRead::Frame { kind: FRAME_FOOTER, offset, .. } => {
                        footer_seen = true;
                        if frames.position() != seg.info.len {
                            report.violations.push(format!("{name}: footer at offset {offset} is not last"));
                        }
                    }
                    FrameRead::Frame { offset, payload, .. } => {
                        records += 1;
                        match seg.info.kind {
                            SegmentKind::Events => match EventRecord::from_bytes(&payload) {
                                Ok(e) => {
                                    *postings += e.omap.len() as u64;
                                    let key = (e.timestamp.as_micros(), e.id);
                                    if last_event.as_ref().is_some_and(|l| *l >= key) {
                                        report.violations.push(format!(
                                            "{name}: event {} at offset {offset} is out of order",
                                            key.1
                                        ));
                                    }
                                    last_event = Some(key);
                                }
                                Err(err) => {
                                    ok = false;
                                    report.violations.push(format!("{name}: undecodable event at offset {offset}: {err}"));
                                }
                            },
                            _ => match ObjectRecord::from_bytes(&payload) {
                                Ok(o) => {
                                    if last_object.as_ref().is_some_and(|l| *l >= o.id) {
                                        report.violations.push(format!(
                                            "{name}: object {} at offset {offset} is out of order",
                                            o.id
                                        ));
                                    }
                                    last_object = Some(o.id);
                                }
                                Err(err) => {
                                    ok = false;
                                    report.violations.push(format!("{name}: undecodable object at offset {offset}: {err}"));
                                }
                            },
                        }
                    }
                }
            }
            Ok(())
        })();
        if let Err(e) = walk {
            ok = false;
            report.violations.push(format!("{name}: {e}"));
        }
        if !footer_seen {
            report.violations.push(format!("{name}: missing footer"));
        }
        if records != seg.info.records {
            report.violations.push(format!(
                "{name}: holds {records} records but {} were committed",
                seg.info.records
            ));
        }
        match seg.info.kind {
            SegmentKind::Events => events += records,
            _ => objects += records,
        }
    }
    let m = &store.inner.manifest;
    if events != m.events || objects != m.objects {
        report.violations.push(format!(
            "segments hold {events} events and {objects} objects; the manifest records {} and {}",
            m.events, m.objects
        ));
    }
    ok
}

fn open_frames(
    seg: &SegmentFile,
) -> Result<crate::codec::FrameReader<std::io::BufReader<std::fs::File>>> {
    use std::io::{Seek, SeekFrom};
    let mut file = std::fs::File::open(&seg.path)?;
    file.seek(SeekFrom::Start(HEADER_LEN))?;
    Ok(crate::codec::FrameReader::new(
        std::io::BufReader::with_capacity(1 << 20, file),
        HEADER_LEN,
        None,
    ))
}

/// Regenerates every index from the segments and diffs it against the
/// files on disk.
fn compare_indexes(store: &Store, report: &mut AuditReport) -> Result<()> {
    let spill = tempfile::tempdir()?;
    let seg_dir = store.inner.root.join(SEGMENTS_DIR);
    let infos = |segs: &[std::sync::Arc<SegmentFile>]| segs.iter().map(|s| s.info.clone()).collect::<Vec<_>>();
    let collected = collect_postings(
        &seg_dir,
        &infos(&store.inner.events),
        &infos(&store.inner.objects),
        AUDIT_BUDGET / IndexKind::ALL.len() as u64,
        spill.path(),
    )?;
    for (kind, sorter) in IndexKind::ALL.into_iter().zip(collected.sorters) {
        let name = kind.name();
        let reader = store.index_reader(kind);
        let mut expected = sorter.finish()?.peekable();
        let mut actual = reader
            .iter()?
            .flat_map(|entry| -> Box<dyn Iterator<Item = Result<(String, u64)>>> {
                match entry {
                    Ok((key, postings)) => Box::new(postings.into_iter().map(move |p| Ok((key.clone(), p)))),
                    Err(e) => Box::new(std::iter::once(Err(e))),
                }
            })
            .peekable();
        let mut previous_key: Option<String> = None;
        loop {
            let order = match (expected.peek(), actual.peek()) {
                (None, None) => break,
                (Some(Err(_)), _) => return Err(expected.next().expect("peeked").expect_err("peeked error")),
                (_, Some(Err(_))) => return Err(actual.next().expect("peeked").expect_err("peeked error")),
                (Some(Ok(e)), Some(Ok(a))) => e.cmp(a),
                (Some(Ok(_)), None) => Ordering::Less,
                (None, Some(Ok(_))) => Ordering::Greater,
            };
            match order {
                Ordering::Less => {
                    let (key, loc) = expected.next().expect("peeked")?;
                    report
                        .violations
                        .push(format!("missing posting {key:?} -> {loc:#x} in {name} index"));
                }
                Ordering::Greater => {
                    let (key, loc) = actual.next().expect("peeked")?;
                    report
                        .violations
                        .push(format!("unexpected posting {key:?} -> {loc:#x} in {name} index"));
                }
                Ordering::Equal => {
                    expected.next();
                    let (key, _) = actual.next().expect("peeked")?;
                    if kind.unique_kind().is_some() && previous_key.as_deref() == Some(key.as_str()) {
                        report.violations.push(format!("duplicate key {key:?} in {name} index"));
                    }
                    previous_key = Some(key);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::testing::sample_log;

    #[test]
    fn removed_posting_is_reported_once() {
        let dir = tempfile::tempdir().unwrap();
        Store::import(dir.path(), RecordStream::from_log(sample_log()), StoreOptions::default()).unwrap();
        tamper_index(dir.path(), IndexKind::Activity, |key, postings| {
            if key == "Payment" {
                postings.clear();
            }
        })
        .unwrap();
        let report = Store::open(dir.path()).unwrap().audit();
        assert_eq!(report.violations.len(), 1, "{report}");
        assert!(report.violations[0].starts_with("missing posting \"Payment\""));
    }
}
