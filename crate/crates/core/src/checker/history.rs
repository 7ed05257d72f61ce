//! History events and their JSON-lines encoding.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::sim::NodeId;
use crate::store::{Oid, TxnId};
use crate::time::{TimeInterval, TimePoint};
use crate::txn::TxnMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Begin,
    Read,
    WriteCommit,
    Abort,
    Commit,
}

/// One externally observable step of a transaction.
///
/// `lower`/`upper`/`at` are present on events that drew a timestamp from a
/// clock interval (begin for the read timestamp, write_commit for the
/// write timestamp): the interval and the true time of the clock read.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub kind: EventKind,
    pub txn: TxnId,
    pub node: NodeId,
    pub mode: TxnMode,
    pub true_start: TimePoint,
    pub true_end: TimePoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rts: Option<TimePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wts: Option<TimePoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reads: Vec<(Oid, TimePoint, i64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub writes: Vec<(Oid, i64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<TimePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<TimePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at: Option<TimePoint>,
}

impl HistoryEvent {
    pub fn new(kind: EventKind, txn: TxnId, node: NodeId, mode: TxnMode, start: TimePoint, end: TimePoint) -> Self {
        HistoryEvent {
            kind,
            txn,
            node,
            mode,
            true_start: start,
            true_end: end,
            rts: None,
            wts: None,
            reads: Vec::new(),
            writes: Vec::new(),
            lower: None,
            upper: None,
            at: None,
        }
    }

    pub fn with_interval(mut self, iv: TimeInterval, at: TimePoint) -> Self {
        self.lower = Some(iv.lower);
        self.upper = Some(iv.upper);
        self.at = Some(at);
        self
    }

    pub fn interval(&self) -> Option<(TimePoint, TimeInterval)> {
        Some((self.at?, TimeInterval { lower: self.lower?, upper: self.upper? }))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HistoryError {
    #[error("line {0}: {1}")]
    Parse(usize, serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("txn {0}: {1}")]
    Malformed(TxnId, String),
}

pub fn write_jsonl<W: Write>(mut w: W, events: &[HistoryEvent]) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl(events: &[HistoryEvent]) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, events).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<HistoryEvent>, HistoryError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| HistoryError::Parse(i + 1, e))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Committed,
    Aborted,
    /// No end event: still running when the history was cut.
    Open,
}

/// Everything the checker needs to know about one transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxnSummary {
    pub id: TxnId,
    pub node: NodeId,
    pub mode: TxnMode,
    /// True time of the begin call.
    pub begin: TimePoint,
    /// True time the commit returned or the abort happened.
    pub end: TimePoint,
    pub rts: Option<TimePoint>,
    pub wts: Option<TimePoint>,
    pub reads: Vec<(Oid, TimePoint, i64)>,
    pub writes: Vec<(Oid, i64)>,
    pub outcome: Outcome,
}

impl TxnSummary {
    /// Serialization hint: RW at wts, RO at rts.
    pub fn ts_hint(&self) -> TimePoint {
        self.wts.or(self.rts).unwrap_or(self.begin)
    }

    pub fn is_rw(&self) -> bool {
        !self.writes.is_empty()
    }
}

/// Folds events into per-transaction summaries, ordered by id.
pub fn summarize(events: &[HistoryEvent]) -> Result<Vec<TxnSummary>, HistoryError> {
    let mut map: BTreeMap<TxnId, TxnSummary> = BTreeMap::new();
    let mut ended: BTreeMap<TxnId, bool> = BTreeMap::new();
    let mut horizon = TimePoint::ZERO;
    for e in events {
        if e.true_start > e.true_end {
            return Err(HistoryError::Malformed(e.txn, "event ends before it starts".into()));
        }
        horizon = horizon.max(e.true_end);
        if e.kind == EventKind::Begin {
            if map.contains_key(&e.txn) {
                return Err(HistoryError::Malformed(e.txn, "second begin".into()));
            }
            map.insert(
                e.txn,
                TxnSummary {
                    id: e.txn,
                    node: e.node,
                    mode: e.mode,
                    begin: e.true_start,
                    end: e.true_end,
                    rts: e.rts,
                    wts: None,
                    reads: Vec::new(),
                    writes: Vec::new(),
                    outcome: Outcome::Open,
                },
            );
            continue;
        }
        let t = map
            .get_mut(&e.txn)
            .ok_or_else(|| HistoryError::Malformed(e.txn, "event before begin".into()))?;
        if ended.contains_key(&e.txn) {
            return Err(HistoryError::Malformed(e.txn, "event after end".into()));
        }
        if e.true_start < t.begin {
            return Err(HistoryError::Malformed(e.txn, "event precedes begin".into()));
        }
        match e.kind {
            EventKind::Begin => unreachable!(),
            EventKind::Read => t.reads.extend(e.reads.iter().copied()),
            EventKind::WriteCommit | EventKind::Commit => {
                t.outcome = Outcome::Committed;
                t.end = e.true_end;
                t.wts = e.wts;
                t.writes = e.writes.clone();
                t.reads.extend(e.reads.iter().copied());
                ended.insert(e.txn, true);
            }
            EventKind::Abort => {
                t.outcome = Outcome::Aborted;
                t.end = e.true_end;
                t.reads.extend(e.reads.iter().copied());
                ended.insert(e.txn, true);
            }
        }
    }
    for t in map.values_mut() {
        if t.outcome == Outcome::Open {
            t.end = horizon;
        }
    }
    Ok(map.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(kind: EventKind, txn: TxnId, s: u64, e: u64) -> HistoryEvent {
        HistoryEvent::new(kind, txn, NodeId(0), TxnMode::STRICT_SER, TimePoint(s), TimePoint(e))
    }

    #[test]
    fn jsonl_round_trip() {
        let mut w = ev(EventKind::WriteCommit, 1, 5, 9);
        w.wts = Some(TimePoint(8));
        w.writes = vec![(Oid(3), 4)];
        let mut r = ev(EventKind::Read, 1, 2, 3);
        r.reads = vec![(Oid(3), TimePoint(0), 0)];
        let events = vec![ev(EventKind::Begin, 1, 0, 1), r, w];
        let text = to_jsonl(&events);
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("\"kind\":\"write_commit\""));
        let back = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, events);
    }

    #[test]
    fn summaries() {
        let mut r = ev(EventKind::Read, 1, 2, 3);
        r.reads = vec![(Oid(3), TimePoint(0), 0)];
        let events = vec![ev(EventKind::Begin, 1, 0, 1), r, ev(EventKind::Abort, 1, 4, 4)];
        let s = summarize(&events).unwrap();
        assert_eq!(s[0].outcome, Outcome::Aborted);
        assert_eq!(s[0].end, TimePoint(4));
        assert_eq!(s[0].reads.len(), 1);
    }

    #[test]
    fn malformed_histories() {
        assert!(summarize(&[ev(EventKind::Read, 1, 0, 1)]).is_err());
        assert!(summarize(&[ev(EventKind::Begin, 1, 5, 1)]).is_err());
        assert!(summarize(&[
            ev(EventKind::Begin, 1, 0, 1),
            ev(EventKind::Commit, 1, 2, 2),
            ev(EventKind::Read, 1, 3, 3)
        ])
        .is_err());
    }
}
