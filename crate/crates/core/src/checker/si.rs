//! Snapshot isolation: every committed transaction reads the latest
//! committed state at its read timestamp, and no two committed writers of
//! one object overlap between their read and write timestamps.

use std::collections::{BTreeMap, HashMap};

use super::history::{HistoryEvent, Outcome, TxnSummary};
use super::serial::Verdict;
use crate::store::{Oid, TxnId};
use crate::time::TimePoint;
use crate::txn::TOMBSTONE;

struct Version {
    wts: TimePoint,
    value: i64,
    txn: TxnId,
    rts: TimePoint,
}

pub fn check_si(events: &[HistoryEvent]) -> Verdict {
    match super::history::summarize(events) {
        Ok(s) => check_si_summaries(&s),
        Err(e) => Verdict::violation(Vec::new(), format!("malformed history: {e}")),
    }
}

pub fn check_si_summaries(txns: &[TxnSummary]) -> Verdict {
    let committed: Vec<&TxnSummary> = txns.iter().filter(|t| t.outcome == Outcome::Committed).collect();
    let mut versions: BTreeMap<Oid, Vec<Version>> = BTreeMap::new();
    for t in &committed {
        if let Some(wts) = t.wts {
            for &(oid, value) in &t.writes {
                versions.entry(oid).or_default().push(Version {
                    wts,
                    value,
                    txn: t.id,
                    rts: t.rts.unwrap_or(TimePoint::ZERO),
                });
            }
        }
    }
    for vs in versions.values_mut() {
        vs.sort_by_key(|v| (v.wts, v.txn));
    }

    // A write on top of a freed object is an allocation; slot reservation,
    // not the snapshot, orders those.
    for (oid, vs) in &versions {
        for pair in vs.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.value == TOMBSTONE {
                continue;
            }
            if a.wts > b.rts || a.wts == b.wts {
                return Verdict::violation(
                    vec![a.txn, b.txn],
                    format!("concurrent writers of {oid}: ({}, {}] and ({}, {}]", a.rts, a.wts, b.rts, b.wts),
                );
            }
        }
    }

    let mut initial: HashMap<Oid, (i64, TxnId)> = HashMap::new();
    for t in &committed {
        let Some(rts) = t.rts else { continue };
        for &(oid, ver, val) in &t.reads {
            let latest = versions
                .get(&oid)
                .and_then(|vs| vs.iter().rev().find(|v| v.wts <= rts && v.txn != t.id));
            match latest {
                Some(v) if v.wts == ver && v.value == val => {}
                Some(v) => {
                    return Verdict::violation(
                        vec![t.id, v.txn],
                        format!("read {oid}@{ver} = {val} but the snapshot at {rts} holds {}@{}", v.value, v.wts),
                    )
                }
                None if ver == TimePoint::ZERO => match initial.get(&oid) {
                    Some(&(v0, other)) if v0 != val => {
                        return Verdict::violation(vec![other, t.id], format!("two different initial values read for {oid}"))
                    }
                    _ => {
                        initial.insert(oid, (val, t.id));
                    }
                },
                None => {
                    return Verdict::violation(
                        vec![t.id],
                        format!("read {oid}@{ver} but no committed write precedes {rts}"),
                    )
                }
            }
        }
    }
    Verdict::Pass {
        order: {
            let mut c: Vec<&TxnSummary> = committed.clone();
            c.sort_by_key(|t| (t.ts_hint(), !t.is_rw(), t.id));
            c.iter().map(|t| t.id).collect()
        },
    }
}
