//! Post-hoc scans of the proof invariants over a god's-eye log.
//!
//! The simulator records, per object, every version installed at a primary;
//! every successful read with the reader's rts; for committed read-write
//! transactions their data sets; and when each coordinator finished
//! locking and when the first lock was released. It also keeps the lineage
//! of master clocks so that any true instant maps to global time.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clock::ClockState;
use crate::sim::{DriftModel, NodeId};
use crate::store::{Oid, TxnId};
use crate::time::{TimeInterval, TimePoint};
use crate::txn::TxnMode;

/// A master clock in effect from true time `from` on.
#[derive(Clone, Debug)]
pub struct LineageSegment {
    pub from: TimePoint,
    pub node: NodeId,
    pub clock: ClockState,
    pub drift: DriftModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Install {
    pub ts: TimePoint,
    pub txn: TxnId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadObs {
    pub txn: TxnId,
    pub oid: Oid,
    pub version: TimePoint,
    pub rts: TimePoint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommittedRw {
    pub txn: TxnId,
    pub mode: TxnMode,
    pub rts: TimePoint,
    pub wts: TimePoint,
    pub reads: Vec<Oid>,
    pub writes: Vec<Oid>,
    /// Objects this transaction allocated; their head predates nothing it
    /// read.
    pub allocs: Vec<Oid>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockHold {
    pub txn: TxnId,
    pub mode: TxnMode,
    /// True time the coordinator saw the last lock succeed.
    pub locked_at: TimePoint,
    /// True time the first lock was released.
    pub unlocked_at: TimePoint,
    pub wts: TimePoint,
}

#[derive(Clone, Debug, Default)]
pub struct OracleLog {
    pub lineage: Vec<LineageSegment>,
    pub installs: BTreeMap<Oid, Vec<Install>>,
    pub reads: Vec<ReadObs>,
    pub committed: Vec<CommittedRw>,
    pub lock_holds: Vec<LockHold>,
    pub containment_checks: u64,
    pub containment_violations: u64,
    pub get_ts_checks: u64,
    pub get_ts_violations: u64,
}

impl OracleLog {
    pub fn push_lineage(&mut self, from: TimePoint, node: NodeId, clock: ClockState, drift: DriftModel) {
        self.lineage.push(LineageSegment { from, node, clock, drift });
    }

    /// Global time at a true instant, if a master existed.
    pub fn global_time(&self, t: TimePoint) -> Option<TimePoint> {
        let i = self.lineage.partition_point(|s| s.from <= t);
        let seg = self.lineage.get(i.checked_sub(1)?)?;
        let local = seg.drift.local(t);
        let base = seg.drift.local(seg.from);
        seg.clock.bounds(local.max(base)).ok().map(|iv| iv.upper)
    }

    pub fn record_install(&mut self, oid: Oid, ts: TimePoint, txn: TxnId) {
        let v = self.installs.entry(oid).or_default();
        if !v.iter().any(|i| i.ts == ts && i.txn == txn) {
            v.push(Install { ts, txn });
        }
    }

    pub fn record_read(&mut self, txn: TxnId, oid: Oid, version: TimePoint, rts: TimePoint) {
        self.reads.push(ReadObs { txn, oid, version, rts });
    }

    /// Interval containment: `L <= G(at) <= U`.
    pub fn check_interval(&mut self, at: TimePoint, iv: TimeInterval) -> bool {
        let Some(g) = self.global_time(at) else { return true };
        self.containment_checks += 1;
        let ok = iv.lower <= g && g <= iv.upper;
        if !ok {
            self.containment_violations += 1;
        }
        ok
    }

    /// `L <= G(call) <= U <= G(ret)` for one timestamp wait.
    pub fn check_get_ts(&mut self, call: TimePoint, iv: TimeInterval, ret: TimePoint) -> bool {
        let (Some(gc), Some(gr)) = (self.global_time(call), self.global_time(ret)) else {
            return true;
        };
        self.get_ts_checks += 1;
        let ok = iv.lower <= gc && gc <= iv.upper && iv.upper <= gr;
        if !ok {
            self.get_ts_violations += 1;
        }
        ok
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub reads_checked: usize,
    pub read_invariant: Vec<String>,
    pub txns_checked: usize,
    pub write_invariant: Vec<String>,
    pub locks_checked: usize,
    pub lock_at_wts: Vec<String>,
}

impl LemmaReport {
    pub fn is_clean(&self) -> bool {
        self.read_invariant.is_empty() && self.write_invariant.is_empty() && self.lock_at_wts.is_empty()
    }
}

fn sorted_versions(log: &OracleLog) -> BTreeMap<Oid, Vec<Install>> {
    let mut m = log.installs.clone();
    for v in m.values_mut() {
        v.sort_by_key(|i| (i.ts, i.txn));
    }
    m
}

/// Runs all three scans. `lock_modes` selects which transactions must hold
/// their locks at wts.
pub fn scan(log: &OracleLog, lock_modes: &[TxnMode]) -> LemmaReport {
    let versions = sorted_versions(log);
    let in_range = |oid: Oid, lo: TimePoint, hi_incl: Option<TimePoint>, hi_excl: Option<TimePoint>| -> Vec<Install> {
        let Some(vs) = versions.get(&oid) else { return Vec::new() };
        let start = vs.partition_point(|i| i.ts <= lo);
        vs[start..]
            .iter()
            .take_while(|i| hi_incl.is_none_or(|h| i.ts <= h) && hi_excl.is_none_or(|h| i.ts < h))
            .copied()
            .collect()
    };
    let mut r = LemmaReport::default();

    for o in &log.reads {
        r.reads_checked += 1;
        if let Some(bad) = in_range(o.oid, o.version, None, Some(o.rts)).first() {
            r.read_invariant.push(format!(
                "txn {} read {}@{} at rts {} but txn {} wrote version {}",
                o.txn, o.oid, o.version, o.rts, bad.txn, bad.ts
            ));
        }
    }

    for t in &log.committed {
        r.txns_checked += 1;
        let allocs: BTreeSet<Oid> = t.allocs.iter().copied().collect();
        let data: BTreeSet<Oid> = t.reads.iter().chain(&t.writes).copied().filter(|o| !allocs.contains(o)).collect();
        for oid in data {
            if let Some(bad) = in_range(oid, t.rts, Some(t.wts), None).into_iter().find(|i| i.txn != t.txn) {
                r.write_invariant.push(format!(
                    "txn {} ({}, {}] overlaps version {} of {} by txn {}",
                    t.txn, t.rts, t.wts, bad.ts, oid, bad.txn
                ));
            }
        }
    }

    for h in log.lock_holds.iter().filter(|h| lock_modes.contains(&h.mode)) {
        r.locks_checked += 1;
        let (Some(gl), Some(gu)) = (log.global_time(h.locked_at), log.global_time(h.unlocked_at)) else {
            continue;
        };
        if !(gl <= h.wts && h.wts <= gu) {
            r.lock_at_wts.push(format!(
                "txn {} held locks over global [{gl}, {gu}] which misses wts {}",
                h.txn, h.wts
            ));
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::DriftBound;

    fn log_with_master() -> OracleLog {
        let mut log = OracleLog::default();
        let mut c = ClockState::new(DriftBound::default());
        c.enable_master(TimePoint(0), TimePoint(0));
        log.push_lineage(TimePoint(0), NodeId(0), c, DriftModel::PERFECT);
        log
    }

    #[test]
    fn global_time_follows_lineage() {
        let mut log = log_with_master();
        assert_eq!(log.global_time(TimePoint(500)), Some(TimePoint(500)));
        let mut c = ClockState::new(DriftBound::default());
        c.enable_master(TimePoint(10_000), TimePoint(1_000));
        log.push_lineage(TimePoint(1_000), NodeId(1), c, DriftModel::PERFECT);
        assert_eq!(log.global_time(TimePoint(999)), Some(TimePoint(999)));
        assert_eq!(log.global_time(TimePoint(1_500)), Some(TimePoint(10_500)));
    }

    #[test]
    fn read_invariant_flags_skipped_version() {
        let mut log = log_with_master();
        log.record_install(Oid(1), TimePoint(5), 1);
        log.record_read(2, Oid(1), TimePoint(0), TimePoint(9));
        log.record_read(3, Oid(1), TimePoint(5), TimePoint(9));
        let r = scan(&log, &[]);
        assert_eq!(r.read_invariant.len(), 1);
    }

    #[test]
    fn write_invariant_ignores_own_version() {
        let mut log = log_with_master();
        log.record_install(Oid(1), TimePoint(8), 7);
        log.committed.push(CommittedRw {
            txn: 7,
            mode: TxnMode::STRICT_SER,
            rts: TimePoint(4),
            wts: TimePoint(8),
            reads: vec![Oid(1)],
            writes: vec![Oid(1)],
            allocs: vec![],
        });
        assert!(scan(&log, &[]).is_clean());
        log.record_install(Oid(1), TimePoint(6), 9);
        assert_eq!(scan(&log, &[]).write_invariant.len(), 1);
    }

    #[test]
    fn lock_window_must_cover_wts() {
        let mut log = log_with_master();
        let hold = LockHold {
            txn: 1,
            mode: TxnMode::STRICT_SER,
            locked_at: TimePoint(100),
            unlocked_at: TimePoint(200),
            wts: TimePoint(150),
        };
        log.lock_holds.push(hold);
        log.lock_holds.push(LockHold { wts: TimePoint(250), ..hold });
        assert_eq!(scan(&log, &[TxnMode::STRICT_SER]).lock_at_wts.len(), 1);
        assert!(scan(&log, &[]).is_clean());
    }
}
