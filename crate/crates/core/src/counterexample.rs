//! The ten-step schedule where releasing write locks before the write
//! timestamp has passed breaks serializability.
//!
//! Two objects A and B start at 0. T1 runs on a node with a wide clock
//! interval and computes `A = B + 1`; T2 writes `B = 1`; T3 and T4 read both.
//! Global time advances one tick per step. With `skip_write_wait` T1 unlocks
//! A at step 6 although its write timestamp is 9, so T3 reading at 8 sees
//! B's new value and A's old one. Without the mutation A stays locked until
//! step 9, T3 aborts on the lock and T4 sees both new values.
//!
//! The schedule drives a real [`Store`] so the values, versions and lock
//! outcomes come from the store itself.

use crate::checker::{self, EventKind, HistoryEvent, Verdict};
use crate::sim::NodeId;
use crate::store::{self, LockExpect, Oid, Role, Store, StoreConfig, StoreError, TxnId};
use crate::time::TimePoint;
use crate::txn::{Mutations, TxnMode, VALUE_BYTES};

/// True nanoseconds per step.
const STEP_NS: u64 = 1_000;
const HIGH_UNCERTAINTY: NodeId = NodeId(0);
const LOW_UNCERTAINTY: NodeId = NodeId(1);

#[derive(Clone, Debug)]
pub struct CounterexampleRun {
    pub history: Vec<HistoryEvent>,
    /// One line per step of the schedule.
    pub log: Vec<String>,
    pub a: Oid,
    pub b: Oid,
    pub t3_committed: bool,
    /// `(oid, version, value)` for each of T4's reads.
    pub t4_reads: Vec<(Oid, TimePoint, i64)>,
    pub verdict: Verdict,
}

struct Sched {
    store: Store,
    history: Vec<HistoryEvent>,
    log: Vec<String>,
}

fn at(step: u64) -> TimePoint {
    TimePoint(step * STEP_NS)
}

impl Sched {
    fn begin(&mut self, txn: TxnId, node: NodeId, step: u64, rts: u64) {
        let mut e = HistoryEvent::new(EventKind::Begin, txn, node, TxnMode::STRICT_SER, at(step), at(step));
        e.rts = Some(TimePoint(rts));
        self.history.push(e);
    }

    fn read(&mut self, txn: TxnId, node: NodeId, step: u64, oid: Oid, rts: u64) -> Result<(TimePoint, i64), StoreError> {
        let v = self.store.read_at_ts(oid, TimePoint(rts))?;
        let value = store::decode_value(&v.data);
        let mut e = HistoryEvent::new(EventKind::Read, txn, node, TxnMode::STRICT_SER, at(step), at(step));
        e.reads = vec![(oid, v.ts, value)];
        self.history.push(e);
        Ok((v.ts, value))
    }

    fn write_commit(&mut self, txn: TxnId, node: NodeId, start: u64, end: u64, wts: u64, writes: Vec<(Oid, i64)>) {
        let mut e = HistoryEvent::new(EventKind::WriteCommit, txn, node, TxnMode::STRICT_SER, at(start), at(end));
        e.wts = Some(TimePoint(wts));
        e.writes = writes;
        self.history.push(e);
    }

    fn end(&mut self, kind: EventKind, txn: TxnId, node: NodeId, step: u64) {
        self.history
            .push(HistoryEvent::new(kind, txn, node, TxnMode::STRICT_SER, at(step), at(step)));
    }

    fn install(&mut self, oid: Oid, txn: TxnId, wts: u64, value: i64) {
        let ok = self
            .store
            .install_commit(oid, txn, TimePoint(wts), store::encode_value(value, VALUE_BYTES), true);
        assert!(ok, "install of {oid}@{wts} refused");
    }

    fn note(&mut self, step: u64, s: String) {
        self.log.push(format!("{step:>2}. {s}"));
    }
}

/// Replays the schedule. Only `skip_write_wait` changes it; the other
/// mutations have their own randomized scenarios.
pub fn run(m: Mutations) -> CounterexampleRun {
    let skip = m.skip_write_wait;
    let mut store = Store::new(StoreConfig::default());
    store.add_region(0, Role::Primary);
    let a = store.seed_object(0, store::encode_value(0, VALUE_BYTES)).expect("fresh region");
    let b = store.seed_object(0, store::encode_value(0, VALUE_BYTES)).expect("fresh region");
    let mut s = Sched {
        store,
        history: Vec::new(),
        log: Vec::new(),
    };
    let (t1, t2, t3, t4) = (1, 2, 3, 4);
    let (hi, lo) = (HIGH_UNCERTAINTY, LOW_UNCERTAINTY);

    s.begin(t1, hi, 1, 1);
    let (b_ver, b_val) = s.read(t1, hi, 1, b, 1).expect("B readable");
    s.note(1, format!("T1 acquires read timestamp 1, reads B@{b_ver} = {b_val}"));

    s.store
        .lock_for_write(a, t1, LockExpect::NotAfter(TimePoint(1)), 0)
        .expect("A unlocked");
    s.note(2, "T1 locks A".into());
    s.note(3, "T1 acquires write timestamp 9".into());

    let (locked, head) = s.store.read_header(b).expect("B present");
    assert!(!locked && head == b_ver, "T1 validation must pass");
    s.note(4, format!("T1 validates B@{b_ver}"));

    let a_new = b_val + 1;
    if skip {
        s.install(a, t1, 9, a_new);
        s.note(5, format!("T1 writes A@9 = {a_new}"));
        s.note(6, "T1 unlocks A".into());
        s.write_commit(t1, hi, 2, 6, 9, vec![(a, a_new)]);
    } else {
        s.note(5, "T1 waits for its write timestamp, holding A".into());
        s.note(6, "T1 still holds A".into());
    }

    s.begin(t2, lo, 7, 7);
    s.store
        .lock_for_write(b, t2, LockExpect::NotAfter(TimePoint(7)), 1)
        .expect("B unlocked");
    s.install(b, t2, 7, 1);
    s.write_commit(t2, lo, 7, 7, 7, vec![(b, 1)]);
    s.note(7, "T2 executes at timestamp 7, writes B@7 = 1".into());

    s.begin(t3, lo, 8, 8);
    let t3_committed = match s.read(t3, lo, 8, a, 8) {
        Ok((av, aval)) => {
            let (bv, bval) = s.read(t3, lo, 8, b, 8).expect("B readable");
            s.end(EventKind::Commit, t3, lo, 8);
            s.note(8, format!("T3 reads at 8: A@{av} = {aval}, B@{bv} = {bval}"));
            true
        }
        Err(e) => {
            s.end(EventKind::Abort, t3, lo, 8);
            s.note(8, format!("T3 reads A at 8 and aborts: {e}"));
            false
        }
    };

    if skip {
        s.note(9, "A@9 becomes visible as global time passes 9".into());
    } else {
        s.install(a, t1, 9, a_new);
        s.write_commit(t1, hi, 2, 9, 9, vec![(a, a_new)]);
        s.note(9, format!("T1's wait ends; it writes A@9 = {a_new} and unlocks"));
    }

    s.begin(t4, lo, 10, 10);
    let ra = s.read(t4, lo, 10, a, 10).expect("A readable");
    let rb = s.read(t4, lo, 10, b, 10).expect("B readable");
    s.end(EventKind::Commit, t4, lo, 10);
    s.note(10, format!("T4 reads at 10: A@{} = {}, B@{} = {}", ra.0, ra.1, rb.0, rb.1));

    let verdict = checker::check_opacity(&s.history);
    CounterexampleRun {
        history: s.history,
        log: s.log,
        a,
        b,
        t3_committed,
        t4_reads: vec![(a, ra.0, ra.1), (b, rb.0, rb.1)],
        verdict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broken_variant_is_caught() {
        let r = run(Mutations::only("skip_write_wait"));
        assert!(r.t3_committed);
        assert!(r.verdict.is_violation(), "{:?}", r.verdict);
        assert!(checker::check_strict_serializable(&r.history).is_violation());
        assert!(checker::check_serializable(&r.history, &Default::default()).is_violation());
    }

    #[test]
    fn correct_variant_passes_in_order_t1_t2_t4() {
        let r = run(Mutations::default());
        assert!(!r.t3_committed);
        assert_eq!(r.t4_reads, vec![(r.a, TimePoint(9), 1), (r.b, TimePoint(7), 1)]);
        match &r.verdict {
            Verdict::Pass { order } => {
                let committed: Vec<_> = order.iter().copied().filter(|&t| t != 3).collect();
                assert_eq!(committed, vec![1, 2, 4]);
            }
            v => panic!("{v:?}"),
        }
    }
}
