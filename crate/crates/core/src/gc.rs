//! Oldest-active-transaction and GC-point propagation.
//!
//! Round one: every node reports `OAT_local` on its lease request; the CM
//! folds the reports into `OAT_CM` and hands it back, and each node adopts
//! it as `GC_local`. Round two: nodes report `GC_local`, the CM folds those
//! into `GC`, and `GC` is what finally frees memory. Because a slave
//! transaction is admitted only if its timestamp is at least the local
//! `GC_local`, and `GC` never exceeds any node's `GC_local`, no admitted
//! reader can ever need a freed version.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::sim::NodeId;
use crate::time::TimePoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("read timestamp {rts} is below the local GC point {gc_local}")]
pub struct RejectedTooOld {
    pub rts: TimePoint,
    pub gc_local: TimePoint,
}

/// Per-node GC state.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcState {
    pub oat_local: TimePoint,
    pub gc_local: TimePoint,
    pub gc: TimePoint,
    /// False until the first lease response; a node may not start
    /// transactions before it knows its `GC_local`.
    pub admitted: bool,
}

impl GcState {
    /// `min(L, rts of every local transaction still active)`. A
    /// transaction stays active until it is truncated everywhere.
    pub fn compute_oat_local(
        &mut self,
        lower: TimePoint,
        active: impl IntoIterator<Item = TimePoint>,
    ) -> TimePoint {
        let oat = active.into_iter().fold(lower, TimePoint::min);
        self.oat_local = oat;
        oat
    }

    /// Adopts the CM's values. Returns true when `gc` advanced.
    pub fn on_lease_response(&mut self, oat_cm: TimePoint, gc: TimePoint) -> bool {
        self.admitted = true;
        self.gc_local = self.gc_local.max(oat_cm);
        let before = self.gc;
        self.gc = self.gc.max(gc).min(self.gc_local);
        self.gc > before
    }

    pub fn admit_slave(&self, rts: TimePoint) -> Result<(), RejectedTooOld> {
        if !self.admitted || rts < self.gc_local {
            return Err(RejectedTooOld {
                rts,
                gc_local: self.gc_local,
            });
        }
        Ok(())
    }

    /// Non-strict read timestamps never go below `GC_local`.
    pub fn clamp_read_ts(&self, lower: TimePoint) -> TimePoint {
        lower.max(self.gc_local)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Report {
    oat_local: TimePoint,
    gc_local: TimePoint,
}

/// CM-side folding of lease reports.
#[derive(Clone, Debug, Default)]
pub struct GcAggregator {
    oat_cm: TimePoint,
    gc: TimePoint,
    reports: BTreeMap<NodeId, Report>,
}

impl GcAggregator {
    /// Starts from floors that are already known to be safe, such as a new
    /// CM's own `GC_local` and `GC`.
    pub fn new(oat_floor: TimePoint, gc_floor: TimePoint) -> Self {
        GcAggregator {
            oat_cm: oat_floor,
            gc: gc_floor.min(oat_floor),
            reports: BTreeMap::new(),
        }
    }

    pub fn report(&mut self, node: NodeId, oat_local: TimePoint, gc_local: TimePoint) {
        self.reports.insert(node, Report { oat_local, gc_local });
    }

    /// Folds the latest report of every member that has reported. Members
    /// that have not reported yet are still gated and cannot hold readers.
    pub fn recompute(&mut self, members: &BTreeSet<NodeId>) -> (TimePoint, TimePoint) {
        let live = self
            .reports
            .iter()
            .filter(|(n, _)| members.contains(n))
            .map(|(_, r)| *r);
        let (mut oat, mut gcl): (Option<TimePoint>, Option<TimePoint>) = (None, None);
        for r in live {
            oat = Some(oat.map_or(r.oat_local, |o| o.min(r.oat_local)));
            gcl = Some(gcl.map_or(r.gc_local, |g| g.min(r.gc_local)));
        }
        if let Some(o) = oat {
            self.oat_cm = self.oat_cm.max(o);
        }
        if let Some(g) = gcl {
            self.gc = self.gc.max(g);
        }
        (self.oat_cm, self.gc)
    }

    /// Forgets nodes that left the configuration.
    pub fn drop_departed(&mut self, members: &BTreeSet<NodeId>) {
        self.reports.retain(|n, _| members.contains(n));
    }

    pub fn values(&self) -> (TimePoint, TimePoint) {
        (self.oat_cm, self.gc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: u64) -> TimePoint {
        TimePoint(v)
    }

    #[test]
    fn oat_examples() {
        let mut g = GcState::default();
        assert_eq!(g.compute_oat_local(t(100), []), t(100));
        assert_eq!(g.compute_oat_local(t(100), [t(40), t(70)]), t(40));
    }

    #[test]
    fn single_node_converges_in_two_rounds() {
        let members: BTreeSet<_> = [NodeId(0)].into_iter().collect();
        let mut agg = GcAggregator::default();
        let mut g = GcState::default();
        let oat = g.compute_oat_local(t(500), []);
        agg.report(NodeId(0), oat, g.gc_local);
        let (oat_cm, gc) = agg.recompute(&members);
        g.on_lease_response(oat_cm, gc);
        assert_eq!((g.gc_local, g.gc), (t(500), t(0)));
        let oat = g.compute_oat_local(t(600), []);
        agg.report(NodeId(0), oat, g.gc_local);
        let (oat_cm, gc) = agg.recompute(&members);
        g.on_lease_response(oat_cm, gc);
        assert_eq!((g.gc_local, g.gc), (t(600), t(500)));
    }

    #[test]
    fn slowest_node_holds_everyone_back() {
        let members: BTreeSet<_> = [NodeId(0), NodeId(1)].into_iter().collect();
        let mut agg = GcAggregator::default();
        agg.report(NodeId(0), t(900), t(0));
        agg.report(NodeId(1), t(300), t(0));
        assert_eq!(agg.recompute(&members).0, t(300));
        // values never move backwards
        agg.report(NodeId(1), t(200), t(0));
        assert_eq!(agg.recompute(&members).0, t(300));
    }

    #[test]
    fn departed_reports_are_dropped() {
        let mut members: BTreeSet<_> = [NodeId(0), NodeId(1)].into_iter().collect();
        let mut agg = GcAggregator::default();
        agg.report(NodeId(0), t(900), t(800));
        agg.report(NodeId(1), t(100), t(50));
        assert_eq!(agg.recompute(&members), (t(100), t(50)));
        members.remove(&NodeId(1));
        agg.drop_departed(&members);
        assert_eq!(agg.recompute(&members), (t(900), t(800)));
    }

    #[test]
    fn slave_admission_gate() {
        let mut g = GcState::default();
        assert!(g.admit_slave(t(10)).is_err());
        g.on_lease_response(t(50), t(0));
        assert!(g.admit_slave(t(50)).is_ok());
        assert_eq!(
            g.admit_slave(t(49)),
            Err(RejectedTooOld {
                rts: t(49),
                gc_local: t(50)
            })
        );
        assert_eq!(g.clamp_read_ts(t(20)), t(50));
    }

    #[test]
    fn gc_never_passes_gc_local() {
        let mut g = GcState::default();
        g.on_lease_response(t(10), t(40));
        assert!(g.gc <= g.gc_local);
    }
}
