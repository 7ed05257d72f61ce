//! Deterministic discrete-event world.
//!
//! One event queue ordered by (true time, sequence number), a seeded network
//! with per-link delays, crash and partition state, and a compare-and-swap
//! configuration store. True time is visible here and to the oracle, never
//! to protocol code, which only ever sees `DriftModel::local` readings.

pub mod scenario;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::store::RegionId;
use crate::time::TimePoint;

pub use scenario::{random_faults, Scenario, ScriptAction, ScriptStep};

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u16);

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

const PPB: i128 = 1_000_000_000;

/// A node's local clock as a function of true time:
/// `local = floor(true * (1 + rate_ppb / 1e9)) + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriftModel {
    pub rate_ppb: i64,
    pub offset: u64,
}

impl DriftModel {
    pub const PERFECT: DriftModel = DriftModel {
        rate_ppb: 0,
        offset: 0,
    };

    /// Rate drawn uniformly within `max_ppb` of 1.
    pub fn random(rng: &mut ChaCha8Rng, max_ppb: i64, max_offset: u64) -> Self {
        DriftModel {
            rate_ppb: if max_ppb == 0 {
                0
            } else {
                rng.gen_range(-max_ppb..=max_ppb)
            },
            offset: if max_offset == 0 {
                0
            } else {
                rng.gen_range(0..max_offset)
            },
        }
    }

    pub fn rate(&self) -> f64 {
        1.0 + self.rate_ppb as f64 / PPB as f64
    }

    pub fn local(&self, true_time: TimePoint) -> TimePoint {
        let t = true_time.0 as i128;
        let scaled = (t * (PPB + self.rate_ppb as i128)).div_euclid(PPB);
        TimePoint(scaled as u64 + self.offset)
    }

    /// Earliest true time at which the local clock reads at least `local`.
    pub fn true_at(&self, local: TimePoint) -> TimePoint {
        if local.0 <= self.offset {
            return TimePoint::ZERO;
        }
        let target = (local.0 - self.offset) as i128;
        let den = PPB + self.rate_ppb as i128;
        let mut t = (target * PPB + den - 1) / den;
        while t > 0 && self.local(TimePoint((t - 1) as u64)) >= local {
            t -= 1;
        }
        while self.local(TimePoint(t as u64)) < local {
            t += 1;
        }
        TimePoint(t as u64)
    }
}

/// Placement of one region's replicas.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionPlacement {
    pub primary: NodeId,
    pub backups: Vec<NodeId>,
}

impl RegionPlacement {
    pub fn replicas(&self) -> impl Iterator<Item = NodeId> + '_ {
        std::iter::once(self.primary).chain(self.backups.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub seq: u64,
    pub members: BTreeSet<NodeId>,
    pub cm: NodeId,
    pub regions: BTreeMap<RegionId, RegionPlacement>,
}

impl ClusterConfig {
    pub fn primary_of(&self, region: RegionId) -> Option<NodeId> {
        self.regions.get(&region).map(|p| p.primary)
    }

    pub fn backups_of(&self, region: RegionId) -> &[NodeId] {
        self.regions
            .get(&region)
            .map(|p| p.backups.as_slice())
            .unwrap_or(&[])
    }

    pub fn majority(&self) -> usize {
        self.members.len() / 2 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("configuration changed: expected seq {expected}, found {found}")]
pub struct CasConflict {
    pub expected: u64,
    pub found: u64,
}

/// Always-available configuration store with compare-and-swap on the
/// sequence number.
#[derive(Clone, Debug)]
pub struct ConfigStore {
    current: ClusterConfig,
}

impl ConfigStore {
    pub fn new(initial: ClusterConfig) -> Self {
        ConfigStore { current: initial }
    }

    pub fn read(&self) -> &ClusterConfig {
        &self.current
    }

    pub fn cas(&mut self, expected_seq: u64, new: ClusterConfig) -> Result<(), CasConflict> {
        if self.current.seq != expected_seq {
            return Err(CasConflict {
                expected: expected_seq,
                found: self.current.seq,
            });
        }
        debug_assert!(new.seq > expected_seq);
        self.current = new;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetConfig {
    pub d_min: u64,
    pub d_max: u64,
    /// One delivery in `long_tail_every` gets `long_tail_factor` times the
    /// drawn delay. Zero disables the tail.
    pub long_tail_every: u32,
    pub long_tail_factor: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_min: 5_000,
            d_max: 50_000,
            long_tail_every: 0,
            long_tail_factor: 10,
        }
    }
}

/// Message transport state: delays, crashes and partitions.
#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetConfig,
    rng: ChaCha8Rng,
    crashed: BTreeSet<NodeId>,
    cut: BTreeSet<(NodeId, NodeId)>,
    /// Extra one-way delay on every message leaving or entering a node.
    slow: BTreeMap<NodeId, u64>,
    pub dropped: u64,
}

impl Network {
    pub fn new(cfg: NetConfig, rng: ChaCha8Rng) -> Self {
        assert!(cfg.d_min <= cfg.d_max);
        Network {
            cfg,
            rng,
            crashed: BTreeSet::new(),
            cut: BTreeSet::new(),
            slow: BTreeMap::new(),
            dropped: 0,
        }
    }

    pub fn delay(&mut self, src: NodeId, dst: NodeId) -> u64 {
        if src == dst {
            return 1;
        }
        let mut d = self.rng.gen_range(self.cfg.d_min..=self.cfg.d_max);
        if self.cfg.long_tail_every > 0 && self.rng.gen_ratio(1, self.cfg.long_tail_every) {
            d *= self.cfg.long_tail_factor;
        }
        d + self.slow.get(&src).copied().unwrap_or(0) + self.slow.get(&dst).copied().unwrap_or(0)
    }

    pub fn set_slow(&mut self, node: NodeId, extra: u64) {
        if extra == 0 {
            self.slow.remove(&node);
        } else {
            self.slow.insert(node, extra);
        }
    }

    pub fn can_deliver(&self, src: NodeId, dst: NodeId) -> bool {
        !self.crashed.contains(&dst)
            && !self.crashed.contains(&src)
            && !self.cut.contains(&ordered(src, dst))
    }

    /// True when a partition separates the two nodes.
    pub fn is_cut(&self, a: NodeId, b: NodeId) -> bool {
        self.cut.contains(&ordered(a, b))
    }

    pub fn is_crashed(&self, n: NodeId) -> bool {
        self.crashed.contains(&n)
    }

    pub fn crash(&mut self, n: NodeId) {
        self.crashed.insert(n);
    }

    pub fn heal(&mut self, n: NodeId) {
        self.crashed.remove(&n);
    }

    pub fn partition(&mut self, a: &[NodeId], b: &[NodeId]) {
        for &x in a {
            for &y in b {
                if x != y {
                    self.cut.insert(ordered(x, y));
                }
            }
        }
    }

    pub fn unpartition(&mut self, a: &[NodeId], b: &[NodeId]) {
        for &x in a {
            for &y in b {
                self.cut.remove(&ordered(x, y));
            }
        }
    }

    pub fn unpartition_all(&mut self) {
        self.cut.clear();
    }
}

fn ordered(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

struct Entry<E> {
    at: TimePoint,
    seq: u64,
    ev: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (at, seq)
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Min-queue of events keyed by true time; ties break by insertion order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    next_seq: u64,
    now: TimePoint,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: TimePoint::ZERO,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn now(&self) -> TimePoint {
        self.now
    }

    pub fn schedule(&mut self, at: TimePoint, ev: E) {
        let at = at.max(self.now);
        self.heap.push(Entry {
            at,
            seq: self.next_seq,
            ev,
        });
        self.next_seq += 1;
    }

    pub fn peek_time(&self) -> Option<TimePoint> {
        self.heap.peek().map(|e| e.at)
    }

    pub fn pop(&mut self) -> Option<(TimePoint, E)> {
        let e = self.heap.pop()?;
        self.now = e.at;
        Some((e.at, e.ev))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn drift_examples() {
        let d = DriftModel::PERFECT;
        assert_eq!(d.local(TimePoint(12345)), TimePoint(12345));
        let d = DriftModel {
            rate_ppb: 100_000,
            offset: 0,
        };
        assert_eq!(d.local(TimePoint(1_000_000_000)), TimePoint(1_000_100_000));
    }

    #[test]
    fn true_at_inverts_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let d = DriftModel::random(&mut rng, 100_000, 1_000_000);
            let target = TimePoint(rng.gen_range(0..10_000_000_000u64));
            let t = d.true_at(target);
            assert!(d.local(t) >= target);
            if t.0 > 0 {
                assert!(d.local(t - 1) < target);
            }
        }
    }

    #[test]
    fn local_is_monotone() {
        let d = DriftModel {
            rate_ppb: -99_999,
            offset: 7,
        };
        let mut prev = d.local(TimePoint::ZERO);
        for t in 1..50_000u64 {
            let now = d.local(TimePoint(t));
            assert!(now >= prev);
            prev = now;
        }
    }

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::default();
        q.schedule(TimePoint(5), "b");
        q.schedule(TimePoint(3), "a");
        q.schedule(TimePoint(5), "c");
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
    }

    #[test]
    fn fixed_delay_is_fifo_per_pair() {
        let cfg = NetConfig {
            d_min: 10,
            d_max: 10,
            ..NetConfig::default()
        };
        let mut net = Network::new(cfg, ChaCha8Rng::seed_from_u64(0));
        let mut q = EventQueue::default();
        for i in 0..20u32 {
            let d = net.delay(NodeId(0), NodeId(1));
            q.schedule(TimePoint(i as u64) + d, i);
        }
        let got: Vec<_> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(got, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn partitions_cut_both_directions() {
        let mut net = Network::new(NetConfig::default(), ChaCha8Rng::seed_from_u64(0));
        net.partition(&[NodeId(0)], &[NodeId(1), NodeId(2)]);
        assert!(!net.can_deliver(NodeId(1), NodeId(0)));
        assert!(!net.can_deliver(NodeId(0), NodeId(2)));
        assert!(net.can_deliver(NodeId(1), NodeId(2)));
        net.unpartition(&[NodeId(0)], &[NodeId(1)]);
        assert!(net.can_deliver(NodeId(0), NodeId(1)));
        assert!(!net.can_deliver(NodeId(0), NodeId(2)));
    }

    #[test]
    fn cas_has_one_winner() {
        let base = ClusterConfig {
            seq: 1,
            members: [NodeId(0), NodeId(1)].into_iter().collect(),
            cm: NodeId(0),
            regions: BTreeMap::new(),
        };
        let mut store = ConfigStore::new(base.clone());
        let a = ClusterConfig {
            seq: 2,
            cm: NodeId(1),
            ..base.clone()
        };
        let b = ClusterConfig {
            seq: 2,
            cm: NodeId(0),
            ..base
        };
        assert!(store.cas(1, a).is_ok());
        assert_eq!(
            store.cas(1, b),
            Err(CasConflict {
                expected: 1,
                found: 2
            })
        );
        assert_eq!(store.read().cm, NodeId(1));
    }
}
