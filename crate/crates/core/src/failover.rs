//! Reconfiguration planning: new membership, region reassignment with
//! backup promotion, and fast-forward aggregation.
//!
//! The message-driven part of the protocol lives in the cluster; the
//! decisions it makes are all here.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::sim::{ClusterConfig, NodeId, RegionPlacement};
use crate::store::RegionId;
use crate::time::TimePoint;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconfigPhase {
    Suspect,
    CasWon,
    NewConfigSent,
    AcksCollected,
    LeaseWait,
    Committed,
    AdvanceSent,
    Enabled,
}

/// Why a reconfiguration attempt was abandoned.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StandDown {
    #[error("only {reachable} of {members} members reachable")]
    NoMajority { reachable: usize, members: usize },
    #[error("the suspected clock master answered")]
    CmAlive,
    #[error("lost the configuration race")]
    Conflict,
}

/// Membership change for a failure: drop everything unreachable. The old
/// CM keeps its role if it is still reachable, otherwise the proposer
/// takes over.
pub fn plan_removal(
    old: &ClusterConfig,
    proposer: NodeId,
    reachable: &BTreeSet<NodeId>,
    replication: usize,
) -> Result<ClusterConfig, StandDown> {
    let mut members: BTreeSet<NodeId> = old
        .members
        .iter()
        .copied()
        .filter(|n| reachable.contains(n))
        .collect();
    members.insert(proposer);
    if members.len() < old.majority() {
        return Err(StandDown::NoMajority {
            reachable: members.len(),
            members: old.members.len(),
        });
    }
    let cm = if members.contains(&old.cm) {
        old.cm
    } else {
        proposer
    };
    Ok(ClusterConfig {
        seq: old.seq + 1,
        regions: reassign_regions(&old.regions, &members, replication),
        members,
        cm,
    })
}

/// Membership change adding a recovered node. Clocks stay enabled.
pub fn plan_join(old: &ClusterConfig, joiner: NodeId, replication: usize) -> ClusterConfig {
    let mut members = old.members.clone();
    members.insert(joiner);
    ClusterConfig {
        seq: old.seq + 1,
        regions: reassign_regions(&old.regions, &members, replication),
        members,
        cm: old.cm,
    }
}

/// Keeps surviving replicas, promotes the lowest surviving backup when a
/// primary is gone, and tops backups up from the least loaded members.
/// Regions with no surviving replica keep their dead placement; the
/// system blocks on them.
pub fn reassign_regions(
    old: &BTreeMap<RegionId, RegionPlacement>,
    members: &BTreeSet<NodeId>,
    replication: usize,
) -> BTreeMap<RegionId, RegionPlacement> {
    let mut load: BTreeMap<NodeId, usize> = members.iter().map(|&n| (n, 0)).collect();
    let mut out = BTreeMap::new();
    let mut pending = Vec::new();
    for (&region, p) in old {
        let survivors: Vec<NodeId> = p.replicas().filter(|n| members.contains(n)).collect();
        if survivors.is_empty() {
            out.insert(region, p.clone());
            continue;
        }
        let primary = if members.contains(&p.primary) {
            p.primary
        } else {
            *survivors.iter().min().expect("non-empty")
        };
        let backups: Vec<NodeId> = survivors.into_iter().filter(|&n| n != primary).collect();
        for n in std::iter::once(primary).chain(backups.iter().copied()) {
            *load.get_mut(&n).expect("member") += 1;
        }
        pending.push((region, primary, backups));
    }
    for (region, primary, mut backups) in pending {
        while backups.len() + 1 < replication {
            let pick = load
                .iter()
                .filter(|(n, _)| **n != primary && !backups.contains(n))
                .min_by_key(|(n, l)| (**l, **n))
                .map(|(n, _)| *n);
            match pick {
                Some(n) => {
                    *load.get_mut(&n).expect("member") += 1;
                    backups.push(n);
                }
                None => break,
            }
        }
        out.insert(region, RegionPlacement { primary, backups });
    }
    out
}

/// Initial placement: `regions_per_node` primaries per node, backups on the
/// following nodes in ring order.
pub fn initial_regions(
    nodes: &[NodeId],
    regions_per_node: usize,
    replication: usize,
) -> BTreeMap<RegionId, RegionPlacement> {
    let n = nodes.len();
    let mut out = BTreeMap::new();
    for i in 0..n * regions_per_node {
        let p = i % n;
        out.insert(
            i as RegionId,
            RegionPlacement {
                primary: nodes[p],
                backups: (1..replication.min(n)).map(|k| nodes[(p + k) % n]).collect(),
            },
        );
    }
    out
}

/// Regions whose replica set changed between two configurations.
pub fn affected_regions(old: &ClusterConfig, new: &ClusterConfig) -> BTreeSet<RegionId> {
    old.regions
        .iter()
        .filter(|(r, p)| new.regions.get(r) != Some(p))
        .map(|(r, _)| *r)
        .collect()
}

/// The lease-expiry wait can be skipped when the only departed node is the
/// old CM, or when the CM did not change at all.
pub fn needs_lease_wait(old: &ClusterConfig, new: &ClusterConfig) -> bool {
    old.cm != new.cm && old.members.iter().any(|n| !new.members.contains(n) && *n != old.cm)
}

/// `FF := max(own upper bound, every reported FF)`.
pub fn fast_forward(own_upper: TimePoint, reported: impl IntoIterator<Item = TimePoint>) -> TimePoint {
    reported.into_iter().fold(own_upper, TimePoint::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u16]) -> BTreeSet<NodeId> {
        v.iter().map(|&n| NodeId(n)).collect()
    }

    fn base(n: u16, replication: usize) -> ClusterConfig {
        let nodes: Vec<NodeId> = (0..n).map(NodeId).collect();
        ClusterConfig {
            seq: 1,
            members: nodes.iter().copied().collect(),
            cm: NodeId(0),
            regions: initial_regions(&nodes, 2, replication),
        }
    }

    #[test]
    fn non_cm_removal_keeps_cm() {
        let old = base(4, 3);
        let new = plan_removal(&old, NodeId(0), &ids(&[0, 1, 2]), 3).unwrap();
        assert_eq!(new.cm, NodeId(0));
        assert_eq!(new.seq, 2);
        assert!(!needs_lease_wait(&old, &new));
    }

    #[test]
    fn cm_removal_hands_role_to_proposer() {
        let old = base(4, 3);
        let new = plan_removal(&old, NodeId(2), &ids(&[1, 2, 3]), 3).unwrap();
        assert_eq!(new.cm, NodeId(2));
        // only the old CM left: no lease wait
        assert!(!needs_lease_wait(&old, &new));
        let old = base(5, 3);
        let new = plan_removal(&old, NodeId(2), &ids(&[2, 3, 4]), 3).unwrap();
        assert!(needs_lease_wait(&old, &new));
    }

    #[test]
    fn minority_stands_down() {
        let old = base(5, 3);
        assert_eq!(
            plan_removal(&old, NodeId(4), &ids(&[3]), 3),
            Err(StandDown::NoMajority {
                reachable: 2,
                members: 5
            })
        );
    }

    #[test]
    fn promotion_picks_lowest_surviving_backup() {
        let mut regions = BTreeMap::new();
        regions.insert(
            0,
            RegionPlacement {
                primary: NodeId(1),
                backups: vec![NodeId(3), NodeId(2)],
            },
        );
        let out = reassign_regions(&regions, &ids(&[0, 2, 3]), 3);
        assert_eq!(out[&0].primary, NodeId(2));
        assert_eq!(out[&0].backups, vec![NodeId(3), NodeId(0)]);
    }

    #[test]
    fn lost_region_keeps_dead_placement() {
        let mut regions = BTreeMap::new();
        regions.insert(
            0,
            RegionPlacement {
                primary: NodeId(1),
                backups: vec![],
            },
        );
        let out = reassign_regions(&regions, &ids(&[0]), 1);
        assert_eq!(out[&0].primary, NodeId(1));
    }

    #[test]
    fn join_refills_replication() {
        let old = base(3, 3);
        let shrunk = plan_removal(&old, NodeId(0), &ids(&[0, 1]), 3).unwrap();
        assert!(shrunk.regions.values().all(|p| p.backups.len() == 1));
        let grown = plan_join(&shrunk, NodeId(2), 3);
        assert!(grown.regions.values().all(|p| p.backups.len() == 2));
        assert_eq!(grown.cm, NodeId(0));
    }

    #[test]
    fn initial_layout_rings_backups() {
        let r = initial_regions(&[NodeId(0), NodeId(1), NodeId(2)], 1, 2);
        assert_eq!(r[&2].primary, NodeId(2));
        assert_eq!(r[&2].backups, vec![NodeId(0)]);
    }

    #[test]
    fn ff_is_max() {
        assert_eq!(fast_forward(TimePoint(5), [TimePoint(9), TimePoint(2)]), TimePoint(9));
        assert_eq!(fast_forward(TimePoint(5), []), TimePoint(5));
    }
}
