//! A small contention pattern aimed at the timestamp-wait rules.
//!
//! Three keys A, B and D. A skewed writer on a node with a wide clock
//! interval reads B and A and writes A+1 and D=B+1. Other clients keep
//! incrementing B, and readers fetch A, B and D in a random order with
//! pauses in between, some of them from the wide-interval node. Broken
//! wait rules show up as fractured or stale reads.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{seed_keys, Workload};
use crate::cluster::{Cluster, ClusterParams};
use crate::sim::{ClusterConfig, NodeId};
use crate::store::Oid;
use crate::txn::{AbortReason, Op, Program, ReadRecord, Target, Val};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Skewed,
    WriterB,
    Reader,
}

#[derive(Clone, Debug)]
pub struct AdversarialConfig {
    /// Node with the wide clock interval.
    pub uncertain: u16,
    pub uncertain_sync_ns: u64,
    /// Extra one-way delay on the uncertain node's sync messages.
    pub sync_delay_ns: u64,
    pub writers: usize,
    pub readers: usize,
    /// Largest pause between a reader's reads, in ns.
    pub max_pause_ns: u64,
    /// Largest pause between a writer's programs, in ns.
    pub writer_gap_ns: u64,
}

impl AdversarialConfig {
    /// Draws a layout for a cluster of `nodes`.
    pub fn random(rng: &mut ChaCha8Rng, nodes: usize) -> Self {
        let sync_delay_ns = rng.gen_range(100_000..400_000);
        AdversarialConfig {
            uncertain: (nodes - 1) as u16,
            uncertain_sync_ns: rng.gen_range(2_000_000..10_000_000),
            sync_delay_ns,
            writers: rng.gen_range(1..=2),
            readers: rng.gen_range(2..=4),
            max_pause_ns: rng.gen_range(sync_delay_ns..3 * sync_delay_ns),
            writer_gap_ns: rng.gen_range(2 * sync_delay_ns..6 * sync_delay_ns),
        }
    }

    /// Widens the uncertain node's clock interval.
    pub fn apply(&self, params: &mut ClusterParams) {
        params.sync_period_overrides.insert(self.uncertain, self.uncertain_sync_ns);
        params.sync_delay.insert(self.uncertain, self.sync_delay_ns);
    }
}

pub struct Adversarial {
    cfg: AdversarialConfig,
    roles: Vec<(Role, NodeId)>,
    a: Oid,
    b: Oid,
    d: Oid,
    skewed_commits: u64,
    skewed_aborts: BTreeMap<String, u64>,
}

impl Adversarial {
    pub fn new(cfg: AdversarialConfig) -> Self {
        Adversarial {
            cfg,
            roles: Vec::new(),
            a: Oid(0),
            b: Oid(0),
            d: Oid(0),
            skewed_commits: 0,
            skewed_aborts: BTreeMap::new(),
        }
    }

    fn skewed(&self) -> Program {
        let (a, b, d) = (Target::Fixed(self.a), Target::Fixed(self.b), Target::Fixed(self.d));
        Program::new(
            "skewed",
            vec![
                Op::Read(b),
                Op::Read(a),
                Op::Write(a, Val::RegPlus(1, 1)),
                Op::Write(d, Val::RegPlus(0, 1)),
            ],
        )
    }

    fn writer(&self) -> Program {
        let b = Target::Fixed(self.b);
        Program::new("writer", vec![Op::Read(b), Op::Write(b, Val::RegPlus(0, 1))])
    }

    fn reader(&self, rng: &mut ChaCha8Rng) -> Program {
        let mut keys = [self.a, self.b, self.d];
        keys.shuffle(rng);
        let mut ops = Vec::new();
        for (i, k) in keys.into_iter().enumerate() {
            if i > 0 {
                ops.push(Op::Think(rng.gen_range(0..=self.cfg.max_pause_ns)));
            }
            ops.push(Op::Read(Target::Fixed(k)));
        }
        Program::new("reader", ops)
    }
}

impl Workload for Adversarial {
    fn name(&self) -> &str {
        "adversarial"
    }

    fn setup(&mut self, cluster: &mut Cluster) -> Result<(), String> {
        let n = cluster.nodes.len();
        if (self.cfg.uncertain as usize) >= n || n < 2 {
            return Err("adversarial workload needs at least two nodes and a valid uncertain node".into());
        }
        let keys = seed_keys(cluster, 3, 0)?;
        (self.a, self.b, self.d) = (keys[0], keys[1], keys[2]);
        let u = NodeId(self.cfg.uncertain);
        let others: Vec<NodeId> = (0..n as u16).map(NodeId).filter(|&x| x != u).collect();
        self.roles = vec![(Role::Skewed, u)];
        for i in 0..self.cfg.writers {
            self.roles.push((Role::WriterB, others[i % others.len()]));
        }
        for i in 0..self.cfg.readers {
            // alternate between the wide-interval node and the rest
            let home = if i % 2 == 0 { u } else { others[(i + 1) % others.len()] };
            self.roles.push((Role::Reader, home));
        }
        Ok(())
    }

    fn clients(&self, _cluster: &Cluster) -> Vec<NodeId> {
        self.roles.iter().map(|r| r.1).collect()
    }

    fn next(&mut self, client: usize, rng: &mut ChaCha8Rng, _config: &ClusterConfig) -> Option<Program> {
        Some(match self.roles[client].0 {
            Role::Skewed => self.skewed(),
            Role::WriterB => self.writer(),
            Role::Reader => self.reader(rng),
        })
    }

    fn on_commit(&mut self, client: usize, _program: &Program, _reads: &[ReadRecord]) {
        if self.roles[client].0 == Role::Skewed {
            self.skewed_commits += 1;
        }
    }

    fn on_abort(&mut self, client: usize, reason: AbortReason) {
        if self.roles[client].0 == Role::Skewed {
            *self.skewed_aborts.entry(format!("{reason:?}")).or_default() += 1;
        }
    }

    fn think(&mut self, client: usize, rng: &mut ChaCha8Rng) -> u64 {
        match self.roles[client].0 {
            Role::Skewed => rng.gen_range(1_000..20_000),
            Role::WriterB => rng.gen_range(1_000..=self.cfg.writer_gap_ns),
            Role::Reader => rng.gen_range(1_000..=self.cfg.max_pause_ns / 2),
        }
    }

    fn report(&self) -> serde_json::Value {
        json!({ "skewed_commits": self.skewed_commits, "skewed_aborts": self.skewed_aborts })
    }
}
