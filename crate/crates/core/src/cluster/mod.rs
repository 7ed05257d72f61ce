//! A simulated cluster: nodes, the event loop, clients, and the god's-eye
//! steps (fault injection and configuration commit) that need every node
//! at once.
//!
//! Node logic lives in handlers taking `(&mut Node, &mut World)`. Handlers
//! that need the whole cluster push a [`GlobalAction`], which the loop runs
//! before the next event.

mod coord;
mod node;
mod reconfig;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use node::Node;

use crate::checker::lemma::{CommittedRw, LockHold, OracleLog};
use crate::checker::{EventKind, HistoryEvent};
use crate::clock::ClockState;
use crate::failover;
use crate::sim::scenario::{Scenario, ScriptAction};
use crate::sim::{ClusterConfig, ConfigStore, DriftModel, EventQueue, NetConfig, Network, NodeId};
use crate::store::{self, Oid, RegionId, Role, StoreConfig, TxnId};
use crate::time::{DriftBound, TimeInterval, TimePoint};
use crate::txn::{AbortReason, Mutations, Program, ReadRecord, TxnMode, TxnMsg, WriteRecord, TOMBSTONE, VALUE_BYTES};
use crate::workload::Workload;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterParams {
    pub nodes: usize,
    pub seed: u64,
    pub mode: TxnMode,
    pub epsilon: DriftBound,
    /// Per-node synchronization period at full membership, in ns.
    pub sync_period: u64,
    /// Per-node overrides of the synchronization period.
    #[serde(default)]
    pub sync_period_overrides: BTreeMap<u16, u64>,
    /// Extra one-way delay on a node's clock synchronization messages only,
    /// which widens its uncertainty without slowing its transactions.
    #[serde(default)]
    pub sync_delay: BTreeMap<u16, u64>,
    pub lease_period: u64,
    pub net: NetConfig,
    pub store: StoreConfig,
    pub replication: usize,
    pub regions_per_node: usize,
    pub mutations: Mutations,
    /// Largest rate error of any node clock, in parts per billion. `None`
    /// means a tenth of epsilon.
    pub drift_ppb: Option<i64>,
    pub max_offset: u64,
    /// Undecided transactions older than this are aborted.
    pub txn_timeout: u64,
    /// How long a lock may wait for old-version memory under the block policy.
    pub block_timeout: u64,
    pub max_retries: u32,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            nodes: 4,
            seed: 0,
            mode: TxnMode::STRICT_SER,
            epsilon: DriftBound::default(),
            sync_period: 1_000_000,
            sync_period_overrides: BTreeMap::new(),
            sync_delay: BTreeMap::new(),
            lease_period: 10_000_000,
            net: NetConfig::default(),
            store: StoreConfig::default(),
            replication: 3,
            regions_per_node: 1,
            mutations: Mutations::default(),
            drift_ppb: None,
            max_offset: 1_000_000,
            txn_timeout: 20_000_000,
            block_timeout: 5_000_000,
            max_retries: 200,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes == 0 || self.nodes > 64 {
            return Err(format!("nodes must be in 1..=64, got {}", self.nodes));
        }
        if self.replication == 0 || self.replication > self.nodes {
            return Err(format!(
                "replication {} needs at least as many nodes (have {})",
                self.replication, self.nodes
            ));
        }
        if self.epsilon.ppm() == 0 {
            return Err("epsilon must be positive".into());
        }
        if self.lease_period < 10 * self.net.d_max {
            return Err("lease period must be at least ten maximum message delays".into());
        }
        if self.sync_period == 0 {
            return Err("sync period must be positive".into());
        }
        Ok(())
    }

    fn drift_ppb(&self) -> i64 {
        self.drift_ppb.unwrap_or(self.epsilon.ppm() as i64 * 100)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DisableWindow {
    pub seq: u64,
    pub cm: NodeId,
    pub start: TimePoint,
    pub end: TimePoint,
    pub ns: u64,
    pub lease_wait: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub committed: u64,
    pub committed_read_only: u64,
    pub aborted: u64,
    pub aborts_by_reason: BTreeMap<String, u64>,
    pub programs_done: u64,
    pub programs_failed: u64,
    pub too_old_programs: u64,
    pub too_old_retried_ok: u64,
    pub uncertainty_waits: u64,
    pub uncertainty_wait_ns: u64,
    pub clock_disable_windows: Vec<DisableWindow>,
    /// Reconfigurations that kept the clock master.
    pub reconfigs_without_disable: u64,
    pub reconfigs: u64,
    pub gc_advances: u64,
    pub syncs: u64,
    pub lower_regressions: u64,
    pub messages: u64,
}

impl Metrics {
    pub fn mean_uncertainty_wait_ns(&self) -> f64 {
        if self.uncertainty_waits == 0 {
            0.0
        } else {
            self.uncertainty_wait_ns as f64 / self.uncertainty_waits as f64
        }
    }

    fn count_abort(&mut self, r: AbortReason) {
        self.aborted += 1;
        let key = serde_json::to_value(r)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        *self.aborts_by_reason.entry(key).or_default() += 1;
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Msg {
    SyncReq { seq: u64, t_send: TimePoint },
    SyncResp { seq: u64, t_send: TimePoint, t_cm: TimePoint },
    LeaseReq { seq: u64, sent: TimePoint, oat_local: TimePoint, gc_local: TimePoint },
    LeaseResp { seq: u64, sent: TimePoint, oat_cm: TimePoint, gc: TimePoint },
    LeaseAck,
    Probe { id: u64 },
    ProbeAck { id: u64 },
    NewConfig { config: ClusterConfig },
    NewConfigAck { seq: u64, ff: TimePoint },
    ConfigCommit { seq: u64 },
    ConfigCommitAck { seq: u64 },
    Advance { seq: u64, ff: TimePoint },
    AdvanceAck { seq: u64 },
    SlabFree { region: RegionId, slab: u16 },
    Join,
    Txn(TxnMsg),
}

#[derive(Clone, Debug)]
pub(crate) enum Timer {
    Sync,
    Lease,
    ProbeDone { id: u64 },
    AckTimeout { seq: u64, phase: failover::ReconfigPhase },
    LeaseWaitDone { seq: u64 },
    JoinRetry,
    TxnWake { txn: TxnId, token: u32 },
    TxnWatchdog { txn: TxnId },
}

pub(crate) enum Event {
    Deliver { src: NodeId, dst: NodeId, inc: u32, msg: Msg },
    Timer { node: NodeId, inc: u32, timer: Timer },
    Script(usize),
    Client(usize),
}

#[derive(Clone, Debug)]
pub(crate) enum AttemptOutcome {
    Committed(Vec<ReadRecord>),
    Aborted(AbortReason),
}

pub(crate) enum GlobalAction {
    CommitConfig { config: ClusterConfig },
    ClientDone { client: usize, outcome: AttemptOutcome },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum GState {
    Active,
    /// Commit reported; truncation still running.
    Returned,
    Done,
    Aborted,
}

/// Cluster-wide view of one transaction attempt, kept for reconfiguration.
#[derive(Clone, Debug)]
pub(crate) struct GlobalTxn {
    pub coord: NodeId,
    pub client: usize,
    pub mode: TxnMode,
    pub regions: BTreeSet<RegionId>,
    pub allocs: Vec<Oid>,
    pub decided: Option<(TimePoint, Vec<WriteRecord>)>,
    pub unlocked_at: Option<TimePoint>,
    pub state: GState,
    /// The begin event is in the history.
    pub begun: bool,
}

pub struct World {
    pub params: ClusterParams,
    pub(crate) q: EventQueue<Event>,
    pub(crate) net: Network,
    pub(crate) rng: ChaCha8Rng,
    pub history: Vec<HistoryEvent>,
    pub oracle: OracleLog,
    pub metrics: Metrics,
    pub config_store: ConfigStore,
    /// Last configuration applied by the god's-eye commit.
    pub applied: ClusterConfig,
    pub(crate) registry: BTreeMap<TxnId, GlobalTxn>,
    pub(crate) global: Vec<GlobalAction>,
    /// Start of the current clock-disable window.
    pub(crate) window_start: Option<TimePoint>,
    incs: Vec<u32>,
    /// Messages waiting for a partition to heal.
    held: Vec<(NodeId, NodeId, u32, Msg)>,
    next_txn: TxnId,
    next_probe: u64,
}

impl World {
    pub fn now(&self) -> TimePoint {
        self.q.now()
    }

    /// Sends over a reliable channel: crashed endpoints lose the message, a
    /// partition only holds it back until the link is repaired.
    pub(crate) fn send(&mut self, src: NodeId, dst: NodeId, msg: Msg) {
        self.metrics.messages += 1;
        let inc = self.incs[dst.0 as usize];
        self.transmit(src, dst, inc, msg);
    }

    fn transmit(&mut self, src: NodeId, dst: NodeId, inc: u32, msg: Msg) {
        if self.net.is_crashed(src) || self.net.is_crashed(dst) {
            self.net.dropped += 1;
            return;
        }
        if self.net.is_cut(src, dst) {
            self.held.push((src, dst, inc, msg));
            return;
        }
        let mut d = self.net.delay(src, dst);
        if matches!(msg, Msg::SyncReq { .. } | Msg::SyncResp { .. }) {
            let extra = |n: NodeId| self.params.sync_delay.get(&n.0).copied().unwrap_or(0);
            d += extra(src).max(extra(dst));
        }
        let at = self.now() + d;
        self.q.schedule(at, Event::Deliver { src, dst, inc, msg });
    }

    /// Resends held messages whose link is repaired.
    fn release_held(&mut self) {
        for (src, dst, inc, msg) in std::mem::take(&mut self.held) {
            if inc == self.incs[dst.0 as usize] {
                self.transmit(src, dst, inc, msg);
            }
        }
    }

    pub(crate) fn send_txn(&mut self, src: NodeId, dst: NodeId, msg: TxnMsg) {
        self.send(src, dst, Msg::Txn(msg));
    }

    /// Schedules a timer `local_delay` ticks ahead on the node's own clock.
    pub(crate) fn timer(&mut self, n: &Node, local_delay: u64, timer: Timer) {
        let now = self.now();
        let target = n.drift.local(now) + local_delay;
        let at = n.drift.true_at(target).max(now + 1);
        self.q.schedule(
            at,
            Event::Timer {
                node: n.id,
                inc: n.inc,
                timer,
            },
        );
    }

    pub(crate) fn new_txn_id(&mut self) -> TxnId {
        self.next_txn += 1;
        self.next_txn
    }

    pub(crate) fn new_probe_id(&mut self) -> u64 {
        self.next_probe += 1;
        self.next_probe
    }

    pub(crate) fn record(&mut self, e: HistoryEvent) {
        self.history.push(e);
    }

    fn emit_write_commit(&mut self, txn: TxnId, node: NodeId, mode: TxnMode, start: TimePoint, wts: TimePoint, writes: &[WriteRecord]) {
        let now = self.now();
        let mut e = HistoryEvent::new(EventKind::WriteCommit, txn, node, mode, start.min(now), now);
        e.wts = Some(wts);
        e.writes = writes
            .iter()
            .map(|w| (w.oid, if w.allocated { w.value } else { TOMBSTONE }))
            .collect();
        self.record(e);
    }

    /// Records an abort, unless the attempt died before its begin event, in
    /// which case it never happened as far as the history is concerned.
    pub(crate) fn emit_abort(&mut self, txn: TxnId, node: NodeId, mode: TxnMode) {
        if !self.registry.get(&txn).is_some_and(|g| g.begun) {
            return;
        }
        let now = self.now();
        self.record(HistoryEvent::new(EventKind::Abort, txn, node, mode, now, now));
    }
}

#[derive(Clone, Debug)]
struct ClientState {
    node: NodeId,
    program: Option<Program>,
    attempts: u32,
    saw_too_old: bool,
    active: bool,
    finished: bool,
}

/// When to stop issuing programs and when to give up entirely.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RunLimits {
    pub programs: u64,
    pub issue_until: TimePoint,
    pub hard_stop: TimePoint,
    pub warmup: TimePoint,
}

impl Default for RunLimits {
    fn default() -> Self {
        RunLimits {
            programs: 300,
            issue_until: TimePoint::from_millis(500),
            hard_stop: TimePoint::from_millis(2_000),
            warmup: TimePoint::from_millis(2),
        }
    }
}

pub struct Cluster {
    pub nodes: Vec<Node>,
    pub w: World,
    scenario: Scenario,
    clients: Vec<ClientState>,
    issued: u64,
    /// Heals waiting for the node's removal to commit.
    deferred_heals: Vec<NodeId>,
}

impl Cluster {
    pub fn new(params: ClusterParams, scenario: Scenario) -> Result<Self, String> {
        params.validate()?;
        scenario.validate(params.nodes).map_err(|e| e.to_string())?;
        let ids: Vec<NodeId> = (0..params.nodes as u16).map(NodeId).collect();
        let mut drift_rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5eed_d41f);
        let regions = failover::initial_regions(&ids, params.regions_per_node, params.replication);
        let config = ClusterConfig {
            seq: 1,
            members: ids.iter().copied().collect(),
            cm: NodeId(0),
            regions,
        };
        let mut nodes = Vec::with_capacity(ids.len());
        for &id in &ids {
            let drift = DriftModel::random(&mut drift_rng, params.drift_ppb(), params.max_offset);
            nodes.push(Node::new(id, 0, drift, &params, config.clone(), true));
        }
        for (&r, p) in &config.regions {
            nodes[p.primary.0 as usize].store.add_region(r, Role::Primary);
            for b in &p.backups {
                nodes[b.0 as usize].store.add_region(r, Role::Backup);
            }
        }
        let mut w = World {
            q: EventQueue::default(),
            net: Network::new(params.net.clone(), ChaCha8Rng::seed_from_u64(params.seed ^ 0x0e7_0e7)),
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            history: Vec::new(),
            oracle: OracleLog::default(),
            metrics: Metrics::default(),
            config_store: ConfigStore::new(config.clone()),
            applied: config,
            registry: BTreeMap::new(),
            global: Vec::new(),
            window_start: None,
            incs: vec![0; ids.len()],
            held: Vec::new(),
            next_txn: 0,
            next_probe: 0,
            params,
        };
        // node 0 starts as clock master with global time zero at true time zero
        let cm = &mut nodes[0];
        let local0 = cm.drift.local(TimePoint::ZERO);
        cm.clock.enable_master(TimePoint::ZERO, local0);
        cm.needs_resync = false;
        cm.gc.admitted = true;
        w.oracle
            .push_lineage(TimePoint::ZERO, cm.id, cm.clock.clone(), cm.drift);
        for n in &mut nodes {
            n.reset_member_seen(TimePoint::ZERO);
            node::start_timers(n, &mut w);
        }
        for (i, _) in scenario.steps.iter().enumerate() {
            w.q.schedule(scenario.steps[i].at_true_time, Event::Script(i));
        }
        Ok(Cluster {
            nodes,
            w,
            scenario,
            clients: Vec::new(),
            issued: 0,
            deferred_heals: Vec::new(),
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.w.applied
    }

    pub fn regions(&self) -> Vec<RegionId> {
        self.w.applied.regions.keys().copied().collect()
    }

    /// Creates an object with `value` at version 0 on every replica of
    /// `region`.
    pub fn seed_object(&mut self, region: RegionId, value: i64) -> Result<Oid, String> {
        let p = self.w.applied.regions.get(&region).ok_or(format!("no region {region}"))?.clone();
        let data = store::encode_value(value, VALUE_BYTES);
        let oid = self.nodes[p.primary.0 as usize]
            .store
            .seed_object(region, data.clone())
            .map_err(|e| e.to_string())?;
        for b in &p.backups {
            self.nodes[b.0 as usize]
                .store
                .backup_apply(oid, TimePoint::ZERO, data.clone(), true);
        }
        Ok(oid)
    }

    pub fn is_alive(&self, n: NodeId) -> bool {
        self.nodes.get(n.0 as usize).is_some_and(|x| x.alive)
    }

    /// Runs `wl` until it has completed `limits.programs` programs (or the
    /// issue deadline passed) and the cluster is quiet, or until the hard
    /// stop. Unfinished transactions are then resolved so that the history
    /// is complete.
    pub fn run(&mut self, wl: &mut dyn Workload, limits: RunLimits) {
        let homes = wl.clients(self);
        self.clients = homes
            .iter()
            .map(|&node| ClientState {
                node,
                program: None,
                attempts: 0,
                saw_too_old: false,
                active: false,
                finished: false,
            })
            .collect();
        for i in 0..self.clients.len() {
            let jitter = self.w.rng.gen_range(0..50_000u64);
            self.w.q.schedule(limits.warmup + jitter, Event::Client(i));
        }
        let last_script = self
            .scenario
            .steps
            .last()
            .map_or(TimePoint::ZERO, |s| s.at_true_time);
        let mut steps: u64 = 0;
        while let Some(t) = self.w.q.peek_time() {
            if t > limits.hard_stop {
                break;
            }
            let (_, ev) = self.w.q.pop().expect("peeked");
            self.dispatch(ev, wl, &limits);
            self.run_global(wl, &limits);
            steps += 1;
            if steps.is_multiple_of(64) && self.quiescent() && self.w.now() >= last_script {
                break;
            }
        }
        self.finalize();
    }

    /// Why the run has not settled yet, for diagnostics.
    pub fn pending(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, c) in self.clients.iter().enumerate() {
            if !c.finished {
                out.push(format!("client {i} on {} active={}", c.node, c.active));
            }
        }
        for (id, g) in &self.w.registry {
            if g.state == GState::Active {
                out.push(format!("txn {id} active on {}", g.coord));
            }
        }
        for n in &self.nodes {
            if n.alive && n.reconfig.is_some() {
                out.push(format!("{} reconfiguring", n.id));
            }
        }
        for n in &self.deferred_heals {
            out.push(format!("heal of {n} deferred"));
        }
        out
    }

    fn quiescent(&self) -> bool {
        self.clients.iter().all(|c| c.finished)
            && self
                .w
                .registry
                .values()
                .all(|g| matches!(g.state, GState::Done | GState::Aborted | GState::Returned))
            && self.nodes.iter().all(|n| !n.alive || n.reconfig.is_none())
            && self.deferred_heals.is_empty()
    }

    fn dispatch(&mut self, ev: Event, wl: &mut dyn Workload, limits: &RunLimits) {
        match ev {
            Event::Deliver { src, dst, inc, msg } => {
                let n = &mut self.nodes[dst.0 as usize];
                if !n.alive || n.inc != inc || self.w.net.is_crashed(src) || self.w.net.is_crashed(dst) {
                    self.w.net.dropped += 1;
                    return;
                }
                if self.w.net.is_cut(src, dst) {
                    self.w.held.push((src, dst, inc, msg));
                    return;
                }
                node::on_message(n, &mut self.w, src, msg);
            }
            Event::Timer { node, inc, timer } => {
                let n = &mut self.nodes[node.0 as usize];
                if !n.alive || n.inc != inc {
                    return;
                }
                node::on_timer(n, &mut self.w, timer);
            }
            Event::Script(i) => self.script_step(i),
            Event::Client(i) => self.client_step(i, wl, limits),
        }
    }

    fn run_global(&mut self, wl: &mut dyn Workload, limits: &RunLimits) {
        while !self.w.global.is_empty() {
            let actions = std::mem::take(&mut self.w.global);
            for a in actions {
                match a {
                    GlobalAction::CommitConfig { config } => self.apply_config(config),
                    GlobalAction::ClientDone { client, outcome } => self.client_done(client, outcome, wl, limits),
                }
            }
        }
    }

    fn script_step(&mut self, i: usize) {
        let step = self.scenario.steps[i].clone();
        let args = &step.args;
        match step.action {
            ScriptAction::Crash => {
                if let Some(n) = args.node {
                    self.crash(n);
                }
            }
            ScriptAction::Heal => {
                if let Some(n) = args.node {
                    self.heal(n);
                }
            }
            ScriptAction::Partition => self.w.net.partition(&args.a, &args.b),
            ScriptAction::Unpartition => {
                if args.a.is_empty() && args.b.is_empty() {
                    self.w.net.unpartition_all();
                } else {
                    self.w.net.unpartition(&args.a, &args.b);
                }
                self.w.release_held();
                self.retry_deferred_heals();
            }
            ScriptAction::Slow => {
                if let Some(n) = args.node {
                    self.w.net.set_slow(n, args.extra_ns);
                }
            }
        }
    }

    pub fn crash(&mut self, n: NodeId) {
        let node = &mut self.nodes[n.0 as usize];
        node.alive = false;
        self.w.net.crash(n);
    }

    /// Brings a node back as a fresh process that asks to join. A node
    /// still in the configuration must be removed first, so the heal waits.
    /// Healing a running node does nothing.
    pub fn heal(&mut self, n: NodeId) {
        if self.nodes[n.0 as usize].alive {
            self.deferred_heals.retain(|&d| d != n);
            return;
        }
        if self.w.applied.members.contains(&n) {
            if !self.deferred_heals.contains(&n) {
                self.deferred_heals.push(n);
            }
            return;
        }
        self.w.net.heal(n);
        let i = n.0 as usize;
        let inc = self.nodes[i].inc + 1;
        self.w.incs[i] = inc;
        let drift = self.nodes[i].drift;
        let mut fresh = Node::new(n, inc, drift, &self.w.params, self.w.config_store.read().clone(), false);
        fresh.reset_member_seen(fresh.local(self.w.now()));
        self.nodes[i] = fresh;
        node::start_timers(&mut self.nodes[i], &mut self.w);
        reconfig::request_join(&mut self.nodes[i], &mut self.w);
    }

    fn retry_deferred_heals(&mut self) {
        let pending = std::mem::take(&mut self.deferred_heals);
        for n in pending {
            self.heal(n);
        }
    }

    fn pick_node(&mut self, preferred: NodeId) -> Option<NodeId> {
        let ok = |c: &Cluster, n: NodeId| {
            let x = &c.nodes[n.0 as usize];
            x.alive && x.joined && c.w.applied.members.contains(&n)
        };
        if ok(self, preferred) {
            return Some(preferred);
        }
        let cands: Vec<NodeId> = self.w.applied.members.iter().copied().filter(|&n| ok(self, n)).collect();
        if cands.is_empty() {
            return None;
        }
        Some(cands[self.w.rng.gen_range(0..cands.len())])
    }

    fn client_step(&mut self, i: usize, wl: &mut dyn Workload, limits: &RunLimits) {
        if self.clients[i].active || self.clients[i].finished {
            return;
        }
        if self.clients[i].program.is_none() {
            if self.issued >= limits.programs || self.w.now() >= limits.issue_until {
                self.clients[i].finished = true;
                return;
            }
            let Some(p) = wl.next(i, &mut self.w.rng, &self.w.applied) else {
                self.clients[i].finished = true;
                return;
            };
            self.issued += 1;
            let c = &mut self.clients[i];
            c.program = Some(p);
            c.attempts = 0;
            c.saw_too_old = false;
        }
        let Some(home) = self.pick_node(self.clients[i].node) else {
            self.w.q.schedule(self.w.now() + 1_000_000, Event::Client(i));
            return;
        };
        self.clients[i].node = home;
        self.clients[i].active = true;
        let program = self.clients[i].program.clone().expect("set above");
        let mode = self.w.params.mode;
        coord::start(&mut self.nodes[home.0 as usize], &mut self.w, i, program, mode);
    }

    fn client_done(&mut self, i: usize, outcome: AttemptOutcome, wl: &mut dyn Workload, limits: &RunLimits) {
        let now = self.w.now();
        let c = &mut self.clients[i];
        c.active = false;
        match outcome {
            AttemptOutcome::Committed(reads) => {
                let program = c.program.take().expect("program in flight");
                self.w.metrics.programs_done += 1;
                if c.saw_too_old {
                    self.w.metrics.too_old_retried_ok += 1;
                }
                wl.on_commit(i, &program, &reads);
                let think = wl.think(i, &mut self.w.rng);
                self.w.q.schedule(now + think.max(1), Event::Client(i));
            }
            AttemptOutcome::Aborted(reason) => {
                wl.on_abort(i, reason);
                c.attempts += 1;
                if reason == AbortReason::TooOld && !c.saw_too_old {
                    c.saw_too_old = true;
                    self.w.metrics.too_old_programs += 1;
                }
                if c.attempts > self.w.params.max_retries {
                    c.program = None;
                    self.w.metrics.programs_failed += 1;
                }
                let scale = c.attempts.min(16) as u64;
                let backoff = self.w.rng.gen_range(10_000..100_000u64) * scale;
                self.w.q.schedule(now + backoff, Event::Client(i));
            }
        }
        let _ = limits;
    }

    /// Applies a committed configuration everywhere: resolves transactions
    /// caught by the change, promotes backups, seeds new replicas, kills
    /// removed nodes and updates every node's view.
    fn apply_config(&mut self, new: ClusterConfig) {
        let old = self.w.applied.clone();
        if new.seq <= old.seq {
            return;
        }
        let now = self.w.now();
        let affected = failover::affected_regions(&old, &new);
        let gone: BTreeSet<NodeId> = old
            .members
            .iter()
            .copied()
            .filter(|n| !new.members.contains(n) || !self.nodes[n.0 as usize].alive)
            .collect();

        // promote backups of regions whose primary moved
        for r in &affected {
            let Some(p) = new.regions.get(r) else { continue };
            let np = &mut self.nodes[p.primary.0 as usize];
            if np.alive && np.store.role(*r) == Some(Role::Backup) {
                np.store.promote(*r);
            }
        }

        // resolve transactions caught by the change
        let ids: Vec<TxnId> = self
            .w
            .registry
            .iter()
            .filter(|(_, g)| g.state == GState::Active || g.state == GState::Returned)
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            let g = self.w.registry[&id].clone();
            let coord_gone = gone.contains(&g.coord) || !new.members.contains(&g.coord);
            let touches = g.regions.iter().any(|r| affected.contains(r));
            if !(coord_gone || touches) {
                continue;
            }
            match g.decided.clone() {
                Some((wts, writes)) => self.force_commit(id, wts, &writes, &new),
                None => self.force_abort(id),
            }
        }

        // seed new replicas and drop stale ones
        for r in &affected {
            let Some(p) = new.regions.get(r) else { continue };
            let snap = {
                let prim = &self.nodes[p.primary.0 as usize];
                if !prim.alive {
                    continue;
                }
                prim.store.snapshot_region(*r)
            };
            let Some(snap) = snap else { continue };
            for b in &p.backups {
                let bn = &mut self.nodes[b.0 as usize];
                if bn.alive && bn.store.role(*r).is_none() {
                    bn.store.install_snapshot(*r, Role::Backup, &snap);
                }
            }
            let keep: BTreeSet<NodeId> = p.replicas().collect();
            for n in self.nodes.iter_mut() {
                if !keep.contains(&n.id) && n.store.role(*r).is_some() {
                    n.store.drop_region(*r);
                }
            }
        }

        // removed nodes that are still running are shut down
        for n in old.members.iter().filter(|n| !new.members.contains(n)) {
            if self.nodes[n.0 as usize].alive {
                self.crash(*n);
            }
        }

        for n in self.nodes.iter_mut().filter(|n| n.alive && new.members.contains(&n.id)) {
            n.config = new.clone();
            n.joined = true;
            if n.id == new.cm {
                let local = n.local(now);
                n.reset_member_seen(local);
                n.agg.drop_departed(&new.members);
            }
        }
        self.w.applied = new;
        self.w.metrics.reconfigs += 1;
        self.retry_deferred_heals();
        // clients bound to dead nodes move on their next attempt
    }

    fn force_commit(&mut self, id: TxnId, wts: TimePoint, writes: &[WriteRecord], cfg: &ClusterConfig) {
        let now = self.w.now();
        for wr in writes {
            let Some(p) = cfg.regions.get(&wr.oid.region()) else { continue };
            let data = store::encode_value(wr.value, VALUE_BYTES);
            let prim = &mut self.nodes[p.primary.0 as usize];
            if prim.alive && prim.store.install_commit(wr.oid, id, wts, data.clone(), wr.allocated) {
                self.w.oracle.record_install(wr.oid, wts, id);
            }
            for b in &p.backups {
                let bn = &mut self.nodes[b.0 as usize];
                if bn.alive {
                    bn.store.backup_apply(wr.oid, wts, data.clone(), wr.allocated);
                }
            }
        }
        for n in self.nodes.iter_mut() {
            n.backup_pending.remove(&id);
            n.closed.insert(id);
        }
        let g = self.w.registry.get_mut(&id).expect("registered");
        g.unlocked_at.get_or_insert(now);
        let g = g.clone();
        let coord_alive = self.nodes[g.coord.0 as usize].alive;
        let c = if coord_alive {
            self.nodes[g.coord.0 as usize].coords.remove(&id)
        } else {
            None
        };
        if g.state == GState::Active {
            let start = c.as_ref().map_or(now, |c| c.commit_call);
            self.w.emit_write_commit(id, g.coord, g.mode, start, wts, writes);
            self.w.metrics.committed += 1;
            if let Some(c) = &c {
                self.w.oracle.committed.push(CommittedRw {
                    txn: id,
                    mode: g.mode,
                    rts: c.ctx.rts,
                    wts,
                    reads: c.ctx.read_set.keys().copied().collect(),
                    writes: writes.iter().map(|w| w.oid).collect(),
                    allocs: c.ctx.allocs.iter().copied().collect(),
                });
                if let Some(locked_at) = c.locked_at {
                    self.w.oracle.lock_holds.push(LockHold {
                        txn: id,
                        mode: g.mode,
                        locked_at,
                        unlocked_at: g.unlocked_at.unwrap_or(now),
                        wts,
                    });
                }
                self.w.global.push(GlobalAction::ClientDone {
                    client: g.client,
                    outcome: AttemptOutcome::Committed(c.ctx.reads.clone()),
                });
            } else {
                self.client_lost(g.client);
            }
        }
        self.w.registry.get_mut(&id).expect("registered").state = GState::Done;
    }

    fn force_abort(&mut self, id: TxnId) {
        let g = self.w.registry[&id].clone();
        for n in self.nodes.iter_mut() {
            n.store.abort_all(id);
            for &o in &g.allocs {
                n.store.slab_release(o);
            }
            n.backup_pending.remove(&id);
            n.blocked.retain(|b| b.txn != id);
            n.closed.insert(id);
        }
        let coord_alive = self.nodes[g.coord.0 as usize].alive;
        let had = coord_alive && self.nodes[g.coord.0 as usize].coords.remove(&id).is_some();
        self.w.emit_abort(id, g.coord, g.mode);
        self.w.metrics.count_abort(AbortReason::Reconfig);
        if had {
            self.w.global.push(GlobalAction::ClientDone {
                client: g.client,
                outcome: AttemptOutcome::Aborted(AbortReason::Reconfig),
            });
        } else {
            self.client_lost(g.client);
        }
        self.w.registry.get_mut(&id).expect("registered").state = GState::Aborted;
    }

    /// The client's coordinator died; it retries elsewhere.
    fn client_lost(&mut self, client: usize) {
        if let Some(c) = self.clients.get(client) {
            if c.active {
                self.w.global.push(GlobalAction::ClientDone {
                    client,
                    outcome: AttemptOutcome::Aborted(AbortReason::Reconfig),
                });
            }
        }
    }

    /// Resolves everything still in flight so the history has no open
    /// transactions: decided ones commit, the rest abort.
    fn finalize(&mut self) {
        let ids: Vec<TxnId> = self
            .w
            .registry
            .iter()
            .filter(|(_, g)| g.state == GState::Active)
            .map(|(id, _)| *id)
            .collect();
        let cfg = self.w.applied.clone();
        for id in ids {
            match self.w.registry[&id].decided.clone() {
                Some((wts, writes)) => self.force_commit(id, wts, &writes, &cfg),
                None => self.force_abort(id),
            }
        }
        self.w.global.clear();
    }

    /// Oracle global time now.
    pub fn global_time(&self) -> Option<TimePoint> {
        self.w.oracle.global_time(self.w.now())
    }

    /// Interval of a node at the current instant, if it has one.
    pub fn interval_of(&self, n: NodeId) -> Option<TimeInterval> {
        let x = self.nodes.get(n.0 as usize)?;
        x.clock.time(x.local(self.w.now())).ok()
    }

    pub fn poisoned_reads(&self) -> u64 {
        self.nodes.iter().map(|n| n.store.stats.poisoned_reads).sum()
    }

    pub fn store_stats(&self) -> store::StoreStats {
        let mut s = store::StoreStats::default();
        for n in &self.nodes {
            let t = &n.store.stats;
            s.poisoned_reads += t.poisoned_reads;
            s.old_versions_created += t.old_versions_created;
            s.truncations += t.truncations;
            s.exhausted += t.exhausted;
            s.blocks_freed += t.blocks_freed;
            s.slabs_reused += t.slabs_reused;
            s.ts_regressions += t.ts_regressions;
        }
        s
    }

    /// Clock state of the current clock master.
    pub fn master_clock(&self) -> &ClockState {
        &self.nodes[self.w.applied.cm.0 as usize].clock
    }
}
