//! Per-node state and the clock, lease and GC handlers.

use std::collections::{BTreeMap, BTreeSet};

use super::{coord, reconfig, ClusterParams, Msg, Timer, World};
use crate::clock::{ClockState, SyncRecord};
use crate::gc::{GcAggregator, GcState};
use crate::sim::{ClusterConfig, DriftModel, NodeId};
use crate::store::{Role, Store, TxnId};
use crate::time::{TimeInterval, TimePoint};
use crate::txn::WriteRecord;

pub struct Node {
    pub id: NodeId,
    /// Incarnation; bumped when the node restarts after a crash.
    pub inc: u32,
    pub alive: bool,
    pub drift: DriftModel,
    pub clock: ClockState,
    pub store: Store,
    pub gc: GcState,
    pub(crate) agg: GcAggregator,
    pub config: ClusterConfig,
    /// A configuration announced to this node but not yet committed.
    pub(crate) pending: Option<ClusterConfig>,
    /// False for a restarted node until a configuration includes it again.
    pub joined: bool,
    pub(crate) needs_resync: bool,
    sync_seq: u64,
    lease_seq: u64,
    /// Local time the current lease ends.
    lease_expiry: Option<TimePoint>,
    /// Local time of the last word from the CM.
    pub(crate) cm_contact: TimePoint,
    /// At the CM: local time each member last asked for a lease.
    member_seen: BTreeMap<NodeId, TimePoint>,
    last_lower: TimePoint,
    pub(crate) reconfig: Option<reconfig::Attempt>,
    pub(crate) coords: BTreeMap<TxnId, coord::Coord>,
    pub(crate) backup_pending: BTreeMap<TxnId, (TimePoint, Vec<WriteRecord>)>,
    /// Transactions this node must no longer accept work for.
    pub(crate) closed: BTreeSet<TxnId>,
    pub(crate) blocked: Vec<coord::BlockedLock>,
}

impl Node {
    pub(crate) fn new(id: NodeId, inc: u32, drift: DriftModel, p: &ClusterParams, config: ClusterConfig, joined: bool) -> Self {
        Node {
            id,
            inc,
            alive: true,
            drift,
            clock: ClockState::new(p.epsilon),
            store: Store::new(p.store.clone()),
            gc: GcState::default(),
            agg: GcAggregator::default(),
            config,
            pending: None,
            joined,
            needs_resync: true,
            sync_seq: 0,
            lease_seq: 0,
            lease_expiry: None,
            cm_contact: TimePoint::ZERO,
            member_seen: BTreeMap::new(),
            last_lower: TimePoint::ZERO,
            reconfig: None,
            coords: BTreeMap::new(),
            backup_pending: BTreeMap::new(),
            closed: BTreeSet::new(),
            blocked: Vec::new(),
        }
    }

    pub fn local(&self, now: TimePoint) -> TimePoint {
        self.drift.local(now)
    }

    pub fn is_cm(&self) -> bool {
        self.config.cm == self.id
    }

    pub(crate) fn cm_change_pending(&self) -> bool {
        self.pending.as_ref().is_some_and(|p| p.cm != self.config.cm)
    }

    pub(crate) fn reset_member_seen(&mut self, local: TimePoint) {
        self.cm_contact = local;
        self.member_seen = self.config.members.iter().map(|&m| (m, local)).collect();
    }

    fn lease_len(p: &ClusterParams) -> u64 {
        p.lease_period - 2 * (p.lease_period as u128 * p.epsilon.ppm() as u128 / 1_000_000) as u64
    }

    /// A CM that has not heard from some member for a whole lease cannot
    /// know whether it has been replaced, and stops serving time.
    pub fn fenced(&self, local: TimePoint, p: &ClusterParams) -> bool {
        let len = Self::lease_len(p);
        self.is_cm()
            && self
                .config
                .members
                .iter()
                .filter(|&&m| m != self.id)
                .any(|m| self.member_seen.get(m).is_none_or(|&s| local.since(s) > len))
    }

    fn lease_ok(&self, local: TimePoint, p: &ClusterParams) -> bool {
        if self.is_cm() {
            !self.fenced(local, p)
        } else {
            self.lease_expiry.is_some_and(|e| local < e)
        }
    }

    pub fn can_issue(&self, local: TimePoint, p: &ClusterParams) -> bool {
        self.alive && self.joined && self.clock.is_enabled() && self.gc.admitted && self.lease_ok(local, p)
    }

    /// The clock interval for a timestamp, if this node may issue one now.
    pub(crate) fn interval(&mut self, w: &mut World) -> Option<TimeInterval> {
        let now = w.now();
        let local = self.local(now);
        if !self.can_issue(local, &w.params) {
            return None;
        }
        let iv = self.clock.time(local).ok()?;
        w.oracle.check_interval(now, iv);
        if iv.lower < self.last_lower {
            w.metrics.lower_regressions += 1;
        }
        self.last_lower = self.last_lower.max(iv.lower);
        Some(iv)
    }

    fn sync_period(&self, p: &ClusterParams) -> u64 {
        if let Some(&o) = p.sync_period_overrides.get(&self.id.0) {
            return o;
        }
        // the aggregate request rate at the CM stays fixed as membership changes
        let members = self.config.members.len().max(1) as u64;
        (p.sync_period * members / p.nodes as u64).max(10_000)
    }

    /// Lower bound usable for the oldest-active computation even while the
    /// clock is disabled.
    fn safe_lower(&self, local: TimePoint) -> TimePoint {
        self.clock
            .bounds(local)
            .map(|iv| iv.lower)
            .unwrap_or(self.gc.oat_local)
    }

    fn active_rts(&self) -> Vec<TimePoint> {
        self.coords.values().filter(|c| c.rts_ready).map(|c| c.ctx.rts).collect()
    }
}

pub(crate) fn start_timers(n: &mut Node, w: &mut World) {
    use rand::Rng;
    let s = w.rng.gen_range(1_000..20_000u64);
    w.timer(n, s, Timer::Sync);
    let l = w.rng.gen_range(1_000..(w.params.lease_period / 5).max(2_000));
    w.timer(n, l, Timer::Lease);
}

pub(crate) fn on_timer(n: &mut Node, w: &mut World, t: Timer) {
    match t {
        Timer::Sync => {
            send_sync(n, w);
            let p = n.sync_period(&w.params);
            w.timer(n, p, Timer::Sync);
        }
        Timer::Lease => {
            lease_tick(n, w);
            let p = w.params.lease_period / 5;
            w.timer(n, p, Timer::Lease);
        }
        Timer::ProbeDone { id } => reconfig::on_probe_done(n, w, id),
        Timer::AckTimeout { seq, phase } => reconfig::on_ack_timeout(n, w, seq, phase),
        Timer::LeaseWaitDone { seq } => reconfig::on_lease_wait_done(n, w, seq),
        Timer::JoinRetry => reconfig::on_join_retry(n, w),
        Timer::TxnWake { txn, token } => coord::on_wake(n, w, txn, token),
        Timer::TxnWatchdog { txn } => coord::on_watchdog(n, w, txn),
    }
}

pub(crate) fn on_message(n: &mut Node, w: &mut World, src: NodeId, msg: Msg) {
    let local = n.local(w.now());
    match msg {
        Msg::SyncReq { seq, t_send } => {
            if n.is_cm() && !n.fenced(local, &w.params) {
                if let Some(t_cm) = n.clock.master_time(local) {
                    w.send(n.id, src, Msg::SyncResp { seq, t_send, t_cm });
                }
            }
        }
        Msg::SyncResp { seq, t_send, t_cm } => on_sync_resp(n, w, src, seq, t_send, t_cm),
        Msg::LeaseReq { seq, sent, oat_local, gc_local } => {
            if !n.is_cm() {
                return;
            }
            n.member_seen.insert(src, local);
            n.agg.report(src, oat_local, gc_local);
            if n.fenced(local, &w.params) || !n.config.members.contains(&src) {
                return;
            }
            let (oat_cm, gc) = n.agg.recompute(&n.config.members);
            w.send(n.id, src, Msg::LeaseResp { seq, sent, oat_cm, gc });
        }
        Msg::LeaseResp { seq, sent, oat_cm, gc } => {
            if src != n.config.cm || seq != n.lease_seq || n.cm_change_pending() {
                return;
            }
            n.lease_expiry = Some(sent + Node::lease_len(&w.params));
            n.cm_contact = local;
            if n.gc.on_lease_response(oat_cm, gc) {
                gc_tick(n, w);
            }
            w.send(n.id, src, Msg::LeaseAck);
        }
        Msg::LeaseAck => {
            if n.is_cm() {
                n.member_seen.insert(src, local);
            }
        }
        Msg::SlabFree { region, slab } => {
            if n.store.role(region) == Some(Role::Backup) {
                n.store.free_slab(region, slab);
            }
        }
        Msg::Probe { id } => w.send(n.id, src, Msg::ProbeAck { id }),
        Msg::ProbeAck { id } => reconfig::on_probe_ack(n, src, id),
        Msg::NewConfig { config } => reconfig::on_new_config(n, w, src, config),
        Msg::NewConfigAck { seq, ff } => reconfig::on_new_config_ack(n, w, src, seq, ff),
        Msg::ConfigCommit { seq } => reconfig::on_config_commit(n, w, src, seq),
        Msg::ConfigCommitAck { seq } => reconfig::on_config_commit_ack(n, w, src, seq),
        Msg::Advance { seq, ff } => {
            n.clock.raise_ff(ff);
            w.send(n.id, src, Msg::AdvanceAck { seq });
        }
        Msg::AdvanceAck { seq } => reconfig::on_advance_ack(n, w, src, seq),
        Msg::Join => reconfig::on_join(n, w, src),
        Msg::Txn(m) => coord::on_txn_msg(n, w, src, m),
    }
}

pub(crate) fn send_sync(n: &mut Node, w: &mut World) {
    if n.is_cm() || !n.alive {
        return;
    }
    n.sync_seq += 1;
    let t_send = n.local(w.now());
    let seq = n.sync_seq;
    w.send(n.id, n.config.cm, Msg::SyncReq { seq, t_send });
}

fn on_sync_resp(n: &mut Node, w: &mut World, src: NodeId, seq: u64, t_send: TimePoint, t_cm: TimePoint) {
    // an announced CM change freezes the old lineage here
    if seq != n.sync_seq || src != n.config.cm || n.is_cm() || n.cm_change_pending() {
        return;
    }
    let rec = SyncRecord::new(t_send, n.local(w.now()), t_cm);
    if n.needs_resync || !n.clock.is_enabled() {
        n.clock.resync_and_enable(rec);
        n.needs_resync = false;
    } else {
        n.clock.on_sync_response(rec);
    }
    w.metrics.syncs += 1;
}

pub(crate) fn send_lease_req(n: &mut Node, w: &mut World) {
    if n.is_cm() || !n.alive {
        return;
    }
    let local = n.local(w.now());
    n.lease_seq += 1;
    let lower = n.safe_lower(local);
    let active = n.active_rts();
    let oat_local = n.gc.compute_oat_local(lower, active);
    let msg = Msg::LeaseReq {
        seq: n.lease_seq,
        sent: local,
        oat_local,
        gc_local: n.gc.gc_local,
    };
    w.send(n.id, n.config.cm, msg);
}

fn lease_tick(n: &mut Node, w: &mut World) {
    let local = n.local(w.now());
    coord::retry_blocked(n, w);
    if n.is_cm() {
        let lease = w.params.lease_period;
        let suspects: BTreeSet<NodeId> = n
            .config
            .members
            .iter()
            .copied()
            .filter(|&m| m != n.id && n.member_seen.get(&m).is_none_or(|&s| local.since(s) > lease))
            .collect();
        if !suspects.is_empty() {
            reconfig::suspect(n, w, suspects);
        }
        let lower = n.safe_lower(local);
        let active = n.active_rts();
        let oat = n.gc.compute_oat_local(lower, active);
        n.agg.report(n.id, oat, n.gc.gc_local);
        if !n.fenced(local, &w.params) && n.clock.is_enabled() {
            let (oat_cm, gc) = n.agg.recompute(&n.config.members);
            if n.gc.on_lease_response(oat_cm, gc) {
                gc_tick(n, w);
            }
        }
        return;
    }
    if !n.joined {
        return;
    }
    send_lease_req(n, w);
    if local.since(n.cm_contact) > w.params.lease_period {
        reconfig::suspect(n, w, [n.config.cm].into_iter().collect());
    }
}

/// Frees what the new GC point allows.
pub(crate) fn gc_tick(n: &mut Node, w: &mut World) {
    w.metrics.gc_advances += 1;
    let gc = n.gc.gc;
    n.store.try_free_blocks(None, gc);
    for (region, slab) in n.store.advance_slab_reuse(gc) {
        for &b in n.config.backups_of(region) {
            w.send(n.id, b, Msg::SlabFree { region, slab });
        }
    }
    coord::retry_blocked(n, w);
}
