//! Message-driven reconfiguration: suspicion, probing, the configuration
//! store race, NEW-CONFIG, the lease wait, fast-forward, commit and
//! ADVANCE. Planning decisions come from [`crate::failover`].

use std::collections::BTreeSet;

use super::node::{self, Node};
use super::{DisableWindow, GlobalAction, Msg, Timer, World};
use crate::failover::{self, ReconfigPhase};
use crate::gc::GcAggregator;
use crate::sim::{ClusterConfig, NodeId};
use crate::time::TimePoint;

#[derive(Clone, Debug)]
pub(crate) struct Attempt {
    phase: ReconfigPhase,
    probe_id: u64,
    reachable: BTreeSet<NodeId>,
    config: Option<ClusterConfig>,
    waiting: BTreeSet<NodeId>,
    reported: Vec<TimePoint>,
    ff: TimePoint,
    cm_changed: bool,
    lease_wait: bool,
    disable_start: TimePoint,
}

fn probe_timeout(w: &World) -> u64 {
    (8 * w.params.net.d_max).max(500_000)
}

fn ack_timeout(w: &World) -> u64 {
    w.params.lease_period / 2
}

pub(crate) fn suspect(n: &mut Node, w: &mut World, _suspects: BTreeSet<NodeId>) {
    if n.reconfig.is_some() || !n.joined || !n.alive {
        return;
    }
    let id = w.new_probe_id();
    n.reconfig = Some(Attempt {
        phase: ReconfigPhase::Suspect,
        probe_id: id,
        reachable: BTreeSet::new(),
        config: None,
        waiting: BTreeSet::new(),
        reported: Vec::new(),
        ff: TimePoint::ZERO,
        cm_changed: false,
        lease_wait: false,
        disable_start: TimePoint::ZERO,
    });
    let members: Vec<NodeId> = w.config_store.read().members.iter().copied().filter(|&m| m != n.id).collect();
    for m in members {
        w.send(n.id, m, Msg::Probe { id });
    }
    let t = probe_timeout(w);
    w.timer(n, t, Timer::ProbeDone { id });
}

pub(crate) fn on_probe_ack(n: &mut Node, src: NodeId, id: u64) {
    if let Some(a) = n.reconfig.as_mut() {
        if a.phase == ReconfigPhase::Suspect && a.probe_id == id {
            a.reachable.insert(src);
        }
    }
}

fn stand_down(n: &mut Node, w: &World) {
    n.reconfig = None;
    n.cm_contact = n.local(w.now());
}

pub(crate) fn on_probe_done(n: &mut Node, w: &mut World, id: u64) {
    let Some(a) = n.reconfig.as_ref() else { return };
    if a.phase != ReconfigPhase::Suspect || a.probe_id != id {
        return;
    }
    let old = w.config_store.read().clone();
    if old.cm != n.id && a.reachable.contains(&old.cm) {
        return stand_down(n, w);
    }
    let mut reach = a.reachable.clone();
    reach.insert(n.id);
    let Ok(new) = failover::plan_removal(&old, n.id, &reach, w.params.replication) else {
        return stand_down(n, w);
    };
    if new.cm != n.id || (new.members == old.members && new.cm == old.cm) {
        return stand_down(n, w);
    }
    if w.config_store.cas(old.seq, new.clone()).is_err() {
        return stand_down(n, w);
    }
    begin(n, w, new);
}

/// Announces a configuration this node has just written to the store.
fn begin(n: &mut Node, w: &mut World, new: ClusterConfig) {
    let now = w.now();
    let local = n.local(now);
    let cm_changed = new.cm != n.config.cm || (new.cm == n.id && !n.clock.is_enabled());
    let lease_wait = failover::needs_lease_wait(&n.config, &new);
    if cm_changed {
        n.clock.disable_and_fast_forward(local);
    }
    let waiting: BTreeSet<NodeId> = new.members.iter().copied().filter(|&m| m != n.id).collect();
    for &m in &waiting {
        w.send(n.id, m, Msg::NewConfig { config: new.clone() });
    }
    let seq = new.seq;
    n.reconfig = Some(Attempt {
        phase: ReconfigPhase::NewConfigSent,
        probe_id: 0,
        reachable: BTreeSet::new(),
        config: Some(new),
        waiting,
        reported: Vec::new(),
        ff: TimePoint::ZERO,
        cm_changed,
        lease_wait,
        disable_start: now,
    });
    if cm_changed && w.window_start.is_none() {
        w.window_start = Some(now);
    }
    let t = ack_timeout(w);
    w.timer(n, t, Timer::AckTimeout { seq, phase: ReconfigPhase::NewConfigSent });
    if n.reconfig.as_ref().is_some_and(|a| a.waiting.is_empty()) {
        acks_collected(n, w);
    }
}

pub(crate) fn on_new_config(n: &mut Node, w: &mut World, src: NodeId, config: ClusterConfig) {
    if config.seq <= n.config.seq || !config.members.contains(&n.id) {
        return;
    }
    if n.pending.as_ref().is_some_and(|p| p.seq > config.seq) {
        return;
    }
    let local = n.local(w.now());
    n.reconfig = None;
    if config.cm != n.config.cm {
        n.clock.disable_and_fast_forward(local);
        n.needs_resync = true;
    }
    let seq = config.seq;
    n.pending = Some(config);
    n.cm_contact = local;
    let ff = n.clock.ff();
    w.send(n.id, src, Msg::NewConfigAck { seq, ff });
}

fn attempt_at(n: &mut Node, seq: u64, phase: ReconfigPhase) -> Option<&mut Attempt> {
    n.reconfig
        .as_mut()
        .filter(|a| a.phase == phase && a.config.as_ref().is_some_and(|c| c.seq == seq))
}

pub(crate) fn on_new_config_ack(n: &mut Node, w: &mut World, src: NodeId, seq: u64, ff: TimePoint) {
    let Some(a) = attempt_at(n, seq, ReconfigPhase::NewConfigSent) else { return };
    if a.waiting.remove(&src) {
        a.reported.push(ff);
    }
    if a.waiting.is_empty() {
        acks_collected(n, w);
    }
}

fn acks_collected(n: &mut Node, w: &mut World) {
    let a = n.reconfig.as_mut().expect("attempt in progress");
    a.phase = ReconfigPhase::AcksCollected;
    if a.lease_wait {
        a.phase = ReconfigPhase::LeaseWait;
        let seq = a.config.as_ref().expect("config").seq;
        let t = w.params.epsilon.stretch_ceil(w.params.lease_period);
        w.timer(n, t, Timer::LeaseWaitDone { seq });
    } else {
        commit(n, w);
    }
}

pub(crate) fn on_lease_wait_done(n: &mut Node, w: &mut World, seq: u64) {
    if attempt_at(n, seq, ReconfigPhase::LeaseWait).is_some() {
        commit(n, w);
    }
}

fn commit(n: &mut Node, w: &mut World) {
    let local = n.local(w.now());
    let own = n
        .clock
        .bounds(local)
        .map(|iv| iv.upper)
        .unwrap_or(TimePoint::ZERO)
        .max(n.clock.ff());
    let a = n.reconfig.as_mut().expect("attempt in progress");
    let config = a.config.clone().expect("config");
    if a.cm_changed {
        a.ff = failover::fast_forward(own, a.reported.iter().copied());
    }
    a.phase = ReconfigPhase::Committed;
    a.waiting = config.members.iter().copied().filter(|&m| m != n.id).collect();
    let waiting = a.waiting.clone();
    let seq = config.seq;
    w.global.push(GlobalAction::CommitConfig { config });
    for m in waiting {
        w.send(n.id, m, Msg::ConfigCommit { seq });
    }
    let t = ack_timeout(w);
    w.timer(n, t, Timer::AckTimeout { seq, phase: ReconfigPhase::Committed });
    if n.reconfig.as_ref().is_some_and(|a| a.waiting.is_empty()) {
        commit_acked(n, w);
    }
}

pub(crate) fn on_config_commit(n: &mut Node, w: &mut World, src: NodeId, seq: u64) {
    if n.config.seq != seq {
        return;
    }
    let local = n.local(w.now());
    n.pending = None;
    if n.needs_resync {
        n.clock.disable();
    }
    n.cm_contact = local;
    w.send(n.id, src, Msg::ConfigCommitAck { seq });
    node::send_lease_req(n, w);
    node::send_sync(n, w);
}

pub(crate) fn on_config_commit_ack(n: &mut Node, w: &mut World, src: NodeId, seq: u64) {
    let Some(a) = attempt_at(n, seq, ReconfigPhase::Committed) else { return };
    a.waiting.remove(&src);
    if a.waiting.is_empty() {
        commit_acked(n, w);
    }
}

fn commit_acked(n: &mut Node, w: &mut World) {
    let a = n.reconfig.as_mut().expect("attempt in progress");
    let seq = a.config.as_ref().expect("config").seq;
    if !a.cm_changed {
        n.reconfig = None;
        w.metrics.reconfigs_without_disable += 1;
        return;
    }
    a.phase = ReconfigPhase::AdvanceSent;
    a.waiting = a.config.as_ref().expect("config").members.iter().copied().filter(|&m| m != n.id).collect();
    let (ff, waiting) = (a.ff, a.waiting.clone());
    for m in waiting {
        w.send(n.id, m, Msg::Advance { seq, ff });
    }
    let t = ack_timeout(w);
    w.timer(n, t, Timer::AckTimeout { seq, phase: ReconfigPhase::AdvanceSent });
    if n.reconfig.as_ref().is_some_and(|a| a.waiting.is_empty()) {
        enable(n, w);
    }
}

pub(crate) fn on_advance_ack(n: &mut Node, w: &mut World, src: NodeId, seq: u64) {
    let Some(a) = attempt_at(n, seq, ReconfigPhase::AdvanceSent) else { return };
    a.waiting.remove(&src);
    if a.waiting.is_empty() {
        enable(n, w);
    }
}

fn enable(n: &mut Node, w: &mut World) {
    let now = w.now();
    let local = n.local(now);
    let a = n.reconfig.take().expect("attempt in progress");
    n.clock.enable_master(a.ff, local);
    n.needs_resync = false;
    n.gc.admitted = true;
    n.reset_member_seen(local);
    n.agg = GcAggregator::new(n.gc.gc_local, n.gc.gc);
    w.oracle.push_lineage(now, n.id, n.clock.clone(), n.drift);
    let start = w.window_start.take().unwrap_or(a.disable_start);
    w.metrics.clock_disable_windows.push(DisableWindow {
        seq: a.config.as_ref().map_or(0, |c| c.seq),
        cm: n.id,
        start,
        end: now,
        ns: now.since(start),
        lease_wait: a.lease_wait,
    });
}

/// A member never answered: start over, which will remove it.
pub(crate) fn on_ack_timeout(n: &mut Node, w: &mut World, seq: u64, phase: ReconfigPhase) {
    let Some(a) = attempt_at(n, seq, phase) else { return };
    if a.waiting.is_empty() {
        return;
    }
    let stalled = a.waiting.clone();
    n.reconfig = None;
    suspect(n, w, stalled);
}

pub(crate) fn request_join(n: &mut Node, w: &mut World) {
    let cm = n.config.cm;
    w.send(n.id, cm, Msg::Join);
    let t = w.params.lease_period;
    w.timer(n, t, Timer::JoinRetry);
}

pub(crate) fn on_join_retry(n: &mut Node, w: &mut World) {
    if n.joined || n.pending.is_some() {
        return;
    }
    n.config = w.config_store.read().clone();
    request_join(n, w);
}

pub(crate) fn on_join(n: &mut Node, w: &mut World, src: NodeId) {
    if !n.is_cm() || n.reconfig.is_some() || !n.clock.is_enabled() || n.config.members.contains(&src) {
        return;
    }
    let old = w.config_store.read().clone();
    if old.seq != n.config.seq {
        return;
    }
    let new = failover::plan_join(&old, src, w.params.replication);
    if w.config_store.cas(old.seq, new.clone()).is_ok() {
        begin(n, w, new);
    }
}
