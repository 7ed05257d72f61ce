//! Transaction coordinator (the program VM and the commit protocol) and the
//! participant side of every transaction message.

use std::collections::{BTreeMap, BTreeSet};

use super::node::Node;
use super::{AttemptOutcome, GState, GlobalAction, GlobalTxn, Timer, World};
use crate::checker::lemma::{CommittedRw, LockHold};
use crate::checker::{EventKind, HistoryEvent};
use crate::sim::NodeId;
use crate::store::{OldVersionPolicy, Oid, Role, TxnId};
use crate::time::{TimeInterval, TimePoint};
use crate::txn::{
    self, AbortReason, LockItem, Op, Plan, Program, ReadOk, ReadRecord, RtsRule, Target, TxnContext, TxnMode, TxnMsg,
    Val, ValidateRule, WriteRecord, WtsRule, TOMBSTONE,
};
use crate::store::LockFail;

/// Retry delay when the clock cannot issue a timestamp.
const CLOCK_RETRY: u64 = 50_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Phase {
    Rts,
    Exec,
    Read(Oid),
    Alloc,
    Slave,
    Think,
    /// Write timestamp waited out before locking.
    WtsFirst,
    Lock,
    /// Locked; waiting for the write timestamp and validation.
    Prepared,
    Backup,
    Primary,
    /// Installed at primaries; the overlapped wait is still running.
    Finishing,
    Truncate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum VState {
    NotStarted,
    Pending,
    Done,
}

#[derive(Clone, Copy, Debug)]
struct PendingTs {
    iv: TimeInterval,
    ts: TimePoint,
    call: TimePoint,
    write: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockedLock {
    pub txn: TxnId,
    coord: NodeId,
    items: Vec<LockItem>,
    deadline: TimePoint,
}

pub(crate) struct Coord {
    pub ctx: TxnContext,
    plan: Plan,
    program: Program,
    client: usize,
    pc: usize,
    regs: Vec<i64>,
    phase: Phase,
    token: u32,
    begin_true: TimePoint,
    pub commit_call: TimePoint,
    pending_ts: Option<PendingTs>,
    alloc_init: i64,
    issued: TimePoint,
    waiting: BTreeSet<NodeId>,
    lock_nodes: BTreeSet<NodeId>,
    alloc_nodes: BTreeSet<NodeId>,
    pub locked_at: Option<TimePoint>,
    wts_call: TimePoint,
    wts_waited: bool,
    vstate: VState,
    v_waiting: BTreeSet<NodeId>,
    primary_done: bool,
    /// The read timestamp is fixed; the transaction counts as active.
    pub rts_ready: bool,
}

fn new_token(c: &mut Coord) -> u32 {
    c.token += 1;
    c.token
}

fn wake(n: &Node, w: &mut World, txn: TxnId, token: u32, local_delay: u64) {
    w.timer(n, local_delay, Timer::TxnWake { txn, token });
}

pub(crate) fn start(n: &mut Node, w: &mut World, client: usize, program: Program, mode: TxnMode) -> TxnId {
    let id = w.new_txn_id();
    let now = w.now();
    let plan = Plan::new(mode, w.params.mutations);
    let ctx = TxnContext::new(id, mode, program.hint_writes);
    n.coords.insert(
        id,
        Coord {
            ctx,
            plan,
            program,
            client,
            pc: 0,
            regs: Vec::new(),
            phase: Phase::Rts,
            token: 0,
            begin_true: now,
            commit_call: now,
            pending_ts: None,
            alloc_init: 0,
            issued: now,
            waiting: BTreeSet::new(),
            lock_nodes: BTreeSet::new(),
            alloc_nodes: BTreeSet::new(),
            locked_at: None,
            wts_call: now,
            wts_waited: false,
            vstate: VState::NotStarted,
            v_waiting: BTreeSet::new(),
            primary_done: false,
            rts_ready: false,
        },
    );
    w.registry.insert(
        id,
        GlobalTxn {
            coord: n.id,
            client,
            mode,
            regions: BTreeSet::new(),
            allocs: Vec::new(),
            decided: None,
            unlocked_at: None,
            state: GState::Active,
            begun: false,
        },
    );
    let t = w.params.txn_timeout;
    w.timer(n, t, Timer::TxnWatchdog { txn: id });
    acquire_rts(n, w, id);
    id
}

fn acquire_rts(n: &mut Node, w: &mut World, id: TxnId) {
    let now = w.now();
    let iv = n.interval(w);
    let gc = n.gc.clone();
    let c = n.coords.get_mut(&id).expect("coordinator");
    let Some(iv) = iv else {
        let tok = new_token(c);
        return wake(n, w, id, tok, CLOCK_RETRY);
    };
    match c.plan.rts {
        RtsRule::Lower => {
            c.ctx.rts = gc.clamp_read_ts(iv.lower);
            c.ctx.rts_interval = Some(iv);
            c.rts_ready = true;
            emit_begin(c, n.id, w, iv, now);
            c.phase = Phase::Exec;
            exec(n, w, id);
        }
        RtsRule::UpperWaited => {
            let sleep = w.params.epsilon.stretch_ceil(iv.width());
            c.pending_ts = Some(PendingTs {
                iv,
                ts: iv.upper,
                call: now,
                write: false,
            });
            w.metrics.uncertainty_waits += 1;
            w.metrics.uncertainty_wait_ns += sleep;
            // counts as active from the clock read on
            c.ctx.rts = iv.upper;
            c.rts_ready = true;
            if sleep == 0 {
                complete_ts(n, w, id);
            } else {
                let tok = new_token(c);
                wake(n, w, id, tok, sleep);
            }
        }
    }
}

fn emit_begin(c: &Coord, node: NodeId, w: &mut World, iv: TimeInterval, at: TimePoint) {
    let mut e = HistoryEvent::new(EventKind::Begin, c.ctx.id, node, c.ctx.mode, c.begin_true, w.now())
        .with_interval(iv, at);
    e.rts = Some(c.ctx.rts);
    w.record(e);
    if let Some(g) = w.registry.get_mut(&c.ctx.id) {
        g.begun = true;
    }
}

fn complete_ts(n: &mut Node, w: &mut World, id: TxnId) {
    let now = w.now();
    let c = n.coords.get_mut(&id).expect("coordinator");
    let p = c.pending_ts.take().expect("pending timestamp");
    w.oracle.check_get_ts(p.call, p.iv, now);
    if !p.write {
        c.ctx.rts = p.ts;
        c.ctx.rts_interval = Some(p.iv);
        emit_begin(c, n.id, w, p.iv, p.call);
        c.phase = Phase::Exec;
        return exec(n, w, id);
    }
    c.wts_waited = true;
    if c.phase == Phase::WtsFirst {
        return send_locks(n, w, id);
    }
    progress(n, w, id);
}

pub(crate) fn on_wake(n: &mut Node, w: &mut World, id: TxnId, token: u32) {
    let Some(c) = n.coords.get_mut(&id) else { return };
    if c.token != token {
        return;
    }
    if c.pending_ts.is_some() {
        return complete_ts(n, w, id);
    }
    match c.phase {
        Phase::Rts => acquire_rts(n, w, id),
        Phase::Think => {
            c.phase = Phase::Exec;
            exec(n, w, id);
        }
        Phase::WtsFirst | Phase::Prepared => acquire_wts(n, w, id),
        _ => {}
    }
}

pub(crate) fn on_watchdog(n: &mut Node, w: &mut World, id: TxnId) {
    if !n.coords.contains_key(&id) {
        return;
    }
    let decided = w.registry.get(&id).is_some_and(|g| g.decided.is_some());
    if decided {
        // completion is up to the participants or the next reconfiguration
        let t = w.params.txn_timeout;
        w.timer(n, t, Timer::TxnWatchdog { txn: id });
    } else {
        abort(n, w, id, AbortReason::Timeout);
    }
}

fn resolve(regs: &[i64], t: Target) -> Option<Oid> {
    match t {
        Target::Fixed(o) => Some(o),
        Target::Reg(i) => match regs.get(i) {
            Some(&v) if v != TOMBSTONE && v != 0 => Some(Oid(v as u64)),
            _ => None,
        },
    }
}

fn value(regs: &[i64], v: Val) -> i64 {
    match v {
        Val::Const(k) => k,
        Val::RegPlus(i, k) => regs.get(i).copied().unwrap_or(0).wrapping_add(k),
        Val::RegAddr(i) => regs.get(i).copied().unwrap_or(0),
    }
}

/// Runs the program until it needs a remote step or reaches commit.
fn exec(n: &mut Node, w: &mut World, id: TxnId) {
    loop {
        let c = n.coords.get_mut(&id).expect("coordinator");
        let Some(op) = c.program.ops.get(c.pc).cloned() else {
            return commit(n, w, id);
        };
        c.pc += 1;
        match op {
            Op::Read(t) => {
                let Some(oid) = resolve(&c.regs, t) else {
                    return abort(n, w, id, AbortReason::Unavailable);
                };
                if let Some(v) = c.ctx.local_read(oid) {
                    c.regs.push(v);
                    continue;
                }
                let Some(p) = n.config.primary_of(oid.region()) else {
                    return abort(n, w, id, AbortReason::Unavailable);
                };
                c.phase = Phase::Read(oid);
                c.issued = w.now();
                let rts = c.ctx.rts;
                return w.send_txn(n.id, p, TxnMsg::Read { txn: id, oid, rts });
            }
            Op::Write(t, v) => {
                let Some(oid) = resolve(&c.regs, t) else {
                    return abort(n, w, id, AbortReason::Unavailable);
                };
                let val = value(&c.regs, v);
                c.ctx.buffer_write(oid, val, true);
            }
            Op::Alloc { region, size, init } => {
                let Some(p) = n.config.primary_of(region) else {
                    return abort(n, w, id, AbortReason::Unavailable);
                };
                c.alloc_init = value(&c.regs, init);
                c.phase = Phase::Alloc;
                c.alloc_nodes.insert(p);
                return w.send_txn(n.id, p, TxnMsg::Alloc { txn: id, region, size });
            }
            Op::Free(t) => {
                let Some(oid) = resolve(&c.regs, t) else {
                    return abort(n, w, id, AbortReason::Unavailable);
                };
                c.ctx.buffer_write(oid, TOMBSTONE, false);
            }
            Op::SkipIfZero(r, k) => {
                if c.regs.get(r).copied().unwrap_or(0) == 0 {
                    c.pc += k;
                }
            }
            Op::Think(d) => {
                c.phase = Phase::Think;
                let tok = new_token(c);
                return wake(n, w, id, tok, d.max(1));
            }
            Op::FanOut { node, oids } => {
                c.phase = Phase::Slave;
                c.issued = w.now();
                let rts = c.ctx.rts;
                return w.send_txn(n.id, NodeId(node), TxnMsg::Slave { master: id, rts, oids });
            }
        }
    }
}

fn record_read(c: &Coord, node: NodeId, w: &mut World, r: &ReadRecord) {
    let mut e = HistoryEvent::new(EventKind::Read, c.ctx.id, node, c.ctx.mode, c.issued, w.now());
    e.reads = vec![(r.oid, r.version, r.value)];
    w.record(e);
    w.oracle.record_read(c.ctx.id, r.oid, r.version, c.ctx.rts);
}

fn on_read_resp(n: &mut Node, w: &mut World, id: TxnId, oid: Oid, result: Result<ReadOk, txn::ReadFail>) {
    let Some(c) = n.coords.get_mut(&id) else { return };
    if c.phase != Phase::Read(oid) {
        return;
    }
    let eager = c.plan.eager_validation;
    match c.ctx.apply_read(oid, result, eager) {
        Err(r) => abort(n, w, id, r),
        Ok(v) => {
            c.regs.push(v);
            let rec = c.ctx.reads.last().cloned().expect("just read");
            record_read(c, n.id, w, &rec);
            c.phase = Phase::Exec;
            exec(n, w, id);
        }
    }
}

fn on_slave_resp(n: &mut Node, w: &mut World, id: TxnId, result: Result<Vec<ReadRecord>, AbortReason>) {
    let Some(c) = n.coords.get_mut(&id) else { return };
    if c.phase != Phase::Slave {
        return;
    }
    match result {
        Err(r) => abort(n, w, id, r),
        Ok(records) => {
            for r in records {
                let ok = ReadOk {
                    version: r.version,
                    value: r.value,
                    from_chain: false,
                };
                let v = c.ctx.apply_read(r.oid, Ok(ok), false).expect("plain read");
                c.regs.push(v);
                record_read(c, n.id, w, &r);
            }
            c.phase = Phase::Exec;
            exec(n, w, id);
        }
    }
}

fn on_alloc_resp(n: &mut Node, w: &mut World, src: NodeId, id: TxnId, result: Option<(Oid, TimePoint)>) {
    let Some(c) = n.coords.get_mut(&id).filter(|c| c.phase == Phase::Alloc) else {
        if let Some((oid, _)) = result {
            w.send_txn(n.id, src, TxnMsg::Abort { txn: id, release: vec![oid] });
        }
        return;
    };
    match result {
        None => abort(n, w, id, AbortReason::Unavailable),
        Some((oid, head_ts)) => {
            let init = c.alloc_init;
            c.ctx.buffer_alloc(oid, head_ts, init);
            c.regs.push(oid.0 as i64);
            c.phase = Phase::Exec;
            exec(n, w, id);
        }
    }
}

fn group_by_primary<T: Clone>(n: &Node, items: &[T], oid: impl Fn(&T) -> Oid) -> Option<BTreeMap<NodeId, Vec<T>>> {
    let mut m: BTreeMap<NodeId, Vec<T>> = BTreeMap::new();
    for it in items {
        let p = n.config.primary_of(oid(it).region())?;
        m.entry(p).or_default().push(it.clone());
    }
    Some(m)
}

fn commit(n: &mut Node, w: &mut World, id: TxnId) {
    let now = w.now();
    let c = n.coords.get_mut(&id).expect("coordinator");
    c.commit_call = now;
    if c.ctx.is_read_only() {
        let e = HistoryEvent::new(EventKind::Commit, id, n.id, c.ctx.mode, now, now);
        w.record(e);
        w.metrics.committed += 1;
        w.metrics.committed_read_only += 1;
        let c = n.coords.remove(&id).expect("coordinator");
        if let Some(g) = w.registry.get_mut(&id) {
            g.state = GState::Done;
        }
        w.global.push(GlobalAction::ClientDone {
            client: c.client,
            outcome: AttemptOutcome::Committed(c.ctx.reads),
        });
        return;
    }
    let regions: BTreeSet<_> = c
        .ctx
        .writes
        .keys()
        .chain(c.ctx.read_set.keys())
        .map(|o| o.region())
        .collect();
    if let Some(g) = w.registry.get_mut(&id) {
        g.regions = regions;
    }
    if c.plan.wts == WtsRule::WaitBeforeLocks {
        c.phase = Phase::WtsFirst;
        return acquire_wts(n, w, id);
    }
    send_locks(n, w, id);
}

fn send_locks(n: &mut Node, w: &mut World, id: TxnId) {
    let c = n.coords.get(&id).expect("coordinator");
    let items = c.ctx.lock_items();
    let Some(groups) = group_by_primary(n, &items, |i| i.oid) else {
        return abort(n, w, id, AbortReason::Unavailable);
    };
    let c = n.coords.get_mut(&id).expect("coordinator");
    c.phase = Phase::Lock;
    c.lock_nodes = groups.keys().copied().collect();
    c.waiting = c.lock_nodes.clone();
    for (p, items) in groups {
        w.send_txn(n.id, p, TxnMsg::Lock { txn: id, items });
    }
}

fn on_lock_ack(n: &mut Node, w: &mut World, src: NodeId, id: TxnId, result: Result<(), LockFail>) {
    let Some(c) = n.coords.get_mut(&id).filter(|c| c.phase == Phase::Lock) else {
        if result.is_ok() {
            w.send_txn(n.id, src, TxnMsg::Abort { txn: id, release: Vec::new() });
        }
        return;
    };
    if let Err(e) = result {
        let r = if e == LockFail::OldVersionExhausted {
            AbortReason::OldVersionExhausted
        } else {
            AbortReason::LockFail
        };
        return abort(n, w, id, r);
    }
    c.waiting.remove(&src);
    if !c.waiting.is_empty() {
        return;
    }
    c.locked_at = Some(w.now());
    c.phase = Phase::Prepared;
    if c.plan.wts == WtsRule::WaitBeforeLocks {
        return progress(n, w, id);
    }
    acquire_wts(n, w, id);
}

fn acquire_wts(n: &mut Node, w: &mut World, id: TxnId) {
    let now = w.now();
    let iv = n.interval(w);
    let c = n.coords.get_mut(&id).expect("coordinator");
    let Some(iv) = iv else {
        let tok = new_token(c);
        return wake(n, w, id, tok, CLOCK_RETRY);
    };
    c.ctx.wts = Some(iv.upper.max(c.ctx.rts));
    c.ctx.wts_interval = Some(iv);
    c.wts_call = now;
    if c.plan.wts == WtsRule::NoWait {
        c.wts_waited = true;
        return progress(n, w, id);
    }
    let sleep = w.params.epsilon.stretch_ceil(iv.width());
    w.metrics.uncertainty_waits += 1;
    w.metrics.uncertainty_wait_ns += sleep;
    c.pending_ts = Some(PendingTs {
        iv,
        ts: iv.upper,
        call: now,
        write: true,
    });
    if sleep == 0 {
        return complete_ts(n, w, id);
    }
    let tok = new_token(c);
    let first = c.phase == Phase::WtsFirst;
    wake(n, w, id, tok, sleep);
    if !first {
        progress(n, w, id);
    }
}

/// Advances the commit protocol as far as the gathered acks allow.
fn progress(n: &mut Node, w: &mut World, id: TxnId) {
    let Some(c) = n.coords.get_mut(&id) else { return };
    if c.ctx.wts.is_none() || c.locked_at.is_none() {
        return;
    }
    match c.phase {
        Phase::Prepared => {
            let vset = c.ctx.validation_set();
            let needs_v = c.plan.validate != ValidateRule::None && !vset.is_empty();
            if needs_v && c.vstate == VState::NotStarted {
                let may = match c.plan.validate {
                    ValidateRule::AfterWait => c.wts_waited,
                    _ => true,
                };
                if !may {
                    return;
                }
                let Some(groups) = group_by_primary(n, &vset, |i| i.0) else {
                    return abort(n, w, id, AbortReason::Unavailable);
                };
                let c = n.coords.get_mut(&id).expect("coordinator");
                c.vstate = VState::Pending;
                c.v_waiting = groups.keys().copied().collect();
                for (p, items) in groups {
                    w.send_txn(n.id, p, TxnMsg::Validate { txn: id, items });
                }
                return;
            }
            if needs_v && c.vstate != VState::Done {
                return;
            }
            let gate = c.plan.wts == WtsRule::WaitOverlapped || c.wts_waited;
            if !gate {
                return;
            }
            send_backup(n, w, id);
        }
        Phase::Finishing if c.wts_waited => return_commit(n, w, id),
        _ => {}
    }
}

fn on_validate_ack(n: &mut Node, w: &mut World, src: NodeId, id: TxnId, ok: bool) {
    let Some(c) = n.coords.get_mut(&id).filter(|c| c.vstate == VState::Pending) else { return };
    if !ok {
        return abort(n, w, id, AbortReason::ValidationFail);
    }
    c.v_waiting.remove(&src);
    if c.v_waiting.is_empty() {
        c.vstate = VState::Done;
        progress(n, w, id);
    }
}

fn writes_by(n: &Node, writes: &[WriteRecord], backups: bool) -> BTreeMap<NodeId, Vec<WriteRecord>> {
    let mut m: BTreeMap<NodeId, Vec<WriteRecord>> = BTreeMap::new();
    for wr in writes {
        let r = wr.oid.region();
        if backups {
            for &b in n.config.backups_of(r) {
                m.entry(b).or_default().push(*wr);
            }
        } else if let Some(p) = n.config.primary_of(r) {
            m.entry(p).or_default().push(*wr);
        }
    }
    m
}

fn send_backup(n: &mut Node, w: &mut World, id: TxnId) {
    let c = n.coords.get(&id).expect("coordinator");
    let writes = c.ctx.write_records();
    let wts = c.ctx.wts.expect("wts");
    let groups = writes_by(n, &writes, true);
    let c = n.coords.get_mut(&id).expect("coordinator");
    c.phase = Phase::Backup;
    c.waiting = groups.keys().copied().collect();
    for (b, ws) in groups {
        w.send_txn(n.id, b, TxnMsg::CommitBackup { txn: id, wts, writes: ws });
    }
    if c.waiting.is_empty() {
        decide(n, w, id);
    }
}

fn decide(n: &mut Node, w: &mut World, id: TxnId) {
    let c = n.coords.get_mut(&id).expect("coordinator");
    let writes = c.ctx.write_records();
    let wts = c.ctx.wts.expect("wts");
    if let Some(g) = w.registry.get_mut(&id) {
        g.decided = Some((wts, writes.clone()));
    }
    let groups = writes_by(n, &writes, false);
    let c = n.coords.get_mut(&id).expect("coordinator");
    c.phase = Phase::Primary;
    c.waiting = groups.keys().copied().collect();
    for (p, ws) in groups {
        w.send_txn(n.id, p, TxnMsg::CommitPrimary { txn: id, wts, writes: ws });
    }
}

fn on_backup_ack(n: &mut Node, w: &mut World, src: NodeId, id: TxnId) {
    let Some(c) = n.coords.get_mut(&id).filter(|c| c.phase == Phase::Backup) else { return };
    c.waiting.remove(&src);
    if c.waiting.is_empty() {
        decide(n, w, id);
    }
}

fn on_primary_ack(n: &mut Node, w: &mut World, src: NodeId, id: TxnId) {
    let Some(c) = n.coords.get_mut(&id).filter(|c| c.phase == Phase::Primary) else { return };
    c.waiting.remove(&src);
    if c.waiting.is_empty() {
        c.primary_done = true;
        c.phase = Phase::Finishing;
        progress(n, w, id);
    }
}

fn return_commit(n: &mut Node, w: &mut World, id: TxnId) {
    let now = w.now();
    let c = n.coords.get_mut(&id).expect("coordinator");
    let wts = c.ctx.wts.expect("wts");
    let writes = c.ctx.write_records();
    let Some(g) = w.registry.get_mut(&id) else { return };
    if g.state != GState::Active {
        return;
    }
    g.state = GState::Returned;
    let unlocked = g.unlocked_at.unwrap_or(now);
    let mut e = HistoryEvent::new(EventKind::WriteCommit, id, n.id, c.ctx.mode, c.commit_call, now);
    e.wts = Some(wts);
    e.writes = writes
        .iter()
        .map(|w| (w.oid, if w.allocated { w.value } else { TOMBSTONE }))
        .collect();
    if let Some(iv) = c.ctx.wts_interval {
        e = e.with_interval(iv, c.wts_call);
    }
    w.record(e);
    w.metrics.committed += 1;
    w.oracle.committed.push(CommittedRw {
        txn: id,
        mode: c.ctx.mode,
        rts: c.ctx.rts,
        wts,
        reads: c.ctx.read_set.keys().copied().collect(),
        writes: writes.iter().map(|w| w.oid).collect(),
        allocs: c.ctx.allocs.iter().copied().collect(),
    });
    if let Some(locked_at) = c.locked_at {
        w.oracle.lock_holds.push(LockHold {
            txn: id,
            mode: c.ctx.mode,
            locked_at,
            unlocked_at: unlocked,
            wts,
        });
    }
    w.global.push(GlobalAction::ClientDone {
        client: c.client,
        outcome: AttemptOutcome::Committed(c.ctx.reads.clone()),
    });
    // truncation: every replica of every written region
    let mut targets: BTreeMap<NodeId, Vec<WriteRecord>> = writes_by(n, &writes, true);
    for (p, ws) in writes_by(n, &writes, false) {
        targets.entry(p).or_default().extend(ws);
    }
    let c = n.coords.get_mut(&id).expect("coordinator");
    c.phase = Phase::Truncate;
    c.waiting = targets.keys().copied().collect();
    for (t, ws) in targets {
        w.send_txn(n.id, t, TxnMsg::Truncate { txn: id, wts, writes: ws });
    }
    if c.waiting.is_empty() {
        finish(n, w, id);
    }
}

fn on_truncate_ack(n: &mut Node, w: &mut World, src: NodeId, id: TxnId) {
    let Some(c) = n.coords.get_mut(&id).filter(|c| c.phase == Phase::Truncate) else { return };
    c.waiting.remove(&src);
    if c.waiting.is_empty() {
        finish(n, w, id);
    }
}

fn finish(n: &mut Node, w: &mut World, id: TxnId) {
    n.coords.remove(&id);
    if let Some(g) = w.registry.get_mut(&id) {
        g.state = GState::Done;
    }
}

/// Aborts an undecided transaction. Decided ones cannot abort.
pub(crate) fn abort(n: &mut Node, w: &mut World, id: TxnId, reason: AbortReason) {
    if w.registry.get(&id).is_some_and(|g| g.decided.is_some()) {
        return;
    }
    let Some(c) = n.coords.remove(&id) else { return };
    let mut release: BTreeMap<NodeId, Vec<Oid>> = BTreeMap::new();
    for &o in &c.ctx.allocs {
        if let Some(p) = n.config.primary_of(o.region()) {
            release.entry(p).or_default().push(o);
        }
    }
    let targets: BTreeSet<NodeId> = c
        .lock_nodes
        .iter()
        .chain(c.alloc_nodes.iter())
        .chain(release.keys())
        .copied()
        .collect();
    for t in targets {
        let rel = release.remove(&t).unwrap_or_default();
        w.send_txn(n.id, t, TxnMsg::Abort { txn: id, release: rel });
    }
    w.emit_abort(id, n.id, c.ctx.mode);
    w.metrics.count_abort(reason);
    if let Some(g) = w.registry.get_mut(&id) {
        g.state = GState::Aborted;
    }
    w.global.push(GlobalAction::ClientDone {
        client: c.client,
        outcome: AttemptOutcome::Aborted(reason),
    });
}

pub(crate) fn on_txn_msg(n: &mut Node, w: &mut World, src: NodeId, m: TxnMsg) {
    match m {
        TxnMsg::Read { txn, oid, rts } => {
            let result = if n.store.role(oid.region()) == Some(Role::Primary) {
                txn::serve_read(&mut n.store, oid, rts)
            } else {
                Err(txn::ReadFail::Unavailable)
            };
            w.send_txn(n.id, src, TxnMsg::ReadResp { txn, oid, result });
        }
        TxnMsg::ReadResp { txn, oid, result } => on_read_resp(n, w, txn, oid, result),
        TxnMsg::Alloc { txn, region, size } => {
            let result = if n.closed.contains(&txn) {
                None
            } else {
                n.store.slab_alloc(region, size).ok().map(|oid| {
                    let ts = n.store.head(oid).map_or(TimePoint::ZERO, |h| h.header.ts);
                    (oid, ts)
                })
            };
            if let (Some((oid, _)), Some(g)) = (result, w.registry.get_mut(&txn)) {
                g.allocs.push(oid);
            }
            w.send_txn(n.id, src, TxnMsg::AllocResp { txn, result });
        }
        TxnMsg::AllocResp { txn, result } => on_alloc_resp(n, w, src, txn, result),
        TxnMsg::Lock { txn, items } => on_lock(n, w, src, txn, items),
        TxnMsg::LockAck { txn, result } => on_lock_ack(n, w, src, txn, result),
        TxnMsg::Validate { txn, items } => {
            let primary = items.iter().all(|(o, _)| n.store.role(o.region()) == Some(Role::Primary));
            let ok = primary && txn::validate_reads(&mut n.store, &items);
            w.send_txn(n.id, src, TxnMsg::ValidateAck { txn, ok });
        }
        TxnMsg::ValidateAck { txn, ok } => on_validate_ack(n, w, src, txn, ok),
        TxnMsg::CommitBackup { txn, wts, writes } => {
            if n.closed.contains(&txn) {
                return;
            }
            n.backup_pending.insert(txn, (wts, writes));
            w.send_txn(n.id, src, TxnMsg::CommitBackupAck { txn });
        }
        TxnMsg::CommitBackupAck { txn } => on_backup_ack(n, w, src, txn),
        TxnMsg::CommitPrimary { txn, wts, writes } => on_commit_primary(n, w, src, txn, wts, writes),
        TxnMsg::CommitPrimaryAck { txn } => on_primary_ack(n, w, src, txn),
        TxnMsg::Truncate { txn, wts, writes } => {
            let mine: Vec<WriteRecord> = writes
                .into_iter()
                .filter(|wr| n.store.role(wr.oid.region()) == Some(Role::Backup))
                .collect();
            txn::apply_at_backup(&mut n.store, wts, &mine);
            n.backup_pending.remove(&txn);
            w.send_txn(n.id, src, TxnMsg::TruncateAck { txn });
        }
        TxnMsg::TruncateAck { txn } => on_truncate_ack(n, w, src, txn),
        TxnMsg::Abort { txn, release } => {
            n.store.abort_all(txn);
            for o in release {
                n.store.slab_release(o);
            }
            n.closed.insert(txn);
            n.blocked.retain(|b| b.txn != txn);
            n.backup_pending.remove(&txn);
        }
        TxnMsg::Slave { master, rts, oids } => {
            let result = match n.gc.admit_slave(rts) {
                Err(_) => Err(AbortReason::SlaveRejected),
                Ok(()) => oids
                    .iter()
                    .map(|&oid| {
                        let r = if n.store.role(oid.region()) == Some(Role::Primary) {
                            txn::serve_read(&mut n.store, oid, rts)
                        } else {
                            Err(txn::ReadFail::Unavailable)
                        };
                        r.map(|ok| ReadRecord {
                            oid,
                            version: ok.version,
                            value: ok.value,
                        })
                        .map_err(|e| AbortReason::from_read(&e))
                    })
                    .collect(),
            };
            w.send_txn(n.id, src, TxnMsg::SlaveResp { master, result });
        }
        TxnMsg::SlaveResp { master, result } => on_slave_resp(n, w, master, result),
    }
}

fn on_lock(n: &mut Node, w: &mut World, src: NodeId, txn: TxnId, items: Vec<LockItem>) {
    let primary = items.iter().all(|i| n.store.role(i.oid.region()) == Some(Role::Primary));
    if n.closed.contains(&txn) || !primary {
        return w.send_txn(n.id, src, TxnMsg::LockAck { txn, result: Err(LockFail::Missing) });
    }
    match txn::lock_all(&mut n.store, txn, &items) {
        Err(LockFail::OldVersionExhausted) if n.store.config().policy == OldVersionPolicy::Block => {
            let deadline = n.local(w.now()) + w.params.block_timeout;
            n.blocked.push(BlockedLock {
                txn,
                coord: src,
                items,
                deadline,
            });
        }
        result => w.send_txn(n.id, src, TxnMsg::LockAck { txn, result }),
    }
}

/// Retries locks parked for old-version memory.
pub(crate) fn retry_blocked(n: &mut Node, w: &mut World) {
    if n.blocked.is_empty() {
        return;
    }
    let local = n.local(w.now());
    let parked = std::mem::take(&mut n.blocked);
    for b in parked {
        match txn::lock_all(&mut n.store, b.txn, &b.items) {
            Err(LockFail::OldVersionExhausted) if local < b.deadline => n.blocked.push(b),
            result => w.send_txn(n.id, b.coord, TxnMsg::LockAck { txn: b.txn, result }),
        }
    }
}

fn on_commit_primary(n: &mut Node, w: &mut World, src: NodeId, txn: TxnId, wts: TimePoint, writes: Vec<WriteRecord>) {
    let now = w.now();
    txn::install_writes(&mut n.store, txn, wts, &writes);
    for wr in &writes {
        w.oracle.record_install(wr.oid, wts, txn);
    }
    if let Some(g) = w.registry.get_mut(&txn) {
        g.unlocked_at.get_or_insert(now);
    }
    let local = n.local(now);
    for wr in writes.iter().filter(|wr| !wr.allocated) {
        if let Ok(iv) = n.clock.bounds(local) {
            n.store.slab_try_reuse(wr.oid.region(), wr.oid.slab(), iv);
        }
    }
    w.send_txn(n.id, src, TxnMsg::CommitPrimaryAck { txn });
}
