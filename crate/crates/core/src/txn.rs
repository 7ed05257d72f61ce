//! Transactions: modes, programs, the coordinator-side context, protocol
//! messages and the participant-side primitives run at primaries and
//! backups.
//!
//! The commit protocol itself is sequenced by the cluster's event handlers;
//! everything here is synchronous and independent of the event loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::store::{self, LockExpect, LockFail, Oid, RegionId, Store, StoreError, WorkerId};
use crate::time::{TimeInterval, TimePoint};

pub use crate::store::TxnId;

/// Object payload size used for every value the workloads store.
pub const VALUE_BYTES: usize = 8;

/// Value observed when reading a version whose allocated bit is clear.
pub const TOMBSTONE: i64 = i64::MIN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Isolation {
    Serializable,
    Snapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TxnMode {
    pub isolation: Isolation,
    pub strict: bool,
}

impl TxnMode {
    pub const STRICT_SER: TxnMode = TxnMode {
        isolation: Isolation::Serializable,
        strict: true,
    };
    pub const SER: TxnMode = TxnMode {
        isolation: Isolation::Serializable,
        strict: false,
    };
    pub const STRICT_SI: TxnMode = TxnMode {
        isolation: Isolation::Snapshot,
        strict: true,
    };
    pub const SI: TxnMode = TxnMode {
        isolation: Isolation::Snapshot,
        strict: false,
    };

    pub fn is_serializable(&self) -> bool {
        self.isolation == Isolation::Serializable
    }
}

impl Default for TxnMode {
    fn default() -> Self {
        TxnMode::STRICT_SER
    }
}

impl fmt::Display for TxnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match (self.isolation, self.strict) {
            (Isolation::Serializable, true) => "strict-ser",
            (Isolation::Serializable, false) => "ser",
            (Isolation::Snapshot, true) => "strict-si",
            (Isolation::Snapshot, false) => "si",
        };
        f.write_str(s)
    }
}

impl FromStr for TxnMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "strict-ser" => Ok(Self::STRICT_SER),
            "ser" => Ok(Self::SER),
            "strict-si" => Ok(Self::STRICT_SI),
            "si" => Ok(Self::SI),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

impl Serialize for TxnMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TxnMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Deliberately broken protocol variants, for exercising the checker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mutations {
    /// Take the write timestamp without waiting out its uncertainty.
    pub skip_write_wait: bool,
    /// Validate right after locking, concurrently with the write wait.
    pub validate_during_wait: bool,
    /// Wait out the write timestamp before taking the write locks.
    pub wait_before_locks: bool,
    /// In strict modes, read at the interval's lower bound and write at its
    /// upper bound, waiting for neither.
    pub nonstrict_read_no_wait_strict_mode: bool,
}

impl Mutations {
    pub const NAMES: [&'static str; 4] = [
        "skip_write_wait",
        "validate_during_wait",
        "wait_before_locks",
        "nonstrict_read_no_wait_strict_mode",
    ];

    pub fn enable(&mut self, name: &str) -> Result<(), String> {
        match name {
            "skip_write_wait" => self.skip_write_wait = true,
            "validate_during_wait" => self.validate_during_wait = true,
            "wait_before_locks" => self.wait_before_locks = true,
            "nonstrict_read_no_wait_strict_mode" => self.nonstrict_read_no_wait_strict_mode = true,
            other => return Err(format!("unknown mutation `{other}`")),
        }
        Ok(())
    }

    pub fn only(name: &str) -> Self {
        let mut m = Mutations::default();
        m.enable(name).expect("known mutation");
        m
    }

    pub fn any(&self) -> bool {
        self.skip_write_wait
            || self.validate_during_wait
            || self.wait_before_locks
            || self.nonstrict_read_no_wait_strict_mode
    }
}

/// How the read timestamp is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RtsRule {
    /// Interval upper bound, after waiting out the uncertainty.
    UpperWaited,
    /// Interval lower bound, no wait.
    Lower,
}

/// How the write timestamp is chosen and where its wait sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WtsRule {
    /// Upper bound, waited out while holding the locks.
    WaitHoldingLocks,
    /// Upper bound, waited out before locking.
    WaitBeforeLocks,
    /// Upper bound, wait runs concurrently with the commit messages.
    WaitOverlapped,
    /// Upper bound, no wait.
    NoWait,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValidateRule {
    None,
    AfterWait,
    DuringWait,
}

/// The protocol steps a mode (plus mutations) prescribes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Plan {
    pub rts: RtsRule,
    pub wts: WtsRule,
    pub validate: ValidateRule,
    pub eager_validation: bool,
}

impl Plan {
    pub fn new(mode: TxnMode, m: Mutations) -> Plan {
        let ser = mode.is_serializable();
        let mut plan = Plan {
            rts: if mode.strict {
                RtsRule::UpperWaited
            } else {
                RtsRule::Lower
            },
            wts: match (mode.isolation, mode.strict) {
                (Isolation::Serializable, _) => WtsRule::WaitHoldingLocks,
                (Isolation::Snapshot, true) => WtsRule::WaitOverlapped,
                (Isolation::Snapshot, false) => WtsRule::NoWait,
            },
            validate: if ser {
                ValidateRule::AfterWait
            } else {
                ValidateRule::None
            },
            eager_validation: ser,
        };
        if m.skip_write_wait {
            plan.wts = WtsRule::NoWait;
        }
        if m.wait_before_locks {
            plan.wts = WtsRule::WaitBeforeLocks;
        }
        if m.validate_during_wait && ser {
            plan.validate = ValidateRule::DuringWait;
        }
        if m.nonstrict_read_no_wait_strict_mode && mode.strict {
            plan.rts = RtsRule::Lower;
            plan.wts = WtsRule::NoWait;
        }
        plan
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    /// A read found the object locked.
    ReadLocked,
    /// No version old enough survives.
    TooOld,
    /// Serializable writer needed an old version.
    EagerValidation,
    LockFail,
    ValidationFail,
    OldVersionExhausted,
    /// Target was not primary, not serving, or missing.
    Unavailable,
    /// Aborted by reconfiguration.
    Reconfig,
    Timeout,
    SlaveRejected,
}

impl AbortReason {
    pub fn from_read(e: &ReadFail) -> Self {
        match e {
            ReadFail::Locked => AbortReason::ReadLocked,
            ReadFail::TooOld => AbortReason::TooOld,
            ReadFail::Unavailable => AbortReason::Unavailable,
        }
    }
}

/// Where an operation finds its object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Fixed(Oid),
    /// The object whose address is held in a register.
    Reg(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Val {
    Const(i64),
    /// Register value plus a delta.
    RegPlus(usize, i64),
    /// Address held in a register, stored as a value.
    RegAddr(usize),
}

/// One step of a transaction program. Reads and allocations append their
/// result to the register file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Read(Target),
    Write(Target, Val),
    Alloc { region: RegionId, size: usize, init: Val },
    Free(Target),
    /// Skip the next `n` ops if the register holds zero.
    SkipIfZero(usize, usize),
    /// Pause for the given number of local ticks.
    Think(u64),
    /// Read a batch of objects through a slave transaction on `node`,
    /// at this transaction's read timestamp.
    FanOut { node: u16, oids: Vec<Oid> },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub ops: Vec<Op>,
    /// Declared intent to write, for eager validation before the first
    /// buffered write.
    pub hint_writes: bool,
    pub label: String,
}

impl Program {
    pub fn new(label: impl Into<String>, ops: Vec<Op>) -> Self {
        let ops_have_writes = ops
            .iter()
            .any(|o| matches!(o, Op::Write(..) | Op::Alloc { .. } | Op::Free(_)));
        Program {
            ops,
            hint_writes: ops_have_writes,
            label: label.into(),
        }
    }

    pub fn without_hint(mut self) -> Self {
        self.hint_writes = false;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnState {
    Executing,
    Committing,
    Committed,
    Aborted(AbortReason),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferedWrite {
    pub value: i64,
    pub allocated: bool,
    /// Version the lock must find: the version read, or the head of a
    /// freshly allocated slot.
    pub expect: Option<TimePoint>,
    pub fresh_alloc: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadRecord {
    pub oid: Oid,
    pub version: TimePoint,
    pub value: i64,
}

/// Coordinator-side transaction state.
#[derive(Clone, Debug)]
pub struct TxnContext {
    pub id: TxnId,
    pub mode: TxnMode,
    pub rts: TimePoint,
    pub rts_interval: Option<TimeInterval>,
    pub read_set: BTreeMap<Oid, TimePoint>,
    /// External reads in completion order.
    pub reads: Vec<ReadRecord>,
    pub writes: BTreeMap<Oid, BufferedWrite>,
    pub allocs: BTreeSet<Oid>,
    pub wts: Option<TimePoint>,
    pub wts_interval: Option<TimeInterval>,
    pub state: TxnState,
    pub hint_writes: bool,
}

impl TxnContext {
    pub fn new(id: TxnId, mode: TxnMode, hint_writes: bool) -> Self {
        TxnContext {
            id,
            mode,
            rts: TimePoint::ZERO,
            rts_interval: None,
            read_set: BTreeMap::new(),
            reads: Vec::new(),
            writes: BTreeMap::new(),
            allocs: BTreeSet::new(),
            wts: None,
            wts_interval: None,
            state: TxnState::Executing,
            hint_writes,
        }
    }

    /// Read served locally: own buffered write, or a repeated read.
    pub fn local_read(&self, oid: Oid) -> Option<i64> {
        if let Some(w) = self.writes.get(&oid) {
            return Some(if w.allocated { w.value } else { TOMBSTONE });
        }
        if self.read_set.contains_key(&oid) {
            return self.reads.iter().rev().find(|r| r.oid == oid).map(|r| r.value);
        }
        None
    }

    /// Applies a read result. Returns the abort reason if the read must
    /// abort the transaction.
    pub fn apply_read(
        &mut self,
        oid: Oid,
        result: Result<ReadOk, ReadFail>,
        eager: bool,
    ) -> Result<i64, AbortReason> {
        let ok = result.map_err(|e| AbortReason::from_read(&e))?;
        if eager && ok.from_chain && (!self.writes.is_empty() || self.hint_writes) {
            return Err(AbortReason::EagerValidation);
        }
        self.read_set.insert(oid, ok.version);
        self.reads.push(ReadRecord {
            oid,
            version: ok.version,
            value: ok.value,
        });
        Ok(ok.value)
    }

    pub fn buffer_write(&mut self, oid: Oid, value: i64, allocated: bool) {
        let expect = self.read_set.get(&oid).copied();
        let entry = self.writes.entry(oid).or_insert(BufferedWrite {
            value,
            allocated,
            expect,
            fresh_alloc: false,
        });
        entry.value = value;
        entry.allocated = allocated;
    }

    pub fn buffer_alloc(&mut self, oid: Oid, head_ts: TimePoint, value: i64) {
        self.allocs.insert(oid);
        self.writes.insert(
            oid,
            BufferedWrite {
                value,
                allocated: true,
                expect: Some(head_ts),
                fresh_alloc: true,
            },
        );
    }

    pub fn is_read_only(&self) -> bool {
        self.writes.is_empty()
    }

    /// Lock items for every buffered write.
    pub fn lock_items(&self) -> Vec<LockItem> {
        self.writes
            .iter()
            .map(|(&oid, w)| LockItem {
                oid,
                expect: match w.expect {
                    Some(v) => LockExpect::Version(v),
                    None => LockExpect::NotAfter(self.rts),
                },
                value: w.value,
                allocated: w.allocated,
            })
            .collect()
    }

    /// Objects read but not written, with the versions observed.
    pub fn validation_set(&self) -> Vec<(Oid, TimePoint)> {
        self.read_set
            .iter()
            .filter(|(o, _)| !self.writes.contains_key(o))
            .map(|(o, v)| (*o, *v))
            .collect()
    }

    pub fn write_records(&self) -> Vec<WriteRecord> {
        self.writes
            .iter()
            .map(|(&oid, w)| WriteRecord {
                oid,
                value: w.value,
                allocated: w.allocated,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadOk {
    pub version: TimePoint,
    pub value: i64,
    pub from_chain: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReadFail {
    Locked,
    TooOld,
    Unavailable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockItem {
    pub oid: Oid,
    pub expect: LockExpect,
    pub value: i64,
    pub allocated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteRecord {
    pub oid: Oid,
    pub value: i64,
    pub allocated: bool,
}

/// Transaction protocol messages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnMsg {
    Read { txn: TxnId, oid: Oid, rts: TimePoint },
    ReadResp { txn: TxnId, oid: Oid, result: Result<ReadOk, ReadFail> },
    Alloc { txn: TxnId, region: RegionId, size: usize },
    AllocResp { txn: TxnId, result: Option<(Oid, TimePoint)> },
    Lock { txn: TxnId, items: Vec<LockItem> },
    LockAck { txn: TxnId, result: Result<(), LockFail> },
    Validate { txn: TxnId, items: Vec<(Oid, TimePoint)> },
    ValidateAck { txn: TxnId, ok: bool },
    CommitBackup { txn: TxnId, wts: TimePoint, writes: Vec<WriteRecord> },
    CommitBackupAck { txn: TxnId },
    CommitPrimary { txn: TxnId, wts: TimePoint, writes: Vec<WriteRecord> },
    CommitPrimaryAck { txn: TxnId },
    Truncate { txn: TxnId, wts: TimePoint, writes: Vec<WriteRecord> },
    TruncateAck { txn: TxnId },
    Abort { txn: TxnId, release: Vec<Oid> },
    Slave { master: TxnId, rts: TimePoint, oids: Vec<Oid> },
    SlaveResp { master: TxnId, result: Result<Vec<ReadRecord>, AbortReason> },
}

impl TxnMsg {
    pub fn txn(&self) -> TxnId {
        match self {
            TxnMsg::Read { txn, .. }
            | TxnMsg::ReadResp { txn, .. }
            | TxnMsg::Alloc { txn, .. }
            | TxnMsg::AllocResp { txn, .. }
            | TxnMsg::Lock { txn, .. }
            | TxnMsg::LockAck { txn, .. }
            | TxnMsg::Validate { txn, .. }
            | TxnMsg::ValidateAck { txn, .. }
            | TxnMsg::CommitBackup { txn, .. }
            | TxnMsg::CommitBackupAck { txn }
            | TxnMsg::CommitPrimary { txn, .. }
            | TxnMsg::CommitPrimaryAck { txn }
            | TxnMsg::Truncate { txn, .. }
            | TxnMsg::TruncateAck { txn }
            | TxnMsg::Abort { txn, .. } => *txn,
            TxnMsg::Slave { master, .. } | TxnMsg::SlaveResp { master, .. } => *master,
        }
    }
}

pub fn worker_for(txn: TxnId, workers: u16) -> WorkerId {
    (txn % workers.max(1) as u64) as WorkerId
}

/// Snapshot read at a primary.
pub fn serve_read(store: &mut Store, oid: Oid, rts: TimePoint) -> Result<ReadOk, ReadFail> {
    match store.read_at_ts(oid, rts) {
        Ok(v) => Ok(ReadOk {
            version: v.ts,
            value: if v.allocated {
                store::decode_value(&v.data)
            } else {
                TOMBSTONE
            },
            from_chain: v.from_chain,
        }),
        Err(StoreError::Locked(_)) => Err(ReadFail::Locked),
        Err(StoreError::TooOld(_)) => Err(ReadFail::TooOld),
        Err(_) => Err(ReadFail::Unavailable),
    }
}

/// Locks every item or none. On failure the locks taken by this call are
/// released again.
pub fn lock_all(store: &mut Store, txn: TxnId, items: &[LockItem]) -> Result<(), LockFail> {
    let worker = worker_for(txn, store.config().workers);
    for (i, item) in items.iter().enumerate() {
        if let Err(e) = store.lock_for_write(item.oid, txn, item.expect, worker) {
            for done in &items[..i] {
                store.unlock_abort(done.oid, txn);
            }
            return Err(e);
        }
    }
    Ok(())
}

/// Read validation at a primary: every object unlocked and still at the
/// version read.
pub fn validate_reads(store: &mut Store, items: &[(Oid, TimePoint)]) -> bool {
    items.iter().all(|&(oid, seen)| {
        matches!(store.read_header(oid), Ok((false, ts)) if ts == seen)
    })
}

/// Installs and unlocks at a primary.
pub fn install_writes(store: &mut Store, txn: TxnId, wts: TimePoint, writes: &[WriteRecord]) {
    for w in writes {
        store.install_commit(
            w.oid,
            txn,
            wts,
            store::encode_value(w.value, VALUE_BYTES),
            w.allocated,
        );
    }
}

/// Newest-wins apply at a backup.
pub fn apply_at_backup(store: &mut Store, wts: TimePoint, writes: &[WriteRecord]) {
    for w in writes {
        store.backup_apply(
            w.oid,
            wts,
            store::encode_value(w.value, VALUE_BYTES),
            w.allocated,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Role, StoreConfig};

    fn oid(slot: u16) -> Oid {
        Oid::new(0, 0, 0, slot)
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ["strict-ser", "ser", "strict-si", "si"] {
            assert_eq!(m.parse::<TxnMode>().unwrap().to_string(), m);
        }
        assert!("serializable".parse::<TxnMode>().is_err());
    }

    #[test]
    fn plans_per_mode() {
        let none = Mutations::default();
        let p = Plan::new(TxnMode::STRICT_SER, none);
        assert_eq!(
            (p.rts, p.wts, p.validate),
            (RtsRule::UpperWaited, WtsRule::WaitHoldingLocks, ValidateRule::AfterWait)
        );
        // non-strict serializable still waits out the write timestamp
        assert_eq!(Plan::new(TxnMode::SER, none).wts, WtsRule::WaitHoldingLocks);
        assert_eq!(Plan::new(TxnMode::SER, none).rts, RtsRule::Lower);
        let si = Plan::new(TxnMode::STRICT_SI, none);
        assert_eq!((si.wts, si.validate, si.eager_validation), (WtsRule::WaitOverlapped, ValidateRule::None, false));
        assert_eq!(Plan::new(TxnMode::SI, none).wts, WtsRule::NoWait);
    }

    #[test]
    fn mutation_plans() {
        let p = Plan::new(TxnMode::STRICT_SER, Mutations::only("skip_write_wait"));
        assert_eq!(p.wts, WtsRule::NoWait);
        let p = Plan::new(TxnMode::STRICT_SER, Mutations::only("validate_during_wait"));
        assert_eq!(p.validate, ValidateRule::DuringWait);
        let p = Plan::new(TxnMode::STRICT_SER, Mutations::only("wait_before_locks"));
        assert_eq!(p.wts, WtsRule::WaitBeforeLocks);
        let p = Plan::new(
            TxnMode::STRICT_SER,
            Mutations::only("nonstrict_read_no_wait_strict_mode"),
        );
        assert_eq!((p.rts, p.wts), (RtsRule::Lower, WtsRule::NoWait));
        assert!(Mutations::default().enable("bogus").is_err());
    }

    #[test]
    fn own_write_is_read_back_without_read_set_entry() {
        let mut ctx = TxnContext::new(1, TxnMode::STRICT_SER, false);
        ctx.buffer_write(oid(1), 42, true);
        assert_eq!(ctx.local_read(oid(1)), Some(42));
        assert!(ctx.read_set.is_empty());
    }

    #[test]
    fn eager_validation_only_when_writing() {
        let old = ReadOk {
            version: TimePoint(3),
            value: 7,
            from_chain: true,
        };
        let mut ro = TxnContext::new(1, TxnMode::STRICT_SER, false);
        assert_eq!(ro.apply_read(oid(1), Ok(old), true), Ok(7));
        let mut rw = TxnContext::new(2, TxnMode::STRICT_SER, false);
        rw.buffer_write(oid(2), 1, true);
        assert_eq!(rw.apply_read(oid(1), Ok(old), true), Err(AbortReason::EagerValidation));
        let mut hinted = TxnContext::new(3, TxnMode::STRICT_SER, true);
        assert_eq!(hinted.apply_read(oid(1), Ok(old), true), Err(AbortReason::EagerValidation));
        // snapshot isolation never validates eagerly
        let mut si = TxnContext::new(4, TxnMode::STRICT_SI, true);
        si.buffer_write(oid(2), 1, true);
        assert_eq!(si.apply_read(oid(1), Ok(old), false), Ok(7));
    }

    #[test]
    fn lock_items_use_read_versions_or_rts() {
        let mut ctx = TxnContext::new(1, TxnMode::STRICT_SER, false);
        ctx.rts = TimePoint(50);
        ctx.apply_read(
            oid(1),
            Ok(ReadOk {
                version: TimePoint(10),
                value: 0,
                from_chain: false,
            }),
            true,
        )
        .unwrap();
        ctx.buffer_write(oid(1), 1, true);
        ctx.buffer_write(oid(2), 2, true);
        let items = ctx.lock_items();
        assert_eq!(items[0].expect, LockExpect::Version(TimePoint(10)));
        assert_eq!(items[1].expect, LockExpect::NotAfter(TimePoint(50)));
        assert!(ctx.validation_set().is_empty());
    }

    fn primary_with(n: usize) -> (Store, Vec<Oid>) {
        let mut s = Store::new(StoreConfig::default());
        s.add_region(0, Role::Primary);
        let oids: Vec<Oid> = (0..n).map(|_| s.slab_alloc(0, VALUE_BYTES).unwrap()).collect();
        for &o in &oids {
            lock_all(
                &mut s,
                0,
                &[LockItem {
                    oid: o,
                    expect: LockExpect::Version(TimePoint::ZERO),
                    value: 0,
                    allocated: true,
                }],
            )
            .unwrap();
            install_writes(
                &mut s,
                0,
                TimePoint(1),
                &[WriteRecord {
                    oid: o,
                    value: 0,
                    allocated: true,
                }],
            );
        }
        (s, oids)
    }

    #[test]
    fn lock_all_is_all_or_nothing() {
        let (mut s, o) = primary_with(2);
        let item = |oid, v| LockItem {
            oid,
            expect: LockExpect::Version(TimePoint(v)),
            value: 5,
            allocated: true,
        };
        assert_eq!(lock_all(&mut s, 7, &[item(o[0], 1), item(o[1], 99)]), Err(LockFail::Changed));
        assert!(!s.head(o[0]).unwrap().header.locked);
        assert!(lock_all(&mut s, 7, &[item(o[0], 1), item(o[1], 1)]).is_ok());
    }

    #[test]
    fn validation_and_install() {
        let (mut s, o) = primary_with(2);
        assert!(validate_reads(&mut s, &[(o[0], TimePoint(1))]));
        assert!(!validate_reads(&mut s, &[(o[0], TimePoint(0))]));
        let items = [LockItem {
            oid: o[1],
            expect: LockExpect::Version(TimePoint(1)),
            value: 9,
            allocated: true,
        }];
        lock_all(&mut s, 3, &items).unwrap();
        assert!(!validate_reads(&mut s, &[(o[1], TimePoint(1))]));
        install_writes(
            &mut s,
            3,
            TimePoint(5),
            &[WriteRecord {
                oid: o[1],
                value: 9,
                allocated: true,
            }],
        );
        let r = serve_read(&mut s, o[1], TimePoint(6)).unwrap();
        assert_eq!((r.value, r.version), (9, TimePoint(5)));
        let r = serve_read(&mut s, o[1], TimePoint(4)).unwrap();
        assert_eq!((r.value, r.version, r.from_chain), (0, TimePoint(1), true));
    }
}
