//! Per-node object store.
//!
//! Objects live in fixed-size slots of slabs inside regions. Each object has
//! a head version at a fixed location; when multi-versioning is on, a write
//! copies the previous head into an old version allocated from a per-worker
//! block, and the head's old-version pointer links the copies in decreasing
//! timestamp order. Blocks are freed wholesale once the GC safe point passes
//! their GC time. Freed blocks and reused slabs are poisoned: any later
//! access through a stale reference is counted as a poisoned read.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{TimeInterval, TimePoint};

/// Bytes of header in front of every version (head or old).
pub const HEADER_BYTES: usize = 16;

pub type RegionId = u16;
pub type TxnId = u64;
pub type WorkerId = u16;

/// Global object address: region, slab, slab generation and slot.
///
/// The generation is bumped whenever a slab is reused; it exists only so
/// that reads through a pre-reuse address can be trapped.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Oid(pub u64);

impl Oid {
    pub fn new(region: RegionId, slab: u16, gen: u16, slot: u16) -> Self {
        Oid((region as u64) << 48 | (slab as u64) << 32 | (gen as u64) << 16 | slot as u64)
    }
    pub fn region(self) -> RegionId {
        (self.0 >> 48) as u16
    }
    pub fn slab(self) -> u16 {
        (self.0 >> 32) as u16
    }
    pub fn gen(self) -> u16 {
        (self.0 >> 16) as u16
    }
    pub fn slot(self) -> u16 {
        self.0 as u16
    }
}

impl std::fmt::Display for Oid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}.{}:{}", self.region(), self.slab(), self.gen(), self.slot())
    }
}

/// Location of an old version inside the block pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VersionRef {
    pub block: u32,
    pub index: u32,
    pub gen: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectHeader {
    pub locked: bool,
    pub allocated: bool,
    pub ts: TimePoint,
    pub ovp: Option<VersionRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadVersion {
    pub header: ObjectHeader,
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OldVersion {
    pub ts: TimePoint,
    pub allocated: bool,
    pub ovp: Option<VersionRef>,
    pub data: Vec<u8>,
}

/// What to do when old-version memory runs out at lock time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OldVersionPolicy {
    /// Hold the writer at the lock phase until memory frees up.
    Block,
    /// Fail the lock; the writer aborts.
    Abort,
    /// Let the write through and drop the object's entire history.
    #[default]
    Truncate,
}

impl std::str::FromStr for OldVersionPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "block" => Ok(Self::Block),
            "abort" => Ok(Self::Abort),
            "truncate" => Ok(Self::Truncate),
            other => Err(format!("unknown old-version policy `{other}`")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StoreConfig {
    pub multi_version: bool,
    pub policy: OldVersionPolicy,
    pub block_bytes: usize,
    pub old_version_budget: usize,
    pub slab_bytes: usize,
    pub slabs_per_region: u16,
    pub workers: u16,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            multi_version: true,
            policy: OldVersionPolicy::Truncate,
            block_bytes: 4 * 1024,
            old_version_budget: 16 * 1024,
            slab_bytes: 1024,
            slabs_per_region: 64,
            workers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("object {0} is locked")]
    Locked(Oid),
    #[error("no version of {0} at or below the read timestamp survives")]
    TooOld(Oid),
    #[error("object {0} does not exist")]
    NoSuchObject(Oid),
    #[error("region {0} has no replica here")]
    NoSuchRegion(RegionId),
    #[error("region {0} is not primary here")]
    NotPrimary(RegionId),
    #[error("read through freed memory at {0}")]
    Poisoned(Oid),
    #[error("old-version memory exhausted")]
    OldVersionExhausted,
    #[error("no free slot for objects of {0} bytes in region {1}")]
    RegionFull(usize, RegionId),
}

/// Result of a successful snapshot read.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadVersion {
    pub data: Vec<u8>,
    pub ts: TimePoint,
    pub allocated: bool,
    /// True when the version came from the old-version chain.
    pub from_chain: bool,
}

/// Condition a write lock checks against the head version.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LockExpect {
    /// Head must still be the version the transaction read.
    Version(TimePoint),
    /// Blind write: head must not be newer than the read timestamp.
    NotAfter(TimePoint),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LockFail {
    Locked,
    Changed,
    Missing,
    OldVersionExhausted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Primary,
    Backup,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlabState {
    Active,
    /// All slots free; waiting for GC to pass `recorded.upper`.
    Draining { recorded: TimeInterval },
    Free,
}

/// Free-slot bitmap with a summary word per 64 leaf words.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreeBitmap {
    leaves: Vec<u64>,
    summary: Vec<u64>,
    len: usize,
}

impl FreeBitmap {
    /// All `len` slots free.
    pub fn all_free(len: usize) -> Self {
        let words = len.div_ceil(64);
        let mut leaves = vec![u64::MAX; words];
        if !len.is_multiple_of(64) {
            leaves[words - 1] = (1u64 << (len % 64)) - 1;
        }
        let mut bm = FreeBitmap {
            leaves,
            summary: vec![0; words.div_ceil(64)],
            len,
        };
        for w in 0..words {
            bm.refresh_summary(w);
        }
        bm
    }

    fn refresh_summary(&mut self, word: usize) {
        let (s, b) = (word / 64, word % 64);
        if self.leaves[word] != 0 {
            self.summary[s] |= 1 << b;
        } else {
            self.summary[s] &= !(1 << b);
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_free(&self, slot: usize) -> bool {
        self.leaves[slot / 64] & (1 << (slot % 64)) != 0
    }

    pub fn set_free(&mut self, slot: usize, free: bool) {
        let w = slot / 64;
        if free {
            self.leaves[w] |= 1 << (slot % 64);
        } else {
            self.leaves[w] &= !(1 << (slot % 64));
        }
        self.refresh_summary(w);
    }

    /// Lowest free slot, found through the summary level.
    pub fn first_free(&self) -> Option<usize> {
        for (si, &s) in self.summary.iter().enumerate() {
            if s != 0 {
                let w = si * 64 + s.trailing_zeros() as usize;
                return Some(w * 64 + self.leaves[w].trailing_zeros() as usize);
            }
        }
        None
    }

    pub fn free_count(&self) -> usize {
        self.leaves.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn all_slots_free(&self) -> bool {
        self.free_count() == self.len
    }
}

#[derive(Clone, Debug)]
pub struct Slab {
    pub object_size: usize,
    pub gen: u16,
    pub state: SlabState,
    /// Maintained at the primary only.
    pub bitmap: FreeBitmap,
}

impl Slab {
    fn slots_for(slab_bytes: usize, object_size: usize) -> usize {
        slab_bytes / (HEADER_BYTES + object_size)
    }
}

#[derive(Clone, Debug)]
struct LockRecord {
    txn: TxnId,
    pending_old: Option<VersionRef>,
    /// Old version could not be allocated; install drops the history.
    truncate: bool,
}

#[derive(Clone, Debug)]
pub struct RegionReplica {
    pub id: RegionId,
    pub role: Role,
    pub slabs: Vec<Slab>,
    objects: BTreeMap<Oid, HeadVersion>,
    locks: BTreeMap<Oid, LockRecord>,
}

impl RegionReplica {
    fn new(id: RegionId, role: Role, slabs: u16) -> Self {
        RegionReplica {
            id,
            role,
            slabs: (0..slabs)
                .map(|_| Slab {
                    object_size: 0,
                    gen: 0,
                    state: SlabState::Free,
                    bitmap: FreeBitmap::default(),
                })
                .collect(),
            objects: BTreeMap::new(),
            locks: BTreeMap::new(),
        }
    }

    pub fn objects(&self) -> impl Iterator<Item = (&Oid, &HeadVersion)> {
        self.objects.iter()
    }

    pub fn locked_by(&self, txn: TxnId) -> Vec<Oid> {
        self.locks
            .iter()
            .filter(|(_, l)| l.txn == txn)
            .map(|(o, _)| *o)
            .collect()
    }

    pub fn lock_holders(&self) -> Vec<(Oid, TxnId)> {
        self.locks.iter().map(|(o, l)| (*o, l.txn)).collect()
    }
}

#[derive(Clone, Debug)]
struct Block {
    owner: WorkerId,
    bump: usize,
    gc_time: TimePoint,
    /// Old versions whose writer has not yet committed or aborted.
    pending: u32,
    gen: u32,
    live: bool,
    versions: Vec<OldVersion>,
}

/// Old-version memory of one node.
#[derive(Clone, Debug)]
struct BlockPool {
    blocks: Vec<Block>,
    free: Vec<u32>,
    active: Vec<Option<u32>>,
    block_bytes: usize,
    budget_blocks: usize,
}

impl BlockPool {
    fn new(cfg: &StoreConfig) -> Self {
        BlockPool {
            blocks: Vec::new(),
            free: Vec::new(),
            active: vec![None; cfg.workers.max(1) as usize],
            block_bytes: cfg.block_bytes,
            budget_blocks: (cfg.old_version_budget / cfg.block_bytes).max(1),
        }
    }

    fn live_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.live).count()
    }

    fn fresh_block(&mut self, owner: WorkerId) -> Option<u32> {
        let idx = if let Some(idx) = self.free.pop() {
            idx
        } else if self.blocks.len() < self.budget_blocks {
            self.blocks.push(Block {
                owner,
                bump: 0,
                gc_time: TimePoint::ZERO,
                pending: 0,
                gen: 0,
                live: false,
                versions: Vec::new(),
            });
            (self.blocks.len() - 1) as u32
        } else {
            return None;
        };
        let b = &mut self.blocks[idx as usize];
        b.owner = owner;
        b.bump = 0;
        b.gc_time = TimePoint::ZERO;
        b.pending = 0;
        b.live = true;
        b.versions.clear();
        Some(idx)
    }

    fn alloc(&mut self, worker: WorkerId, v: OldVersion) -> Option<VersionRef> {
        let need = HEADER_BYTES + v.data.len();
        let w = worker as usize % self.active.len();
        let fits = |b: &Block, bytes: usize| b.live && b.bump + need <= bytes;
        let idx = match self.active[w] {
            Some(i) if fits(&self.blocks[i as usize], self.block_bytes) => i,
            _ => {
                let i = self.fresh_block(worker)?;
                if need > self.block_bytes {
                    return None;
                }
                self.active[w] = Some(i);
                i
            }
        };
        let b = &mut self.blocks[idx as usize];
        b.bump += need;
        b.pending += 1;
        b.versions.push(v);
        Some(VersionRef {
            block: idx,
            index: (b.versions.len() - 1) as u32,
            gen: b.gen,
        })
    }

    fn get(&self, r: VersionRef) -> Option<&OldVersion> {
        let b = self.blocks.get(r.block as usize)?;
        if !b.live || b.gen != r.gen {
            return None;
        }
        b.versions.get(r.index as usize)
    }

    /// Resolves a pending allocation: `gc` is the writer's timestamp on
    /// commit, zero on abort.
    fn settle(&mut self, r: VersionRef, gc: TimePoint) {
        let b = &mut self.blocks[r.block as usize];
        debug_assert!(b.live && b.gen == r.gen && b.pending > 0);
        b.pending -= 1;
        b.gc_time = b.gc_time.max(gc);
    }

    fn try_free(&mut self, worker: Option<WorkerId>, gc_point: TimePoint) -> usize {
        let mut freed = 0;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if !b.live || b.pending > 0 || b.gc_time >= gc_point {
                continue;
            }
            if worker.is_some_and(|w| w != b.owner) {
                continue;
            }
            // never free a block that is still accepting allocations unless full
            b.live = false;
            b.gen = b.gen.wrapping_add(1);
            b.versions.clear();
            self.free.push(i as u32);
            for a in self.active.iter_mut() {
                if *a == Some(i as u32) {
                    *a = None;
                }
            }
            freed += 1;
        }
        freed
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub poisoned_reads: u64,
    pub old_versions_created: u64,
    pub truncations: u64,
    pub exhausted: u64,
    pub blocks_freed: u64,
    pub slabs_reused: u64,
    /// Installs whose timestamp did not exceed the previous head's.
    pub ts_regressions: u64,
}

/// All replicas and old-version memory held by one node.
#[derive(Clone, Debug)]
pub struct Store {
    cfg: StoreConfig,
    regions: BTreeMap<RegionId, RegionReplica>,
    pool: BlockPool,
    pub stats: StoreStats,
}

impl Store {
    pub fn new(cfg: StoreConfig) -> Self {
        let pool = BlockPool::new(&cfg);
        Store {
            cfg,
            regions: BTreeMap::new(),
            pool,
            stats: StoreStats::default(),
        }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn add_region(&mut self, id: RegionId, role: Role) {
        self.regions
            .insert(id, RegionReplica::new(id, role, self.cfg.slabs_per_region));
    }

    pub fn drop_region(&mut self, id: RegionId) {
        self.regions.remove(&id);
    }

    pub fn region(&self, id: RegionId) -> Option<&RegionReplica> {
        self.regions.get(&id)
    }

    pub fn regions(&self) -> impl Iterator<Item = &RegionReplica> {
        self.regions.values()
    }

    pub fn role(&self, id: RegionId) -> Option<Role> {
        self.regions.get(&id).map(|r| r.role)
    }

    fn primary_mut(&mut self, id: RegionId) -> Result<&mut RegionReplica, StoreError> {
        let r = self
            .regions
            .get_mut(&id)
            .ok_or(StoreError::NoSuchRegion(id))?;
        if r.role != Role::Primary {
            return Err(StoreError::NotPrimary(id));
        }
        Ok(r)
    }

    fn primary(&self, id: RegionId) -> Result<&RegionReplica, StoreError> {
        let r = self.regions.get(&id).ok_or(StoreError::NoSuchRegion(id))?;
        if r.role != Role::Primary {
            return Err(StoreError::NotPrimary(id));
        }
        Ok(r)
    }

    /// Checks that `oid` still names a slot of a live slab generation.
    fn check_slab(&mut self, oid: Oid) -> Result<(), StoreError> {
        let Some(r) = self.regions.get(&oid.region()) else {
            return Err(StoreError::NoSuchRegion(oid.region()));
        };
        match r.slabs.get(oid.slab() as usize) {
            Some(s) if s.gen == oid.gen() && s.state != SlabState::Free => Ok(()),
            Some(_) => {
                self.stats.poisoned_reads += 1;
                Err(StoreError::Poisoned(oid))
            }
            None => Err(StoreError::NoSuchObject(oid)),
        }
    }

    pub fn head(&self, oid: Oid) -> Option<&HeadVersion> {
        self.regions.get(&oid.region())?.objects.get(&oid)
    }

    /// Version with the greatest timestamp at or below `rts`.
    pub fn read_at_ts(&mut self, oid: Oid, rts: TimePoint) -> Result<ReadVersion, StoreError> {
        self.primary(oid.region())?;
        self.check_slab(oid)?;
        let region = &self.regions[&oid.region()];
        let head = region.objects.get(&oid).ok_or(StoreError::NoSuchObject(oid))?;
        if head.header.locked {
            return Err(StoreError::Locked(oid));
        }
        if head.header.ts <= rts {
            return Ok(ReadVersion {
                data: head.data.clone(),
                ts: head.header.ts,
                allocated: head.header.allocated,
                from_chain: false,
            });
        }
        let mut next = head.header.ovp;
        while let Some(r) = next {
            let Some(v) = self.pool.get(r) else {
                self.stats.poisoned_reads += 1;
                return Err(StoreError::Poisoned(oid));
            };
            if v.ts <= rts {
                return Ok(ReadVersion {
                    data: v.data.clone(),
                    ts: v.ts,
                    allocated: v.allocated,
                    from_chain: true,
                });
            }
            next = v.ovp;
        }
        Err(StoreError::TooOld(oid))
    }

    /// Header fields used by read validation: `(locked, ts)`.
    pub fn read_header(&mut self, oid: Oid) -> Result<(bool, TimePoint), StoreError> {
        self.primary(oid.region())?;
        self.check_slab(oid)?;
        let head = self.regions[&oid.region()]
            .objects
            .get(&oid)
            .ok_or(StoreError::NoSuchObject(oid))?;
        Ok((head.header.locked, head.header.ts))
    }

    /// Locks `oid` for `txn` if it is unlocked and satisfies `expect`.
    pub fn lock_at_ts(&mut self, oid: Oid, txn: TxnId, expect: LockExpect) -> Result<(), LockFail> {
        let region = self.primary_mut(oid.region()).map_err(|_| LockFail::Missing)?;
        let head = region.objects.get_mut(&oid).ok_or(LockFail::Missing)?;
        if head.header.locked {
            return Err(LockFail::Locked);
        }
        let ok = match expect {
            LockExpect::Version(ts) => head.header.ts == ts,
            LockExpect::NotAfter(rts) => head.header.ts <= rts,
        };
        if !ok {
            return Err(LockFail::Changed);
        }
        head.header.locked = true;
        region.locks.insert(
            oid,
            LockRecord {
                txn,
                pending_old: None,
                truncate: false,
            },
        );
        Ok(())
    }

    /// Copies the locked head into a fresh old version. Returns `None` in
    /// single-version mode.
    pub fn make_old_version(
        &mut self,
        oid: Oid,
        worker: WorkerId,
    ) -> Result<Option<VersionRef>, StoreError> {
        if !self.cfg.multi_version {
            return Ok(None);
        }
        let region = self.primary(oid.region())?;
        let head = region.objects.get(&oid).ok_or(StoreError::NoSuchObject(oid))?;
        debug_assert!(head.header.locked);
        let v = OldVersion {
            ts: head.header.ts,
            allocated: head.header.allocated,
            ovp: head.header.ovp,
            data: head.data.clone(),
        };
        match self.pool.alloc(worker, v) {
            Some(r) => {
                self.stats.old_versions_created += 1;
                if let Some(lock) = self
                    .regions
                    .get_mut(&oid.region())
                    .and_then(|reg| reg.locks.get_mut(&oid))
                {
                    lock.pending_old = Some(r);
                }
                Ok(Some(r))
            }
            None => {
                self.stats.exhausted += 1;
                Err(StoreError::OldVersionExhausted)
            }
        }
    }

    /// Lock plus old-version allocation, applying the configured policy
    /// when memory is exhausted. Under [`OldVersionPolicy::Block`] the lock is
    /// released again and `OldVersionExhausted` returned so the caller can
    /// retry later.
    pub fn lock_for_write(
        &mut self,
        oid: Oid,
        txn: TxnId,
        expect: LockExpect,
        worker: WorkerId,
    ) -> Result<(), LockFail> {
        self.lock_at_ts(oid, txn, expect)?;
        match self.make_old_version(oid, worker) {
            Ok(_) => Ok(()),
            Err(_) => match self.cfg.policy {
                OldVersionPolicy::Truncate => {
                    if let Some(l) = self
                        .regions
                        .get_mut(&oid.region())
                        .and_then(|r| r.locks.get_mut(&oid))
                    {
                        l.truncate = true;
                    }
                    Ok(())
                }
                OldVersionPolicy::Abort | OldVersionPolicy::Block => {
                    self.unlock_abort(oid, txn);
                    Err(LockFail::OldVersionExhausted)
                }
            },
        }
    }

    pub fn is_locked_by(&self, oid: Oid, txn: TxnId) -> bool {
        self.regions
            .get(&oid.region())
            .and_then(|r| r.locks.get(&oid))
            .is_some_and(|l| l.txn == txn)
    }

    /// Installs a committed write and unlocks. Returns false when `txn` does
    /// not hold the lock and the head is already at or past `wts` (a
    /// replayed install), in which case nothing changes.
    pub fn install_commit(
        &mut self,
        oid: Oid,
        txn: TxnId,
        wts: TimePoint,
        data: Vec<u8>,
        allocated: bool,
    ) -> bool {
        let Some(region) = self.regions.get_mut(&oid.region()) else {
            return false;
        };
        let lock = match region.locks.get(&oid) {
            Some(l) if l.txn == txn => region.locks.remove(&oid),
            _ => None,
        };
        let head = region.objects.entry(oid).or_insert_with(|| HeadVersion {
            header: ObjectHeader {
                locked: false,
                allocated: false,
                ts: TimePoint::ZERO,
                ovp: None,
            },
            data: Vec::new(),
        });
        if lock.is_none() && head.header.ts >= wts {
            return false;
        }
        if wts <= head.header.ts {
            self.stats.ts_regressions += 1;
        }
        let ovp = match &lock {
            Some(LockRecord {
                pending_old: Some(r),
                ..
            }) => Some(*r),
            Some(LockRecord { truncate: true, .. }) => {
                self.stats.truncations += 1;
                None
            }
            // single-version mode, or an unlocked replay after failover
            _ => None,
        };
        let was_allocated = head.header.allocated;
        head.header = ObjectHeader {
            locked: false,
            allocated,
            ts: wts,
            ovp,
        };
        head.data = data;
        if let Some(LockRecord {
            pending_old: Some(r),
            ..
        }) = lock
        {
            self.pool.settle(r, wts);
        }
        if region.role == Role::Primary && was_allocated != allocated {
            let slab = &mut region.slabs[oid.slab() as usize];
            if slab.bitmap.len() > oid.slot() as usize {
                slab.bitmap.set_free(oid.slot() as usize, !allocated);
            }
        }
        true
    }

    /// Releases `txn`'s lock on `oid` without changing the head. The old
    /// version copied at lock time is discarded.
    pub fn unlock_abort(&mut self, oid: Oid, txn: TxnId) {
        let Some(region) = self.regions.get_mut(&oid.region()) else {
            return;
        };
        if !matches!(region.locks.get(&oid), Some(l) if l.txn == txn) {
            return;
        }
        let lock = region.locks.remove(&oid).expect("checked above");
        if let Some(h) = region.objects.get_mut(&oid) {
            h.header.locked = false;
        }
        if let Some(r) = lock.pending_old {
            self.pool.settle(r, TimePoint::ZERO);
        }
    }

    /// Releases every lock held by `txn` on this node.
    pub fn abort_all(&mut self, txn: TxnId) -> Vec<Oid> {
        let oids: Vec<Oid> = self
            .regions
            .values()
            .flat_map(|r| r.locked_by(txn))
            .collect();
        for &o in &oids {
            self.unlock_abort(o, txn);
        }
        oids
    }

    /// Newest-wins apply at a backup. Stale applies are no-ops.
    pub fn backup_apply(&mut self, oid: Oid, wts: TimePoint, data: Vec<u8>, allocated: bool) -> bool {
        let Some(region) = self.regions.get_mut(&oid.region()) else {
            return false;
        };
        // backups learn the slab layout from the objects they receive
        if let Some(s) = region.slabs.get_mut(oid.slab() as usize) {
            if s.gen > oid.gen() {
                return false;
            }
            if s.state == SlabState::Free || s.gen < oid.gen() {
                s.state = SlabState::Active;
                s.gen = oid.gen();
                s.object_size = data.len();
            }
        }
        match region.objects.get_mut(&oid) {
            Some(h) if h.header.ts >= wts => false,
            Some(h) => {
                h.header.ts = wts;
                h.header.allocated = allocated;
                h.data = data;
                true
            }
            None => {
                region.objects.insert(
                    oid,
                    HeadVersion {
                        header: ObjectHeader {
                            locked: false,
                            allocated,
                            ts: wts,
                            ovp: None,
                        },
                        data,
                    },
                );
                true
            }
        }
    }

    /// Frees every settled block with GC time below `gc_point`. `worker`
    /// restricts freeing to one owner's blocks.
    pub fn try_free_blocks(&mut self, worker: Option<WorkerId>, gc_point: TimePoint) -> usize {
        let n = self.pool.try_free(worker, gc_point);
        self.stats.blocks_freed += n as u64;
        n
    }

    pub fn live_blocks(&self) -> usize {
        self.pool.live_blocks()
    }

    /// Allocates a slot for an object of `size` data bytes in a primary
    /// region. The slot is reserved in the bitmap; its header's allocated
    /// bit is set only when the allocating transaction commits.
    pub fn slab_alloc(&mut self, region: RegionId, size: usize) -> Result<Oid, StoreError> {
        let slab_bytes = self.cfg.slab_bytes;
        let r = self.primary_mut(region)?;
        let usable = |s: &Slab| {
            s.object_size == size
                && matches!(s.state, SlabState::Active | SlabState::Draining { .. })
                && s.bitmap.first_free().is_some()
        };
        let idx = match r.slabs.iter().position(usable) {
            Some(i) => i,
            None => {
                let i = r
                    .slabs
                    .iter()
                    .position(|s| s.state == SlabState::Free)
                    .ok_or(StoreError::RegionFull(size, region))?;
                let slots = Slab::slots_for(slab_bytes, size);
                if slots == 0 {
                    return Err(StoreError::RegionFull(size, region));
                }
                let s = &mut r.slabs[i];
                s.object_size = size;
                s.bitmap = FreeBitmap::all_free(slots);
                s.state = SlabState::Active;
                i
            }
        };
        let s = &mut r.slabs[idx];
        // an allocation cancels a pending reuse
        s.state = SlabState::Active;
        let slot = s.bitmap.first_free().expect("usable slab has a free slot");
        s.bitmap.set_free(slot, false);
        let oid = Oid::new(region, idx as u16, s.gen, slot as u16);
        r.objects.entry(oid).or_insert_with(|| HeadVersion {
            header: ObjectHeader {
                locked: false,
                allocated: false,
                ts: TimePoint::ZERO,
                ovp: None,
            },
            data: vec![0; size],
        });
        Ok(oid)
    }

    /// Creates an allocated object at version 0 in a primary region. Used
    /// to load initial data before a run.
    pub fn seed_object(&mut self, region: RegionId, data: Vec<u8>) -> Result<Oid, StoreError> {
        let oid = self.slab_alloc(region, data.len())?;
        let r = self.primary_mut(region)?;
        let head = r.objects.get_mut(&oid).expect("just allocated");
        head.header.allocated = true;
        head.data = data;
        Ok(oid)
    }

    /// Returns an uncommitted reservation to the free bitmap.
    pub fn slab_release(&mut self, oid: Oid) {
        if let Ok(r) = self.primary_mut(oid.region()) {
            let s = &mut r.slabs[oid.slab() as usize];
            let allocated = r.objects.get(&oid).is_some_and(|h| h.header.allocated);
            if s.gen == oid.gen() && !allocated && (oid.slot() as usize) < s.bitmap.len() {
                s.bitmap.set_free(oid.slot() as usize, true);
            }
        }
    }

    /// Starts draining an all-free slab, recording the current interval.
    /// Returns true when draining started.
    pub fn slab_try_reuse(&mut self, region: RegionId, slab: u16, now: TimeInterval) -> bool {
        let Ok(r) = self.primary_mut(region) else {
            return false;
        };
        let s = &mut r.slabs[slab as usize];
        if s.state == SlabState::Active && s.bitmap.all_slots_free() {
            s.state = SlabState::Draining { recorded: now };
            true
        } else {
            false
        }
    }

    /// Frees draining slabs whose recorded upper bound is below `gc`.
    /// Returns the freed `(region, slab)` pairs so backups can be told.
    pub fn advance_slab_reuse(&mut self, gc: TimePoint) -> Vec<(RegionId, u16)> {
        let mut freed = Vec::new();
        for r in self.regions.values_mut() {
            if r.role != Role::Primary {
                continue;
            }
            for (i, s) in r.slabs.iter_mut().enumerate() {
                if let SlabState::Draining { recorded } = s.state {
                    if recorded.upper < gc {
                        freed.push((r.id, i as u16));
                    }
                }
            }
        }
        for &(region, slab) in &freed {
            self.free_slab(region, slab);
            self.stats.slabs_reused += 1;
        }
        freed
    }

    /// Marks a slab free and drops its objects. Used at the primary after
    /// draining and at backups when told.
    pub fn free_slab(&mut self, region: RegionId, slab: u16) {
        if let Some(r) = self.regions.get_mut(&region) {
            let s = &mut r.slabs[slab as usize];
            s.state = SlabState::Free;
            s.gen = s.gen.wrapping_add(1);
            s.bitmap = FreeBitmap::default();
            s.object_size = 0;
            r.objects.retain(|o, _| o.slab() != slab);
        }
    }

    /// Makes this replica primary. Backups hold heads only, and the free
    /// bitmaps are rebuilt from the allocated bits in the headers.
    pub fn promote(&mut self, region: RegionId) {
        let slab_bytes = self.cfg.slab_bytes;
        let Some(r) = self.regions.get_mut(&region) else {
            return;
        };
        r.role = Role::Primary;
        r.locks.clear();
        for h in r.objects.values_mut() {
            h.header.locked = false;
            h.header.ovp = None;
        }
        rebuild_bitmaps(r, slab_bytes);
    }

    /// Head versions and slab layout of a region, for seeding a new replica.
    pub fn snapshot_region(&self, region: RegionId) -> Option<RegionSnapshot> {
        let r = self.regions.get(&region)?;
        Some(RegionSnapshot {
            slabs: r
                .slabs
                .iter()
                .map(|s| (s.object_size, s.gen, s.state.clone()))
                .collect(),
            heads: r
                .objects
                .iter()
                .map(|(o, h)| (*o, h.header.ts, h.header.allocated, h.data.clone()))
                .collect(),
        })
    }

    pub fn install_snapshot(&mut self, region: RegionId, role: Role, snap: &RegionSnapshot) {
        let slab_bytes = self.cfg.slab_bytes;
        let mut r = RegionReplica::new(region, role, self.cfg.slabs_per_region);
        for (i, (size, gen, state)) in snap.slabs.iter().enumerate() {
            if let Some(s) = r.slabs.get_mut(i) {
                s.object_size = *size;
                s.gen = *gen;
                s.state = state.clone();
            }
        }
        for (oid, ts, allocated, data) in &snap.heads {
            r.objects.insert(
                *oid,
                HeadVersion {
                    header: ObjectHeader {
                        locked: false,
                        allocated: *allocated,
                        ts: *ts,
                        ovp: None,
                    },
                    data: data.clone(),
                },
            );
        }
        if role == Role::Primary {
            rebuild_bitmaps(&mut r, slab_bytes);
        }
        self.regions.insert(region, r);
    }

    /// Bitmap bits that disagree with header allocated bits at primaries.
    pub fn bitmap_mismatches(&self) -> usize {
        let mut n = 0;
        for r in self.regions.values().filter(|r| r.role == Role::Primary) {
            for (oid, h) in &r.objects {
                if r.locks.contains_key(oid) {
                    continue;
                }
                let s = &r.slabs[oid.slab() as usize];
                if (oid.slot() as usize) < s.bitmap.len() {
                    let free = s.bitmap.is_free(oid.slot() as usize);
                    // reserved-but-uncommitted slots are neither free nor allocated
                    if free && h.header.allocated {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    /// Walks every old-version chain and reports the first chain that is
    /// not strictly decreasing.
    pub fn check_chains(&self) -> Result<(), Oid> {
        for r in self.regions.values() {
            for (oid, h) in &r.objects {
                let mut prev = h.header.ts;
                let mut next = h.header.ovp;
                while let Some(v) = next.and_then(|x| self.pool.get(x)) {
                    if v.ts >= prev {
                        return Err(*oid);
                    }
                    prev = v.ts;
                    next = v.ovp;
                }
            }
        }
        Ok(())
    }
}

/// Transferable copy of a region's heads.
#[derive(Clone, Debug)]
pub struct RegionSnapshot {
    pub slabs: Vec<(usize, u16, SlabState)>,
    pub heads: Vec<(Oid, TimePoint, bool, Vec<u8>)>,
}

fn rebuild_bitmaps(r: &mut RegionReplica, slab_bytes: usize) {
    for s in r.slabs.iter_mut() {
        if s.state != SlabState::Free && s.object_size > 0 {
            s.bitmap = FreeBitmap::all_free(Slab::slots_for(slab_bytes, s.object_size));
        }
    }
    for (oid, h) in &r.objects {
        let s = &mut r.slabs[oid.slab() as usize];
        if h.header.allocated && (oid.slot() as usize) < s.bitmap.len() {
            s.bitmap.set_free(oid.slot() as usize, false);
        }
    }
}

/// Encodes an integer value into an object payload of `size` bytes.
pub fn encode_value(v: i64, size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size.max(8)];
    out[..8].copy_from_slice(&v.to_le_bytes());
    out
}

pub fn decode_value(data: &[u8]) -> i64 {
    let mut b = [0u8; 8];
    let n = data.len().min(8);
    b[..n].copy_from_slice(&data[..n]);
    i64::from_le_bytes(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(t: u64) -> TimePoint {
        TimePoint(t)
    }

    fn store_with(cfg: StoreConfig) -> (Store, Oid) {
        let mut s = Store::new(cfg);
        s.add_region(0, Role::Primary);
        let oid = s.slab_alloc(0, 8).unwrap();
        assert!(s.lock_at_ts(oid, 1, LockExpect::Version(ts(0))).is_ok());
        assert!(s.install_commit(oid, 1, ts(1), encode_value(0, 8), true));
        (s, oid)
    }

    fn write(s: &mut Store, oid: Oid, txn: TxnId, at: u64, v: i64) {
        let cur = s.head(oid).unwrap().header.ts;
        s.lock_for_write(oid, txn, LockExpect::Version(cur), 0).unwrap();
        assert!(s.install_commit(oid, txn, ts(at), encode_value(v, 8), true));
    }

    #[test]
    fn read_head_when_new_enough() {
        let (mut s, oid) = store_with(StoreConfig::default());
        write(&mut s, oid, 2, 5, 50);
        let r = s.read_at_ts(oid, ts(7)).unwrap();
        assert_eq!((decode_value(&r.data), r.ts), (50, ts(5)));
    }

    #[test]
    fn read_walks_chain() {
        let (mut s, oid) = store_with(StoreConfig::default());
        write(&mut s, oid, 2, 3, 30);
        write(&mut s, oid, 3, 7, 70);
        write(&mut s, oid, 4, 9, 90);
        let r = s.read_at_ts(oid, ts(8)).unwrap();
        assert_eq!((decode_value(&r.data), r.ts, r.from_chain), (70, ts(7), true));
        assert!(s.check_chains().is_ok());
        assert_eq!(s.read_at_ts(oid, ts(0)), Err(StoreError::TooOld(oid)));
    }

    #[test]
    fn locked_head_refuses_reads() {
        let (mut s, oid) = store_with(StoreConfig::default());
        s.lock_at_ts(oid, 9, LockExpect::Version(ts(1))).unwrap();
        assert_eq!(s.read_at_ts(oid, ts(5)), Err(StoreError::Locked(oid)));
    }

    #[test]
    fn lock_checks() {
        let (mut s, oid) = store_with(StoreConfig::default());
        assert_eq!(s.lock_at_ts(oid, 2, LockExpect::Version(ts(0))), Err(LockFail::Changed));
        assert!(s.lock_at_ts(oid, 2, LockExpect::Version(ts(1))).is_ok());
        assert_eq!(s.lock_at_ts(oid, 3, LockExpect::Version(ts(1))), Err(LockFail::Locked));
        s.unlock_abort(oid, 2);
        assert_eq!(s.lock_at_ts(oid, 3, LockExpect::NotAfter(ts(0))), Err(LockFail::Changed));
        assert!(s.lock_at_ts(oid, 3, LockExpect::NotAfter(ts(1))).is_ok());
    }

    #[test]
    fn single_version_mode_makes_no_copies() {
        let (mut s, oid) = store_with(StoreConfig {
            multi_version: false,
            ..StoreConfig::default()
        });
        s.lock_at_ts(oid, 2, LockExpect::Version(ts(1))).unwrap();
        assert_eq!(s.make_old_version(oid, 0), Ok(None));
        s.install_commit(oid, 2, ts(4), encode_value(4, 8), true);
        assert_eq!(s.read_at_ts(oid, ts(2)), Err(StoreError::TooOld(oid)));
    }

    #[test]
    fn abort_restores_nothing() {
        let (mut s, oid) = store_with(StoreConfig::default());
        s.lock_for_write(oid, 2, LockExpect::Version(ts(1)), 0).unwrap();
        s.unlock_abort(oid, 2);
        let r = s.read_at_ts(oid, ts(10)).unwrap();
        assert_eq!((decode_value(&r.data), r.ts), (0, ts(1)));
        // the discarded copy contributes nothing to the block's GC time
        assert_eq!(s.try_free_blocks(None, ts(1)), 1);
    }

    fn tiny_budget(policy: OldVersionPolicy) -> StoreConfig {
        StoreConfig {
            policy,
            block_bytes: 2 * (HEADER_BYTES + 8),
            old_version_budget: 2 * (HEADER_BYTES + 8),
            workers: 1,
            ..StoreConfig::default()
        }
    }

    #[test]
    fn exhausted_abort_policy_fails_lock() {
        let (mut s, oid) = store_with(tiny_budget(OldVersionPolicy::Abort));
        write(&mut s, oid, 2, 2, 2);
        write(&mut s, oid, 3, 3, 3);
        assert_eq!(
            s.lock_for_write(oid, 4, LockExpect::Version(ts(3)), 0),
            Err(LockFail::OldVersionExhausted)
        );
        assert!(!s.head(oid).unwrap().header.locked);
    }

    #[test]
    fn exhausted_truncate_policy_drops_history() {
        let (mut s, oid) = store_with(tiny_budget(OldVersionPolicy::Truncate));
        write(&mut s, oid, 2, 2, 2);
        write(&mut s, oid, 3, 3, 3);
        write(&mut s, oid, 4, 4, 4);
        assert_eq!(s.stats.truncations, 1);
        assert_eq!(s.read_at_ts(oid, ts(4)).unwrap().ts, ts(4));
        assert_eq!(s.read_at_ts(oid, ts(3)), Err(StoreError::TooOld(oid)));
    }

    #[test]
    fn backup_newest_wins() {
        let mut s = Store::new(StoreConfig::default());
        s.add_region(0, Role::Backup);
        let oid = Oid::new(0, 0, 0, 0);
        assert!(s.backup_apply(oid, ts(9), encode_value(9, 8), true));
        assert!(!s.backup_apply(oid, ts(7), encode_value(7, 8), true));
        assert_eq!(s.head(oid).unwrap().header.ts, ts(9));
    }

    #[test]
    fn free_blocks_by_gc_point() {
        let mut s = Store::new(StoreConfig::default());
        assert_eq!(s.try_free_blocks(None, ts(100)), 0);
        s.add_region(0, Role::Primary);
        let oid = s.slab_alloc(0, 8).unwrap();
        s.lock_for_write(oid, 1, LockExpect::Version(ts(0)), 0).unwrap();
        s.install_commit(oid, 1, ts(50), encode_value(1, 8), true);
        assert_eq!(s.try_free_blocks(None, ts(50)), 0);
        assert_eq!(s.try_free_blocks(None, ts(51)), 1);
    }

    #[test]
    fn freed_block_traps_reads() {
        let (mut s, oid) = store_with(StoreConfig::default());
        write(&mut s, oid, 2, 5, 5);
        s.try_free_blocks(None, ts(100));
        assert_eq!(s.read_at_ts(oid, ts(2)), Err(StoreError::Poisoned(oid)));
        assert_eq!(s.stats.poisoned_reads, 1);
    }

    #[test]
    fn pending_block_is_never_freed() {
        let (mut s, oid) = store_with(StoreConfig::default());
        s.lock_for_write(oid, 2, LockExpect::Version(ts(1)), 0).unwrap();
        assert_eq!(s.try_free_blocks(None, TimePoint(u64::MAX)), 0);
    }

    #[test]
    fn bitmap_two_levels() {
        let mut bm = FreeBitmap::all_free(130);
        assert_eq!(bm.free_count(), 130);
        for i in 0..129 {
            bm.set_free(i, false);
        }
        assert_eq!(bm.first_free(), Some(129));
        bm.set_free(129, false);
        assert_eq!(bm.first_free(), None);
        bm.set_free(64, true);
        assert_eq!(bm.first_free(), Some(64));
    }

    #[test]
    fn slab_reuse_waits_for_gc() {
        let mut s = Store::new(StoreConfig::default());
        s.add_region(0, Role::Primary);
        let oid = s.slab_alloc(0, 8).unwrap();
        s.slab_release(oid);
        let iv = TimeInterval::new(ts(10), ts(20));
        assert!(s.slab_try_reuse(0, oid.slab(), iv));
        assert!(s.advance_slab_reuse(ts(20)).is_empty());
        assert_eq!(s.advance_slab_reuse(ts(21)), vec![(0, oid.slab())]);
        let again = s.slab_alloc(0, 32).unwrap();
        assert_eq!(again.slab(), oid.slab());
        assert_ne!(again.gen(), oid.gen());
        assert_eq!(s.read_at_ts(oid, ts(30)), Err(StoreError::Poisoned(oid)));
    }

    #[test]
    fn allocation_cancels_draining() {
        let mut s = Store::new(StoreConfig::default());
        s.add_region(0, Role::Primary);
        let oid = s.slab_alloc(0, 8).unwrap();
        s.slab_release(oid);
        assert!(s.slab_try_reuse(0, oid.slab(), TimeInterval::new(ts(1), ts(2))));
        let o2 = s.slab_alloc(0, 8).unwrap();
        assert_eq!(o2.slab(), oid.slab());
        assert!(s.advance_slab_reuse(ts(100)).is_empty());
        assert_eq!(s.region(0).unwrap().slabs[oid.slab() as usize].object_size, 8);
    }

    #[test]
    fn promotion_rebuilds_bitmap() {
        let (s, oid) = store_with(StoreConfig::default());
        let snap = s.snapshot_region(0).unwrap();
        let mut b = Store::new(StoreConfig::default());
        b.install_snapshot(0, Role::Backup, &snap);
        b.promote(0);
        let slab = &b.region(0).unwrap().slabs[oid.slab() as usize];
        assert!(!slab.bitmap.is_free(oid.slot() as usize));
        assert_eq!(b.bitmap_mismatches(), 0);
        assert_eq!(b.read_at_ts(oid, ts(5)).unwrap().ts, ts(1));
    }
}
