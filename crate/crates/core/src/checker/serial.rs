//! Search for a serial order that explains a history.
//!
//! A read of `(oid, version)` is attributed to the committed transaction
//! that wrote `oid` at that version, or to the initial state for version 0.
//! The search places transactions one at a time; a transaction can be
//! placed when every read it made sees the current last writer of that
//! object and, with real-time ordering on, every transaction that ended
//! before it began is already placed. Failed states are memoized on the
//! placed set plus the last-writer vector.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::history::{Outcome, TxnSummary};
use crate::store::{Oid, TxnId};
use crate::time::TimePoint;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Largest number of transactions allowed to be open at once.
    pub window: usize,
    /// Search states explored before giving up.
    pub node_budget: u64,
    /// Require the order to respect commit-before-begin precedence.
    pub real_time: bool,
    /// Shrink violations to a minimal failing sub-history.
    pub minimize: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            window: 12,
            node_budget: 2_000_000,
            real_time: true,
            minimize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    pub txns: Vec<TxnId>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum Verdict {
    Pass { order: Vec<TxnId> },
    Violation { witness: Witness },
    SearchExhausted { reason: String },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass { .. })
    }

    pub fn is_violation(&self) -> bool {
        matches!(self, Verdict::Violation { .. })
    }

    pub fn witness(&self) -> Option<&Witness> {
        match self {
            Verdict::Violation { witness } => Some(witness),
            _ => None,
        }
    }

    pub fn violation(txns: Vec<TxnId>, reason: impl Into<String>) -> Self {
        Verdict::Violation {
            witness: Witness {
                txns,
                reason: reason.into(),
            },
        }
    }
}

const INIT: u32 = u32::MAX;

struct Prepared {
    ids: Vec<TxnId>,
    begin: Vec<TimePoint>,
    end: Vec<TimePoint>,
    reads: Vec<Vec<(u32, u32)>>,
    writes: Vec<Vec<u32>>,
    readers_of: HashMap<(u32, u32), Vec<u32>>,
    keys: usize,
    by_hint: Vec<u32>,
    by_end: Vec<u32>,
}

/// Resolves reads to writers. With `drop_dangling`, reads of versions whose
/// writer is absent are ignored instead of reported.
fn prepare(txns: &[TxnSummary], drop_dangling: bool) -> Result<Prepared, Verdict> {
    let mut key_of: BTreeMap<Oid, u32> = BTreeMap::new();
    let key = |o: Oid, m: &mut BTreeMap<Oid, u32>| {
        let n = m.len() as u32;
        *m.entry(o).or_insert(n)
    };
    let mut version_writer: HashMap<(Oid, TimePoint), Vec<(u32, i64)>> = HashMap::new();
    for (i, t) in txns.iter().enumerate() {
        if let Some(w) = t.wts {
            for &(o, v) in &t.writes {
                version_writer.entry((o, w)).or_default().push((i as u32, v));
            }
        }
    }
    let mut initial: HashMap<Oid, (i64, TxnId)> = HashMap::new();
    let mut reads = Vec::with_capacity(txns.len());
    let mut writes = Vec::with_capacity(txns.len());
    let mut readers_of: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
    for (i, t) in txns.iter().enumerate() {
        let mut rs = Vec::with_capacity(t.reads.len());
        for &(o, ver, val) in &t.reads {
            let k = key(o, &mut key_of);
            let writer = match version_writer.get(&(o, ver)) {
                Some(cands) => match cands.iter().find(|(w, v)| *v == val && *w != i as u32) {
                    Some(&(w, _)) => w,
                    None => {
                        let (w, _) = cands[0];
                        if w == i as u32 {
                            return Err(Verdict::violation(
                                vec![t.id],
                                format!("{} reads its own version of {o} before writing it", t.id),
                            ));
                        }
                        return Err(Verdict::violation(
                            vec![t.id, txns[w as usize].id],
                            format!("read {o}@{ver} = {val} but that version holds another value"),
                        ));
                    }
                },
                None if ver == TimePoint::ZERO => {
                    match initial.get(&o) {
                        Some(&(v0, other)) if v0 != val => {
                            return Err(Verdict::violation(
                                vec![other, t.id],
                                format!("two different initial values read for {o}"),
                            ))
                        }
                        _ => {
                            initial.insert(o, (val, t.id));
                        }
                    }
                    INIT
                }
                None if drop_dangling => continue,
                None => {
                    return Err(Verdict::violation(
                        vec![t.id],
                        format!("read {o}@{ver} which no committed transaction wrote"),
                    ))
                }
            };
            readers_of.entry((k, writer)).or_default().push(i as u32);
            rs.push((k, writer));
        }
        reads.push(rs);
        writes.push(t.writes.iter().map(|&(o, _)| key(o, &mut key_of)).collect());
    }
    let mut by_hint: Vec<u32> = (0..txns.len() as u32).collect();
    by_hint.sort_by_key(|&i| {
        let t = &txns[i as usize];
        (t.ts_hint(), !t.is_rw(), t.id)
    });
    let mut by_end: Vec<u32> = (0..txns.len() as u32).collect();
    by_end.sort_by_key(|&i| (txns[i as usize].end, i));
    Ok(Prepared {
        ids: txns.iter().map(|t| t.id).collect(),
        begin: txns.iter().map(|t| t.begin).collect(),
        end: txns.iter().map(|t| t.end).collect(),
        reads,
        writes,
        readers_of,
        keys: key_of.len(),
        by_hint,
        by_end,
    })
}

struct Exhausted;

struct Search<'a> {
    p: &'a Prepared,
    real_time: bool,
    placed: Vec<u64>,
    last: Vec<u32>,
    order: Vec<u32>,
    failed: HashSet<(Vec<u64>, Vec<u32>)>,
    nodes: u64,
    budget: u64,
    deepest: usize,
}

impl<'a> Search<'a> {
    fn new(p: &'a Prepared, cfg: &SearchConfig) -> Self {
        Search {
            p,
            real_time: cfg.real_time,
            placed: vec![0; p.ids.len().div_ceil(64)],
            last: vec![INIT; p.keys],
            order: Vec::with_capacity(p.ids.len()),
            failed: HashSet::new(),
            nodes: 0,
            budget: cfg.node_budget,
            deepest: 0,
        }
    }

    fn is_placed(&self, i: u32) -> bool {
        self.placed[i as usize / 64] & (1 << (i % 64)) != 0
    }

    fn flip(&mut self, i: u32) {
        self.placed[i as usize / 64] ^= 1 << (i % 64);
    }

    /// The two earliest ends among unplaced transactions.
    fn earliest_ends(&self) -> (Option<u32>, TimePoint, TimePoint) {
        let mut it = self.p.by_end.iter().filter(|&&i| !self.is_placed(i));
        let first = it.next().copied();
        let second = it.next().copied();
        let e = |o: Option<u32>| o.map_or(TimePoint(u64::MAX), |i| self.p.end[i as usize]);
        (first, e(first), e(second))
    }

    fn available(&self, i: u32, ends: (Option<u32>, TimePoint, TimePoint)) -> bool {
        if !self.real_time {
            return true;
        }
        let bound = if ends.0 == Some(i) { ends.2 } else { ends.1 };
        self.p.begin[i as usize] <= bound
    }

    fn reads_ok(&self, i: u32) -> bool {
        self.p.reads[i as usize].iter().all(|&(k, w)| self.last[k as usize] == w)
    }

    /// Places `i`; returns the overwritten writers, or None if placing it
    /// would strand a reader of an overwritten version.
    fn place(&mut self, i: u32) -> Option<Vec<(u32, u32)>> {
        let mut undo = Vec::with_capacity(self.p.writes[i as usize].len());
        self.flip(i);
        self.order.push(i);
        for &k in &self.p.writes[i as usize] {
            let prev = self.last[k as usize];
            if prev == i {
                continue;
            }
            undo.push((k, prev));
            self.last[k as usize] = i;
        }
        let stranded = undo.iter().any(|&(k, prev)| {
            self.p
                .readers_of
                .get(&(k, prev))
                .is_some_and(|rs| rs.iter().any(|&r| r != i && !self.is_placed(r)))
        });
        if stranded {
            self.unplace(i, &undo);
            return None;
        }
        Some(undo)
    }

    fn unplace(&mut self, i: u32, undo: &[(u32, u32)]) {
        for &(k, prev) in undo.iter().rev() {
            self.last[k as usize] = prev;
        }
        self.order.pop();
        self.flip(i);
    }

    fn run(&mut self) -> Result<bool, Exhausted> {
        self.nodes += 1;
        if self.nodes > self.budget {
            return Err(Exhausted);
        }
        self.deepest = self.deepest.max(self.order.len());
        if self.order.len() == self.p.ids.len() {
            return Ok(true);
        }
        // Read-only transactions whose reads are satisfied can be placed
        // at once: they change no state and only relax real-time bounds.
        let mut forced = Vec::new();
        loop {
            let ends = self.earliest_ends();
            let next = self.p.by_hint.iter().copied().find(|&i| {
                !self.is_placed(i)
                    && self.p.writes[i as usize].is_empty()
                    && self.available(i, ends)
                    && self.reads_ok(i)
            });
            match next {
                Some(i) => {
                    self.flip(i);
                    self.order.push(i);
                    forced.push(i);
                }
                None => break,
            }
        }
        let result = self.branch();
        if !matches!(result, Ok(true)) {
            for &i in forced.iter().rev() {
                self.order.pop();
                self.flip(i);
            }
        }
        result
    }

    fn branch(&mut self) -> Result<bool, Exhausted> {
        if self.order.len() == self.p.ids.len() {
            return Ok(true);
        }
        let state = (self.placed.clone(), self.last.clone());
        if self.failed.contains(&state) {
            return Ok(false);
        }
        let ends = self.earliest_ends();
        let cands: Vec<u32> = self
            .p
            .by_hint
            .iter()
            .copied()
            .filter(|&i| {
                !self.is_placed(i)
                    && !self.p.writes[i as usize].is_empty()
                    && self.available(i, ends)
                    && self.reads_ok(i)
            })
            .collect();
        for i in cands {
            if let Some(undo) = self.place(i) {
                if self.run()? {
                    return Ok(true);
                }
                self.unplace(i, &undo);
            }
        }
        self.failed.insert(state);
        Ok(false)
    }
}

fn max_overlap(txns: &[TxnSummary]) -> usize {
    let mut pts: Vec<(TimePoint, i32)> = Vec::with_capacity(txns.len() * 2);
    for t in txns {
        pts.push((t.begin, 1));
        pts.push((t.end, -1));
    }
    // at equal instants, closes before opens
    pts.sort();
    let (mut cur, mut best) = (0i32, 0i32);
    for (_, d) in pts {
        cur += d;
        best = best.max(cur);
    }
    best as usize
}

fn search(txns: &[TxnSummary], cfg: &SearchConfig, drop_dangling: bool) -> Verdict {
    let p = match prepare(txns, drop_dangling) {
        Ok(p) => p,
        Err(v) => return v,
    };
    let mut s = Search::new(&p, cfg);
    match s.run() {
        Ok(true) => Verdict::Pass {
            order: s.order.iter().map(|&i| p.ids[i as usize]).collect(),
        },
        Ok(false) => {
            let stuck: Vec<TxnId> = p.ids.clone();
            Verdict::violation(
                stuck,
                format!(
                    "no serial order exists; longest consistent prefix covers {} of {} transactions",
                    s.deepest,
                    p.ids.len()
                ),
            )
        }
        Err(Exhausted) => Verdict::SearchExhausted {
            reason: format!("search budget of {} states exhausted", cfg.node_budget),
        },
    }
}

/// Shrinks a failing set greedily, first in halving chunks, then one
/// transaction at a time.
fn minimize(txns: &[TxnSummary], cfg: &SearchConfig) -> Vec<usize> {
    let fails = |keep: &[usize]| {
        let sub: Vec<TxnSummary> = keep.iter().map(|&i| txns[i].clone()).collect();
        search(&sub, cfg, true).is_violation()
    };
    let mut keep: Vec<usize> = (0..txns.len()).collect();
    let mut chunk = keep.len() / 2;
    while chunk >= 1 {
        let mut start = 0;
        while start < keep.len() {
            let end = (start + chunk).min(keep.len());
            let trial: Vec<usize> = keep[..start].iter().chain(&keep[end..]).copied().collect();
            if !trial.is_empty() && fails(&trial) {
                keep = trial;
            } else {
                start = end;
            }
        }
        chunk /= 2;
    }
    keep
}

/// Checks a set of transaction summaries, all treated as committed.
pub fn check_summaries(txns: &[TxnSummary], cfg: &SearchConfig) -> Verdict {
    if cfg.real_time {
        let open = max_overlap(txns);
        if open > cfg.window {
            return Verdict::SearchExhausted {
                reason: format!("{open} transactions open at once exceeds the window of {}", cfg.window),
            };
        }
    }
    let v = search(txns, cfg, false);
    match v {
        Verdict::Violation { ref witness } if cfg.minimize && witness.txns.len() > 2 => {
            let keep = minimize(txns, cfg);
            Verdict::violation(
                keep.iter().map(|&i| txns[i].id).collect(),
                "no serial order explains these transactions".to_string(),
            )
        }
        other => other,
    }
}

/// Committed transactions only.
pub fn committed(txns: &[TxnSummary]) -> Vec<TxnSummary> {
    txns.iter()
        .filter(|t| t.outcome == Outcome::Committed)
        .cloned()
        .collect()
}

/// Committed transactions plus every aborted or unfinished transaction's
/// completed reads as a read-only transaction. Those without reads are
/// dropped.
pub fn with_promoted_aborts(txns: &[TxnSummary]) -> Vec<TxnSummary> {
    txns.iter()
        .filter_map(|t| match t.outcome {
            Outcome::Committed => Some(t.clone()),
            _ if t.reads.is_empty() => None,
            _ => Some(TxnSummary {
                writes: Vec::new(),
                wts: None,
                outcome: Outcome::Committed,
                ..t.clone()
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::NodeId;
    use crate::txn::TxnMode;

    pub(crate) fn txn(id: TxnId, begin: u64, end: u64, reads: &[(u64, u64, i64)], writes: &[(u64, i64)], wts: Option<u64>) -> TxnSummary {
        TxnSummary {
            id,
            node: NodeId(0),
            mode: TxnMode::STRICT_SER,
            begin: TimePoint(begin),
            end: TimePoint(end),
            rts: Some(TimePoint(begin)),
            wts: wts.map(TimePoint),
            reads: reads.iter().map(|&(o, v, x)| (Oid(o), TimePoint(v), x)).collect(),
            writes: writes.iter().map(|&(o, x)| (Oid(o), x)).collect(),
            outcome: Outcome::Committed,
        }
    }

    #[test]
    fn single_transaction_passes() {
        let t = [txn(1, 0, 10, &[(1, 0, 0)], &[(1, 5)], Some(5))];
        assert!(check_summaries(&t, &SearchConfig::default()).is_pass());
    }

    #[test]
    fn read_of_unwritten_version_is_a_violation() {
        let t = [txn(1, 0, 10, &[(1, 4, 0)], &[], None)];
        assert!(check_summaries(&t, &SearchConfig::default()).is_violation());
    }

    #[test]
    fn lost_update_is_a_violation() {
        // both read x@0 and both write x
        let t = [
            txn(1, 0, 10, &[(1, 0, 0)], &[(1, 1)], Some(5)),
            txn(2, 0, 10, &[(1, 0, 0)], &[(1, 2)], Some(6)),
        ];
        assert!(check_summaries(&t, &SearchConfig::default()).is_violation());
    }

    #[test]
    fn real_time_order_matters() {
        // writer commits before the reader begins, yet the reader sees the old value
        let t = [
            txn(1, 0, 10, &[], &[(1, 1)], Some(5)),
            txn(2, 20, 30, &[(1, 0, 0)], &[], None),
        ];
        assert!(check_summaries(&t, &SearchConfig::default()).is_violation());
        let relaxed = SearchConfig {
            real_time: false,
            ..SearchConfig::default()
        };
        assert!(check_summaries(&t, &relaxed).is_pass());
    }

    #[test]
    fn window_bound_is_reported() {
        let t: Vec<_> = (0..5).map(|i| txn(i, 0, 100, &[], &[], None)).collect();
        let cfg = SearchConfig {
            window: 4,
            ..SearchConfig::default()
        };
        assert!(matches!(check_summaries(&t, &cfg), Verdict::SearchExhausted { .. }));
    }

    #[test]
    fn witness_is_minimal() {
        let mut t = vec![
            txn(1, 0, 10, &[(1, 0, 0)], &[(1, 1)], Some(5)),
            txn(2, 0, 10, &[(1, 0, 0)], &[(1, 2)], Some(6)),
        ];
        for i in 0..6 {
            t.push(txn(10 + i, 0, 10, &[(7 + i, 0, 0)], &[(7 + i, 1)], Some(3)));
        }
        let cfg = SearchConfig {
            window: 20,
            ..SearchConfig::default()
        };
        let v = check_summaries(&t, &cfg);
        let w = v.witness().expect("violation");
        assert_eq!(w.txns, vec![1, 2]);
    }
}
