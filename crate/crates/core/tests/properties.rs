use proptest::prelude::*;

use chronotxn::checker::{self, read_jsonl, to_jsonl, EventKind, HistoryEvent, SearchConfig};
use chronotxn::clock::{ClockState, SyncRecord};
use chronotxn::run::{run, RunConfig, WorkloadKind};
use chronotxn::sim::NodeId;
use chronotxn::store::Oid;
use chronotxn::time::{DriftBound, TimePoint};
use chronotxn::txn::TxnMode;

const KEYS: u64 = 3;

#[derive(Clone, Debug)]
struct Txn {
    begin: u64,
    end: u64,
    /// `(key, writer)`; writer `None` is the initial version.
    reads: Vec<(u64, Option<usize>)>,
    writes: Vec<u64>,
}

fn value(writer: usize, key: u64) -> i64 {
    (writer as i64 + 1) * 100 + key as i64
}

fn wts(writer: usize) -> TimePoint {
    TimePoint(1_000 + writer as u64)
}

/// Small committed histories whose reads name an existing writer or the
/// initial version.
fn histories() -> impl Strategy<Value = Vec<Txn>> {
    (1usize..=6)
        .prop_flat_map(|n| {
            let txn = (0u64..40, 0u64..20, prop::collection::btree_set(0..KEYS, 0..=2), prop::collection::vec((0..KEYS, any::<prop::sample::Index>()), 0..=2));
            prop::collection::vec(txn, n)
        })
        .prop_map(|raw| {
            let writers_of = |k: u64, me: usize| -> Vec<usize> {
                raw.iter()
                    .enumerate()
                    .filter(|(i, t)| *i != me && t.2.contains(&k))
                    .map(|(i, _)| i)
                    .collect()
            };
            raw.iter()
                .enumerate()
                .map(|(i, (begin, len, writes, reads))| {
                    let reads = reads
                        .iter()
                        .map(|(k, pick)| {
                            let ws = writers_of(*k, i);
                            let choice = pick.index(ws.len() + 1);
                            (*k, ws.get(choice).copied())
                        })
                        .collect();
                    Txn {
                        begin: *begin,
                        end: begin + len,
                        reads,
                        writes: writes.iter().copied().collect(),
                    }
                })
                .collect()
        })
}

fn events(txns: &[Txn]) -> Vec<HistoryEvent> {
    let mode = TxnMode::STRICT_SER;
    let mut h = Vec::new();
    for (i, t) in txns.iter().enumerate() {
        let id = i as u64 + 1;
        let mut b = HistoryEvent::new(EventKind::Begin, id, NodeId(0), mode, TimePoint(t.begin), TimePoint(t.begin));
        b.rts = Some(TimePoint(t.begin));
        h.push(b);
        if !t.reads.is_empty() {
            let mut r = HistoryEvent::new(EventKind::Read, id, NodeId(0), mode, TimePoint(t.begin), TimePoint(t.begin));
            r.reads = t
                .reads
                .iter()
                .map(|&(k, w)| match w {
                    Some(w) => (Oid(k), wts(w), value(w, k)),
                    None => (Oid(k), TimePoint::ZERO, 0),
                })
                .collect();
            h.push(r);
        }
        let mut c = if t.writes.is_empty() {
            HistoryEvent::new(EventKind::Commit, id, NodeId(0), mode, TimePoint(t.end), TimePoint(t.end))
        } else {
            let mut c = HistoryEvent::new(EventKind::WriteCommit, id, NodeId(0), mode, TimePoint(t.end), TimePoint(t.end));
            c.wts = Some(wts(i));
            c.writes = t.writes.iter().map(|&k| (Oid(k), value(i, k))).collect();
            c
        };
        c.true_start = TimePoint(t.end);
        h.push(c);
    }
    h
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Tries every serial order.
fn oracle(txns: &[Txn], real_time: bool) -> bool {
    let mut order: Vec<usize> = (0..txns.len()).collect();
    loop {
        let mut last: [Option<usize>; KEYS as usize] = [None; KEYS as usize];
        let mut pos = vec![0; txns.len()];
        for (p, &i) in order.iter().enumerate() {
            pos[i] = p;
        }
        let mut ok = true;
        for &i in &order {
            let t = &txns[i];
            ok &= t.reads.iter().all(|&(k, w)| last[k as usize] == w);
            for &k in &t.writes {
                last[k as usize] = Some(i);
            }
        }
        if real_time {
            for (a, ta) in txns.iter().enumerate() {
                for (b, tb) in txns.iter().enumerate() {
                    ok &= !(ta.end < tb.begin && pos[a] > pos[b]);
                }
            }
        }
        if ok {
            return true;
        }
        if !next_permutation(&mut order) {
            return false;
        }
    }
}

proptest! {
    #[test]
    fn checker_agrees_with_permutation_oracle(txns in histories()) {
        let h = events(&txns);
        let ser = checker::check_serializable(&h, &SearchConfig::default());
        let strict = checker::check_strict_serializable(&h);
        let exhausted = matches!(ser, checker::Verdict::SearchExhausted { .. });
        prop_assert!(!exhausted);
        prop_assert_eq!(ser.is_pass(), oracle(&txns, false), "serializable: {:?}", ser);
        prop_assert_eq!(strict.is_pass(), oracle(&txns, true), "strict: {:?}", strict);
        // all committed, so opacity coincides with strict serializability
        prop_assert_eq!(checker::check_opacity(&h).is_pass(), strict.is_pass());
    }

    #[test]
    fn clock_interval_holds_master_time(
        ppm in 500u64..5_000,
        drift_frac in -0.25f64..0.25,
        rounds in prop::collection::vec((1_000u64..200_000, 1_000u64..200_000, 50_000u64..5_000_000), 1..30),
    ) {
        let drift = (ppm as f64 * drift_frac) as i128;
        let local = |t: u64| (t as i128 + (t as i128 * drift).div_euclid(1_000_000) + 1_000_000) as u64;
        let mut c = ClockState::new(DriftBound::from_ppm(ppm));
        let mut t = 0;
        let mut prev_lower = 0;
        for (up, down, gap) in rounds {
            c.on_sync_response(SyncRecord::new(TimePoint(local(t)), TimePoint(local(t + up + down)), TimePoint(t + up)));
            t += up + down + gap;
            let iv = c.bounds(TimePoint(local(t))).unwrap();
            prop_assert!(iv.lower.0 <= t && t <= iv.upper.0, "{t} outside {iv:?}");
            prop_assert!(iv.lower.0 >= prev_lower);
            prev_lower = iv.lower.0;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn runs_are_deterministic_and_histories_roundtrip(seed in any::<u64>(), nodes in 2usize..6, tpcc in any::<bool>()) {
        let cfg = RunConfig {
            seed,
            nodes,
            programs: 80,
            keys: 16,
            workload: if tpcc { WorkloadKind::Tpcc } else { WorkloadKind::Ycsb },
            ..RunConfig::default()
        };
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        let text = to_jsonl(&a.history);
        prop_assert_eq!(&text, &to_jsonl(&b.history));
        prop_assert_eq!(read_jsonl(text.as_bytes()).unwrap(), a.history.clone());
        prop_assert!(a.passed(), "{:?}", a.checks);
    }

    #[test]
    fn every_mode_passes_its_checks(seed in any::<u64>(), mode in 0usize..4) {
        let mode = [TxnMode::STRICT_SER, TxnMode::SER, TxnMode::STRICT_SI, TxnMode::SI][mode];
        let cfg = RunConfig { seed, mode, programs: 120, keys: 8, theta: 0.8, ..RunConfig::default() };
        let r = run(&cfg).unwrap();
        prop_assert!(r.passed(), "{}: {:?}", mode, r.checks);
    }
}
