//! Global monotonicity of clock intervals.
//!
//! Every event that drew a timestamp carries its interval `[L, U]` and the
//! true time `at` of the clock read. Two reads separated by at least the
//! minimum message delay could have been causally connected, so the later
//! one must satisfy `U2 > L1`.

use super::history::HistoryEvent;
use super::serial::Verdict;
use crate::store::TxnId;
use crate::time::TimePoint;

/// Default separation: the minimum one-way message delay.
pub const DEFAULT_MIN_SEP: u64 = 5_000;

pub fn check_monotonicity(events: &[HistoryEvent]) -> Verdict {
    check_monotonicity_sep(events, DEFAULT_MIN_SEP)
}

pub fn check_monotonicity_sep(events: &[HistoryEvent], min_sep: u64) -> Verdict {
    let mut obs: Vec<(TimePoint, TimePoint, TimePoint, TxnId)> = events
        .iter()
        .filter_map(|e| e.interval().map(|(at, iv)| (at, iv.lower, iv.upper, e.txn)))
        .collect();
    for &(_, l, u, txn) in &obs {
        if l > u {
            return Verdict::violation(vec![txn], format!("interval [{l}, {u}] is inverted"));
        }
    }
    obs.sort();
    // prefix maximum of L over observations sorted by `at`
    let mut best: Vec<(TimePoint, TxnId)> = Vec::with_capacity(obs.len());
    for &(_, l, _, txn) in &obs {
        let prev = best.last().copied();
        best.push(match prev {
            Some((pl, pt)) if pl >= l => (pl, pt),
            _ => (l, txn),
        });
    }
    for &(at, _, u, txn) in &obs {
        let Some(cut) = at.0.checked_sub(min_sep) else { continue };
        let n = obs.partition_point(|o| o.0 .0 <= cut);
        if n == 0 {
            continue;
        }
        let (l1, t1) = best[n - 1];
        if u <= l1 {
            return Verdict::violation(
                vec![t1, txn],
                format!("upper bound {u} at {at} does not exceed earlier lower bound {l1}"),
            );
        }
    }
    Verdict::Pass {
        order: obs.iter().map(|o| o.3).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::EventKind;
    use crate::sim::NodeId;
    use crate::time::TimeInterval;
    use crate::txn::TxnMode;

    fn obs(txn: TxnId, at: u64, l: u64, u: u64) -> HistoryEvent {
        HistoryEvent::new(EventKind::Begin, txn, NodeId(0), TxnMode::STRICT_SER, TimePoint(at), TimePoint(at))
            .with_interval(TimeInterval::new(TimePoint(l), TimePoint(u)), TimePoint(at))
    }

    #[test]
    fn single_node_passes() {
        let ev = [obs(1, 0, 10, 20), obs(2, 10_000, 9_000, 9_050)];
        assert!(check_monotonicity(&ev).is_pass());
    }

    #[test]
    fn stale_upper_bound_is_caught() {
        // an enable below a previously issued timestamp
        let ev = [obs(1, 0, 1_000, 1_010), obs(2, 20_000, 900, 1_000)];
        let v = check_monotonicity(&ev);
        assert_eq!(v.witness().unwrap().txns, vec![1, 2]);
    }

    #[test]
    fn near_simultaneous_reads_are_not_compared() {
        let ev = [obs(1, 0, 1_000, 1_010), obs(2, 100, 900, 1_000)];
        assert!(check_monotonicity(&ev).is_pass());
    }
}
