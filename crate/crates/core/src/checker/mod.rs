//! Offline verification of recorded histories.
//!
//! Everything here except [`lemma`] consumes [`HistoryEvent`]s only.
//! [`lemma`] scans the simulator's god's-eye log for the proof invariants.

pub mod history;
pub mod lemma;
pub mod monotone;
pub mod serial;
pub mod si;

pub use history::{read_jsonl, summarize, to_jsonl, write_jsonl, EventKind, HistoryEvent, Outcome, TxnSummary};
pub use monotone::{check_monotonicity, check_monotonicity_sep};
pub use serial::{SearchConfig, Verdict, Witness};
pub use si::check_si;

use crate::store::Oid;

fn summaries(events: &[HistoryEvent]) -> Result<Vec<TxnSummary>, Verdict> {
    summarize(events).map_err(|e| Verdict::violation(Vec::new(), format!("malformed history: {e}")))
}

pub fn check_strict_serializable(events: &[HistoryEvent]) -> Verdict {
    check_strict_serializable_with(events, &SearchConfig::default())
}

pub fn check_strict_serializable_with(events: &[HistoryEvent], cfg: &SearchConfig) -> Verdict {
    match summaries(events) {
        Ok(s) => serial::check_summaries(&serial::committed(&s), &SearchConfig { real_time: true, ..cfg.clone() }),
        Err(v) => v,
    }
}

/// Serializability without the real-time embedding, for non-strict modes.
pub fn check_serializable(events: &[HistoryEvent], cfg: &SearchConfig) -> Verdict {
    match summaries(events) {
        Ok(s) => serial::check_summaries(&serial::committed(&s), &SearchConfig { real_time: false, ..cfg.clone() }),
        Err(v) => v,
    }
}

pub fn check_opacity(events: &[HistoryEvent]) -> Verdict {
    check_opacity_with(events, &SearchConfig::default())
}

pub fn check_opacity_with(events: &[HistoryEvent], cfg: &SearchConfig) -> Verdict {
    match summaries(events) {
        Ok(s) => serial::check_summaries(
            &serial::with_promoted_aborts(&s),
            &SearchConfig { real_time: true, ..cfg.clone() },
        ),
        Err(v) => v,
    }
}

/// A committed writer that finished before a committed reader began, while
/// the reader still saw an older version of something the writer wrote.
/// Legal in non-strict modes, impossible in strict ones.
pub fn find_real_time_inversion(events: &[HistoryEvent]) -> Option<Witness> {
    let s = summarize(events).ok()?;
    let committed = serial::committed(&s);
    let mut writers: Vec<&TxnSummary> = committed.iter().filter(|t| t.wts.is_some()).collect();
    writers.sort_by_key(|t| t.end);
    for r in &committed {
        for &(oid, ver, _) in &r.reads {
            let stale = writers.iter().take_while(|w| w.end < r.begin).find(|w| {
                w.id != r.id && w.wts.is_some_and(|wts| wts > ver) && w.writes.iter().any(|&(o, _)| o == oid)
            });
            if let Some(w) = stale {
                return Some(Witness {
                    txns: vec![w.id, r.id],
                    reason: inversion_reason(oid, w, r),
                });
            }
        }
    }
    None
}

fn inversion_reason(oid: Oid, w: &TxnSummary, r: &TxnSummary) -> String {
    format!(
        "{} wrote {oid} and committed before {} began, yet {} read an older version",
        w.id, r.id, r.id
    )
}
