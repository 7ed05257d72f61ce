//! Interval clocks synchronized against a clock master.
//!
//! A node never knows the master's time exactly. Each synchronization round
//! trip yields a [`SyncRecord`], and from any past record the node can bound
//! the master's current time using only its local clock and the drift bound.
//! The node keeps just two records: the one giving the highest lower bound
//! and the one giving the lowest upper bound. Because all lower bounds grow
//! at the same rate `(1 - epsilon)` and all upper bounds at `(1 + epsilon)`,
//! the best record for each side never changes between synchronizations,
//! so the two-record state yields the same interval as intersecting the
//! bounds from every record ever received.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{DriftBound, TimeInterval, TimePoint};

/// Drift rate beyond which a node is reported for removal (200 ppm).
pub const DRIFT_REPORT_PPM: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ClockError {
    #[error("clock is disabled")]
    Disabled,
    #[error("clock has not been synchronized")]
    Unsynchronized,
}

/// One completed synchronization round trip.
///
/// `t_send` and `t_recv` are local clock readings at the requester,
/// `t_cm` is the master time carried in the response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SyncRecord {
    pub t_send: TimePoint,
    pub t_recv: TimePoint,
    pub t_cm: TimePoint,
}

impl SyncRecord {
    pub fn new(t_send: TimePoint, t_recv: TimePoint, t_cm: TimePoint) -> Self {
        debug_assert!(t_send <= t_recv);
        SyncRecord {
            t_send,
            t_recv,
            t_cm,
        }
    }

    pub fn round_trip(&self) -> u64 {
        self.t_recv.since(self.t_send)
    }

    /// `t_cm * 1e6 - t_recv * (1e6 - ppm)`: the real-valued lower bound at any
    /// local time `T` equals `(key + T * (1e6 - ppm)) / 1e6`, so a larger key
    /// is a better lower bound at every `T`.
    fn lower_key(&self, eps: DriftBound) -> i128 {
        let scale = DriftBound::PPM_SCALE as i128;
        self.t_cm.0 as i128 * scale - self.t_recv.0 as i128 * (scale - eps.ppm() as i128)
    }

    /// Smaller is a better (tighter) upper bound at every local time.
    fn upper_key(&self, eps: DriftBound) -> i128 {
        let scale = DriftBound::PPM_SCALE as i128;
        self.t_cm.0 as i128 * scale - self.t_send.0 as i128 * (scale + eps.ppm() as i128)
    }
}

/// Lower bound on master time at local time `t_local`, rounded down.
pub fn lb(s: &SyncRecord, t_local: TimePoint, eps: DriftBound) -> TimePoint {
    debug_assert!(t_local >= s.t_recv);
    s.t_cm + eps.shrink_floor(t_local.since(s.t_recv))
}

/// Upper bound on master time at local time `t_local`, rounded up.
pub fn ub(s: &SyncRecord, t_local: TimePoint, eps: DriftBound) -> TimePoint {
    debug_assert!(t_local >= s.t_send);
    s.t_cm + eps.stretch_ceil(t_local.since(s.t_send))
}

/// Which bounds a new record improved.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SyncUpdate {
    pub lower_improved: bool,
    pub upper_improved: bool,
}

/// Timestamp chosen by [`ClockState::get_ts`] together with the local-clock
/// wait that makes it safe to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimestampWait {
    pub interval: TimeInterval,
    pub ts: TimePoint,
    /// Local ticks to sleep before `ts` is guaranteed to be in the past.
    pub sleep_local: u64,
}

/// Synchronization state of one node.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClockState {
    s_lower: Option<SyncRecord>,
    s_upper: Option<SyncRecord>,
    epsilon: DriftBound,
    enabled: bool,
    ff: TimePoint,
    /// The master reads its own clock exactly; its interval is degenerate.
    master: bool,
}

impl ClockState {
    /// A disabled clock with no synchronization state.
    pub fn new(epsilon: DriftBound) -> Self {
        assert!(epsilon.ppm() > 0, "clock drift bound must be positive");
        ClockState {
            s_lower: None,
            s_upper: None,
            epsilon,
            enabled: false,
            ff: TimePoint::ZERO,
            master: false,
        }
    }

    pub fn epsilon(&self) -> DriftBound {
        self.epsilon
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn is_master(&self) -> bool {
        self.master
    }

    pub fn ff(&self) -> TimePoint {
        self.ff
    }

    pub fn records(&self) -> (Option<SyncRecord>, Option<SyncRecord>) {
        (self.s_lower, self.s_upper)
    }

    /// Folds a completed synchronization into the state. The first record
    /// ever received sets both sides.
    pub fn on_sync_response(&mut self, s_new: SyncRecord) -> SyncUpdate {
        let eps = self.epsilon;
        let mut update = SyncUpdate::default();
        match self.s_lower {
            Some(cur) if s_new.lower_key(eps) <= cur.lower_key(eps) => {}
            _ => {
                self.s_lower = Some(s_new);
                update.lower_improved = true;
            }
        }
        match self.s_upper {
            Some(cur) if s_new.upper_key(eps) >= cur.upper_key(eps) => {}
            _ => {
                self.s_upper = Some(s_new);
                update.upper_improved = true;
            }
        }
        update
    }

    /// First synchronization with a new master after failover: forget every
    /// older record, adopt this one and start handing out time again.
    pub fn resync_and_enable(&mut self, s_new: SyncRecord) {
        self.clear_sync_state();
        self.on_sync_response(s_new);
        self.enabled = true;
    }

    pub fn clear_sync_state(&mut self) {
        self.s_lower = None;
        self.s_upper = None;
        self.master = false;
    }

    /// Interval computed from the records regardless of whether the clock
    /// is enabled.
    pub fn bounds(&self, t_local: TimePoint) -> Result<TimeInterval, ClockError> {
        let (Some(lo), Some(hi)) = (self.s_lower, self.s_upper) else {
            return Err(ClockError::Unsynchronized);
        };
        if self.master {
            let t = lo.t_cm + t_local.since(lo.t_recv);
            return Ok(TimeInterval::point(t));
        }
        Ok(TimeInterval::new(
            lb(&lo, t_local, self.epsilon),
            ub(&hi, t_local, self.epsilon),
        ))
    }

    /// Current bounds on master time.
    pub fn time(&self, t_local: TimePoint) -> Result<TimeInterval, ClockError> {
        if !self.enabled {
            return Err(ClockError::Disabled);
        }
        self.bounds(t_local)
    }

    /// Picks the upper bound as the timestamp and reports how long to sleep
    /// on the local clock so that it has passed at the master.
    pub fn get_ts(&self, t_local: TimePoint) -> Result<TimestampWait, ClockError> {
        let interval = self.time(t_local)?;
        Ok(TimestampWait {
            interval,
            ts: interval.upper,
            sleep_local: self.epsilon.stretch_ceil(interval.width()),
        })
    }

    /// Lower bound, no wait. Used for non-strict read timestamps.
    pub fn read_ts_nonstrict(&self, t_local: TimePoint) -> Result<TimePoint, ClockError> {
        Ok(self.time(t_local)?.lower)
    }

    /// Master time reported to synchronization requests.
    pub fn master_time(&self, t_local: TimePoint) -> Option<TimePoint> {
        if !(self.enabled && self.master) {
            return None;
        }
        self.bounds(t_local).ok().map(|i| i.upper)
    }

    pub fn disable(&mut self) {
        self.enabled = false;
    }

    /// Disables the clock and raises `ff` to cover the current upper bound.
    /// Returns the new `ff`.
    pub fn disable_and_fast_forward(&mut self, t_local: TimePoint) -> TimePoint {
        if let Ok(interval) = self.bounds(t_local) {
            self.ff = self.ff.max(interval.upper);
        }
        self.enabled = false;
        self.ff
    }

    /// Raises `ff` without touching the enabled flag.
    pub fn raise_ff(&mut self, ff: TimePoint) {
        self.ff = self.ff.max(ff);
    }

    /// Enables this node as clock master with interval `[ff, ff]` at the
    /// current local instant.
    pub fn enable_master(&mut self, ff: TimePoint, t_local: TimePoint) {
        self.ff = self.ff.max(ff);
        let synthetic = SyncRecord::new(t_local, t_local, ff);
        self.s_lower = Some(synthetic);
        self.s_upper = Some(synthetic);
        self.master = true;
        self.enabled = true;
    }
}

/// Evidence that a node's clock runs outside the tolerated rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub observed_rate: f64,
    pub deviation_ppm: f64,
}

/// Reports `observed_rate` (local ticks per master tick) when it deviates
/// from 1 by more than 200 ppm.
pub fn monitor_drift(observed_rate: f64) -> Option<DriftReport> {
    let deviation_ppm = (observed_rate - 1.0).abs() * 1e6;
    (deviation_ppm > DRIFT_REPORT_PPM).then_some(DriftReport {
        observed_rate,
        deviation_ppm,
    })
}

/// Estimates a node's rate relative to the master from its sync history.
///
/// Keeps the tightest early sample as an anchor and compares later samples
/// against it once `window` master ticks have elapsed.
#[derive(Clone, Debug)]
pub struct DriftMonitor {
    window: u64,
    anchor: Option<SyncRecord>,
    anchor_deadline: TimePoint,
}

impl DriftMonitor {
    pub fn new(window: u64) -> Self {
        DriftMonitor {
            window,
            anchor: None,
            anchor_deadline: TimePoint::ZERO,
        }
    }

    pub fn reset(&mut self) {
        self.anchor = None;
    }

    /// Feeds one sync record; returns the observed rate once a full window
    /// separates it from the anchor.
    pub fn observe(&mut self, s: SyncRecord) -> Option<f64> {
        match self.anchor {
            None => {
                self.anchor = Some(s);
                self.anchor_deadline = s.t_cm + self.window / 10;
                None
            }
            Some(a) => {
                if s.t_cm <= self.anchor_deadline {
                    if s.round_trip() < a.round_trip() {
                        self.anchor = Some(s);
                    }
                    return None;
                }
                let master = s.t_cm.since(a.t_cm);
                if master < self.window {
                    return None;
                }
                let mid = |r: &SyncRecord| (r.t_send.0 as f64 + r.t_recv.0 as f64) / 2.0;
                Some((mid(&s) - mid(&a)) / master as f64)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: u64, r: u64, cm: u64) -> SyncRecord {
        SyncRecord::new(TimePoint(s), TimePoint(r), TimePoint(cm))
    }

    #[test]
    fn lb_examples() {
        let eps = DriftBound::default();
        assert_eq!(lb(&rec(0, 10, 100), TimePoint(20), DriftBound::ZERO), TimePoint(110));
        assert_eq!(lb(&rec(0, 10, 100), TimePoint(10), eps), TimePoint(100));
        assert_eq!(lb(&rec(0, 1000, 5000), TimePoint(2000), eps), TimePoint(5999));
    }

    #[test]
    fn ub_examples() {
        let eps = DriftBound::default();
        assert_eq!(ub(&rec(0, 10, 100), TimePoint(20), DriftBound::ZERO), TimePoint(120));
        assert_eq!(ub(&rec(0, 0, 100), TimePoint(0), eps), TimePoint(100));
        assert_eq!(ub(&rec(0, 1000, 5000), TimePoint(2000), eps), TimePoint(7002));
    }

    #[test]
    fn first_sync_sets_both() {
        let mut c = ClockState::new(DriftBound::default());
        let u = c.on_sync_response(rec(5, 20, 300));
        assert!(u.lower_improved && u.upper_improved);
        assert_eq!(c.records(), (Some(rec(5, 20, 300)), Some(rec(5, 20, 300))));
    }

    #[test]
    fn worse_record_is_ignored() {
        let mut c = ClockState::new(DriftBound::default());
        c.on_sync_response(rec(100, 110, 1000));
        // same master lineage, larger round trip on both sides
        let u = c.on_sync_response(rec(200, 260, 1110));
        assert_eq!(u, SyncUpdate::default());
        assert_eq!(c.records().0, Some(rec(100, 110, 1000)));
    }

    #[test]
    fn disabled_clock_refuses_time() {
        let mut c = ClockState::new(DriftBound::default());
        assert_eq!(c.time(TimePoint(0)), Err(ClockError::Disabled));
        c.resync_and_enable(rec(0, 0, 50));
        assert!(c.time(TimePoint(0)).is_ok());
        c.disable();
        assert_eq!(c.time(TimePoint(1)), Err(ClockError::Disabled));
    }

    #[test]
    fn zero_rtt_gives_point_interval() {
        let mut c = ClockState::new(DriftBound::default());
        c.resync_and_enable(rec(40, 40, 900));
        assert_eq!(c.time(TimePoint(40)).unwrap(), TimeInterval::point(TimePoint(900)));
    }

    #[test]
    fn width_grows_two_epsilon_per_tick() {
        let mut c = ClockState::new(DriftBound::default());
        c.resync_and_enable(rec(0, 0, 0));
        let a = c.time(TimePoint(10_000)).unwrap();
        let b = c.time(TimePoint(20_000)).unwrap();
        assert_eq!(b.width() - a.width(), 20);
    }

    #[test]
    fn get_ts_sleeps_stretched_width() {
        // interval [100, 110] at the query instant
        let c = ClockState {
            s_lower: Some(rec(0, 0, 100)),
            s_upper: Some(rec(0, 0, 110)),
            epsilon: DriftBound::default(),
            enabled: true,
            ff: TimePoint::ZERO,
            master: false,
        };
        let w = c.get_ts(TimePoint(0)).unwrap();
        assert_eq!(w.interval, TimeInterval::new(TimePoint(100), TimePoint(110)));
        assert_eq!(w.sleep_local, 11);
        assert_eq!(w.ts, TimePoint(110));
    }

    #[test]
    fn get_ts_point_interval_has_no_wait() {
        let mut c = ClockState::new(DriftBound::default());
        c.resync_and_enable(rec(7, 7, 70));
        let w = c.get_ts(TimePoint(7)).unwrap();
        assert_eq!(w.sleep_local, 0);
        assert_eq!(w.ts, TimePoint(70));
    }

    #[test]
    fn nonstrict_read_ts_is_lower() {
        let c = ClockState {
            s_lower: Some(rec(0, 0, 100)),
            s_upper: Some(rec(0, 0, 110)),
            epsilon: DriftBound::default(),
            enabled: true,
            ff: TimePoint::ZERO,
            master: false,
        };
        assert_eq!(c.read_ts_nonstrict(TimePoint(0)).unwrap(), TimePoint(100));
        let a = c.read_ts_nonstrict(TimePoint(5)).unwrap();
        let b = c.read_ts_nonstrict(TimePoint(6)).unwrap();
        assert!(a <= b);
    }

    #[test]
    fn master_enable_at_ff() {
        let mut c = ClockState::new(DriftBound::default());
        c.enable_master(TimePoint(500), TimePoint(12_345));
        assert_eq!(c.time(TimePoint(12_345)).unwrap(), TimeInterval::point(TimePoint(500)));
        assert_eq!(c.master_time(TimePoint(12_400)), Some(TimePoint(555)));
        assert_eq!(c.ff(), TimePoint(500));
    }

    #[test]
    fn fast_forward_keeps_maximum() {
        let mut c = ClockState::new(DriftBound::default());
        c.resync_and_enable(rec(0, 0, 1_000));
        let ff = c.disable_and_fast_forward(TimePoint(1_000));
        assert_eq!(ff, TimePoint(2_001));
        c.raise_ff(TimePoint(10));
        assert_eq!(c.ff(), TimePoint(2_001));
        assert!(!c.is_enabled());
    }

    #[test]
    fn drift_threshold() {
        assert!(monitor_drift(1.00005).is_none());
        assert!(monitor_drift(1.0003).is_some());
        assert!(monitor_drift(0.9997).is_some());
        assert!(monitor_drift(1.0002).is_none());
    }

    #[test]
    fn drift_monitor_estimates_rate() {
        let mut m = DriftMonitor::new(1_000_000);
        // local runs 500 ppm fast, symmetric 10 tick one-way delay
        let sample = |cm: u64| {
            let local = |t: u64| (t as f64 * 1.0005) as u64;
            rec(local(cm - 10), local(cm + 10), cm)
        };
        assert!(m.observe(sample(1_000)).is_none());
        assert!(m.observe(sample(500_000)).is_none());
        let rate = m.observe(sample(1_200_000)).unwrap();
        assert!((rate - 1.0005).abs() < 1e-5, "{rate}");
    }
}
