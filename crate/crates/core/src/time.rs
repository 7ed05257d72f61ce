//! Simulated time values.
//!
//! Every clock reading, timestamp and delay in the crate is counted in
//! ticks, where one tick stands for one simulated nanosecond.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

/// Largest value that fits the 53-bit timestamp field of an object header.
pub const MAX_TIMESTAMP: u64 = (1 << 53) - 1;

/// A point on some clock, in ticks.
///
/// The same type carries local clock readings, master-clock readings and
/// transaction timestamps; which clock a value belongs to is a matter of
/// context.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TimePoint(pub u64);

impl TimePoint {
    pub const ZERO: TimePoint = TimePoint(0);

    pub const fn ticks(self) -> u64 {
        self.0
    }

    pub fn from_micros(us: u64) -> Self {
        TimePoint(us * 1_000)
    }

    pub fn from_millis(ms: u64) -> Self {
        TimePoint(ms * 1_000_000)
    }

    /// Saturating difference `self - earlier`.
    pub fn since(self, earlier: TimePoint) -> u64 {
        self.0.saturating_sub(earlier.0)
    }

    /// True when the value can be stored in a version header.
    pub fn fits_header(self) -> bool {
        self.0 <= MAX_TIMESTAMP
    }
}

impl Add<u64> for TimePoint {
    type Output = TimePoint;
    fn add(self, rhs: u64) -> TimePoint {
        TimePoint(self.0 + rhs)
    }
}

impl AddAssign<u64> for TimePoint {
    fn add_assign(&mut self, rhs: u64) {
        self.0 += rhs;
    }
}

impl Sub<u64> for TimePoint {
    type Output = TimePoint;
    fn sub(self, rhs: u64) -> TimePoint {
        TimePoint(self.0.saturating_sub(rhs))
    }
}

impl fmt::Display for TimePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A closed interval `[lower, upper]` on the master clock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeInterval {
    pub lower: TimePoint,
    pub upper: TimePoint,
}

impl TimeInterval {
    pub fn new(lower: TimePoint, upper: TimePoint) -> Self {
        debug_assert!(lower <= upper, "interval [{lower}, {upper}] is inverted");
        TimeInterval { lower, upper }
    }

    pub fn point(t: TimePoint) -> Self {
        TimeInterval { lower: t, upper: t }
    }

    pub fn width(&self) -> u64 {
        self.upper.since(self.lower)
    }

    pub fn contains(&self, t: TimePoint) -> bool {
        self.lower <= t && t <= self.upper
    }
}

impl fmt::Display for TimeInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lower, self.upper)
    }
}

/// Bound on the relative rate difference between any two clocks, in parts
/// per million.
///
/// Stored as an integer so that bound arithmetic is exact: comparisons of
/// synchronization records never depend on floating-point rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DriftBound {
    ppm: u64,
}

impl DriftBound {
    pub const PPM_SCALE: u64 = 1_000_000;

    /// No drift at all. Only meaningful for bound arithmetic; clocks
    /// require a positive bound.
    pub const ZERO: DriftBound = DriftBound { ppm: 0 };

    /// # Panics
    /// If `ppm` is not below one million.
    pub fn from_ppm(ppm: u64) -> Self {
        assert!(ppm < Self::PPM_SCALE, "drift bound must be below 1");
        DriftBound { ppm }
    }

    /// Rounds `epsilon` to the nearest part per million.
    pub fn from_fraction(epsilon: f64) -> Self {
        Self::from_ppm((epsilon * Self::PPM_SCALE as f64).round() as u64)
    }

    pub fn ppm(&self) -> u64 {
        self.ppm
    }

    pub fn as_fraction(&self) -> f64 {
        self.ppm as f64 / Self::PPM_SCALE as f64
    }

    /// `floor(ticks * (1 - epsilon))`
    pub fn shrink_floor(&self, ticks: u64) -> u64 {
        let num = ticks as u128 * (Self::PPM_SCALE - self.ppm) as u128;
        (num / Self::PPM_SCALE as u128) as u64
    }

    /// `ceil(ticks * (1 + epsilon))`
    pub fn stretch_ceil(&self, ticks: u64) -> u64 {
        let num = ticks as u128 * (Self::PPM_SCALE + self.ppm) as u128;
        num.div_ceil(Self::PPM_SCALE as u128) as u64
    }
}

impl Default for DriftBound {
    /// 1000 ppm.
    fn default() -> Self {
        DriftBound { ppm: 1_000 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_rounding_directions() {
        let eps = DriftBound::default();
        assert_eq!(eps.shrink_floor(1000), 999);
        assert_eq!(eps.stretch_ceil(2000), 2002);
        assert_eq!(eps.stretch_ceil(10), 11);
        assert_eq!(eps.shrink_floor(0), 0);
        assert_eq!(eps.stretch_ceil(0), 0);
    }

    #[test]
    fn fraction_round_trip() {
        assert_eq!(DriftBound::from_fraction(0.001).ppm(), 1000);
        assert!((DriftBound::from_ppm(250).as_fraction() - 0.00025).abs() < 1e-12);
    }

    #[test]
    fn header_width() {
        assert!(TimePoint(MAX_TIMESTAMP).fits_header());
        assert!(!TimePoint(MAX_TIMESTAMP + 1).fits_header());
    }
}
