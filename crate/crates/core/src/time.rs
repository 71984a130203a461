//! Integer picosecond time.
//!
//! `TimePoint` is an instant since the simulation epoch, `Duration` a signed
//! span. Both are plain `i64` picoseconds; arithmetic never rounds.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Rem, Sub, SubAssign};

use serde::{Deserialize, Serialize};

pub const PS_PER_NS: i64 = 1_000;
pub const PS_PER_US: i64 = 1_000_000;
pub const PS_PER_MS: i64 = 1_000_000_000;
pub const PS_PER_S: i64 = 1_000_000_000_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Duration(pub i64);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TimePoint(pub i64);

impl Duration {
    pub const ZERO: Duration = Duration(0);

    pub const fn from_ps(ps: i64) -> Self {
        Duration(ps)
    }
    pub const fn from_ns(ns: i64) -> Self {
        Duration(ns * PS_PER_NS)
    }
    pub const fn from_us(us: i64) -> Self {
        Duration(us * PS_PER_US)
    }
    pub const fn from_ms(ms: i64) -> Self {
        Duration(ms * PS_PER_MS)
    }
    pub const fn from_secs(s: i64) -> Self {
        Duration(s * PS_PER_S)
    }

    /// Nearest picosecond to a float number of seconds.
    pub fn from_secs_f64(s: f64) -> Self {
        Duration((s * PS_PER_S as f64).round() as i64)
    }
    pub fn from_ns_f64(ns: f64) -> Self {
        Duration((ns * PS_PER_NS as f64).round() as i64)
    }

    pub const fn as_ps(self) -> i64 {
        self.0
    }
    pub fn as_ns_f64(self) -> f64 {
        self.0 as f64 / PS_PER_NS as f64
    }
    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / PS_PER_S as f64
    }
    pub const fn abs(self) -> Self {
        Duration(self.0.abs())
    }
    pub const fn is_negative(self) -> bool {
        self.0 < 0
    }

    /// Round to the nearest multiple of `unit` (ties away from zero).
    pub fn round_to(self, unit: Duration) -> Self {
        assert!(unit.0 > 0, "rounding unit must be positive");
        let q = div_round(self.0, unit.0);
        Duration(q * unit.0)
    }

    /// Nearest integer count of `unit` in this span (ties away from zero).
    pub fn count_of(self, unit: Duration) -> i64 {
        assert!(unit.0 > 0, "rounding unit must be positive");
        div_round(self.0, unit.0)
    }
}

fn div_round(a: i64, b: i64) -> i64 {
    let q = a.div_euclid(b);
    let r = a.rem_euclid(b);
    // ties away from zero
    if 2 * r > b || (2 * r == b && a >= 0) {
        q + 1
    } else {
        q
    }
}

impl TimePoint {
    pub const EPOCH: TimePoint = TimePoint(0);

    pub const fn from_ps(ps: i64) -> Self {
        TimePoint(ps)
    }
    pub const fn as_ps(self) -> i64 {
        self.0
    }
    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / PS_PER_S as f64
    }
    pub const fn since_epoch(self) -> Duration {
        Duration(self.0)
    }
}

impl Add for Duration {
    type Output = Duration;
    fn add(self, rhs: Duration) -> Duration {
        Duration(self.0 + rhs.0)
    }
}
impl Sub for Duration {
    type Output = Duration;
    fn sub(self, rhs: Duration) -> Duration {
        Duration(self.0 - rhs.0)
    }
}
impl AddAssign for Duration {
    fn add_assign(&mut self, rhs: Duration) {
        self.0 += rhs.0;
    }
}
impl SubAssign for Duration {
    fn sub_assign(&mut self, rhs: Duration) {
        self.0 -= rhs.0;
    }
}
impl Neg for Duration {
    type Output = Duration;
    fn neg(self) -> Duration {
        Duration(-self.0)
    }
}
impl Mul<i64> for Duration {
    type Output = Duration;
    fn mul(self, rhs: i64) -> Duration {
        Duration(self.0 * rhs)
    }
}
impl Div<i64> for Duration {
    type Output = Duration;
    /// Truncating division.
    fn div(self, rhs: i64) -> Duration {
        Duration(self.0 / rhs)
    }
}
impl Div for Duration {
    type Output = i64;
    fn div(self, rhs: Duration) -> i64 {
        self.0 / rhs.0
    }
}
impl Rem for Duration {
    type Output = Duration;
    fn rem(self, rhs: Duration) -> Duration {
        Duration(self.0 % rhs.0)
    }
}
impl Sum for Duration {
    fn sum<I: Iterator<Item = Duration>>(iter: I) -> Duration {
        Duration(iter.map(|d| d.0).sum())
    }
}

impl Add<Duration> for TimePoint {
    type Output = TimePoint;
    fn add(self, rhs: Duration) -> TimePoint {
        TimePoint(self.0 + rhs.0)
    }
}
impl Sub<Duration> for TimePoint {
    type Output = TimePoint;
    fn sub(self, rhs: Duration) -> TimePoint {
        TimePoint(self.0 - rhs.0)
    }
}
impl Sub for TimePoint {
    type Output = Duration;
    fn sub(self, rhs: TimePoint) -> Duration {
        Duration(self.0 - rhs.0)
    }
}
impl AddAssign<Duration> for TimePoint {
    fn add_assign(&mut self, rhs: Duration) {
        self.0 += rhs.0;
    }
}

impl fmt::Display for Duration {
    /// Nanoseconds with 0.1 ns resolution.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ns", self.as_ns_f64())
    }
}

impl fmt::Display for TimePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ns", self.0 as f64 / PS_PER_NS as f64)
    }
}

/// Serde adapter: a `Duration` written as (possibly fractional) nanoseconds.
pub mod serde_ns {
    use super::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        if d.0 % 1000 == 0 {
            s.serialize_i64(d.0 / 1000)
        } else {
            s.serialize_f64(d.as_ns_f64())
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        f64::deserialize(d).map(Duration::from_ns_f64)
    }
}

/// Serde adapter: a `Duration` written as milliseconds.
pub mod serde_ms {
    use super::{Duration, PS_PER_MS};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        if d.0 % PS_PER_MS == 0 {
            s.serialize_i64(d.0 / PS_PER_MS)
        } else {
            s.serialize_f64(d.0 as f64 / PS_PER_MS as f64)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        f64::deserialize(d).map(|ms| Duration((ms * PS_PER_MS as f64).round() as i64))
    }
}

/// Serde adapter: a `Duration` written as seconds.
pub mod serde_s {
    use super::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        f64::deserialize(d).map(Duration::from_secs_f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_ties_go_away_from_zero() {
        let u = Duration(10);
        assert_eq!(Duration(15).round_to(u), Duration(20));
        assert_eq!(Duration(-15).round_to(u), Duration(-20));
        assert_eq!(Duration(14).round_to(u), Duration(10));
        assert_eq!(Duration(-14).round_to(u), Duration(-10));
        assert_eq!(Duration(-16).count_of(u), -2);
    }

    #[test]
    fn display_is_tenth_ns() {
        assert_eq!(Duration(1_234_567).to_string(), "1234.6 ns");
        assert_eq!(Duration::from_ns(-4).to_string(), "-4.0 ns");
    }

    #[test]
    fn point_difference_is_duration() {
        let a = TimePoint(5_000);
        let b = a + Duration::from_ns(3);
        assert_eq!(b - a, Duration(3_000));
    }
}
