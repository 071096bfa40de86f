//! The two time axes of the simulator: host wall-clock time ([`RealTime`],
//! integer nanoseconds) and guest-visible [`ArtificialTime`], plus the rate
//! types used by the cost model.

use std::fmt;
use std::ops::{Add, AddAssign, Sub};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::units::{
    format_scaled, parse_scaled, BYTE_COST_SUFFIXES, DURATION_SUFFIXES, SI_SUFFIXES,
};

/// Nanoseconds since simulation start.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RealTime(u64);

impl RealTime {
    pub const ZERO: RealTime = RealTime(0);
    pub const MAX: RealTime = RealTime(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        RealTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        RealTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        RealTime(ms * 1_000_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        RealTime(s * 1_000_000_000)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }

    pub fn checked_sub(self, rhs: RealTime) -> Option<RealTime> {
        self.0.checked_sub(rhs.0).map(RealTime)
    }

    pub fn saturating_sub(self, rhs: RealTime) -> RealTime {
        RealTime(self.0.saturating_sub(rhs.0))
    }

    pub fn saturating_mul(self, n: u64) -> RealTime {
        RealTime(self.0.saturating_mul(n))
    }
}

impl Add for RealTime {
    type Output = RealTime;
    fn add(self, rhs: RealTime) -> RealTime {
        RealTime(self.0 + rhs.0)
    }
}

impl AddAssign for RealTime {
    fn add_assign(&mut self, rhs: RealTime) {
        self.0 += rhs.0;
    }
}

impl Sub for RealTime {
    type Output = RealTime;
    fn sub(self, rhs: RealTime) -> RealTime {
        RealTime(self.0 - rhs.0)
    }
}

impl std::iter::Sum for RealTime {
    fn sum<I: Iterator<Item = RealTime>>(iter: I) -> RealTime {
        RealTime(iter.map(|t| t.0).sum())
    }
}

impl fmt::Display for RealTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_scaled(self.0, DURATION_SUFFIXES))
    }
}

impl FromStr for RealTime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_scaled(s, DURATION_SUFFIXES, 1).map(RealTime)
    }
}

/// Guest-visible time. One unit is one retired instruction at speed ratio 1.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArtificialTime(pub u64);

impl fmt::Display for ArtificialTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An event rate such as instructions per second.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rate(u64);

impl Rate {
    pub const fn per_sec(n: u64) -> Self {
        Rate(n)
    }

    pub const fn get(self) -> u64 {
        self.0
    }

    /// Real time needed for `count` events at this rate, rounded down.
    pub fn time_for(self, count: u64) -> RealTime {
        RealTime(((count as u128 * 1_000_000_000) / self.0.max(1) as u128) as u64)
    }

    /// Number of events that fit exactly into `span`, if it is an integer.
    pub fn count_in(self, span: RealTime) -> Option<u64> {
        let n = span.0 as u128 * self.0 as u128;
        n.is_multiple_of(1_000_000_000).then_some((n / 1_000_000_000) as u64)
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_scaled(self.0, SI_SUFFIXES))
    }
}

impl FromStr for Rate {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_scaled(s, SI_SUFFIXES, 1).map(Rate)
    }
}

/// Cost charged per byte moved, at picosecond resolution so that memcpy-like
/// rates below 1 ns/byte stay representable.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ByteCost(u64);

impl ByteCost {
    pub const ZERO: ByteCost = ByteCost(0);

    pub const fn from_picos(ps: u64) -> Self {
        ByteCost(ps)
    }

    pub const fn from_nanos(ns: u64) -> Self {
        ByteCost(ns * 1_000)
    }

    pub const fn as_picos(self) -> u64 {
        self.0
    }

    /// Total cost of moving `bytes`, rounded half-up to whole nanoseconds.
    pub fn cost(self, bytes: u64) -> RealTime {
        let ps = self.0 as u128 * bytes as u128;
        RealTime(((ps + 500) / 1_000) as u64)
    }
}

impl fmt::Display for ByteCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_scaled(self.0, BYTE_COST_SUFFIXES))
    }
}

impl FromStr for ByteCost {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_scaled(s, BYTE_COST_SUFFIXES, 1).map(ByteCost)
    }
}

macro_rules! unit_serde {
    ($ty:ty, $what:literal) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                struct V;
                impl serde::de::Visitor<'_> for V {
                    type Value = $ty;
                    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                        f.write_str($what)
                    }
                    fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<$ty, E> {
                        v.parse().map_err(E::custom)
                    }
                    fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<$ty, E> {
                        Ok(<$ty>::default_unit(v))
                    }
                    fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<$ty, E> {
                        u64::try_from(v)
                            .map(<$ty>::default_unit)
                            .map_err(|_| E::custom(concat!($what, " must be non-negative")))
                    }
                }
                d.deserialize_any(V)
            }
        }
    };
}

impl RealTime {
    fn default_unit(v: u64) -> Self {
        RealTime(v)
    }
}

impl Rate {
    fn default_unit(v: u64) -> Self {
        Rate(v)
    }
}

impl ByteCost {
    /// Bare integers are nanoseconds per byte.
    fn default_unit(v: u64) -> Self {
        ByteCost::from_nanos(v)
    }
}

unit_serde!(RealTime, "a duration such as 1ms or an integer number of nanoseconds");
unit_serde!(Rate, "a rate such as 3.2G or an integer");
unit_serde!(ByteCost, "a per-byte cost such as 10ns or 250ps");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_time_and_budget() {
        let ips = Rate::per_sec(3_200_000_000);
        assert_eq!(ips.time_for(3_200_000), RealTime::from_millis(1));
        assert_eq!(ips.count_in(RealTime::from_millis(1)), Some(3_200_000));
        // 1 ns at 1.5 instructions/ns is not an integer budget.
        assert_eq!(Rate::per_sec(1_500_000_000).count_in(RealTime::from_nanos(1)), None);
    }

    #[test]
    fn byte_cost_rounds_half_up() {
        assert_eq!(ByteCost::from_nanos(10).cost(4096), RealTime::from_nanos(40_960));
        assert_eq!(ByteCost::from_picos(250).cost(2), RealTime::from_nanos(1));
        assert_eq!(ByteCost::from_picos(250).cost(1), RealTime::ZERO);
    }

    #[test]
    fn display_round_trips() {
        for t in [0u64, 1, 1_045, 1_000_000, 100_000_000, 1_500] {
            let rt = RealTime::from_nanos(t);
            assert_eq!(rt.to_string().parse::<RealTime>(), Ok(rt));
        }
    }
}
