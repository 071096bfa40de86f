use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::{ByteCost, Rate, RealTime};

/// VM-exit cost: 1.0445 µs, rounded to whole nanoseconds.
pub const DEFAULT_VM_EXIT_COST: RealTime = RealTime::from_nanos(1_045);
pub const DEFAULT_HOST_IPS: Rate = Rate::per_sec(3_200_000_000);
pub const DEFAULT_OVERSHOOT_MAX: u64 = 250;
pub const DEFAULT_OVERSHOOT_MEAN: u64 = 80;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountingKind {
    /// Performance-counter stop placed `overshoot_max` early, then
    /// single-stepped to the exact count.
    Precise,
    /// Hardware stops after an exact instruction count at no extra cost.
    #[default]
    Coarse,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountingMode {
    pub mode: CountingKind,
    pub overshoot_max: u64,
    pub overshoot_mean: u64,
    /// Charged per single-stepped instruction, including its exit and
    /// re-entry.
    pub single_step_cost: RealTime,
}

impl Default for CountingMode {
    fn default() -> Self {
        CountingMode {
            mode: CountingKind::Coarse,
            overshoot_max: DEFAULT_OVERSHOOT_MAX,
            overshoot_mean: DEFAULT_OVERSHOOT_MEAN,
            single_step_cost: DEFAULT_VM_EXIT_COST,
        }
    }
}

impl CountingMode {
    pub fn coarse() -> Self {
        Self::default()
    }

    pub fn precise() -> Self {
        CountingMode {
            mode: CountingKind::Precise,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.overshoot_mean > self.overshoot_max {
            return Err(Error::config(format!(
                "overshoot_mean ({}) exceeds overshoot_max ({})",
                self.overshoot_mean, self.overshoot_max
            )));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub host_ips: Rate,
    pub vm_exit_cost: RealTime,
    pub copy_cost_per_byte: ByteCost,
    /// Upper bound of uniform host noise added to each segment.
    pub exec_jitter: RealTime,
    /// Slowdown per busy co-scheduled guest, in thousandths.
    pub contention_permille: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            host_ips: DEFAULT_HOST_IPS,
            vm_exit_cost: DEFAULT_VM_EXIT_COST,
            copy_cost_per_byte: ByteCost::from_picos(500),
            exec_jitter: RealTime::ZERO,
            contention_permille: 0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.host_ips.get() == 0 {
            return Err(Error::config("host_ips must be positive"));
        }
        Ok(())
    }

    /// Time to retire `instructions` while `corunners` other guests are busy.
    pub fn exec_time(&self, instructions: u64, corunners: u64) -> RealTime {
        let base = self.host_ips.time_for(instructions).as_nanos() as u128;
        let factor = 1_000 + self.contention_permille as u128 * corunners as u128;
        RealTime::from_nanos((base * factor / 1_000) as u64)
    }
}

/// Draws how far the performance-counter interrupt overshoots its target:
/// a Beta(2, β) variable scaled onto `[0, overshoot_max]` with the
/// configured mean.
#[derive(Clone, Debug)]
pub struct OvershootSampler {
    max: u64,
    dist: Option<Beta<f64>>,
    constant: u64,
}

impl OvershootSampler {
    pub fn new(mode: &CountingMode) -> Self {
        let max = mode.overshoot_max;
        let mean = mode.overshoot_mean;
        if max == 0 || mean == 0 || mean >= max {
            return OvershootSampler {
                max,
                dist: None,
                constant: mean.min(max),
            };
        }
        let m = mean as f64 / max as f64;
        let alpha = 2.0;
        let beta = alpha * (1.0 - m) / m;
        OvershootSampler {
            max,
            dist: Some(Beta::new(alpha, beta).expect("shape parameters are positive")),
            constant: 0,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.dist {
            Some(d) => ((d.sample(rng) * self.max as f64).round() as u64).min(self.max),
            None => self.constant,
        }
    }

    /// Instructions single-stepped for an entry of `distance` instructions
    /// that must stop exactly at its end.
    pub fn stepped<R: Rng + ?Sized>(&self, distance: u64, rng: &mut R) -> u64 {
        if distance <= self.max {
            distance
        } else {
            self.max - self.draw(rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn overshoot_has_configured_mean_and_bounds() {
        let s = OvershootSampler::new(&CountingMode::precise());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 200_000;
        let draws: Vec<u64> = (0..n).map(|_| s.draw(&mut rng)).collect();
        assert!(draws.iter().all(|&d| d <= 250));
        let mean = draws.iter().sum::<u64>() as f64 / n as f64;
        assert!((mean - 80.0).abs() < 1.0, "mean {mean}");
    }

    #[test]
    fn short_entries_are_stepped_entirely() {
        let s = OvershootSampler::new(&CountingMode::precise());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(s.stepped(100, &mut rng), 100);
        let long = s.stepped(1_000_000, &mut rng);
        assert!(long <= 250);
    }

    #[test]
    fn validation() {
        let bad = CountingMode {
            overshoot_mean: 300,
            ..CountingMode::precise()
        };
        assert!(bad.validate().is_err());
        let zero = CostModel {
            host_ips: Rate::per_sec(0),
            ..CostModel::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn contention_scales_exec_time() {
        let c = CostModel {
            contention_permille: 500,
            ..CostModel::default()
        };
        assert_eq!(c.exec_time(3_200_000, 0), RealTime::from_millis(1));
        assert_eq!(c.exec_time(3_200_000, 1), RealTime::from_micros(1_500));
    }
}
