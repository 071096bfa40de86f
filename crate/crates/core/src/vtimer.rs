//! Artificial time generator.
//!
//! Guest-visible time is a count of retired instructions, scaled by a speed
//! ratio while the guest catches up after missed slots. Devices register
//! alarms in artificial time; the VMM asks for the nearest one before every
//! entry and reports retired instructions after every exit.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::time::ArtificialTime;

/// Device that owns an alarm.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceId(pub u32);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct AlarmHandle {
    at: u64,
    id: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alarm<P> {
    pub at: ArtificialTime,
    pub owner: DeviceId,
    pub payload: P,
}

/// Multiplier applied to artificial-time advancement; always at least 1.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SpeedRatio(u64);

impl SpeedRatio {
    pub const ONE: SpeedRatio = SpeedRatio(1);

    pub fn new(n: u64) -> Result<Self> {
        if n == 0 {
            Err(Error::InvalidSpeedRatio(n))
        } else {
            Ok(SpeedRatio(n))
        }
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

#[derive(Debug)]
pub struct VTimer<P> {
    now: u64,
    ratio: SpeedRatio,
    next_id: u64,
    alarms: BTreeMap<(u64, u64), (DeviceId, P)>,
}

impl<P> Default for VTimer<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> VTimer<P> {
    pub fn new() -> Self {
        VTimer {
            now: 0,
            ratio: SpeedRatio::ONE,
            next_id: 0,
            alarms: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> ArtificialTime {
        ArtificialTime(self.now)
    }

    pub fn speed_ratio(&self) -> SpeedRatio {
        self.ratio
    }

    pub fn set_speed_ratio(&mut self, n: u64) -> Result<()> {
        self.ratio = SpeedRatio::new(n)?;
        Ok(())
    }

    /// Artificial time by which `instructions` more instructions will have
    /// retired at the current ratio. Devices use this to place alarms
    /// "n times as far" while a catch-up ratio is in effect.
    pub fn after_instructions(&self, instructions: u64) -> ArtificialTime {
        ArtificialTime(self.now + instructions * self.ratio.0)
    }

    /// Instructions the guest may retire before artificial time reaches
    /// `at`. Rounds up, so an alarm that is not a whole number of scaled
    /// instructions away is passed by less than one ratio step.
    pub fn instructions_until(&self, at: ArtificialTime) -> u64 {
        at.0.saturating_sub(self.now).div_ceil(self.ratio.0)
    }

    pub fn set_alarm(&mut self, at: ArtificialTime, owner: DeviceId, payload: P) -> Result<AlarmHandle> {
        if at.0 < self.now {
            return Err(Error::PastAlarm {
                at: at.0,
                now: self.now,
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.alarms.insert((at.0, id), (owner, payload));
        Ok(AlarmHandle { at: at.0, id })
    }

    pub fn cancel_alarm(&mut self, handle: AlarmHandle) -> bool {
        self.alarms.remove(&(handle.at, handle.id)).is_some()
    }

    pub fn pending_alarms(&self) -> usize {
        self.alarms.len()
    }

    pub fn next_event(&self) -> Result<ArtificialTime> {
        self.alarms
            .keys()
            .next()
            .map(|(at, _)| ArtificialTime(*at))
            .ok_or(Error::NoPendingAlarms)
    }

    /// Charges `count` retired instructions and returns the alarms that
    /// became due, in ascending `at` (then registration) order.
    pub fn advance_instructions(&mut self, count: u64) -> Vec<Alarm<P>> {
        self.now += count * self.ratio.0;
        self.take_due()
    }

    /// Jumps artificial time forward, e.g. while the guest is halted.
    pub fn advance_to(&mut self, at: ArtificialTime) -> Result<Vec<Alarm<P>>> {
        if at.0 < self.now {
            return Err(Error::TimeRegression {
                now: self.now,
                to: at.0,
            });
        }
        self.now = at.0;
        Ok(self.take_due())
    }

    fn take_due(&mut self) -> Vec<Alarm<P>> {
        let mut fired = Vec::new();
        while let Some(entry) = self.alarms.first_entry() {
            if entry.key().0 > self.now {
                break;
            }
            let ((at, _), (owner, payload)) = entry.remove_entry();
            fired.push(Alarm {
                at: ArtificialTime(at),
                owner,
                payload,
            });
        }
        fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEV: DeviceId = DeviceId(1);

    fn ats<P>(fired: &[Alarm<P>]) -> Vec<u64> {
        fired.iter().map(|a| a.at.0).collect()
    }

    #[test]
    fn fresh_timer_reads_zero() {
        let t: VTimer<()> = VTimer::new();
        assert_eq!(t.now(), ArtificialTime(0));
    }

    #[test]
    fn advance_scales_by_ratio() {
        let mut t: VTimer<()> = VTimer::new();
        t.advance_instructions(1000);
        assert_eq!(t.now().0, 1000);

        let mut t: VTimer<()> = VTimer::new();
        t.set_speed_ratio(2).unwrap();
        t.advance_instructions(500);
        assert_eq!(t.now().0, 1000);
    }

    #[test]
    fn alarm_at_now_fires_on_zero_advance() {
        let mut t = VTimer::new();
        t.advance_instructions(10);
        t.set_alarm(ArtificialTime(10), DEV, "now").unwrap();
        let fired = t.advance_instructions(0);
        assert_eq!(fired.len(), 1);
        assert_eq!(t.now().0, 10);
    }

    #[test]
    fn zero_advance_without_due_alarms_is_identity() {
        let mut t = VTimer::new();
        t.set_alarm(ArtificialTime(5), DEV, ()).unwrap();
        assert!(t.advance_instructions(0).is_empty());
        assert_eq!(t.now().0, 0);
    }

    #[test]
    fn rejects_past_alarm_and_regression() {
        let mut t = VTimer::new();
        t.advance_instructions(100);
        assert!(matches!(t.set_alarm(ArtificialTime(99), DEV, ()), Err(Error::PastAlarm { .. })));
        assert!(matches!(t.advance_to(ArtificialTime(50)), Err(Error::TimeRegression { .. })));
        assert!(t.advance_to(ArtificialTime(100)).unwrap().is_empty());
    }

    #[test]
    fn next_event_is_minimum() {
        let mut t = VTimer::new();
        assert!(matches!(t.next_event(), Err(Error::NoPendingAlarms)));
        for at in [500, 300, 900] {
            t.set_alarm(ArtificialTime(at), DEV, at).unwrap();
        }
        assert_eq!(t.next_event().unwrap().0, 300);
        assert_eq!(ats(&t.advance_to(ArtificialTime(300)).unwrap()), [300]);
        assert_eq!(t.next_event().unwrap().0, 500);
    }

    #[test]
    fn crossing_alarms_fire_in_order() {
        let mut t = VTimer::new();
        t.set_alarm(ArtificialTime(70), DEV, "b").unwrap();
        t.set_alarm(ArtificialTime(30), DEV, "a").unwrap();
        t.set_alarm(ArtificialTime(70), DEV, "c").unwrap();
        let fired = t.advance_instructions(100);
        let order: Vec<_> = fired.iter().map(|a| a.payload).collect();
        assert_eq!(order, ["a", "b", "c"]);
    }

    #[test]
    fn halt_jump_fires_only_nearest_set() {
        let mut t = VTimer::new();
        t.set_alarm(ArtificialTime(40), DEV, 1).unwrap();
        t.set_alarm(ArtificialTime(40), DEV, 2).unwrap();
        t.set_alarm(ArtificialTime(41), DEV, 3).unwrap();
        let next = t.next_event().unwrap();
        let fired = t.advance_to(next).unwrap();
        assert_eq!(fired.iter().map(|a| a.payload).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn ratio_two_alarm_is_placed_twice_as_far() {
        let mut t = VTimer::new();
        t.set_speed_ratio(2).unwrap();
        let s = 1_000;
        let at = t.after_instructions(s);
        assert_eq!(at.0, 2 * s);
        t.set_alarm(at, DEV, ()).unwrap();
        assert_eq!(t.instructions_until(at), s);
        assert!(t.advance_instructions(s - 1).is_empty());
        assert_eq!(t.advance_instructions(1).len(), 1);
    }

    #[test]
    fn ratio_must_be_positive() {
        let mut t: VTimer<()> = VTimer::new();
        assert!(matches!(t.set_speed_ratio(0), Err(Error::InvalidSpeedRatio(0))));
        t.set_speed_ratio(1).unwrap();
        t.advance_instructions(7);
        assert_eq!(t.now().0, 7);
    }

    #[test]
    fn periodic_rearm_ticks_at_multiples() {
        let mut t = VTimer::new();
        let s = 250;
        t.set_alarm(t.after_instructions(s), DEV, ()).unwrap();
        let mut ticks = Vec::new();
        for _ in 0..1000 {
            for a in t.advance_instructions(1) {
                ticks.push(a.at.0);
                t.set_alarm(ArtificialTime(a.at.0 + s), DEV, ()).unwrap();
            }
        }
        assert_eq!(ticks, [250, 500, 750, 1000]);
    }
}
