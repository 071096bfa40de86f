//! Discrete-event core: a real-time clock and an event queue totally ordered
//! by `(fire_at, seq)`.
//!
//! The queue never reorders events with equal timestamps: the sequence number
//! is assigned at insertion, so ties are delivered in insertion order. Nothing
//! in here reads the wall clock or any randomness, which is what makes replays
//! byte-identical.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::time::RealTime;

/// Identifies the component an event is addressed to.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ComponentId(pub u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event<P> {
    pub fire_at: RealTime,
    pub seq: u64,
    pub target: ComponentId,
    pub payload: P,
}

/// Returned by [`SimClock::schedule`]; pass to [`SimClock::cancel`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct EventHandle {
    fire_at: RealTime,
    seq: u64,
}

impl EventHandle {
    pub fn seq(&self) -> u64 {
        self.seq
    }
}

#[derive(Debug)]
pub struct SimClock<P> {
    now: RealTime,
    next_seq: u64,
    queue: BTreeMap<(RealTime, u64), (ComponentId, P)>,
}

impl<P> Default for SimClock<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> SimClock<P> {
    pub fn new() -> Self {
        SimClock {
            now: RealTime::ZERO,
            next_seq: 0,
            queue: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> RealTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, fire_at: RealTime, target: ComponentId, payload: P) -> Result<EventHandle> {
        if fire_at < self.now {
            return Err(Error::PastEvent {
                fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((fire_at, seq), (target, payload));
        Ok(EventHandle { fire_at, seq })
    }

    /// Removes a pending event. Returns false if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.queue.remove(&(handle.fire_at, handle.seq)).is_some()
    }

    /// Time of the earliest pending event.
    pub fn peek_time(&self) -> Option<RealTime> {
        self.queue.keys().next().map(|(t, _)| *t)
    }

    /// Pops the earliest event if it fires at or before `limit`, advancing
    /// `now` to its timestamp.
    pub fn pop_due(&mut self, limit: RealTime) -> Option<Event<P>> {
        let entry = self.queue.first_entry()?;
        if entry.key().0 > limit {
            return None;
        }
        let ((fire_at, seq), (target, payload)) = entry.remove_entry();
        self.now = fire_at;
        Some(Event {
            fire_at,
            seq,
            target,
            payload,
        })
    }

    /// Moves the clock forward without processing anything. Fails if an
    /// event would be skipped or the clock would regress.
    pub fn advance_to(&mut self, t: RealTime) -> Result<()> {
        if t < self.now {
            return Err(Error::PastEvent {
                fire_at: t,
                now: self.now,
            });
        }
        if let Some(first) = self.peek_time() {
            if first <= t {
                return Err(Error::scenario(format!(
                    "advance_to({t}) would skip an event pending at {first}"
                )));
            }
        }
        self.now = t;
        Ok(())
    }

    /// Processes every event with `fire_at <= t` in `(fire_at, seq)` order,
    /// then leaves the clock at `t`. The handler may schedule further events;
    /// ones that fall inside the window are processed in the same call.
    pub fn run_until<F>(&mut self, t: RealTime, mut handler: F) -> Result<usize>
    where
        F: FnMut(&mut Self, Event<P>),
    {
        if t < self.now {
            return Err(Error::PastEvent {
                fire_at: t,
                now: self.now,
            });
        }
        let mut processed = 0;
        while let Some(ev) = self.pop_due(t) {
            handler(self, ev);
            processed += 1;
        }
        self.now = t;
        Ok(processed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const C: ComponentId = ComponentId(0);

    fn drain(clock: &mut SimClock<&'static str>, t: u64) -> Vec<(u64, u64, &'static str)> {
        let mut log = Vec::new();
        clock
            .run_until(RealTime::from_nanos(t), |_, ev| {
                log.push((ev.fire_at.as_nanos(), ev.seq, ev.payload))
            })
            .unwrap();
        log
    }

    #[test]
    fn schedule_at_now_fires_first() {
        let mut clock = SimClock::new();
        clock.schedule(RealTime::from_nanos(5), C, "later").unwrap();
        clock.schedule(RealTime::ZERO, C, "now").unwrap();
        let log = drain(&mut clock, 10);
        assert_eq!(log[0].2, "now");
    }

    #[test]
    fn ties_break_by_insertion() {
        let mut clock = SimClock::new();
        clock.schedule(RealTime::from_nanos(2), C, "a").unwrap();
        clock.schedule(RealTime::from_nanos(1), C, "b").unwrap();
        clock.schedule(RealTime::from_nanos(2), C, "c").unwrap();
        let log = drain(&mut clock, 2);
        let order: Vec<_> = log.iter().map(|e| e.2).collect();
        assert_eq!(order, ["b", "a", "c"]);
    }

    #[test]
    fn rejects_past_events() {
        let mut clock: SimClock<()> = SimClock::new();
        clock.run_until(RealTime::from_nanos(10), |_, _| {}).unwrap();
        let err = clock.schedule(RealTime::from_nanos(9), C, ()).unwrap_err();
        assert!(matches!(err, Error::PastEvent { .. }));
        assert!(clock.run_until(RealTime::from_nanos(9), |_, _| {}).is_err());
    }

    #[test]
    fn empty_run_moves_clock() {
        let mut clock: SimClock<()> = SimClock::new();
        let n = clock.run_until(RealTime::from_nanos(1_000_000), |_, _| {}).unwrap();
        assert_eq!(n, 0);
        assert_eq!(clock.now(), RealTime::from_nanos(1_000_000));
    }

    #[test]
    fn cancel_semantics() {
        let mut clock = SimClock::new();
        let h = clock.schedule(RealTime::from_nanos(3), C, "x").unwrap();
        let keep = clock.schedule(RealTime::from_nanos(4), C, "y").unwrap();
        assert!(clock.cancel(h));
        assert!(!clock.cancel(h));
        let log = drain(&mut clock, 10);
        assert_eq!(log.len(), 1);
        assert!(!clock.cancel(keep), "already fired");
    }

    #[test]
    fn handler_can_schedule_within_window() {
        let mut clock = SimClock::new();
        clock.schedule(RealTime::from_nanos(1), C, 0u32).unwrap();
        let mut seen = Vec::new();
        clock
            .run_until(RealTime::from_nanos(10), |clk, ev| {
                seen.push(ev.payload);
                if ev.payload < 3 {
                    let at = clk.now() + RealTime::from_nanos(2);
                    clk.schedule(at, C, ev.payload + 1).unwrap();
                }
            })
            .unwrap();
        assert_eq!(seen, [0, 1, 2, 3]);
    }

    #[test]
    fn advance_to_refuses_to_skip() {
        let mut clock = SimClock::new();
        clock.schedule(RealTime::from_nanos(5), C, ()).unwrap();
        assert!(clock.advance_to(RealTime::from_nanos(6)).is_err());
        assert!(clock.advance_to(RealTime::from_nanos(4)).is_ok());
    }
}
