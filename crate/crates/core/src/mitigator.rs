//! The mitigation boundary.
//!
//! At every slot boundary the mitigator forwards to the backend the request
//! bundles it took from the guest at the previous boundary, and, if the
//! guest's next bundles are sealed, performs an exchange: it takes them and
//! hands back everything the backend produced since the last exchange. A slot
//! without an exchange is a miss, and the only thing the outside learns.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::time::RealTime;
use crate::virtio::{QueueId, RequestBundle, ResponseBundle, ResponseEntry};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SlotGrid {
    pub interval: RealTime,
    pub phase: RealTime,
}

impl SlotGrid {
    pub fn new(interval: RealTime, phase: RealTime) -> Result<Self> {
        if interval == RealTime::ZERO {
            return Err(Error::config("mitigation interval must be positive"));
        }
        Ok(SlotGrid { interval, phase })
    }

    /// Start of slot `k`.
    pub fn boundary(&self, k: u64) -> RealTime {
        self.phase + self.interval.saturating_mul(k)
    }

    /// Slot containing `t`; `None` before the first boundary.
    pub fn slot_of(&self, t: RealTime) -> Option<u64> {
        t.checked_sub(self.phase)
            .map(|d| d.as_nanos() / self.interval.as_nanos())
    }
}

/// Per-slot deadline-miss trace of one guest.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LeakLedger {
    miss_bits: Vec<bool>,
    leaked_bits: u64,
    #[serde(skip)]
    last_slot: Option<u64>,
    #[serde(skip)]
    trailing_misses: u64,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize)]
pub struct LeakageRate {
    pub observed_bps: f64,
    /// One bit per interval.
    pub ceiling_bps: f64,
}

impl LeakLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_slot(&mut self, slot: u64, on_time: bool) -> Result<()> {
        if let Some(last) = self.last_slot {
            if slot <= last {
                return Err(Error::SlotOrder { slot, last });
            }
        }
        self.last_slot = Some(slot);
        self.miss_bits.push(!on_time);
        if on_time {
            self.trailing_misses = 0;
        } else {
            self.leaked_bits += 1;
            self.trailing_misses += 1;
        }
        Ok(())
    }

    pub fn miss_bits(&self) -> &[bool] {
        &self.miss_bits
    }

    pub fn leaked_bits(&self) -> u64 {
        self.leaked_bits
    }

    pub fn slots_elapsed(&self) -> u64 {
        self.miss_bits.len() as u64
    }

    /// Consecutive misses at the end of the trace.
    pub fn trailing_misses(&self) -> u64 {
        self.trailing_misses
    }

    pub fn leakage_rate(&self, elapsed: RealTime, interval: RealTime) -> LeakageRate {
        let secs = elapsed.as_secs_f64();
        LeakageRate {
            observed_bps: if secs > 0.0 { self.leaked_bits as f64 / secs } else { 0.0 },
            ceiling_bps: 1e9 / interval.as_nanos() as f64,
        }
    }
}

/// Requests and bytes forwarded for one queue at one boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QueueOutput {
    pub queue: usize,
    pub requests: usize,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BoundaryRecord {
    pub slot: u64,
    pub time: RealTime,
    pub on_time: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_slots: Option<u64>,
    /// What left towards the backend; `None` when nothing did.
    pub output: Option<Vec<QueueOutput>>,
    pub delivered: usize,
}

#[derive(Debug, Default)]
pub struct ExchangeOutcome {
    /// Bundles to hand to the backend at this boundary.
    pub forward: Option<Vec<RequestBundle>>,
    /// Responses for the guest, one bundle per queue; `None` on a miss.
    pub responses: Option<Vec<ResponseBundle>>,
}

/// Mitigator for a set of queues that share one slot grid.
#[derive(Debug)]
pub struct Mitigator {
    grid: SlotGrid,
    queues: Vec<QueueId>,
    pending: Vec<Vec<ResponseEntry>>,
    held: Option<Vec<RequestBundle>>,
    last_exchange: Option<u64>,
    ledger: LeakLedger,
    log: Vec<BoundaryRecord>,
    keep_log: bool,
}

impl Mitigator {
    pub fn new(grid: SlotGrid, queues: Vec<QueueId>, keep_log: bool) -> Self {
        Mitigator {
            grid,
            pending: vec![Vec::new(); queues.len()],
            queues,
            held: None,
            last_exchange: None,
            ledger: LeakLedger::new(),
            log: Vec::new(),
            keep_log,
        }
    }

    pub fn grid(&self) -> &SlotGrid {
        &self.grid
    }

    pub fn queues(&self) -> &[QueueId] {
        &self.queues
    }

    pub fn ledger(&self) -> &LeakLedger {
        &self.ledger
    }

    pub fn boundary_log(&self) -> &[BoundaryRecord] {
        &self.log
    }

    pub fn last_exchange(&self) -> Option<u64> {
        self.last_exchange
    }

    /// Responses buffered for the next exchange.
    pub fn pending(&self) -> usize {
        self.pending.iter().map(Vec::len).sum()
    }

    /// Buffers a backend response until the next exchange.
    pub fn buffer_response(&mut self, queue: QueueId, entry: ResponseEntry) -> Result<()> {
        let i = self
            .queues
            .iter()
            .position(|&q| q == queue)
            .ok_or_else(|| Error::scenario(format!("queue {} is not served by this mitigator", queue.0)))?;
        self.pending[i].push(entry);
        Ok(())
    }

    /// Runs the boundary of `slot`. `ready` holds the guest's sealed bundles
    /// if they were finished by this boundary.
    pub fn exchange(&mut self, slot: u64, ready: Option<Vec<RequestBundle>>) -> Result<ExchangeOutcome> {
        let forward = self.held.take();
        let on_time = ready.is_some();
        self.ledger.record_slot(slot, on_time)?;
        let mut out = ExchangeOutcome {
            forward,
            responses: None,
        };
        let mut elapsed_slots = None;
        let mut delivered = 0;
        if let Some(bundles) = ready {
            let elapsed = match self.last_exchange {
                Some(last) => slot - last,
                None => 1,
            };
            let responses: Vec<ResponseBundle> = self
                .queues
                .iter()
                .zip(self.pending.iter_mut())
                .map(|(&queue, pending)| ResponseBundle {
                    slot,
                    queue,
                    responses: std::mem::take(pending),
                    elapsed_slots: elapsed,
                })
                .collect();
            delivered = responses.iter().map(|b| b.responses.len()).sum();
            self.held = Some(bundles);
            self.last_exchange = Some(slot);
            elapsed_slots = Some(elapsed);
            out.responses = Some(responses);
        }
        if self.keep_log {
            let output = out.forward.as_ref().map(|bundles| {
                bundles
                    .iter()
                    .map(|b| QueueOutput {
                        queue: b.queue.0,
                        requests: b.requests.len(),
                        bytes: b.bytes(),
                    })
                    .collect()
            });
            self.log.push(BoundaryRecord {
                slot,
                time: self.grid.boundary(slot),
                on_time,
                elapsed_slots,
                output,
                delivered,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::virtio::{DataBuf, ResponseSource, Status};

    fn grid() -> SlotGrid {
        SlotGrid::new(RealTime::from_millis(1), RealTime::ZERO).unwrap()
    }

    #[test]
    fn grid_arithmetic() {
        let g = SlotGrid::new(RealTime::from_millis(1), RealTime::from_micros(300)).unwrap();
        assert_eq!(g.boundary(2), RealTime::from_micros(2_300));
        assert_eq!(g.slot_of(RealTime::from_micros(2_299)), Some(1));
        assert_eq!(g.slot_of(RealTime::from_micros(2_300)), Some(2));
        assert_eq!(g.slot_of(RealTime::from_micros(100)), None);
        assert!(SlotGrid::new(RealTime::ZERO, RealTime::ZERO).is_err());
    }

    #[test]
    fn ledger_counts_and_rejects_duplicates() {
        let mut l = LeakLedger::new();
        for k in 0..10 {
            l.record_slot(k, k % 2 == 0).unwrap();
        }
        assert_eq!(l.leaked_bits(), 5);
        assert_eq!(l.slots_elapsed(), 10);
        assert!(matches!(l.record_slot(9, true), Err(Error::SlotOrder { slot: 9, last: 9 })));
    }

    #[test]
    fn ceilings() {
        let l = LeakLedger::new();
        assert_eq!(l.leakage_rate(RealTime::from_secs(1), RealTime::from_millis(1)).ceiling_bps, 1000.0);
        assert_eq!(l.leakage_rate(RealTime::from_secs(1), RealTime::from_millis(10)).ceiling_bps, 100.0);
    }

    fn bundle(period: u64) -> Vec<RequestBundle> {
        vec![RequestBundle::empty(period, QueueId(0))]
    }

    #[test]
    fn bundles_are_forwarded_one_boundary_later() {
        let mut m = Mitigator::new(grid(), vec![QueueId(0)], true);
        let o = m.exchange(0, Some(bundle(0))).unwrap();
        assert!(o.forward.is_none());
        assert_eq!(o.responses.unwrap()[0].elapsed_slots, 1);
        let o = m.exchange(1, Some(bundle(1))).unwrap();
        assert_eq!(o.forward.unwrap()[0].period, 0);
    }

    #[test]
    fn miss_then_piggyback() {
        let mut m = Mitigator::new(grid(), vec![QueueId(0)], true);
        m.exchange(0, Some(bundle(0))).unwrap();
        let o = m.exchange(1, None).unwrap();
        assert!(o.responses.is_none());
        assert!(o.forward.is_some());
        let o = m.exchange(2, None).unwrap();
        assert!(o.forward.is_none());
        m.buffer_response(
            QueueId(0),
            ResponseEntry {
                source: ResponseSource::Inbound(0),
                status: Status::Ok,
                data: DataBuf::zeroed(3),
            },
        )
        .unwrap();
        let o = m.exchange(3, Some(bundle(1))).unwrap();
        let r = o.responses.unwrap();
        assert_eq!(r[0].elapsed_slots, 3);
        assert_eq!(r[0].responses.len(), 1);
        assert_eq!(m.pending(), 0);
        assert_eq!(m.ledger().miss_bits(), &[false, true, true, false]);
        let log = m.boundary_log();
        assert_eq!(log[2].output, None);
        assert_eq!(log[2].time, RealTime::from_millis(2));
    }

    #[test]
    fn foreign_queue_is_rejected() {
        let mut m = Mitigator::new(grid(), vec![QueueId(0)], false);
        let e = ResponseEntry {
            source: ResponseSource::Inbound(0),
            status: Status::Ok,
            data: DataBuf::zeroed(0),
        };
        assert!(m.buffer_response(QueueId(1), e).is_err());
    }
}
