//! Runs complete scenarios: guests, their mitigators and backends on one
//! real-time event queue.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use crate::analysis::TimeBreakdown;
use crate::backend::{Backend, DeviceModel, InboundArrival};
use crate::engine::{ComponentId, SimClock};
use crate::error::{Error, Result};
use crate::guest::program::{GuestProgram, IoDir};
use crate::guest::vmm::{Observation, Vmm, VmmConfig};
use crate::mitigator::{BoundaryRecord, LeakLedger, Mitigator, SlotGrid};
use crate::time::RealTime;
use crate::virtio::{QueueId, RequestBundle, ResponseBundle, ResponseEntry, ResponseSource, Tag};

#[derive(Clone, Debug)]
pub struct GuestSpec {
    pub name: String,
    pub program: Arc<GuestProgram>,
    pub vmm: VmmConfig,
    /// One device per program queue.
    pub devices: Vec<DeviceModel>,
    pub inbound: Vec<(QueueId, InboundArrival)>,
    pub backend_seed: u64,
    pub grid: SlotGrid,
    /// Gives every queue its own slot phase. Only for demonstrating what a
    /// wrongly configured boundary leaks; `None` keeps queues synchronized.
    pub queue_phases: Option<Vec<RealTime>>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecordOptions {
    pub event_log: bool,
    pub boundary_log: bool,
    pub segments: bool,
    pub latencies: bool,
}

impl RecordOptions {
    pub fn all() -> Self {
        RecordOptions {
            event_log: true,
            boundary_log: true,
            segments: true,
            latencies: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub guests: Vec<GuestSpec>,
    /// Boundaries strictly before this time are processed.
    pub horizon: RealTime,
    pub record: RecordOptions,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum EventKind {
    Boundary {
        lane: usize,
        slot: u64,
        on_time: bool,
        forwarded: usize,
        delivered: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        elapsed_slots: Option<u64>,
    },
    Segment {
        slot: u64,
        executed: u64,
        duration_ns: u64,
        speed_ratio: u64,
    },
    Completion {
        queue: usize,
        tag: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EventRecord {
    pub t: u64,
    pub seq: u64,
    pub guest: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SegmentSummary {
    /// Slot at whose exchange the segment started.
    pub slot: u64,
    pub start: RealTime,
    pub duration: RealTime,
    pub start_period: u64,
    pub end_period: u64,
    pub speed_ratio: u64,
    pub executed: u64,
    pub exits: u64,
    pub step_exits: u64,
    pub halted_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyRecord {
    pub queue: usize,
    pub user_tag: u32,
    pub issued_at: RealTime,
    /// Boundary at which the response was handed to the guest.
    pub visible_at: RealTime,
    pub intervals: f64,
    /// No slot between issue and delivery was missed.
    pub on_time: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub name: String,
    pub issued: u64,
    pub completed: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub inbound: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GuestResult {
    pub name: String,
    pub interval: RealTime,
    pub budget: u64,
    pub ledger: LeakLedger,
    /// One log per lane; a single lane when queues are synchronized.
    pub boundary_logs: Vec<Vec<BoundaryRecord>>,
    /// Ledgers of the extra lanes in per-queue phase mode.
    pub lane_ledgers: Vec<LeakLedger>,
    pub breakdown: TimeBreakdown,
    pub queues: Vec<QueueStats>,
    pub latencies: Vec<LatencyRecord>,
    pub segments: Vec<SegmentSummary>,
    pub segment_count: u64,
    pub instructions: u64,
    pub trace: Vec<(u64, Observation)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimResult {
    pub horizon: RealTime,
    /// Real time covered, including segments that ran past the horizon.
    pub elapsed: RealTime,
    pub guests: Vec<GuestResult>,
    pub events: Vec<EventRecord>,
}

#[derive(Clone, Debug)]
enum Payload {
    Boundary { lane: usize, slot: u64 },
    Completion { queue: QueueId, tag: Tag, entry: ResponseEntry },
}

struct Issue {
    queue: usize,
    user_tag: u32,
    dir: IoDir,
    size: u64,
    at: RealTime,
    slot: u64,
}

#[derive(Default)]
struct Busy {
    guest: u64,
    hypervisor: u64,
    vmx: u64,
    counting: u64,
}

struct GuestRun {
    vmm: Vmm,
    backend: Backend,
    lanes: Vec<Mitigator>,
    lane_of_queue: Vec<usize>,
    /// Sealed bundles per lane, with the time they became ready.
    ready: Vec<VecDeque<(RealTime, Vec<RequestBundle>)>>,
    deferred: Vec<ResponseBundle>,
    busy_until: RealTime,
    last_poll: RealTime,
    issues: BTreeMap<Tag, Issue>,
    busy: Busy,
    queues: Vec<QueueStats>,
    latencies: Vec<LatencyRecord>,
    segments: Vec<SegmentSummary>,
}

impl GuestRun {
    fn new(spec: &GuestSpec, record: &RecordOptions) -> Result<Self> {
        let nq = spec.program.queue_names().len();
        if spec.devices.len() != nq {
            return Err(Error::config(format!(
                "guest {:?}: {} queues need {} device models, got {}",
                spec.name,
                nq,
                nq,
                spec.devices.len()
            )));
        }
        let vmm = Vmm::new(spec.program.clone(), spec.vmm.clone())?;
        let backend = Backend::new(spec.devices.clone(), spec.inbound.clone(), spec.backend_seed)?;
        let (lanes, lane_of_queue) = match &spec.queue_phases {
            None => {
                let all = (0..nq).map(QueueId).collect();
                (vec![Mitigator::new(spec.grid, all, record.boundary_log)], vec![0; nq])
            }
            Some(phases) => {
                if phases.len() != nq || nq == 0 {
                    return Err(Error::config(format!(
                        "guest {:?}: per-queue phases need one phase per queue",
                        spec.name
                    )));
                }
                let lanes = phases
                    .iter()
                    .enumerate()
                    .map(|(q, &phase)| {
                        let grid = SlotGrid::new(spec.grid.interval, phase)?;
                        Ok(Mitigator::new(grid, vec![QueueId(q)], record.boundary_log))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (lanes, (0..nq).collect())
            }
        };
        let ready = lanes
            .iter()
            .map(|_| VecDeque::from([(RealTime::ZERO, Vec::new())]))
            .collect();
        let queues = spec
            .program
            .queue_names()
            .iter()
            .map(|n| QueueStats {
                name: n.clone(),
                ..QueueStats::default()
            })
            .collect();
        Ok(GuestRun {
            vmm,
            backend,
            lanes,
            lane_of_queue,
            ready,
            deferred: Vec::new(),
            busy_until: RealTime::ZERO,
            last_poll: RealTime::ZERO,
            issues: BTreeMap::new(),
            busy: Busy::default(),
            queues,
            latencies: Vec::new(),
            segments: Vec::new(),
        })
    }
}

/// Runs `scenario` to its horizon.
pub fn run(scenario: &Scenario) -> Result<SimResult> {
    if scenario.guests.is_empty() {
        return Err(Error::config("scenario has no guests"));
    }
    let record = scenario.record;
    let mut runs = scenario
        .guests
        .iter()
        .map(|g| GuestRun::new(g, &record))
        .collect::<Result<Vec<_>>>()?;
    let mut clock: SimClock<Payload> = SimClock::new();
    for (g, run) in runs.iter().enumerate() {
        for (lane, m) in run.lanes.iter().enumerate() {
            let t = m.grid().boundary(0);
            if t < scenario.horizon {
                clock.schedule(t, ComponentId(g as u32), Payload::Boundary { lane, slot: 0 })?;
            }
        }
    }
    let mut events = Vec::new();
    let last = match scenario.horizon.checked_sub(RealTime::from_nanos(1)) {
        Some(t) => t,
        None => RealTime::ZERO,
    };
    while let Some(ev) = clock.pop_due(last) {
        let g = ev.target.0 as usize;
        let now = ev.fire_at;
        match ev.payload {
            Payload::Completion { queue, tag, entry } => {
                let run = &mut runs[g];
                let lane = run.lane_of_queue[queue.0];
                run.lanes[lane].buffer_response(queue, entry)?;
                if record.event_log {
                    events.push(EventRecord {
                        t: now.as_nanos(),
                        seq: ev.seq,
                        guest: g,
                        kind: EventKind::Completion { queue: queue.0, tag: tag.0 },
                    });
                }
            }
            Payload::Boundary { lane, slot } => {
                let corunners = runs
                    .iter()
                    .enumerate()
                    .filter(|(i, r)| *i != g && r.vmm.vcpu().is_running())
                    .count() as u64;
                let spec = &scenario.guests[g];
                let mut log = |kind| {
                    if record.event_log {
                        events.push(EventRecord {
                            t: now.as_nanos(),
                            seq: ev.seq,
                            guest: g,
                            kind,
                        });
                    }
                };
                boundary(&mut runs[g], spec, &record, &mut clock, g, lane, slot, now, corunners, &mut log)?;
                let next = runs[g].lanes[lane].grid().boundary(slot + 1);
                if next < scenario.horizon {
                    clock.schedule(next, ev.target, Payload::Boundary { lane, slot: slot + 1 })?;
                }
            }
        }
    }
    let elapsed = runs
        .iter()
        .map(|r| r.busy_until)
        .max()
        .unwrap_or(RealTime::ZERO)
        .max(scenario.horizon);
    let guests = runs
        .into_iter()
        .zip(&scenario.guests)
        .map(|(run, spec)| finish(run, spec, elapsed))
        .collect();
    Ok(SimResult {
        horizon: scenario.horizon,
        elapsed,
        guests,
        events,
    })
}

#[allow(clippy::too_many_arguments)]
fn boundary(
    run: &mut GuestRun,
    spec: &GuestSpec,
    record: &RecordOptions,
    clock: &mut SimClock<Payload>,
    g: usize,
    lane: usize,
    slot: u64,
    now: RealTime,
    corunners: u64,
    log: &mut impl FnMut(EventKind),
) -> Result<()> {
    if lane == 0 {
        for (queue, entry) in run.backend.inbound_poll(run.last_poll, now) {
            let stats = &mut run.queues[queue.0];
            stats.inbound += 1;
            let owner = run.lane_of_queue[queue.0];
            run.lanes[owner].buffer_response(queue, entry)?;
        }
        run.last_poll = now;
    }
    let ready = match run.ready[lane].front() {
        Some((at, _)) if *at <= now && (lane != 0 || run.busy_until <= now) => {
            run.ready[lane].pop_front().map(|(_, b)| b)
        }
        _ => None,
    };
    let outcome = run.lanes[lane].exchange(slot, ready)?;
    let mut forwarded = 0;
    if let Some(bundles) = &outcome.forward {
        for bundle in bundles {
            forwarded += bundle.requests.len();
            for resp in run.backend.submit(bundle, now) {
                clock.schedule(
                    resp.completed_at,
                    ComponentId(g as u32),
                    Payload::Completion {
                        queue: resp.queue,
                        tag: resp.tag,
                        entry: resp.entry(),
                    },
                )?;
            }
        }
    }
    let Some(responses) = outcome.responses else {
        log(EventKind::Boundary {
            lane,
            slot,
            on_time: false,
            forwarded,
            delivered: 0,
            elapsed_slots: None,
        });
        return Ok(());
    };
    let elapsed_slots = responses.first().map(|b| b.elapsed_slots);
    let delivered: usize = responses.iter().map(|b| b.responses.len()).sum();
    log(EventKind::Boundary {
        lane,
        slot,
        on_time: true,
        forwarded,
        delivered,
        elapsed_slots,
    });
    if lane != 0 {
        run.deferred.extend(responses);
        return Ok(());
    }

    let deferred = std::mem::take(&mut run.deferred);
    for b in responses.iter().chain(&deferred) {
        note_delivery(run, record, b, now, spec.grid.interval, slot);
    }
    let mut copy = run.vmm.deliver_responses(&responses, true)?.copy_time;
    for b in &deferred {
        copy += run.vmm.deliver_responses(std::slice::from_ref(b), false)?.copy_time;
    }
    let start = now + copy;
    let seg = run.vmm.run_segment(corunners)?;
    let end = start + seg.real_duration;
    run.busy_until = end;
    run.busy.guest += seg.guest_time.as_nanos();
    run.busy.vmx += seg.vmx_time.as_nanos();
    run.busy.counting += seg.counting_time.as_nanos();
    run.busy.hypervisor += (seg.hypervisor_time + copy).as_nanos();
    for io in &seg.io_requests {
        let q = io.request.queue.0;
        run.queues[q].issued += 1;
        run.issues.insert(
            io.request.tag,
            Issue {
                queue: q,
                user_tag: io.request.user_tag,
                dir: io.request.dir,
                size: io.request.size,
                at: start + io.offset,
                slot,
            },
        );
    }
    if record.segments {
        run.segments.push(SegmentSummary {
            slot,
            start,
            duration: seg.real_duration,
            start_period: seg.start_period,
            end_period: run.vmm.period_index(),
            speed_ratio: seg.speed_ratio,
            executed: seg.executed,
            exits: seg.exits,
            step_exits: seg.step_exits,
            halted_early: seg.halted_early,
        });
    }
    log(EventKind::Segment {
        slot,
        executed: seg.executed,
        duration_ns: seg.real_duration.as_nanos(),
        speed_ratio: seg.speed_ratio,
    });
    let mut per_lane: Vec<Vec<RequestBundle>> = vec![Vec::new(); run.lanes.len()];
    for b in seg.bundles {
        per_lane[run.lane_of_queue[b.queue.0]].push(b);
    }
    for (l, bundles) in per_lane.into_iter().enumerate() {
        run.ready[l].push_back((end, bundles));
    }
    Ok(())
}

fn note_delivery(
    run: &mut GuestRun,
    record: &RecordOptions,
    bundle: &ResponseBundle,
    now: RealTime,
    interval: RealTime,
    slot: u64,
) {
    for entry in &bundle.responses {
        let ResponseSource::Completion(tag) = entry.source else {
            continue;
        };
        let Some(issue) = run.issues.remove(&tag) else {
            continue;
        };
        let stats = &mut run.queues[issue.queue];
        stats.completed += 1;
        match issue.dir {
            IoDir::Read => stats.bytes_read += issue.size,
            IoDir::Write => stats.bytes_written += issue.size,
        }
        if record.latencies {
            let misses = run.lanes[0].ledger().miss_bits();
            let window = misses.get((issue.slot + 1) as usize..=slot as usize);
            let on_time = window.is_some_and(|w| !w.iter().any(|&m| m));
            let latency = now.saturating_sub(issue.at);
            run.latencies.push(LatencyRecord {
                queue: issue.queue,
                user_tag: issue.user_tag,
                issued_at: issue.at,
                visible_at: now,
                intervals: latency.as_nanos() as f64 / interval.as_nanos() as f64,
                on_time,
            });
        }
    }
}

fn finish(run: GuestRun, spec: &GuestSpec, elapsed: RealTime) -> GuestResult {
    let busy = &run.busy;
    let busy_total = busy.guest + busy.hypervisor + busy.vmx + busy.counting;
    let breakdown = TimeBreakdown {
        guest: busy.guest,
        hypervisor: busy.hypervisor,
        vmx: busy.vmx,
        counting: busy.counting,
        mitigation_idle: elapsed.as_nanos().saturating_sub(busy_total),
    };
    let mut lanes = run.lanes.into_iter();
    let primary = lanes.next().expect("at least one lane");
    let mut boundary_logs = vec![primary.boundary_log().to_vec()];
    let mut lane_ledgers = Vec::new();
    for m in lanes {
        boundary_logs.push(m.boundary_log().to_vec());
        lane_ledgers.push(m.ledger().clone());
    }
    GuestResult {
        name: spec.name.clone(),
        interval: spec.grid.interval,
        budget: spec.vmm.budget,
        ledger: primary.ledger().clone(),
        boundary_logs,
        lane_ledgers,
        breakdown,
        queues: run.queues,
        latencies: run.latencies,
        segments: run.segments,
        segment_count: run.vmm.segments(),
        instructions: run.vmm.vcpu().instructions_retired,
        trace: run.vmm.observable_trace().to_vec(),
    }
}
