//! The VMM execution loop for one guest.
//!
//! A guest runs in segments of a fixed instruction budget. Each segment ends
//! at a period-end alarm in artificial time; the requests issued during the
//! segment are then sealed into one bundle per queue. Real time is only
//! computed as a cost of the work done and never flows back into the guest.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::guest::cost::{CostModel, CountingKind, CountingMode, OvershootSampler};
use crate::guest::program::{GuestProgram, IoDir};
use crate::guest::vcpu::{Exit, Interrupt, RunState, VcpuState};
use crate::time::{ArtificialTime, RealTime};
use crate::virtio::{IoRequest, QueueId, RequestBundle, ResponseBundle, ResponseSource, Status, VirtioDevice};
use crate::vtimer::{AlarmHandle, DeviceId, VTimer};

const PERIOD_DEVICE: DeviceId = DeviceId(0);
const TIMER_DEVICE: DeviceId = DeviceId(1);

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum AlarmKind {
    PeriodEnd,
    TimerTick,
}

/// Something the guest can see, keyed by its retired-instruction count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Observation {
    Tsc {
        value: u64,
    },
    Response {
        queue: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        user_tag: Option<u32>,
        #[serde(skip_serializing_if = "Option::is_none")]
        inbound: Option<u64>,
        status: Status,
        len: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        payload: Option<String>,
    },
}

#[derive(Clone, Debug)]
pub struct VmmConfig {
    /// Instructions per segment.
    pub budget: u64,
    /// Period of the simulated timer device in instructions, if present.
    pub timer_period: Option<u64>,
    pub counting: CountingMode,
    pub cost: CostModel,
    /// Seeds overshoot draws and execution jitter. Never guest visible.
    pub seed: u64,
    /// Descriptor capacity, one entry per program queue.
    pub queue_capacity: Vec<u32>,
}

/// A request issued during a segment, with its real-time offset from the
/// start of the segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IssuedIo {
    pub request: IoRequest,
    pub offset: RealTime,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SegmentRecord {
    /// Artificial period in which the segment started.
    pub start_period: u64,
    pub speed_ratio: u64,
    pub executed: u64,
    pub real_duration: RealTime,
    pub io_requests: Vec<IssuedIo>,
    /// VM exits from I/O, TSC reads, halts and alarm stops.
    pub exits: u64,
    /// Extra exits from single-stepping in precise mode.
    pub step_exits: u64,
    pub halted_early: bool,
    pub guest_time: RealTime,
    pub vmx_time: RealTime,
    pub counting_time: RealTime,
    pub hypervisor_time: RealTime,
    pub bundles: Vec<RequestBundle>,
}

/// Result of unpacking response bundles at a boundary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Delivery {
    pub elapsed_slots: Option<u64>,
    pub responses: usize,
    /// Hypervisor time spent copying response data into the guest.
    pub copy_time: RealTime,
}

#[derive(Default)]
struct Meter {
    executed: u64,
    exits: u64,
    steps: u64,
    write_bytes: u64,
}

impl Meter {
    fn elapsed(&self, cost: &CostModel, mode: &CountingMode, corunners: u64) -> RealTime {
        cost.exec_time(self.executed, corunners)
            + cost.vm_exit_cost.saturating_mul(self.exits)
            + mode.single_step_cost.saturating_mul(self.steps)
            + cost.copy_cost_per_byte.cost(self.write_bytes)
    }
}

pub struct Vmm {
    program: Arc<GuestProgram>,
    vcpu: VcpuState,
    vtimer: VTimer<AlarmKind>,
    virtio: VirtioDevice,
    config: VmmConfig,
    overshoot: OvershootSampler,
    rng: ChaCha8Rng,
    period_end: u64,
    period_armed: bool,
    timer_next: u64,
    timer_alarm: Option<AlarmHandle>,
    period: u64,
    observations: Vec<(u64, Observation)>,
    segments: u64,
}

impl Vmm {
    pub fn new(program: Arc<GuestProgram>, config: VmmConfig) -> Result<Self> {
        if config.budget == 0 {
            return Err(Error::config("segment budget must be positive"));
        }
        if config.timer_period == Some(0) {
            return Err(Error::config("timer period must be positive"));
        }
        config.counting.validate()?;
        config.cost.validate()?;
        program.check_params()?;
        let names = program.queue_names();
        if config.queue_capacity.len() != names.len() {
            return Err(Error::config(format!(
                "program uses {} queues but {} capacities were given",
                names.len(),
                config.queue_capacity.len()
            )));
        }
        let virtio = VirtioDevice::new(names.iter().cloned().zip(config.queue_capacity.iter().copied()));
        let mut vtimer = VTimer::new();
        let mut timer_next = 0;
        let mut timer_alarm = None;
        if let Some(p) = config.timer_period {
            timer_next = p;
            timer_alarm = Some(vtimer.set_alarm(ArtificialTime(p), TIMER_DEVICE, AlarmKind::TimerTick)?);
        }
        Ok(Vmm {
            overshoot: OvershootSampler::new(&config.counting),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            program,
            vcpu: VcpuState::new(),
            vtimer,
            virtio,
            config,
            period_end: 0,
            period_armed: false,
            timer_next,
            timer_alarm,
            period: 0,
            observations: Vec::new(),
            segments: 0,
        })
    }

    pub fn program(&self) -> &GuestProgram {
        &self.program
    }

    pub fn vcpu(&self) -> &VcpuState {
        &self.vcpu
    }

    pub fn virtio(&self) -> &VirtioDevice {
        &self.virtio
    }

    pub fn budget(&self) -> u64 {
        self.config.budget
    }

    pub fn artificial_now(&self) -> ArtificialTime {
        self.vtimer.now()
    }

    pub fn speed_ratio(&self) -> u64 {
        self.vtimer.speed_ratio().get()
    }

    /// Completed artificial periods.
    pub fn period_index(&self) -> u64 {
        self.period
    }

    pub fn segments(&self) -> u64 {
        self.segments
    }

    /// Every guest-visible observation made so far.
    pub fn observable_trace(&self) -> &[(u64, Observation)] {
        &self.observations
    }

    /// Unpacks response bundles into guest memory. With `apply_piggyback`,
    /// the common elapsed-slot count becomes the speed ratio for the next
    /// segment.
    pub fn deliver_responses(&mut self, bundles: &[ResponseBundle], apply_piggyback: bool) -> Result<Delivery> {
        let (elapsed, delivered) = self.virtio.accept_bundles(bundles)?;
        let mut copied = 0u64;
        let at = self.vcpu.instructions_retired;
        for d in &delivered {
            copied += d.copied;
            let (user_tag, inbound) = match d.source {
                ResponseSource::Completion(_) => (d.user_tag, None),
                ResponseSource::Inbound(n) => (None, Some(n)),
            };
            let payload = match (&d.data.payload, d.dir) {
                (Some(p), None | Some(IoDir::Read)) => Some(hex::encode(p)),
                _ => None,
            };
            let len = if d.dir == Some(IoDir::Write) { 0 } else { d.data.len };
            self.observations.push((
                at,
                Observation::Response {
                    queue: d.queue.0,
                    user_tag,
                    inbound,
                    status: d.status,
                    len,
                    payload,
                },
            ));
        }
        if !delivered.is_empty() {
            self.vcpu.pending_interrupts.push_back(Interrupt::Io);
            if matches!(self.vcpu.state, RunState::Stalled { .. }) {
                self.vcpu.state = RunState::Running;
            }
        }
        if apply_piggyback {
            if let Some(n) = elapsed {
                self.set_speed_ratio(n)?;
            }
        }
        Ok(Delivery {
            elapsed_slots: elapsed,
            responses: delivered.len(),
            copy_time: self.config.cost.copy_cost_per_byte.cost(copied),
        })
    }

    /// Changes the speed ratio. A pending timer tick is rescaled so that it
    /// still comes after the same number of guest instructions.
    fn set_speed_ratio(&mut self, n: u64) -> Result<()> {
        let old = self.vtimer.speed_ratio().get();
        self.vtimer.set_speed_ratio(n)?;
        if n == old {
            return Ok(());
        }
        if let Some(handle) = self.timer_alarm.take() {
            self.vtimer.cancel_alarm(handle);
            let now = self.vtimer.now().0;
            let left = self.timer_next - now;
            self.timer_next = now + (left * n).div_ceil(old);
            self.timer_alarm = Some(self.vtimer.set_alarm(
                ArtificialTime(self.timer_next),
                TIMER_DEVICE,
                AlarmKind::TimerTick,
            )?);
        }
        Ok(())
    }

    /// Runs one segment. `corunners` is the number of busy guests sharing
    /// the host during this segment.
    pub fn run_segment(&mut self, corunners: u64) -> Result<SegmentRecord> {
        let ratio = self.vtimer.speed_ratio().get();
        if !self.period_armed {
            self.period_end += ratio * self.config.budget;
            self.vtimer
                .set_alarm(ArtificialTime(self.period_end), PERIOD_DEVICE, AlarmKind::PeriodEnd)?;
            self.period_armed = true;
        }
        let start_period = self.period;
        let cost = self.config.cost;
        let mode = self.config.counting;
        let precise = mode.mode == CountingKind::Precise;
        let mut meter = Meter::default();
        let mut io_requests = Vec::new();
        let mut halted_early = false;
        let mut since_entry = 0u64;
        let mut done = false;

        while !done {
            self.vcpu.inject_pending();
            let fired = if self.vcpu.is_running() {
                let target = self.vtimer.next_event()?;
                let limit = self.vtimer.instructions_until(target);
                let (n, exit) = self.vcpu.execute(&self.program, limit)?;
                meter.executed += n;
                since_entry += n;
                let mut fired = self.vtimer.advance_instructions(n);
                match exit {
                    Exit::Limit => {
                        meter.exits += 1;
                        if precise {
                            meter.steps += self.overshoot.stepped(since_entry, &mut self.rng);
                        }
                        since_entry = 0;
                    }
                    Exit::Io { queue, dir, size, tag } => {
                        meter.exits += 1;
                        since_entry = 0;
                        let q = QueueId(queue);
                        match self.virtio.submit(q, dir, size, start_period, tag) {
                            Some(request) => {
                                if dir == IoDir::Write {
                                    meter.write_bytes += size;
                                }
                                io_requests.push(IssuedIo {
                                    request,
                                    offset: meter.elapsed(&cost, &mode, corunners),
                                });
                                self.vcpu.retire_io();
                                meter.executed += 1;
                                fired.extend(self.vtimer.advance_instructions(1));
                            }
                            None => {
                                self.vcpu.state = RunState::Stalled { queue };
                            }
                        }
                    }
                    Exit::Tsc { value, .. } => {
                        meter.exits += 1;
                        since_entry = 0;
                        self.observations
                            .push((self.vcpu.instructions_retired, Observation::Tsc { value }));
                    }
                    Exit::Halt => {
                        meter.exits += 1;
                        since_entry = 0;
                    }
                    Exit::Finished => {}
                }
                fired
            } else {
                // Halted, stalled or finished: skip straight to the next alarm.
                halted_early = true;
                since_entry = 0;
                let target = self.vtimer.next_event()?;
                self.vtimer.advance_to(target)?
            };
            for alarm in fired {
                match alarm.payload {
                    AlarmKind::PeriodEnd => done = true,
                    AlarmKind::TimerTick => {
                        self.vcpu.pending_interrupts.push_back(Interrupt::Timer);
                        let p = self.config.timer_period.expect("tick without a timer device");
                        self.timer_next += self.vtimer.speed_ratio().get() * p;
                        self.timer_alarm = Some(self.vtimer.set_alarm(
                            ArtificialTime(self.timer_next),
                            TIMER_DEVICE,
                            AlarmKind::TimerTick,
                        )?);
                    }
                }
            }
        }
        self.period_armed = false;
        self.period += ratio;
        self.segments += 1;
        let bundles = self.virtio.seal_all(start_period);

        let guest_time = cost.exec_time(meter.executed, corunners);
        let vmx_time = cost.vm_exit_cost.saturating_mul(meter.exits);
        let counting_time = mode.single_step_cost.saturating_mul(meter.steps);
        let mut hypervisor_time = cost.copy_cost_per_byte.cost(meter.write_bytes);
        if cost.exec_jitter > RealTime::ZERO {
            hypervisor_time += RealTime::from_nanos(self.rng.random_range(0..=cost.exec_jitter.as_nanos()));
        }
        Ok(SegmentRecord {
            start_period,
            speed_ratio: ratio,
            executed: meter.executed,
            real_duration: guest_time + vmx_time + counting_time + hypervisor_time,
            io_requests,
            exits: meter.exits,
            step_exits: meter.steps,
            halted_early,
            guest_time,
            vmx_time,
            counting_time,
            hypervisor_time,
            bundles,
        })
    }
}
