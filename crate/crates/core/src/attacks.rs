//! Attack harness: an external covert channel that modulates deadline
//! misses, an internal probe that tries to time a co-resident victim, and a
//! deliberately misconfigured multi-queue boundary.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::{DeviceKind, DeviceModel, InboundArrival};
use crate::config::{AttackKind, ScenarioConfig};
use crate::error::{Error, Result};
use crate::guest::cost::{CostModel, CountingMode};
use crate::guest::program::GuestProgram;
use crate::guest::vmm::{Observation, VmmConfig};
use crate::host::{self, GuestResult, GuestSpec, RecordOptions, Scenario};
use crate::mitigator::{LeakLedger, SlotGrid};
use crate::time::{Rate, RealTime};
use crate::virtio::{QueueId, DEFAULT_QUEUE_CAPACITY};

/// Bytes the sender writes to the console every segment.
const SENDER_WRITE: u64 = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CovertCodec {
    pub message: Vec<bool>,
    /// Segment load that meets the deadline.
    pub n_meet: u64,
    /// Segment load that overruns it.
    pub n_miss: u64,
    /// Segments per transmitted bit.
    pub frame: u64,
}

/// Mitigation domain and host the sender runs in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CovertSetup {
    pub interval: RealTime,
    pub budget: u64,
    pub cost: CostModel,
    pub counting: CountingMode,
    pub seed: u64,
}

impl CovertSetup {
    /// Builds a setup from a vCPU speed; the budget must be whole.
    pub fn new(interval: RealTime, vcpu_ips: Rate, cost: CostModel, counting: CountingMode, seed: u64) -> Result<Self> {
        let budget = vcpu_ips.count_in(interval).ok_or_else(|| {
            Error::config(format!(
                "interval {interval} at {vcpu_ips} ips is not a whole number of instructions"
            ))
        })?;
        Ok(CovertSetup {
            interval,
            budget,
            cost,
            counting,
            seed,
        })
    }

    /// Real time of one sender segment carrying `load` instructions,
    /// excluding jitter.
    pub fn segment_cost(&self, load: u64) -> RealTime {
        // The load, the IO op and the HALT; one exit each for IO and HALT.
        self.cost.exec_time(load + 2, 0)
            + self.cost.vm_exit_cost.saturating_mul(2)
            + self.cost.copy_cost_per_byte.cost(SENDER_WRITE)
    }

    /// Load whose segment takes about `slots` intervals.
    pub fn load_for(&self, slots: f64) -> u64 {
        let target = self.interval.as_nanos() as f64 * slots;
        (target * self.cost.host_ips.get() as f64 / 1e9) as u64
    }
}

/// Checks that `n_meet` always meets and `n_miss` always misses.
pub fn check_codec(codec: &CovertCodec, setup: &CovertSetup) -> Result<()> {
    if codec.frame == 0 {
        return Err(Error::config("covert frame must be at least one segment"));
    }
    if codec.message.is_empty() {
        return Err(Error::config("covert message is empty"));
    }
    for (name, load) in [("n_meet", codec.n_meet), ("n_miss", codec.n_miss)] {
        if load + 2 > setup.budget {
            return Err(Error::config(format!(
                "{name} = {load} does not fit a segment budget of {}",
                setup.budget
            )));
        }
    }
    let meet = setup.segment_cost(codec.n_meet);
    let miss = setup.segment_cost(codec.n_miss);
    if meet > setup.interval {
        return Err(Error::config(format!(
            "infeasible codec: the meeting load takes {meet}, longer than the {} interval",
            setup.interval
        )));
    }
    if miss <= setup.interval {
        return Err(Error::config(format!(
            "infeasible codec: the missing load takes {miss}, which still meets the {} interval",
            setup.interval
        )));
    }
    Ok(())
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

/// Sender program: per message bit, `frame` segments of
/// `COMPUTE_IF_BIT; IO console write; HALT`. A timer tick at every period
/// end wakes it for the next segment.
pub fn build_sender(codec: &CovertCodec, setup: &CovertSetup) -> Result<GuestProgram> {
    check_codec(codec, setup)?;
    let mut src = String::from("# covert sender\n");
    for i in 0..codec.message.len() {
        for _ in 0..codec.frame {
            src.push_str(&format!(
                "COMPUTE_IF_BIT msg {i} {} {}\nIO console write {SENDER_WRITE}\nHALT\n",
                codec.n_miss, codec.n_meet
            ));
        }
    }
    let mut p = GuestProgram::parse_named(&src, "covert-sender")?;
    p.set_param("msg", pack_bits(&codec.message));
    Ok(p)
}

fn single_guest(
    name: &str,
    program: GuestProgram,
    setup: &CovertSetup,
    timer_period: Option<u64>,
    devices: Vec<DeviceModel>,
) -> GuestSpec {
    let queues = program.queue_names().len();
    GuestSpec {
        name: name.into(),
        program: Arc::new(program),
        vmm: VmmConfig {
            budget: setup.budget,
            timer_period,
            counting: setup.counting,
            cost: setup.cost,
            seed: setup.seed,
            queue_capacity: vec![DEFAULT_QUEUE_CAPACITY; queues],
        },
        devices,
        inbound: Vec::new(),
        backend_seed: setup.seed ^ 0x5eed,
        grid: SlotGrid {
            interval: setup.interval,
            phase: RealTime::ZERO,
        },
        queue_phases: None,
    }
}

/// Scenario long enough for the whole message to be observed.
pub fn covert_scenario(codec: &CovertCodec, setup: &CovertSetup) -> Result<Scenario> {
    let program = build_sender(codec, setup)?;
    let per_slow = setup.segment_cost(codec.n_miss).as_nanos().div_ceil(setup.interval.as_nanos());
    let jitter_slack = setup.cost.exec_jitter.as_nanos().div_ceil(setup.interval.as_nanos()) + 1;
    let segments = codec.message.len() as u64 * codec.frame;
    let slots = segments * (per_slow + jitter_slack) + 4;
    Ok(Scenario {
        guests: vec![single_guest(
            "sender",
            program,
            setup,
            Some(setup.budget),
            vec![DeviceModel::new(DeviceKind::Console)],
        )],
        horizon: setup.interval.saturating_mul(slots),
        record: RecordOptions {
            boundary_log: true,
            ..RecordOptions::default()
        },
    })
}

/// What an outside observer records at each boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ObserverEntry {
    pub slot: u64,
    pub output_present: bool,
    pub bundle_bytes: u64,
}

pub fn observer_log(guest: &GuestResult) -> Vec<ObserverEntry> {
    guest.boundary_logs[0]
        .iter()
        .map(|r| ObserverEntry {
            slot: r.slot,
            output_present: r.output.is_some(),
            bundle_bytes: r.output.iter().flatten().map(|q| q.bytes).sum(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Decoded {
    pub bits: Vec<bool>,
    /// Observer slot at which the last decoded segment's output appeared.
    pub end_slot: u64,
    pub elapsed: RealTime,
    pub rate_bps: f64,
}

/// Recovers bits from output absences. Every present output is one sender
/// segment; absences right before it mean that segment overran. The first
/// present output carries no segment. Each bit is a majority vote over its
/// frame; at most `max_bits` bits are returned.
pub fn decode(log: &[ObserverEntry], frame: u64, interval: RealTime, max_bits: usize) -> Decoded {
    let frame = frame.max(1) as usize;
    let mut slow = Vec::new();
    let mut slots = Vec::new();
    let mut absent = 0u64;
    let mut seen_first = false;
    for e in log {
        if !e.output_present {
            absent += 1;
            continue;
        }
        if seen_first {
            slow.push(absent > 0);
            slots.push(e.slot);
        }
        seen_first = true;
        absent = 0;
    }
    let n = (slow.len() / frame).min(max_bits);
    let bits: Vec<bool> = (0..n)
        .map(|i| {
            let ones = slow[i * frame..(i + 1) * frame].iter().filter(|&&b| b).count();
            2 * ones > frame
        })
        .collect();
    let last_slot = if n == 0 { 0 } else { slots[n * frame - 1] };
    let elapsed = interval.saturating_mul(last_slot);
    let secs = elapsed.as_secs_f64();
    Decoded {
        rate_bps: if secs > 0.0 { n as f64 / secs } else { 0.0 },
        bits,
        end_slot: last_slot,
        elapsed,
    }
}

fn bit_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovertReport {
    pub sent: String,
    pub decoded: String,
    pub bit_errors: u64,
    pub ber: f64,
    pub rate_bps: f64,
    pub ceiling_bps: f64,
    pub slots: u64,
    pub leaked_bits: u64,
    /// Miss trace of the transmission itself, up to the last decoded bit.
    pub transmission_slots: u64,
    pub transmission_misses: u64,
    pub entropy: f64,
}

pub fn run_covert(codec: &CovertCodec, setup: &CovertSetup) -> Result<(CovertReport, host::SimResult)> {
    let scenario = covert_scenario(codec, setup)?;
    let result = host::run(&scenario)?;
    let g = &result.guests[0];
    let decoded = decode(&observer_log(g), codec.frame, setup.interval, codec.message.len());
    let mut errors = codec.message.len().abs_diff(decoded.bits.len()) as u64;
    errors += codec
        .message
        .iter()
        .zip(&decoded.bits)
        .filter(|(a, b)| a != b)
        .count() as u64;
    let bits = g.ledger.miss_bits();
    let window = &bits[..(decoded.end_slot as usize).min(bits.len())];
    let report = CovertReport {
        sent: bit_string(&codec.message),
        decoded: bit_string(&decoded.bits),
        bit_errors: errors,
        ber: errors as f64 / codec.message.len() as f64,
        rate_bps: decoded.rate_bps,
        ceiling_bps: 1e9 / setup.interval.as_nanos() as f64,
        slots: g.ledger.slots_elapsed(),
        leaked_bits: g.ledger.leaked_bits(),
        transmission_slots: window.len() as u64,
        transmission_misses: window.iter().filter(|&&b| b).count() as u64,
        entropy: crate::analysis::entropy_rate(window),
    };
    Ok((report, result))
}

pub fn random_message(bits: usize, p_one: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..bits).map(|_| rng.random_bool(p_one.clamp(0.0, 1.0))).collect()
}

/// Codec whose miss trace has miss frequency close to `p`.
///
/// A slow segment overruns by `m` slots and is followed by one on-time
/// exchange, so with a fraction `q` of slow segments the miss frequency is
/// `q·m / (q·m + 1)`. Up to one half, `m = 1`; above, `m` grows so that `q`
/// stays at most 1.
pub fn miss_probability_codec(p: f64, bits: usize, setup: &CovertSetup, seed: u64) -> Result<CovertCodec> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("miss probability {p} outside [0, 1)")));
    }
    let odds = p / (1.0 - p);
    let m = odds.ceil().max(1.0);
    let q = (odds / m).min(1.0);
    let codec = CovertCodec {
        message: random_message(bits, q, seed),
        n_meet: setup.load_for(0.2),
        n_miss: setup.load_for(m + 0.5),
        frame: 1,
    };
    check_codec(&codec, setup)?;
    Ok(codec)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProbeRun {
    pub host_ips: Rate,
    pub victim: String,
    pub mode: String,
    pub observations: usize,
    pub probe_misses: u64,
    pub trace_digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProbeReport {
    pub runs: Vec<ProbeRun>,
    pub traces_identical: bool,
    pub negative_control_differs: bool,
    pub verdict: String,
}

const PROBE_SRC: &str = "\
# internal timing probe
loop:
  READ_TSC r0
  COMPUTE 20k
  READ_TSC r1
  IO net read 64 1
  HALT
  JUMP loop
";

fn digest(trace: &[(u64, Observation)]) -> String {
    let mut h = DefaultHasher::new();
    for (at, o) in trace {
        at.hash(&mut h);
        serde_json::to_string(o).unwrap_or_default().hash(&mut h);
    }
    format!("{:016x}", h.finish())
}

fn probe_inbound(seed: u64, horizon: RealTime) -> Vec<(QueueId, InboundArrival)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = 0u64;
    loop {
        t += rng.random_range(500_000..3_000_000);
        if t >= horizon.as_nanos() {
            break;
        }
        let payload: Vec<u8> = (0..8).map(|_| rng.random()).collect();
        out.push((
            QueueId(0),
            InboundArrival {
                time: RealTime::from_nanos(t),
                size: 8,
                queue: "net".into(),
                payload: Some(Arc::from(payload)),
            },
        ));
    }
    out
}

fn probe_scenario(
    host_ips: Rate,
    victim_busy: bool,
    counting: CountingMode,
    inbound: &[(QueueId, InboundArrival)],
    seed: u64,
) -> Result<Scenario> {
    let interval = RealTime::from_millis(1);
    let cost = CostModel {
        host_ips,
        contention_permille: 500,
        ..CostModel::default()
    };
    let setup = CovertSetup::new(interval, Rate::per_sec(100_000_000), cost, counting, seed)?;
    let mut probe = single_guest(
        "probe",
        GuestProgram::parse_named(PROBE_SRC, "probe")?,
        &setup,
        Some(setup.budget / 2),
        vec![DeviceModel::new(DeviceKind::Network)],
    );
    probe.inbound = inbound.to_vec();
    let victim_src = if victim_busy { "l: COMPUTE 1M\nJUMP l\n" } else { "HALT\n" };
    let victim = single_guest(
        "victim",
        GuestProgram::parse_named(victim_src, "victim")?,
        &setup,
        None,
        vec![],
    );
    Ok(Scenario {
        guests: vec![probe, victim],
        horizon: RealTime::from_millis(60),
        record: RecordOptions::default(),
    })
}

/// Runs the probe against idle and busy victims, on slow and fast hosts,
/// in both counting modes, and compares what the probe could observe.
pub fn internal_probe_scenario(seed: u64) -> Result<ProbeReport> {
    let inbound = probe_inbound(seed, RealTime::from_millis(60));
    let mut runs = Vec::new();
    let mut traces = Vec::new();
    for host_ips in [Rate::per_sec(800_000_000), Rate::per_sec(3_200_000_000)] {
        for busy in [false, true] {
            for counting in [CountingMode::coarse(), CountingMode::precise()] {
                let result = host::run(&probe_scenario(host_ips, busy, counting, &inbound, seed)?)?;
                let g = &result.guests[0];
                runs.push(ProbeRun {
                    host_ips,
                    victim: if busy { "busy" } else { "idle" }.into(),
                    mode: format!("{:?}", counting.mode).to_lowercase(),
                    observations: g.trace.len(),
                    probe_misses: g.ledger.leaked_bits(),
                    trace_digest: digest(&g.trace),
                });
                traces.push(g.trace.clone());
            }
        }
    }
    let identical = traces.windows(2).all(|w| w[0] == w[1]);

    let mut flipped = inbound.clone();
    if let Some((_, a)) = flipped.first_mut() {
        let mut bytes = a.payload.as_deref().unwrap_or_default().to_vec();
        bytes[0] ^= 0x01;
        a.payload = Some(Arc::from(bytes));
    }
    let control = host::run(&probe_scenario(
        Rate::per_sec(3_200_000_000),
        false,
        CountingMode::coarse(),
        &flipped,
        seed,
    )?)?;
    let differs = control.guests[0].trace != traces[0];
    let verdict = if identical { "traces identical" } else { "traces differ" };
    Ok(ProbeReport {
        runs,
        traces_identical: identical,
        negative_control_differs: differs,
        verdict: verdict.into(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PhaseReport {
    pub lanes: usize,
    pub slots: u64,
    /// Most distinct boundary instants the observer sees within one slot.
    pub max_events_per_slot: usize,
    /// Slots whose lanes disagree on whether the guest was on time.
    pub divergent_slots: u64,
    pub lane_misses: Vec<u64>,
    pub more_than_one_bit_per_slot: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MisconfigReport {
    pub synchronized: PhaseReport,
    pub desynchronized: PhaseReport,
}

/// Per reference slot, counts the boundary instants and outcomes an observer
/// of all queues sees.
pub fn phase_report(guest: &GuestResult, phases: &[RealTime]) -> PhaseReport {
    let mut ledgers: Vec<&LeakLedger> = vec![&guest.ledger];
    ledgers.extend(guest.lane_ledgers.iter());
    let slots = ledgers.iter().map(|l| l.slots_elapsed()).min().unwrap_or(0);
    let mut distinct = phases.to_vec();
    distinct.sort();
    distinct.dedup();
    let events = distinct.len().max(1);
    let mut divergent = 0;
    for k in 0..slots as usize {
        let first = ledgers[0].miss_bits()[k];
        if ledgers.iter().any(|l| l.miss_bits()[k] != first) {
            divergent += 1;
        }
    }
    PhaseReport {
        lanes: ledgers.len(),
        slots,
        max_events_per_slot: if slots == 0 { 0 } else { events },
        divergent_slots: divergent,
        lane_misses: ledgers.iter().map(|l| l.leaked_bits()).collect(),
        more_than_one_bit_per_slot: divergent > 0,
    }
}

/// Two queues of one guest, either sharing a phase or half an interval
/// apart. Medium segments overrun the first queue's boundary but not the
/// second's.
pub fn misconfig_demo(seed: u64) -> Result<MisconfigReport> {
    let interval = RealTime::from_millis(1);
    let setup = CovertSetup::new(
        interval,
        Rate::per_sec(6_400_000_000),
        CostModel::default(),
        CountingMode::coarse(),
        seed,
    )?;
    let bits = random_message(64, 0.5, seed);
    let mut src = String::from("# two-queue sender\n");
    for i in 0..bits.len() {
        src.push_str(&format!(
            "COMPUTE_IF_BIT msg {i} {} {}\nIO q0 write 16\nIO q1 write 16\nHALT\n",
            setup.load_for(1.25),
            setup.load_for(0.3)
        ));
    }
    let run = |phases: Option<Vec<RealTime>>| -> Result<PhaseReport> {
        let mut program = GuestProgram::parse_named(&src, "misconfig")?;
        program.set_param("msg", pack_bits(&bits));
        let console = DeviceModel::new(DeviceKind::Console);
        let mut g = single_guest("sender", program, &setup, Some(setup.budget), vec![console.clone(), console]);
        g.queue_phases = phases.clone();
        let scenario = Scenario {
            guests: vec![g],
            horizon: interval.saturating_mul(3 * bits.len() as u64 + 4),
            record: RecordOptions::default(),
        };
        let result = host::run(&scenario)?;
        let phases = phases.unwrap_or_else(|| vec![RealTime::ZERO]);
        Ok(phase_report(&result.guests[0], &phases))
    };
    Ok(MisconfigReport {
        synchronized: run(None)?,
        desynchronized: run(Some(vec![RealTime::ZERO, RealTime::from_micros(500)]))?,
    })
}


/// Result of the attack selected by a configuration's `[attack]` table.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackOutcome {
    Covert {
        report: CovertReport,
        #[serde(skip)]
        run: Box<crate::analysis::RunReport>,
    },
    Probe(ProbeReport),
    Misconfig(MisconfigReport),
}

impl AttackOutcome {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

/// Runs the configured attack. The covert sender uses the configuration's
/// domain, cost model and counting mode; the probe and misconfiguration
/// scenarios are fixed and take only the seed.
pub fn run_attack(cfg: &ScenarioConfig) -> Result<AttackOutcome> {
    let attack = cfg
        .attack
        .as_ref()
        .ok_or_else(|| Error::config("configuration has no [attack] table"))?;
    match attack.kind {
        AttackKind::Probe => Ok(AttackOutcome::Probe(internal_probe_scenario(cfg.seed())?)),
        AttackKind::Misconfig => Ok(AttackOutcome::Misconfig(misconfig_demo(cfg.seed())?)),
        AttackKind::Covert => {
            let setup = CovertSetup::new(cfg.domain.interval, cfg.domain.vcpu_speed, cfg.cost, cfg.counting, cfg.seed())?;
            let message = match (&attack.message, attack.random_bits) {
                (Some(m), _) => m.chars().map(|c| c == '1').collect(),
                (None, Some(n)) => random_message(n, 0.5, cfg.seed()),
                (None, None) => {
                    return Err(Error::config("covert attack needs `message` or `random_bits`"));
                }
            };
            let codec = CovertCodec {
                message,
                n_meet: attack.n_meet.unwrap_or_else(|| setup.load_for(0.3)),
                n_miss: attack.n_miss.unwrap_or_else(|| setup.load_for(1.5)),
                frame: attack.frame,
            };
            check_codec(&codec, &setup)?;
            let (report, result) = run_covert(&codec, &setup)?;
            let opts = crate::analysis::ReportOptions {
                block_entropy: cfg.report.block_entropy,
            };
            let label = if cfg.name.is_empty() { "covert" } else { cfg.name.as_str() };
            let mut run = crate::analysis::RunReport::new(label, cfg.to_json(), &result, &opts);
            run.attack = serde_json::to_value(&report).ok();
            Ok(AttackOutcome::Covert {
                report,
                run: Box::new(run),
            })
        }
    }
}
