//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mitigation_sim::analysis::{jsonl, prefix_bound_holds, to_json, LatencySummary, TimeBreakdown};
use mitigation_sim::attacks::{
    internal_probe_scenario, miss_probability_codec, misconfig_demo, random_message, run_attack, run_covert,
    CovertCodec, CovertSetup,
};
use mitigation_sim::config::ScenarioConfig;
use mitigation_sim::guest::{CostModel, CountingMode};
use mitigation_sim::host::{self, SimResult};
use mitigation_sim::sweep::{par_map, run_config};
use mitigation_sim::{Rate, RealTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

type Check<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> (ScenarioConfig, PathBuf) {
    let loaded = ScenarioConfig::load(&scenarios_dir().join(name), &[]).expect(name);
    (loaded.config, loaded.base_dir)
}

/// Minimal single-guest configuration with an inline program.
fn inline(interval: &str, vcpu: &str, horizon: &str, source: &str, extra: &str) -> ScenarioConfig {
    let text = format!(
        "horizon = \"{horizon}\"\n\n[domain]\ninterval = \"{interval}\"\nvcpu_speed = \"{vcpu}\"\n\n{extra}\n\n\
         [[guests]]\nname = \"g\"\nsource = \"\"\"\n{source}\n\"\"\"\n"
    );
    ScenarioConfig::parse(&text, "inline").expect("inline config")
}

fn run(cfg: &ScenarioConfig) -> SimResult {
    host::run(&cfg.build(Path::new(".")).expect("build")).expect("run")
}

fn determinism() -> Outcome {
    let mut slowest = Duration::ZERO;
    let mut checked = Vec::new();
    for name in ["sync_io.toml", "echo.toml", "bitbang.toml", "cpu_sweep.toml"] {
        let (mut cfg, base) = load(name);
        cfg.sweep = None;
        cfg.record.event_log = true;
        cfg.record.segments = true;
        let once = || {
            let t = Instant::now();
            let (report, result) = run_config(&cfg, &base).expect(name);
            let bytes = to_json(&report).unwrap() + &jsonl(&result.events).unwrap();
            (bytes, t.elapsed())
        };
        let (a, ta) = once();
        let (b, tb) = once();
        slowest = slowest.max(ta).max(tb);
        if a != b {
            return outcome(false, format!("{name}: reports or event logs differ between runs"));
        }
        checked.push(name);
    }
    for name in ["covert.toml", "probe.toml", "misconfig.toml"] {
        let (cfg, _) = load(name);
        let t = Instant::now();
        let a = run_attack(&cfg).unwrap().to_json().to_string();
        let b = run_attack(&cfg).unwrap().to_json().to_string();
        slowest = slowest.max(t.elapsed() / 2);
        if a != b {
            return outcome(false, format!("{name}: attack reports differ between runs"));
        }
        checked.push(name);
    }
    outcome(
        slowest < Duration::from_secs(60),
        format!("{} scenarios byte-identical across two runs, slowest run {:.2?}", checked.len(), slowest),
    )
}

fn internal_channel() -> Outcome {
    let report = internal_probe_scenario(7).expect("probe");
    outcome(
        report.traces_identical && report.negative_control_differs,
        format!(
            "{} runs (host 0.8G/3.2G x victim x mode): identical traces {}, negative control differs {}",
            report.runs.len(),
            report.traces_identical,
            report.negative_control_differs
        ),
    )
}

/// Random looping program mixing computation, I/O and halts.
fn random_workload(seed: u64, budget: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = vec!["top:".to_string()];
    for _ in 0..rng.random_range(1..=5) {
        lines.push(match rng.random_range(0..5) {
            0 | 1 => format!("COMPUTE {}", rng.random_range(1..=budget * 6 / 5)),
            2 => format!("IO disk {} {}", if rng.random_bool(0.5) { "read" } else { "write" }, rng.random_range(0..=65536)),
            3 => format!("IO net write {}", rng.random_range(1..=1500)),
            _ => "HALT".to_string(),
        });
    }
    lines.push("JUMP top".into());
    lines.join("\n")
}

const INTERVALS: [(&str, u64); 3] = [("1ms", 1_000_000), ("10ms", 10_000_000), ("100ms", 100_000_000)];
const SPEEDS: [(&str, u64); 3] = [("1G", 1_000_000_000), ("3.2G", 3_200_000_000), ("6.4G", 6_400_000_000)];

struct WorkloadRun {
    interval_ns: u64,
    prefix_ok: bool,
    leaked: u64,
    slots: u64,
    observed_bps: f64,
    ceiling_bps: f64,
    latency: LatencySummary,
}

fn randomized_runs() -> Vec<WorkloadRun> {
    let points: Vec<(u64, usize)> = (0..24u64).flat_map(|s| (0..3).map(move |i| (s, i))).collect();
    par_map(&points, None, |&(seed, iv)| {
        let (interval, interval_ns) = INTERVALS[iv];
        let (speed, ips) = SPEEDS[(seed % 3) as usize];
        let budget = ips / 1_000_000_000 * interval_ns + ips % 1_000_000_000 * interval_ns / 1_000_000_000;
        let horizon = format!("{}ns", interval_ns * 300);
        let cfg = inline(interval, speed, &horizon, &random_workload(seed, budget), "");
        let result = run(&cfg);
        let g = &result.guests[0];
        let rate = g.ledger.leakage_rate(result.elapsed, g.interval);
        WorkloadRun {
            interval_ns,
            prefix_ok: prefix_bound_holds(g.ledger.miss_bits()),
            leaked: g.ledger.leaked_bits(),
            slots: g.ledger.slots_elapsed(),
            observed_bps: rate.observed_bps,
            ceiling_bps: rate.ceiling_bps,
            latency: mitigation_sim::analysis::latency_summary(&g.latencies),
        }
    })
}

fn leakage_ceiling(runs: &[WorkloadRun]) -> Outcome {
    let workloads = runs.len() / 3;
    let bound_ok = runs
        .iter()
        .all(|r| r.prefix_ok && r.leaked <= r.slots && r.observed_bps <= r.ceiling_bps + 1e-9);
    let ceilings_ok = runs.iter().all(|r| r.ceiling_bps == 1e9 / r.interval_ns as f64);
    let total_leaked: u64 = runs.iter().map(|r| r.leaked).sum();

    // The covert sender at each interval.
    let covert: Vec<(f64, f64, u64)> = par_map(&INTERVALS, None, |&(_, ns)| {
        let setup = CovertSetup::new(
            RealTime::from_nanos(ns),
            Rate::per_sec(6_400_000_000),
            CostModel::default(),
            CountingMode::coarse(),
            5,
        )
        .unwrap();
        let codec = CovertCodec {
            message: random_message(48, 0.5, 5),
            n_meet: setup.load_for(0.3),
            n_miss: setup.load_for(1.5),
            frame: 1,
        };
        let (r, _) = run_covert(&codec, &setup).unwrap();
        (r.rate_bps, r.ceiling_bps, r.bit_errors)
    });
    let covert_ok = covert.iter().zip(INTERVALS).all(|(&(rate, ceiling, _), (_, ns))| {
        rate > 0.0 && rate <= ceiling && rate <= 1e9 / ns as f64
    });
    let one_khz = covert[0].1 == 1000.0;
    outcome(
        workloads >= 20 && bound_ok && ceilings_ok && covert_ok && one_khz,
        format!(
            "{workloads} workloads x 3 intervals, {total_leaked} leaked bits, prefix bound holds {bound_ok}; \
             covert rates {:.1}/{:.2}/{:.3} bps vs ceilings {}/{}/{} bps; 1 ms ceiling {} bps",
            covert[0].0, covert[1].0, covert[2].0, covert[0].1, covert[1].1, covert[2].1, covert[0].1
        ),
    )
}

const SYNC_READ: &str = "l: IO disk read 4096\nHALT\nJUMP l";

/// Sync-read guest at each interval; 100 intervals of horizon each.
fn sync_runs() -> Vec<(u64, f64, LatencySummary)> {
    par_map(&INTERVALS, None, |&(interval, ns)| {
        let horizon = format!("{}ns", ns * 300);
        let result = run(&inline(interval, "1G", &horizon, SYNC_READ, ""));
        let secs = result.elapsed.as_secs_f64();
        let g = &result.guests[0];
        (
            ns,
            g.queues[0].completed as f64 / secs,
            mitigation_sim::analysis::latency_summary(&g.latencies),
        )
    })
}

fn latency_window(sync: &[(u64, f64, LatencySummary)], random: &[WorkloadRun]) -> Outcome {
    let mut on_time = 0u64;
    let mut within = 0.0;
    let mut total = 0u64;
    let all = sync.iter().map(|s| &s.2).chain(random.iter().map(|r| &r.latency));
    for l in all {
        total += l.count;
        on_time += l.on_time;
        within += l.on_time_within_2_3 * l.on_time as f64;
    }
    let share = within / on_time.max(1) as f64;
    outcome(
        on_time > 0 && share >= 0.99,
        format!(
            "{on_time} on-time of {total} requests, {:.2}% within [2, 3] intervals; sync means {:.4}/{:.4}/{:.4}",
            share * 100.0,
            sync[0].2.mean_intervals,
            sync[1].2.mean_intervals,
            sync[2].2.mean_intervals
        ),
    )
}

fn under_utilization() -> Outcome {
    // Oracle for one segment: 2M instructions at 3.2G, at most three 4 KiB
    // writes copied at 0.5 ns/B, and at most four exits.
    let interval = 1_000_000u64;
    let guest = 2_000_000.0 / 3.2;
    let copies = 3.0 * 4096.0 * 0.5;
    let exits = 4.0 * 1045.0;
    let bound = guest + copies + exits;
    let src = "l: COMPUTE 1M\nIO disk write 4096\nJUMP l";

    let mut short = inline("1ms", "2G", "10ms", src, "[record]\nsegments = true");
    short.record.segments = true;
    let probe = run(&short);
    let max_seg = probe.guests[0].segments.iter().map(|s| s.duration.as_nanos()).max().unwrap_or(0);

    let mut cfg = inline("1ms", "2G", "1000s", src, "");
    cfg.record.boundary_log = false;
    cfg.record.latencies = false;
    let result = run(&cfg);
    let g = &result.guests[0];
    let slots = g.ledger.slots_elapsed();
    let all_false = g.ledger.miss_bits().iter().all(|&b| !b);
    outcome(
        bound <= 0.8 * interval as f64 && max_seg as f64 <= bound && slots >= 1_000_000 && all_false,
        format!(
            "segment cost {max_seg} ns (bound {bound:.0} ns, {:.1}% of interval); {slots} slots, {} misses",
            bound / interval as f64 * 100.0,
            g.ledger.leaked_bits()
        ),
    )
}

fn entropy_peak() -> Outcome {
    let ps = [0.1, 0.3, 0.5, 0.7, 0.9];
    let setup = CovertSetup::new(
        RealTime::from_millis(1),
        Rate::per_sec(40_000_000_000),
        CostModel::default(),
        CountingMode::coarse(),
        1,
    )
    .unwrap();
    let hs: Vec<(f64, f64)> = par_map(&ps, None, |&p| {
        let codec = miss_probability_codec(p, 5000, &setup, 11).unwrap();
        let (r, _) = run_covert(&codec, &setup).unwrap();
        (r.transmission_misses as f64 / r.transmission_slots as f64, r.entropy)
    });
    let argmax = hs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .unwrap();
    let peak = hs[2].1;
    let detail = ps
        .iter()
        .zip(&hs)
        .map(|(p, (phat, h))| format!("p={p}: p^={phat:.3} H={h:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(argmax == 2 && (peak - 1.0).abs() <= 0.01, detail)
}

fn resynchronization() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for k in [1u64, 2, 3, 5] {
        // Oracle for the first segment: 1M instructions at 3.2G, the write
        // copy and two exits.
        let bytes = k * 2_000_000;
        let seg0 = 1_000_000 * 1000 / 3200 + bytes / 2 + 2 * 1045;
        let expected_misses = seg0.div_ceil(1_000_000) - 1;
        let src = format!("IO disk write {bytes}\nl: COMPUTE 1000\nJUMP l");
        let mut cfg = inline("1ms", "1G", &format!("{}ms", k + 10), &src, "");
        cfg.record.segments = true;
        let result = run(&cfg);
        let g = &result.guests[0];
        let misses: Vec<u64> = (0..g.ledger.slots_elapsed())
            .filter(|&s| g.ledger.miss_bits()[s as usize])
            .collect();
        let exchange = k + 1;
        let piggyback = g.boundary_logs[0]
            .iter()
            .find(|b| b.slot == exchange)
            .and_then(|b| b.elapsed_slots);
        let comp = g.segments.iter().find(|s| s.slot == exchange);
        let realigned = comp.is_some_and(|s| s.speed_ratio == k + 1 && s.end_period == s.slot + 1);
        let later_aligned = g
            .segments
            .iter()
            .filter(|s| s.slot > exchange)
            .all(|s| s.speed_ratio == 1 && s.start_period == s.slot && s.end_period == s.slot + 1);
        let ok = expected_misses == k
            && misses == (1..=k).collect::<Vec<_>>()
            && piggyback == Some(k + 1)
            && realigned
            && later_aligned;
        pass &= ok;
        notes.push(format!(
            "k={k}: piggyback {:?}, ratio {:?}, period after {:?} at slot {}",
            piggyback,
            comp.map(|s| s.speed_ratio),
            comp.map(|s| s.end_period),
            exchange + 1
        ));
    }
    outcome(pass, notes.join("; "))
}

fn throughput_law(sync: &[(u64, f64, LatencySummary)]) -> Outcome {
    let base = sync[0].1;
    let r10 = sync[1].1 / base;
    let r100 = sync[2].1 / base;
    let ok = (r10 / 0.1 - 1.0).abs() <= 0.2 && (r100 / 0.01 - 1.0).abs() <= 0.2;
    outcome(
        ok,
        format!(
            "{:.2}/{:.3}/{:.4} requests/s, ratio 1 : {r10:.4} : {r100:.5}",
            sync[0].1, sync[1].1, sync[2].1
        ),
    )
}

fn overhead(interval: &str, step_cost_ns: u64) -> f64 {
    let run_mode = |mode: &str| {
        let (mut cfg, base) = load("cpu_sweep.toml");
        cfg.sweep = None;
        cfg.domain.interval = interval.parse().unwrap();
        cfg.counting.mode = if mode == "precise" {
            mitigation_sim::guest::CountingKind::Precise
        } else {
            mitigation_sim::guest::CountingKind::Coarse
        };
        cfg.counting.single_step_cost = RealTime::from_nanos(step_cost_ns);
        cfg.record.boundary_log = false;
        cfg.record.latencies = false;
        let (report, _) = run_config(&cfg, &base).unwrap();
        let g = &report.guests[0];
        let b: TimeBreakdown = g.breakdown_ns;
        assert_eq!(g.leakage.leaked_bits, 0, "calibration run must not miss");
        (b.total() - b.mitigation_idle) as f64 / g.instructions as f64
    };
    run_mode("precise") / run_mode("coarse") - 1.0
}

fn precise_overhead() -> Outcome {
    // Counting cost is linear in the step cost, so one probe fixes it.
    let probe_ns = 1000;
    let slope = overhead("1ms", probe_ns) / probe_ns as f64;
    let calibrated = (0.30 / slope).round() as u64;
    let o1 = overhead("1ms", calibrated);
    let o10 = overhead("10ms", calibrated);
    let o100 = overhead("100ms", calibrated);
    outcome(
        (o1 - 0.30).abs() <= 0.05 && o100 <= 0.07 && o10 <= o1 && o100 <= o10,
        format!(
            "single_step_cost {calibrated} ns; overhead {:.2}% at 1 ms, {:.2}% at 10 ms, {:.2}% at 100 ms",
            o1 * 100.0,
            o10 * 100.0,
            o100 * 100.0
        ),
    )
}

fn misconfiguration() -> Outcome {
    let r = misconfig_demo(7).expect("misconfig");
    outcome(
        r.desynchronized.max_events_per_slot > 1
            && r.desynchronized.more_than_one_bit_per_slot
            && r.synchronized.max_events_per_slot <= 1
            && !r.synchronized.more_than_one_bit_per_slot,
        format!(
            "desynchronized: {} events/slot, {} divergent slots; synchronized: {} event/slot, {} divergent",
            r.desynchronized.max_events_per_slot,
            r.desynchronized.divergent_slots,
            r.synchronized.max_events_per_slot,
            r.synchronized.divergent_slots
        ),
    )
}

fn main() {
    let started = Instant::now();
    let randomized = randomized_runs();
    let sync = sync_runs();
    let checks: Vec<Check> = vec![
        ("determinism", Box::new(determinism)),
        ("internal-channel elimination", Box::new(internal_channel)),
        ("leakage ceiling", Box::new(|| leakage_ceiling(&randomized))),
        ("latency window", Box::new(|| latency_window(&sync, &randomized))),
        ("under-utilization means zero leakage", Box::new(under_utilization)),
        ("entropy peak at 50%", Box::new(entropy_peak)),
        ("time resynchronization", Box::new(resynchronization)),
        ("reciprocal synchronous throughput", Box::new(|| throughput_law(&sync))),
        ("precise-mode overhead trend", Box::new(precise_overhead)),
        ("misconfiguration demo", Box::new(misconfiguration)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let t = Instant::now();
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} [{}] {name} ({:.1?}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            t.elapsed(),
            o.detail
        );
    }
    println!("{} of {} criteria passed in {:.1?}", checks.len() - failed, checks.len(), started.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
