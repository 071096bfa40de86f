use std::path::{Path, PathBuf};

use mitigation_sim::backend::{DeviceKind, DeviceModel};
use mitigation_sim::config::ScenarioConfig;
use mitigation_sim::guest::Observation;
use mitigation_sim::host::{self, EventKind, SimResult};
use mitigation_sim::sweep::{combined_csv, run_config, run_sweep};
use mitigation_sim::RealTime;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn inline(interval: &str, vcpu: &str, horizon: &str, source: &str, extra: &str) -> ScenarioConfig {
    let text = format!(
        "horizon = \"{horizon}\"\n\n[domain]\ninterval = \"{interval}\"\nvcpu_speed = \"{vcpu}\"\n\n{extra}\n\n\
         [[guests]]\nname = \"g\"\nsource = \"\"\"\n{source}\n\"\"\"\n"
    );
    ScenarioConfig::parse(&text, "inline").unwrap()
}

fn run(cfg: &ScenarioConfig) -> SimResult {
    host::run(&cfg.build(Path::new(".")).unwrap()).unwrap()
}

#[test]
fn every_example_config_round_trips() {
    for entry in std::fs::read_dir(scenarios()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let loaded = ScenarioConfig::load(&path, &[]).unwrap();
        let text = loaded.config.to_toml().unwrap();
        let again = ScenarioConfig::parse(&text, "again").unwrap();
        assert_eq!(again, loaded.config, "{}", path.display());
        assert_eq!(again.to_toml().unwrap(), text);
    }
}

#[test]
fn disk_service_time_matches_the_model() {
    // 100 µs + 4096 × 10 ns.
    let disk = DeviceModel::new(DeviceKind::Disk);
    assert_eq!(disk.service_time(4096), RealTime::from_nanos(140_960));
}

#[test]
fn inbound_arrival_is_published_three_slots_later() {
    // Arrival inside slot 1; the guest replies as soon as it sees it.
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("in.csv"),
        "time_ns,size_bytes,queue,payload_hex\n1400000,64,net,abcd\n",
    )
    .unwrap();
    let text = "horizon = \"8ms\"\n[domain]\ninterval = \"1ms\"\nvcpu_speed = \"1G\"\n\
                [[guests]]\nname = \"g\"\ninbound = \"in.csv\"\n\
                source = \"l: HALT\\nIO net write 64\\nJUMP l\"\n";
    let cfg = ScenarioConfig::parse(text, "t").unwrap();
    let result = host::run(&cfg.build(dir.path()).unwrap()).unwrap();
    let g = &result.guests[0];
    let first_output = g.boundary_logs[0]
        .iter()
        .find(|b| b.output.as_ref().is_some_and(|o| o.iter().any(|q| q.requests > 0)))
        .unwrap();
    assert_eq!(first_output.slot, 4);
    let delivered_at = g.boundary_logs[0].iter().find(|b| b.delivered > 0).unwrap();
    assert_eq!(delivered_at.slot, 2);
    assert!(matches!(g.trace[0].1, Observation::Response { inbound: Some(0), .. }));
}

#[test]
fn arrivals_within_one_slot_are_indistinguishable() {
    let dir = tempfile::tempdir().unwrap();
    let mut traces = Vec::new();
    for t in [1_000_001u64, 1_300_000, 1_999_999, 2_000_000] {
        std::fs::write(
            dir.path().join("in.csv"),
            format!("time_ns,size_bytes,queue,payload_hex\n{t},64,net,\n"),
        )
        .unwrap();
        let text = "horizon = \"10ms\"\n[domain]\ninterval = \"1ms\"\nvcpu_speed = \"1G\"\n\
                    [[guests]]\nname = \"g\"\ninbound = \"in.csv\"\n\
                    source = \"l: HALT\\nREAD_TSC r0\\nIO net write 64\\nJUMP l\"\n";
        let cfg = ScenarioConfig::parse(text, "t").unwrap();
        let result = host::run(&cfg.build(dir.path()).unwrap()).unwrap();
        traces.push(result.guests[0].trace.clone());
    }
    assert!(traces.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn empty_bundles_are_on_time() {
    let result = run(&inline("1ms", "1G", "50ms", "l: COMPUTE 10k\nJUMP l", ""));
    let g = &result.guests[0];
    assert_eq!(g.ledger.leaked_bits(), 0);
    assert!(g.boundary_logs[0]
        .iter()
        .skip(1)
        .all(|b| b.output.as_ref().is_some_and(|o| o.iter().all(|q| q.requests == 0))));
}

#[test]
fn descriptor_exhaustion_stalls_the_guest() {
    // 100 ms slots, 1 KiB writes every few instructions; a capacity-4 queue
    // fills at once and the guest idles for the rest of the segment.
    let mut cfg = inline("100ms", "1G", "1s", "l: IO disk write 1024\nJUMP l", "");
    let small = cfg.clone();
    let text = small.to_toml().unwrap() + "\n[guests.queues.disk]\ncapacity = 4\n";
    cfg = ScenarioConfig::parse(&text, "t").unwrap();
    let capped = run(&cfg);
    let free = run(&small);
    let issued = |r: &SimResult| r.guests[0].queues[0].issued;
    assert!(issued(&capped) < issued(&free));
    // At most 4 per segment.
    assert!(issued(&capped) <= 4 * capped.guests[0].segment_count);
}

#[test]
fn output_leaves_only_at_boundaries() {
    let mut cfg = inline("1ms", "6.4G", "40ms", "l: COMPUTE 5M\nIO disk write 512\nIO net write 64\nJUMP l", "");
    cfg.record.event_log = true;
    let result = run(&cfg);
    for e in &result.events {
        if let EventKind::Boundary { .. } = e.kind {
            assert_eq!(e.t % 1_000_000, 0);
        }
    }
    assert!(result.guests[0].ledger.leaked_bits() > 0);
}

#[test]
fn precise_and_coarse_give_the_same_guest_trace() {
    let src = "l: READ_TSC r0\nCOMPUTE 1500k\nIO disk read 512\nHALT\nJUMP l";
    let coarse = run(&inline("1ms", "1G", "30ms", src, ""));
    let precise = run(&inline("1ms", "1G", "30ms", src, "[counting]\nmode = \"precise\""));
    assert_eq!(coarse.guests[0].trace, precise.guests[0].trace);
    assert!(precise.guests[0].breakdown.counting > 0);
    assert_eq!(coarse.guests[0].breakdown.counting, 0);
}

#[test]
fn precise_overhead_falls_with_interval() {
    let mut last = f64::INFINITY;
    for interval in ["1ms", "10ms", "100ms"] {
        let cfg = inline(interval, "1G", "1s", "l: COMPUTE 100k\nJUMP l", "[counting]\nmode = \"precise\"");
        let b = run(&cfg).guests[0].breakdown;
        let share = b.counting as f64 / b.guest as f64;
        assert!(share > 0.0 && share < last, "{interval}: {share}");
        last = share;
    }
}

#[test]
fn sweep_yields_one_report_per_point_in_either_mode() {
    let loaded = ScenarioConfig::load(&scenarios().join("cpu_sweep.toml"), &[]).unwrap();
    let par = run_sweep(&loaded.config, &loaded.base_dir, None).unwrap();
    let seq = run_sweep(&loaded.config, &loaded.base_dir, Some(1)).unwrap();
    assert_eq!(par.len(), 6);
    assert!(par.iter().all(|p| p.report.is_some()));
    assert_eq!(combined_csv(&par).unwrap(), combined_csv(&seq).unwrap());
}

#[test]
fn failed_sweep_points_are_reported_not_fatal() {
    // 1500 instructions per second is a fractional budget at 1 ms only.
    let loaded = ScenarioConfig::load(
        &scenarios().join("cpu_sweep.toml"),
        &["sweep.vcpu_speeds=[\"3.2G\", 1500]".into()],
    )
    .unwrap();
    let out = run_sweep(&loaded.config, &loaded.base_dir, Some(2)).unwrap();
    assert_eq!(out.len(), 12);
    let failed: Vec<&str> = out.iter().filter(|o| o.error.is_some()).map(|o| o.label.as_str()).collect();
    assert_eq!(failed, ["i1ms_v1500_precise", "i1ms_v1500_coarse"]);
    assert!(out[2].error.as_deref().unwrap().contains("fractional"));

    let mut cfg = ScenarioConfig::load(&scenarios().join("cpu_sweep.toml"), &[]).unwrap();
    cfg.config.guests[0].program = Some("missing.gp".into());
    let out = run_sweep(&cfg.config, &cfg.base_dir, Some(2)).unwrap();
    assert_eq!(out.len(), 6);
    assert!(out.iter().all(|o| o.error.as_deref().is_some_and(|e| e.contains("missing.gp"))));
}

#[test]
fn reports_are_reproducible() {
    let loaded = ScenarioConfig::load(&scenarios().join("echo.toml"), &[]).unwrap();
    let (a, ra) = run_config(&loaded.config, &loaded.base_dir).unwrap();
    let (b, rb) = run_config(&loaded.config, &loaded.base_dir).unwrap();
    assert_eq!(
        mitigation_sim::analysis::to_json(&a).unwrap(),
        mitigation_sim::analysis::to_json(&b).unwrap()
    );
    assert_eq!(ra.events, rb.events);
    let other = ScenarioConfig::load(&scenarios().join("echo.toml"), &["seed=12".into()]).unwrap();
    let (_, rc) = run_config(&other.config, &other.base_dir).unwrap();
    assert_ne!(ra.events, rc.events);
}
