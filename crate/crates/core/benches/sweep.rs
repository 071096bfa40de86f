use std::hint::black_box;
use std::path::Path;

use criterion::{criterion_group, criterion_main, Criterion};
use mitigation_sim::config::ScenarioConfig;
use mitigation_sim::host;
use mitigation_sim::sweep::par_map;

/// Sixteen independent points: four intervals, two speeds, two modes.
fn points() -> Vec<ScenarioConfig> {
    let mut out = Vec::new();
    for interval in ["1ms", "2ms", "5ms", "10ms"] {
        for vcpu in ["1G", "3.2G"] {
            for mode in ["coarse", "precise"] {
                let text = format!(
                    "horizon = \"400ms\"\n[domain]\ninterval = \"{interval}\"\nvcpu_speed = \"{vcpu}\"\n\
                     [counting]\nmode = \"{mode}\"\n\
                     [[guests]]\nname = \"io\"\ntimer_period = 4000000\n\
                     source = \"l: COMPUTE 200k\\nIO disk read 4096\\nIO net write 512\\nHALT\\nJUMP l\"\n\
                     [[guests]]\nname = \"cpu\"\nsource = \"l: COMPUTE 50k\\nJUMP l\"\n"
                );
                out.push(ScenarioConfig::parse(&text, "bench").unwrap());
            }
        }
    }
    out
}

fn run_all(points: &[ScenarioConfig], jobs: Option<usize>) -> u64 {
    par_map(points, jobs, |cfg| {
        let result = host::run(&cfg.build(Path::new(".")).unwrap()).unwrap();
        result.guests.iter().map(|g| g.ledger.leaked_bits()).sum::<u64>()
    })
    .into_iter()
    .sum()
}

fn bench(c: &mut Criterion) {
    let points = points();
    assert_eq!(run_all(&points, Some(1)), run_all(&points, None));
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| run_all(black_box(&points), Some(1))));
    group.bench_function("parallel", |b| b.iter(|| run_all(black_box(&points), None)));
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
