use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mitigation_sim::analysis::{emit_report, jsonl, write_file, ReportFormat, RunReport};
use mitigation_sim::attacks::{run_attack, AttackOutcome};
use mitigation_sim::config::{Loaded, ScenarioConfig};
use mitigation_sim::sweep::{combined_csv, parallel_enabled, run_config, run_sweep};
use mitigation_sim::Error;

#[derive(Parser)]
#[command(name = "mitsim", version, about = "Simulate timing-channel mitigation for virtual machines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario to its horizon and write a report.
    Simulate(Common),
    /// Run every point of the scenario's [sweep] table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Points to run at once. Defaults to all cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run the scenario's [attack]: covert sender, internal probe or the
    /// misconfigured multi-queue demo.
    Attack(Common),
    /// Validate a configuration and print its effective, canonical form.
    Check(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Directory for report files.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides a configuration value, e.g. `domain.interval=10ms`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Report files to write.
    #[arg(long, default_value = "both", value_parser = parse_format)]
    format: ReportFormat,
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit status for a failure: 2 for bad inputs, 3 for a failed run.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn input(e: Error) -> Self {
        Failure {
            code: 2,
            msg: e.to_string(),
        }
    }

    fn run(e: Error) -> Self {
        let code = if e.is_config() { 2 } else { 3 };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl Common {
    fn load(&self) -> Result<Loaded, Failure> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        ScenarioConfig::load(&self.config, &overrides).map_err(Failure::input)
    }

    fn stem(&self, cfg: &ScenarioConfig) -> String {
        if !cfg.name.is_empty() {
            return cfg.name.clone();
        }
        self.config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }
}

fn emit(report: &RunReport, out: &Path, stem: &str, format: ReportFormat) -> Result<(), Failure> {
    for path in emit_report(report, out, stem, format).map_err(Failure::run)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn summarize(report: &RunReport) {
    for g in &report.guests {
        println!(
            "{}: {} slots, {} leaked bits ({:.1} of {:.0} bps), entropy {:.4} bits/slot, idle {:.1}%",
            g.name,
            g.leakage.slots_elapsed,
            g.leakage.leaked_bits,
            g.leakage.observed_bps,
            g.leakage.ceiling_bps,
            g.entropy.plug_in,
            g.breakdown.mitigation_idle * 100.0
        );
    }
}

fn simulate(args: &Common) -> Result<(), Failure> {
    let loaded = args.load()?;
    let cfg = &loaded.config;
    let (report, result) = run_config(cfg, &loaded.base_dir).map_err(Failure::run)?;
    let stem = args.stem(cfg);
    summarize(&report);
    emit(&report, &args.out, &stem, args.format)?;
    if cfg.record.event_log {
        let path = args.out.join(format!("{stem}.events.jsonl"));
        write_file(&path, &jsonl(&result.events).map_err(Failure::run)?).map_err(Failure::run)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn sweep(args: &Common, jobs: Option<usize>) -> Result<(), Failure> {
    let loaded = args.load()?;
    if jobs.is_some_and(|j| j > 1) && !parallel_enabled() {
        eprintln!("note: built without the `parallel` feature; running points sequentially");
    }
    let outcomes = run_sweep(&loaded.config, &loaded.base_dir, jobs).map_err(Failure::input)?;
    let mut failed = Vec::new();
    for o in &outcomes {
        match (&o.report, &o.error) {
            (Some(report), _) => {
                println!("[{}]", o.label);
                summarize(report);
                emit(report, &args.out, &o.label, args.format)?;
            }
            (None, err) => {
                eprintln!("[{}] failed: {}", o.label, err.as_deref().unwrap_or("unknown error"));
                failed.push(o);
            }
        }
    }
    let csv = combined_csv(&outcomes).map_err(Failure::run)?;
    let path = args.out.join("sweep.csv");
    write_file(&path, &csv).map_err(Failure::run)?;
    println!("wrote {}", path.display());
    if failed.is_empty() {
        return Ok(());
    }
    let listing: String = failed
        .iter()
        .map(|o| format!("{}\t{}\n", o.label, o.error.as_deref().unwrap_or("")))
        .collect();
    let path = args.out.join("sweep_failures.tsv");
    write_file(&path, &listing).map_err(Failure::run)?;
    Err(Failure {
        code: if failed.iter().any(|o| o.config_error) { 2 } else { 3 },
        msg: format!("{} of {} sweep points failed (see {})", failed.len(), outcomes.len(), path.display()),
    })
}

fn attack(args: &Common) -> Result<(), Failure> {
    let loaded = args.load()?;
    let cfg = &loaded.config;
    let stem = args.stem(cfg);
    let outcome = run_attack(cfg).map_err(Failure::run)?;
    match &outcome {
        AttackOutcome::Covert { report, run } => {
            println!(
                "covert: {} bits sent, {} bit errors (BER {:.4}), {:.1} bps achieved, ceiling {:.0} bps",
                report.sent.len(),
                report.bit_errors,
                report.ber,
                report.rate_bps,
                report.ceiling_bps
            );
            emit(run, &args.out, &stem, args.format)?;
        }
        AttackOutcome::Probe(p) => println!("probe: {} ({} runs)", p.verdict, p.runs.len()),
        AttackOutcome::Misconfig(m) => println!(
            "misconfig: synchronized {} event(s)/slot, desynchronized {} event(s)/slot, more than one bit per slot: {}",
            m.synchronized.max_events_per_slot,
            m.desynchronized.max_events_per_slot,
            m.desynchronized.more_than_one_bit_per_slot
        ),
    }
    let path = args.out.join(format!("{stem}.attack.json"));
    write_file(&path, &format!("{:#}\n", outcome.to_json())).map_err(Failure::run)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn check(args: &Common) -> Result<(), Failure> {
    let loaded = args.load()?;
    let cfg = &loaded.config;
    if !cfg.guests.is_empty() {
        cfg.build(&loaded.base_dir).map_err(Failure::input)?;
    }
    if cfg.sweep.is_some() {
        for (label, point) in cfg.sweep_points().map_err(Failure::input)? {
            point.validate().map_err(|e| Failure::input(Error::config(format!("{label}: {e}"))))?;
        }
    }
    print!("{}", cfg.to_toml().map_err(Failure::input)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Sweep { common, jobs } => sweep(common, *jobs),
        Command::Attack(args) => attack(args),
        Command::Check(args) => check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
