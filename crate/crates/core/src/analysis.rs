//! Post-run metrics and report files.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::host::{GuestResult, LatencyRecord, SimResult};
use crate::time::RealTime;

/// Embedded in every JSON report and used as the first CSV column.
pub const SCHEMA_VERSION: &str = "mitsim-report/1";

/// Real time per category, in nanoseconds.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TimeBreakdown {
    pub guest: u64,
    pub hypervisor: u64,
    pub vmx: u64,
    pub mitigation_idle: u64,
    pub counting: u64,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize)]
pub struct Breakdown {
    pub guest: f64,
    pub hypervisor: f64,
    pub vmx: f64,
    pub mitigation_idle: f64,
    pub counting: f64,
}

impl TimeBreakdown {
    pub fn total(&self) -> u64 {
        self.guest + self.hypervisor + self.vmx + self.mitigation_idle + self.counting
    }

    pub fn fractions(&self) -> Breakdown {
        let total = self.total();
        if total == 0 {
            return Breakdown {
                mitigation_idle: 1.0,
                ..Breakdown::default()
            };
        }
        let f = |v: u64| v as f64 / total as f64;
        Breakdown {
            guest: f(self.guest),
            hypervisor: f(self.hypervisor),
            vmx: f(self.vmx),
            mitigation_idle: f(self.mitigation_idle),
            counting: f(self.counting),
        }
    }
}

impl Breakdown {
    pub fn sum(&self) -> f64 {
        self.guest + self.hypervisor + self.vmx + self.mitigation_idle + self.counting
    }
}

/// `H(p)` in bits.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

/// First-order plug-in estimate of per-slot entropy: `H(p̂)` with `p̂` the
/// empirical miss frequency. An estimate of the per-slot bound, not an exact
/// leakage figure.
pub fn entropy_rate(miss_bits: &[bool]) -> f64 {
    if miss_bits.is_empty() {
        return 0.0;
    }
    let misses = miss_bits.iter().filter(|&&b| b).count();
    binary_entropy(misses as f64 / miss_bits.len() as f64)
}

/// Plug-in entropy of overlapping `k`-blocks divided by `k`, in bits per
/// slot. Falls with `k` when the miss pattern is predictable.
pub fn block_entropy_rate(miss_bits: &[bool], k: usize) -> f64 {
    if k == 0 || miss_bits.len() < k {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::<u64, u64>::new();
    for w in miss_bits.windows(k) {
        let key = w.iter().fold(0u64, |acc, &b| acc << 1 | b as u64);
        *counts.entry(key).or_default() += 1;
    }
    let n = (miss_bits.len() - k + 1) as f64;
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h / k as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LeakageSummary {
    pub slots_elapsed: u64,
    pub leaked_bits: u64,
    pub observed_bps: f64,
    pub ceiling_bps: f64,
    /// `leaked_bits <= slots` held for every prefix of the trace.
    pub prefix_bound_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropySummary {
    pub plug_in: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    /// Bin covers `[lo, lo + 1)` intervals.
    pub lo: u64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: u64,
    pub on_time: u64,
    /// Share of on-time requests with latency in `[2, 3]` intervals.
    pub on_time_within_2_3: f64,
    pub min_ns: u64,
    pub mean_ns: f64,
    pub max_ns: u64,
    pub mean_intervals: f64,
    pub histogram: Vec<HistogramBin>,
}

pub fn latency_summary(records: &[LatencyRecord]) -> LatencySummary {
    let ns: Vec<u64> = records
        .iter()
        .map(|r| r.visible_at.saturating_sub(r.issued_at).as_nanos())
        .collect();
    let on_time: Vec<&LatencyRecord> = records.iter().filter(|r| r.on_time).collect();
    let within = on_time
        .iter()
        .filter(|r| (2.0..=3.0).contains(&r.intervals))
        .count();
    let mut bins = std::collections::BTreeMap::<u64, u64>::new();
    for r in records {
        *bins.entry(r.intervals.floor() as u64).or_default() += 1;
    }
    let n = records.len().max(1) as f64;
    LatencySummary {
        count: records.len() as u64,
        on_time: on_time.len() as u64,
        on_time_within_2_3: if on_time.is_empty() {
            0.0
        } else {
            within as f64 / on_time.len() as f64
        },
        min_ns: ns.iter().copied().min().unwrap_or(0),
        mean_ns: ns.iter().sum::<u64>() as f64 / n,
        max_ns: ns.iter().copied().max().unwrap_or(0),
        mean_intervals: records.iter().map(|r| r.intervals).sum::<f64>() / n,
        histogram: bins.into_iter().map(|(lo, count)| HistogramBin { lo, count }).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueueThroughput {
    pub name: String,
    pub issued: u64,
    pub completed: u64,
    pub inbound: u64,
    pub requests_per_sec: f64,
    pub bytes_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GuestReport {
    pub name: String,
    pub interval_ns: u64,
    pub budget: u64,
    pub segments: u64,
    pub instructions: u64,
    pub leakage: LeakageSummary,
    pub entropy: EntropySummary,
    pub breakdown_ns: TimeBreakdown,
    pub breakdown: Breakdown,
    pub queues: Vec<QueueThroughput>,
    pub latency: LatencySummary,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub schema_version: &'static str,
    pub label: String,
    pub config: serde_json::Value,
    pub horizon_ns: u64,
    pub elapsed_ns: u64,
    pub guests: Vec<GuestReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack: Option<serde_json::Value>,
}

#[derive(Copy, Clone, Debug, Default)]
pub struct ReportOptions {
    pub block_entropy: Option<usize>,
}

/// Leak bound over every prefix of a miss trace.
pub fn prefix_bound_holds(miss_bits: &[bool]) -> bool {
    let mut leaked = 0u64;
    for (i, &b) in miss_bits.iter().enumerate() {
        leaked += b as u64;
        if leaked > i as u64 + 1 {
            return false;
        }
    }
    true
}

pub fn guest_report(g: &GuestResult, elapsed: RealTime, opts: &ReportOptions) -> GuestReport {
    let bits = g.ledger.miss_bits();
    let rate = g.ledger.leakage_rate(elapsed, g.interval);
    let secs = elapsed.as_secs_f64().max(f64::MIN_POSITIVE);
    GuestReport {
        name: g.name.clone(),
        interval_ns: g.interval.as_nanos(),
        budget: g.budget,
        segments: g.segment_count,
        instructions: g.instructions,
        leakage: LeakageSummary {
            slots_elapsed: g.ledger.slots_elapsed(),
            leaked_bits: g.ledger.leaked_bits(),
            observed_bps: rate.observed_bps,
            ceiling_bps: rate.ceiling_bps,
            prefix_bound_holds: prefix_bound_holds(bits),
        },
        entropy: EntropySummary {
            plug_in: entropy_rate(bits),
            block_size: opts.block_entropy,
            block: opts.block_entropy.map(|k| block_entropy_rate(bits, k)),
        },
        breakdown_ns: g.breakdown,
        breakdown: g.breakdown.fractions(),
        queues: g
            .queues
            .iter()
            .map(|q| QueueThroughput {
                name: q.name.clone(),
                issued: q.issued,
                completed: q.completed,
                inbound: q.inbound,
                requests_per_sec: q.completed as f64 / secs,
                bytes_per_sec: (q.bytes_read + q.bytes_written) as f64 / secs,
            })
            .collect(),
        latency: latency_summary(&g.latencies),
    }
}

impl RunReport {
    pub fn new(label: impl Into<String>, config: serde_json::Value, result: &SimResult, opts: &ReportOptions) -> Self {
        RunReport {
            schema_version: SCHEMA_VERSION,
            label: label.into(),
            config,
            horizon_ns: result.horizon.as_nanos(),
            elapsed_ns: result.elapsed.as_nanos(),
            guests: result
                .guests
                .iter()
                .map(|g| guest_report(g, result.elapsed, opts))
                .collect(),
            attack: None,
        }
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.guests
            .iter()
            .map(|g| SummaryRow {
                schema_version: SCHEMA_VERSION,
                label: self.label.clone(),
                guest: g.name.clone(),
                interval_ns: g.interval_ns,
                budget: g.budget,
                slots: g.leakage.slots_elapsed,
                leaked_bits: g.leakage.leaked_bits,
                observed_bps: g.leakage.observed_bps,
                ceiling_bps: g.leakage.ceiling_bps,
                entropy: g.entropy.plug_in,
                guest_frac: g.breakdown.guest,
                hypervisor_frac: g.breakdown.hypervisor,
                vmx_frac: g.breakdown.vmx,
                idle_frac: g.breakdown.mitigation_idle,
                counting_frac: g.breakdown.counting,
                requests_per_sec: g.queues.iter().map(|q| q.requests_per_sec).sum(),
                latency_mean_intervals: g.latency.mean_intervals,
                latency_on_time_within_2_3: g.latency.on_time_within_2_3,
            })
            .collect()
    }
}

/// One CSV line per guest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub schema_version: &'static str,
    pub label: String,
    pub guest: String,
    pub interval_ns: u64,
    pub budget: u64,
    pub slots: u64,
    pub leaked_bits: u64,
    pub observed_bps: f64,
    pub ceiling_bps: f64,
    pub entropy: f64,
    pub guest_frac: f64,
    pub hypervisor_frac: f64,
    pub vmx_frac: f64,
    pub idle_frac: f64,
    pub counting_frac: f64,
    pub requests_per_sec: f64,
    pub latency_mean_intervals: f64,
    pub latency_on_time_within_2_3: f64,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    #[default]
    Both,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "both" => Ok(ReportFormat::Both),
            other => Err(Error::config(format!("unknown report format {other:?}"))),
        }
    }
}

pub fn to_json(report: &RunReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn rows_to_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serialize(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Serialize(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialize(e.to_string()))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `<dir>/<stem>.json` and/or `<dir>/<stem>.csv`. Returns the paths
/// written.
pub fn emit_report(report: &RunReport, dir: &Path, stem: &str, format: ReportFormat) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        let p = dir.join(format!("{stem}.json"));
        write_file(&p, &to_json(report)?)?;
        written.push(p);
    }
    if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
        let p = dir.join(format!("{stem}.csv"));
        write_file(&p, &rows_to_csv(&report.summary_rows())?)?;
        written.push(p);
    }
    Ok(written)
}

/// Serializes event records as JSON lines.
pub fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::Serialize(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}
