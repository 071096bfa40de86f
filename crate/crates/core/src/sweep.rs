//! Running many independent simulations.
//!
//! Each point is a complete, sequential simulation, so points can run on as
//! many threads as are available without affecting their results. With the
//! `parallel` feature the points go to a rayon pool; without it, or with
//! `jobs = 1`, they run one after another. Output order always follows input
//! order.

use std::path::Path;

use serde::Serialize;

use crate::analysis::{rows_to_csv, ReportOptions, RunReport, SummaryRow};
use crate::config::ScenarioConfig;
use crate::error::Result;
use crate::host::{self, SimResult};

/// Maps `f` over `items`, in parallel when the `parallel` feature is on and
/// `jobs` is not 1. `jobs = None` uses every available core.
pub fn par_map<T, R, F>(items: &[T], jobs: Option<usize>, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if jobs != Some(1) {
            let run = || items.par_iter().map(&f).collect();
            return match jobs {
                None => run(),
                Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                    Ok(pool) => pool.install(run),
                    Err(_) => run(),
                },
            };
        }
    }
    let _ = jobs;
    items.iter().map(f).collect()
}

/// True when this build can run points concurrently.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Builds, runs and summarizes one configuration.
pub fn run_config(cfg: &ScenarioConfig, base_dir: &Path) -> Result<(RunReport, SimResult)> {
    let scenario = cfg.build(base_dir)?;
    let result = host::run(&scenario)?;
    let opts = ReportOptions {
        block_entropy: cfg.report.block_entropy,
    };
    let label = if cfg.name.is_empty() { "run" } else { cfg.name.as_str() };
    let report = RunReport::new(label, cfg.to_json(), &result, &opts);
    Ok((report, result))
}

#[derive(Clone, Debug, Serialize)]
pub struct PointOutcome {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    /// Set when the point failed. Other points still run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The failure came from the point's inputs rather than from running it.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub config_error: bool,
}

/// Runs every point of the configuration's `[sweep]` table.
pub fn run_sweep(cfg: &ScenarioConfig, base_dir: &Path, jobs: Option<usize>) -> Result<Vec<PointOutcome>> {
    let points = cfg.sweep_points()?;
    Ok(par_map(&points, jobs, |(label, point)| match run_config(point, base_dir) {
        Ok((report, _)) => PointOutcome {
            label: label.clone(),
            report: Some(report),
            error: None,
            config_error: false,
        },
        Err(e) => PointOutcome {
            label: label.clone(),
            report: None,
            error: Some(e.to_string()),
            config_error: e.is_config() || matches!(e, crate::error::Error::Io { .. }),
        },
    }))
}

/// One CSV with a row per guest of every successful point.
pub fn combined_csv(outcomes: &[PointOutcome]) -> Result<String> {
    let rows: Vec<SummaryRow> = outcomes
        .iter()
        .filter_map(|o| o.report.as_ref())
        .flat_map(RunReport::summary_rows)
        .collect();
    rows_to_csv(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<u64> = (0..100).collect();
        let seq = par_map(&xs, Some(1), |x| x * x);
        let par = par_map(&xs, Some(4), |x| x * x);
        let all = par_map(&xs, None, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq, all);
        assert_eq!(seq[7], 49);
    }
}
