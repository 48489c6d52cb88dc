//! Runs load scenarios at several rates and writes a report triple per rate.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use securedirect_core::loadgen::{run_scenario, LatencyReport, LoadError, LoadScenario};
use securedirect_core::sim::Topology;
use thiserror::Error;

use crate::report::{self, ReportError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("rates must be positive")]
    BadRate,
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: ReportError },
}

#[derive(Clone, Debug)]
pub struct RateFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub text: PathBuf,
}

#[derive(Clone, Debug)]
pub struct BenchRun {
    pub reports: Vec<LatencyReport>,
    pub files: Vec<RateFiles>,
    pub comparison: PathBuf,
}

impl BenchRun {
    /// True when mean latency never decreases as the rate goes up.
    pub fn mean_non_decreasing(&self) -> bool {
        let mut by_rate: Vec<&LatencyReport> = self.reports.iter().collect();
        by_rate.sort_by_key(|r| r.rate_per_hour);
        by_rate.windows(2).all(|w| w[0].summary.mean_le(&w[1].summary))
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    fs::write(path, bytes).map_err(|e| BenchError::Write { path: path.into(), source: e.into() })
}

/// Each rate runs on its own thread; results come back in `rates` order.
pub fn run_bench(
    rates: &[u64],
    duration_s: u64,
    seed: u64,
    topo: &Topology,
    out_dir: &Path,
) -> Result<BenchRun, BenchError> {
    if rates.contains(&0) {
        return Err(BenchError::BadRate);
    }
    fs::create_dir_all(out_dir).map_err(|e| BenchError::Write { path: out_dir.into(), source: e.into() })?;
    let results: Vec<Result<LatencyReport, LoadError>> = thread::scope(|s| {
        let handles: Vec<_> = rates
            .iter()
            .map(|&rate| s.spawn(move || run_scenario(&LoadScenario::new(rate, duration_s, seed), topo)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut files = Vec::new();
    for r in &reports {
        let stem = format!("latency_{}", r.rate_per_hour);
        let f = RateFiles {
            csv: out_dir.join(format!("{stem}.csv")),
            svg: out_dir.join(format!("{stem}.svg")),
            text: out_dir.join(format!("{stem}.txt")),
        };
        let mut csv = Vec::new();
        report::write_csv(r, &mut csv).map_err(|source| BenchError::Write { path: f.csv.clone(), source })?;
        write(&f.csv, &csv)?;
        write(&f.svg, report::svg_timeline(&[r]).as_bytes())?;
        write(&f.text, report::text_summary(r).as_bytes())?;
        log::info!("{} pages/hour: {} of {} completed", r.rate_per_hour, r.completed(), r.scheduled);
        files.push(f);
    }
    let comparison = out_dir.join("comparison.svg");
    let all: Vec<&LatencyReport> = reports.iter().collect();
    write(&comparison, report::svg_timeline(&all).as_bytes())?;
    Ok(BenchRun { reports, files, comparison })
}
