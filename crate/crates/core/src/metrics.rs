//! Evaluation metrics and machine-readable report files: Pareto points,
//! expert-bin histograms, and PIM channel utilization.
//!
//! All numeric output uses Rust's shortest round-trip float formatting, so
//! parsing the emitted tables recovers the in-memory values exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::engine::RunResult;
use crate::timing::PimCostTable;
use crate::workload::ExpertBinSummary;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("zero mean latency in run")]
    ZeroLatency,
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One point of the throughput/interactivity trade-off.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub policy: String,
    pub batch_size: u64,
    /// Generated tokens per second per user (1 / mean iteration latency).
    pub interactivity: f64,
    /// Generated tokens per second per GPU. Colocated prefill tokens do not
    /// count as generated.
    pub throughput_per_gpu: f64,
    pub mean_iteration_latency: f64,
}

/// Derives the Pareto point of a finished run.
pub fn pareto_point(run: &RunResult) -> Result<ParetoPoint, MetricsError> {
    if !(run.steady_mean_latency > 0.0) {
        return Err(MetricsError::ZeroLatency);
    }
    let interactivity = 1.0 / run.steady_mean_latency;
    let throughput_per_gpu = run.batch_size as f64 * interactivity / run.num_gpus as f64;
    Ok(ParetoPoint {
        policy: run.policy.name().to_string(),
        batch_size: run.batch_size,
        interactivity,
        throughput_per_gpu,
        mean_iteration_latency: run.steady_mean_latency,
    })
}

/// Per-GPU, per-channel busy fraction over a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelUtilization {
    pub per_gpu: Vec<Vec<f64>>,
}

pub fn channel_utilization(run: &RunResult) -> ChannelUtilization {
    let per_gpu = run
        .channel_busy
        .iter()
        .map(|channels| {
            channels
                .iter()
                .map(|&busy| {
                    if run.total_time > 0.0 {
                        busy / run.total_time
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    ChannelUtilization { per_gpu }
}

/// Population coefficient of variation (stddev over mean); 0 for an empty
/// or all-zero slice.
pub fn coefficient_of_variation(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    // identical values have zero variance by definition; skip the float
    // accumulation noise
    if values.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    var.sqrt() / mean
}

/// A labeled bin histogram row for bins.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct BinRow {
    /// Row scope, e.g. `layer:3` or `pooled`.
    pub label: String,
    pub batch_size: u64,
    pub summary: ExpertBinSummary,
}

fn write_file(path: &Path, content: &str) -> Result<(), MetricsError> {
    std::fs::write(path, content).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn pareto_csv(points: &[ParetoPoint]) -> String {
    let mut rows: Vec<&ParetoPoint> = points.iter().collect();
    rows.sort_by(|a, b| a.policy.cmp(&b.policy).then(a.batch_size.cmp(&b.batch_size)));
    let mut s = String::from(
        "policy,batch_size,interactivity,throughput_per_gpu,mean_iteration_latency_s\n",
    );
    for p in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.policy, p.batch_size, p.interactivity, p.throughput_per_gpu, p.mean_iteration_latency
        );
    }
    s
}

pub fn bins_csv(bins: &[BinRow]) -> String {
    let mut rows: Vec<&BinRow> = bins.iter().collect();
    rows.sort_by(|a, b| a.label.cmp(&b.label).then(a.batch_size.cmp(&b.batch_size)));
    let mut s = String::from("label,batch_size,n1,n2,n3_4,gt4,memory_bound,act_ratio\n");
    for b in rows {
        let m = &b.summary;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            b.label,
            b.batch_size,
            m.n1,
            m.n2,
            m.n3_4,
            m.gt4,
            m.memory_bound(),
            m.act_ratio
        );
    }
    s
}

pub fn channel_util_csv(util: &ChannelUtilization) -> String {
    let mut s = String::from("gpu,channel,busy_fraction\n");
    for (g, channels) in util.per_gpu.iter().enumerate() {
        for (c, frac) in channels.iter().enumerate() {
            let _ = writeln!(s, "{g},{c},{frac}");
        }
    }
    s
}

fn report_txt(
    points: &[ParetoPoint],
    bins: &[BinRow],
    util: &ChannelUtilization,
    cost_tables: &[PimCostTable],
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "simulation report");
    let _ = writeln!(s, "=================");
    let _ = writeln!(s, "\npareto points ({}):", points.len());
    let mut rows: Vec<&ParetoPoint> = points.iter().collect();
    rows.sort_by(|a, b| a.policy.cmp(&b.policy).then(a.batch_size.cmp(&b.batch_size)));
    for p in rows {
        let _ = writeln!(
            s,
            "  {:<8} B={:<6} latency={:.6e}s interactivity={:.3} tok/s/user throughput={:.3} tok/s/gpu",
            p.policy, p.batch_size, p.mean_iteration_latency, p.interactivity, p.throughput_per_gpu
        );
    }
    let _ = writeln!(s, "\nbin rows: {}", bins.len());
    for b in bins {
        let m = &b.summary;
        let _ = writeln!(
            s,
            "  {:<10} B={:<6} N=1 {:.3}  N=2 {:.3}  3<=N<=4 {:.3}  N>4 {:.3}  act {:.4}",
            b.label, b.batch_size, m.n1, m.n2, m.n3_4, m.gt4, m.act_ratio
        );
    }
    let _ = writeln!(s, "\nchannel utilization:");
    for (g, channels) in util.per_gpu.iter().enumerate() {
        let cv = coefficient_of_variation(channels);
        let mean = if channels.is_empty() {
            0.0
        } else {
            channels.iter().sum::<f64>() / channels.len() as f64
        };
        let _ = writeln!(s, "  gpu {g}: mean busy {:.4}, cv {:.4}", mean, cv);
    }
    let _ = writeln!(s, "\ncost tables:");
    for (g, table) in cost_tables.iter().enumerate() {
        let _ = writeln!(s, "  gpu {g} (alpha = {}):", table.alpha);
        for (tokens, t) in &table.entries {
            let _ = writeln!(s, "    N={tokens}: {t:e} s");
        }
    }
    s
}

/// Writes the report files into `dir`: pareto.csv, bins.csv,
/// channel_util.csv, and the human summary report.txt. Output is
/// byte-stable for identical inputs.
pub fn emit_report(
    points: &[ParetoPoint],
    bins: &[BinRow],
    util: &ChannelUtilization,
    cost_tables: &[PimCostTable],
    dir: impl AsRef<Path>,
) -> Result<(), MetricsError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| MetricsError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_file(&dir.join("pareto.csv"), &pareto_csv(points))?;
    write_file(&dir.join("bins.csv"), &bins_csv(bins))?;
    write_file(&dir.join("channel_util.csv"), &channel_util_csv(util))?;
    write_file(
        &dir.join("report.txt"),
        &report_txt(points, bins, util, cost_tables),
    )?;
    Ok(())
}

/// Parses a pareto.csv produced by [`pareto_csv`].
pub fn parse_pareto_csv(text: &str) -> Vec<ParetoPoint> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ParetoPoint {
                policy: f[0].to_string(),
                batch_size: f[1].parse().unwrap(),
                interactivity: f[2].parse().unwrap(),
                throughput_per_gpu: f[3].parse().unwrap(),
                mean_iteration_latency: f[4].parse().unwrap(),
            }
        })
        .collect()
}

/// Merges cost tables from several GPUs into one dump map for inspection.
pub fn cost_table_dump(tables: &[PimCostTable]) -> BTreeMap<(usize, u64), f64> {
    let mut out = BTreeMap::new();
    for (g, t) in tables.iter().enumerate() {
        for (&tokens, &secs) in &t.entries {
            out.insert((g, tokens), secs);
        }
    }
    out
}
