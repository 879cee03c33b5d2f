use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, ExperimentSpec};
use crate::dpu_agent::{CacheStats, ProxyStats};
use crate::fabric::{LinkKind, TrafficSnapshot};
use crate::graphbench::Algorithm;
use crate::host_agent::HostStats;

/// Bumped whenever a field of [`Report`] changes meaning or disappears.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub spec: ExperimentSpec,
    pub graph: GraphSummary,
    pub runs: Vec<RunReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub vertices: u64,
    pub edges: u64,
    /// Bytes of the graph's fabric-attached objects.
    pub footprint_bytes: u64,
    pub chunks: u64,
    pub buffer_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub wall_secs: f64,
    /// Busy time of both links under their cost models.
    pub modeled_secs: f64,
    /// Counter deltas from just before any static load to the end of the run.
    pub traffic: TrafficSnapshot,
    pub output_sha256: String,
    pub host: HostStats,
    pub corun: Option<CorunReport>,
    pub proxy: Option<ProxyStats>,
    pub cache: Option<CacheStats>,
    /// Share of chunk fetches the proxy served from its cache.
    pub hit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorunReport {
    pub application: Algorithm,
    pub client: u32,
    pub output_sha256: String,
    pub host: HostStats,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Report, ExperimentError> {
        let r: Report = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(ExperimentError::Config(format!("report schema {} but this build reads {SCHEMA_VERSION}", r.schema_version)));
        }
        Ok(r)
    }

    /// Mean of `f` over the runs, or `None` if any run lacks the metric.
    fn mean(&self, f: impl Fn(&RunReport) -> Option<f64>) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.runs.iter().map(f).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// How a metric is read when set against the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sense {
    /// Bytes or counts: lower is better.
    Cost,
    /// Time: report a speedup.
    Time,
    /// Rates: compare by ratio only.
    Rate,
}

type Metric = (&'static str, Sense, fn(&RunReport) -> Option<f64>);

const METRICS: [Metric; 9] = [
    ("net_on_demand_bytes", Sense::Cost, |r| Some(r.traffic.link(LinkKind::Net).bytes_on_demand as f64)),
    ("net_background_bytes", Sense::Cost, |r| Some(r.traffic.link(LinkKind::Net).bytes_background as f64)),
    ("net_total_bytes", Sense::Cost, |r| Some(r.traffic.link(LinkKind::Net).total_bytes() as f64)),
    ("net_messages", Sense::Cost, |r| Some(r.traffic.link(LinkKind::Net).messages as f64)),
    ("intra_total_bytes", Sense::Cost, |r| Some(r.traffic.link(LinkKind::Intra).total_bytes() as f64)),
    ("host_read_requests", Sense::Cost, |r| Some(r.host.read_requests as f64)),
    ("modeled_secs", Sense::Time, |r| Some(r.modeled_secs)),
    ("wall_secs", Sense::Time, |r| Some(r.wall_secs)),
    ("hit_rate", Sense::Rate, |r| r.hit_rate),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    /// Name of the compared report.
    pub report: String,
    pub baseline: Option<f64>,
    pub value: Option<f64>,
    /// value / baseline.
    pub ratio: Option<f64>,
    /// 1 - value / baseline, for byte and count metrics.
    pub reduction: Option<f64>,
    /// baseline / value, for time metrics.
    pub speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

fn ratio(value: f64, baseline: f64) -> Option<f64> {
    if baseline == 0.0 {
        (value == 0.0).then_some(1.0)
    } else {
        Some(value / baseline)
    }
}

/// Set every report after the first against the first. All must run the same
/// application on the same graph.
pub fn compare(reports: &[Report]) -> Result<Comparison, ExperimentError> {
    let [base, rest @ ..] = reports else {
        return Err(ExperimentError::Mismatch("need at least two reports".into()));
    };
    if rest.is_empty() {
        return Err(ExperimentError::Mismatch("need at least two reports".into()));
    }
    for r in reports {
        if r.runs.is_empty() {
            return Err(ExperimentError::Mismatch(format!("{} has no runs", r.spec.name)));
        }
    }
    for r in rest {
        if r.spec.application != base.spec.application {
            return Err(ExperimentError::Mismatch(format!(
                "{} runs {} but {} runs {}",
                r.spec.name, r.spec.application, base.spec.name, base.spec.application
            )));
        }
        if (r.graph.vertices, r.graph.edges) != (base.graph.vertices, base.graph.edges) || r.spec.graph != base.spec.graph {
            return Err(ExperimentError::Mismatch(format!("{} and {} use different graphs", r.spec.name, base.spec.name)));
        }
    }
    let mut rows = Vec::new();
    for r in rest {
        for (name, sense, f) in METRICS {
            let baseline = base.mean(f);
            let value = r.mean(f);
            let q = baseline.zip(value).and_then(|(b, v)| ratio(v, b));
            rows.push(ComparisonRow {
                metric: name.to_string(),
                report: r.spec.name.clone(),
                baseline,
                value,
                ratio: q,
                reduction: if sense == Sense::Cost { q.map(|q| 1.0 - q) } else { None },
                speedup: if sense == Sense::Time { baseline.zip(value).and_then(|(b, v)| ratio(b, v)) } else { None },
            });
        }
    }
    Ok(Comparison { baseline: base.spec.name.clone(), rows })
}

fn cell(v: Option<f64>) -> String {
    match v {
        None => "-".into(),
        Some(x) if x.fract() == 0.0 && x.abs() < 1e15 => format!("{x:.0}"),
        Some(x) => format!("{x:.4}"),
    }
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String, ExperimentError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| ExperimentError::Io(e.into()))?;
        }
        let bytes = w.into_inner().map_err(|e| ExperimentError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let header = ["metric", "report", "baseline", "value", "ratio", "reduction", "speedup"];
        let mut table: Vec<[String; 7]> = vec![header.map(String::from)];
        for r in &self.rows {
            table.push([
                r.metric.clone(),
                r.report.clone(),
                cell(r.baseline),
                cell(r.value),
                cell(r.ratio),
                r.reduction.map_or("-".into(), |x| format!("{:.1}%", 100.0 * x)),
                r.speedup.map_or("-".into(), |x| format!("{x:.3}x")),
            ]);
        }
        let widths: Vec<usize> = (0..7).map(|i| table.iter().map(|row| row[i].len()).max().unwrap_or(0)).collect();
        let mut out = format!("baseline: {}\n", self.baseline);
        for row in &table {
            let line: Vec<String> = row.iter().zip(&widths).enumerate().map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") }).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_over_zero_is_unity() {
        assert_eq!(ratio(0.0, 0.0), Some(1.0));
        assert_eq!(ratio(3.0, 0.0), None);
        assert_eq!(ratio(3.0, 4.0), Some(0.75));
    }
}
