//! Report bundles and CSV rendering.
//!
//! A bundle file is JSON lines: a header `{"report":KIND,"csv":[paths]}`,
//! one line per record, and a closing `{"summary":{...}}`. The summary is
//! always recomputable from the records, and [`ReportBundle::read`] checks
//! that it is.

use std::io::{BufRead, Write};

use probekit_core::budget::{BudgetResource, ComparisonReport, CountRatio, CpuSample, MemorySample, ProfileCount};
use probekit_core::controller::{summarize, CampaignReport, DeploymentRecord};
use probekit_core::probe::TraceResult;
use serde::{Deserialize, Serialize};

use crate::record::{deserialize_result, serialize_result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Trace,
    Campaign,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub traces: usize,
    pub destinations_reached: usize,
    pub hops: usize,
    pub responsive_hops: usize,
    pub labelled_hops: usize,
}

pub fn summarize_traces(results: &[TraceResult]) -> TraceSummary {
    let hops = || results.iter().flat_map(|r| &r.hops);
    TraceSummary {
        traces: results.len(),
        destinations_reached: results.iter().filter(|r| r.destination_reached).count(),
        hops: hops().count(),
        responsive_hops: hops().filter(|h| h.responder.is_some()).count(),
        labelled_hops: hops().filter(|h| !h.labels.is_empty()).count(),
    }
}

/// Rebuilds a comparison from its per-profile counts.
pub fn comparison_from_counts(resource: BudgetResource, counts: Vec<ProfileCount>) -> ComparisonReport {
    let ratios = counts
        .iter()
        .flat_map(|a| {
            counts.iter().map(move |b| CountRatio {
                numerator: a.profile.clone(),
                denominator: b.profile.clone(),
                ratio: (b.instance_count > 0).then(|| a.instance_count as f64 / b.instance_count as f64),
            })
        })
        .collect();
    ComparisonReport {
        resource,
        counts,
        ratios,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Records {
    Trace(Vec<TraceResult>),
    Campaign(Vec<DeploymentRecord>),
    Sim(BudgetResource, Vec<ProfileCount>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Summary {
    Trace(TraceSummary),
    Campaign(CampaignReport),
    Sim(ComparisonReport),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub records: Records,
    pub summary: Summary,
    /// CSV files written alongside the bundle.
    pub csv: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("summary does not match the records")]
    SummaryMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    report: ReportKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resource: Option<BudgetResource>,
    #[serde(default)]
    csv: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryLine {
    summary: serde_json::Value,
}

impl ReportBundle {
    pub fn from_records(records: Records) -> Self {
        let summary = Self::summary_of(&records);
        Self {
            records,
            summary,
            csv: Vec::new(),
        }
    }

    pub fn kind(&self) -> ReportKind {
        match self.records {
            Records::Trace(_) => ReportKind::Trace,
            Records::Campaign(_) => ReportKind::Campaign,
            Records::Sim(..) => ReportKind::Sim,
        }
    }

    fn summary_of(records: &Records) -> Summary {
        match records {
            Records::Trace(r) => Summary::Trace(summarize_traces(r)),
            Records::Campaign(r) => Summary::Campaign(summarize(r)),
            Records::Sim(res, c) => Summary::Sim(comparison_from_counts(*res, c.clone())),
        }
    }

    /// Whether the stored summary equals one recomputed from the records.
    pub fn is_consistent(&self) -> bool {
        Self::summary_of(&self.records) == self.summary
    }

    pub fn record_count(&self) -> usize {
        match &self.records {
            Records::Trace(r) => r.len(),
            Records::Campaign(r) => r.len(),
            Records::Sim(_, c) => c.len(),
        }
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = Header {
            report: self.kind(),
            resource: match &self.records {
                Records::Sim(res, _) => Some(*res),
                _ => None,
            },
            csv: self.csv.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        match &self.records {
            Records::Trace(rs) => {
                for r in rs {
                    writeln!(w, "{}", serialize_result(r))?;
                }
            }
            Records::Campaign(rs) => {
                for r in rs {
                    writeln!(w, "{}", serde_json::to_string(r)?)?;
                }
            }
            Records::Sim(_, cs) => {
                for c in cs {
                    writeln!(w, "{}", serde_json::to_string(c)?)?;
                }
            }
        }
        let summary = SummaryLine {
            summary: serde_json::to_value(&self.summary)?,
        };
        writeln!(w, "{}", serde_json::to_string(&summary)?)?;
        Ok(())
    }

    /// Parses a bundle and verifies its summary. An empty input is an empty
    /// campaign.
    pub fn read(r: impl BufRead) -> Result<Self, ReportError> {
        let mut lines = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if !line.trim().is_empty() {
                lines.push((i + 1, line));
            }
        }
        let Some(((hn, head), rest)) = lines.split_first() else {
            return Ok(Self::from_records(Records::Campaign(Vec::new())));
        };
        let err = |line: usize, e: &dyn std::fmt::Display| ReportError::Parse {
            line,
            message: e.to_string(),
        };
        let header: Header = serde_json::from_str(head).map_err(|e| err(*hn, &e))?;
        let Some(((sn, tail), body)) = rest.split_last() else {
            return Err(err(*hn, &"missing summary line"));
        };
        let summary: SummaryLine = serde_json::from_str(tail).map_err(|e| err(*sn, &e))?;

        let records = match header.report {
            ReportKind::Trace => Records::Trace(
                body.iter()
                    .map(|(n, l)| deserialize_result(l).map_err(|e| err(*n, &e)))
                    .collect::<Result<_, _>>()?,
            ),
            ReportKind::Campaign => Records::Campaign(
                body.iter()
                    .map(|(n, l)| serde_json::from_str(l).map_err(|e| err(*n, &e)))
                    .collect::<Result<_, _>>()?,
            ),
            ReportKind::Sim => Records::Sim(
                header.resource.ok_or_else(|| err(*hn, &"sim report without resource"))?,
                body.iter()
                    .map(|(n, l)| serde_json::from_str(l).map_err(|e| err(*n, &e)))
                    .collect::<Result<_, _>>()?,
            ),
        };
        let summary = match header.report {
            ReportKind::Trace => serde_json::from_value(summary.summary).map(Summary::Trace),
            ReportKind::Campaign => serde_json::from_value(summary.summary).map(Summary::Campaign),
            ReportKind::Sim => serde_json::from_value(summary.summary).map(Summary::Sim),
        }
        .map_err(|e| err(*sn, &e))?;
        let bundle = Self {
            records,
            summary,
            csv: header.csv,
        };
        if !bundle.is_consistent() {
            return Err(ReportError::SummaryMismatch);
        }
        Ok(bundle)
    }

    /// Writes the records as CSV, one row per deployment, hop or profile.
    pub fn write_csv(&self, w: impl Write) -> Result<(), ReportError> {
        match &self.records {
            Records::Trace(rs) => write_rows(w, rs.iter().enumerate().flat_map(|(i, r)| hop_rows(i, r))),
            Records::Campaign(rs) => write_rows(w, rs.iter().map(DeploymentRow::from)),
            Records::Sim(_, cs) => write_rows(w, cs.iter()),
        }
    }
}

/// Column names of a CSV row type, written even when there are no rows.
pub trait CsvHeaders {
    const HEADERS: &'static [&'static str];
}

impl CsvHeaders for ProfileCount {
    const HEADERS: &'static [&'static str] = &["profile", "instance_count"];
}

impl<T: CsvHeaders> CsvHeaders for &T {
    const HEADERS: &'static [&'static str] = T::HEADERS;
}

pub fn write_rows<T: Serialize + CsvHeaders>(w: impl Write, rows: impl IntoIterator<Item = T>) -> Result<(), ReportError> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(T::HEADERS)?;
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct HopRow {
    pub trace: usize,
    pub target: String,
    pub ttl_sent: u8,
    pub responder: Option<String>,
    pub reply_kind: String,
    pub rtt_us: Option<u64>,
    pub reply_ip_ttl: Option<u8>,
    /// `label/tc/bos/ttl` entries separated by `;`.
    pub labels: String,
    pub fingerprint: Option<u8>,
}

impl CsvHeaders for HopRow {
    const HEADERS: &'static [&'static str] = &[
        "trace",
        "target",
        "ttl_sent",
        "responder",
        "reply_kind",
        "rtt_us",
        "reply_ip_ttl",
        "labels",
        "fingerprint",
    ];
}

pub fn hop_rows(trace: usize, r: &TraceResult) -> impl Iterator<Item = HopRow> + '_ {
    r.hops.iter().map(move |h| HopRow {
        trace,
        target: r.spec.target.to_string(),
        ttl_sent: h.ttl_sent,
        responder: h.responder.map(|a| a.to_string()),
        reply_kind: serde_json::to_value(h.reply_kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default(),
        rtt_us: h.rtt_us,
        reply_ip_ttl: h.reply_ip_ttl,
        labels: h
            .labels
            .iter()
            .map(|e| format!("{}/{}/{}/{}", e.label(), e.tc(), u8::from(e.bottom_of_stack()), e.ttl()))
            .collect::<Vec<_>>()
            .join(";"),
        fingerprint: h.fingerprint.map(|c| c.value()),
    })
}

#[derive(Serialize)]
pub struct DeploymentRow {
    pub event_index: usize,
    pub profile: String,
    pub node_id: Option<String>,
    pub status: &'static str,
    pub enqueue_time_s: f64,
    pub start_time_s: Option<f64>,
    pub deploy_duration_s: Option<f64>,
    pub exec_duration_s: Option<f64>,
    pub total_s: Option<f64>,
    pub error: Option<String>,
}

impl CsvHeaders for DeploymentRow {
    const HEADERS: &'static [&'static str] = &[
        "event_index",
        "profile",
        "node_id",
        "status",
        "enqueue_time_s",
        "start_time_s",
        "deploy_duration_s",
        "exec_duration_s",
        "total_s",
        "error",
    ];
}

impl From<&DeploymentRecord> for DeploymentRow {
    fn from(r: &DeploymentRecord) -> Self {
        let s = |d: Option<std::time::Duration>| d.map(|d| d.as_secs_f64());
        Self {
            event_index: r.event_index,
            profile: r.profile.clone(),
            node_id: r.node_id.clone(),
            status: if r.is_completed() { "completed" } else { "discarded" },
            enqueue_time_s: r.enqueue_time.as_secs_f64(),
            start_time_s: s(r.start_time),
            deploy_duration_s: s(r.deploy_duration),
            exec_duration_s: s(r.exec_duration),
            total_s: s(r.total),
            error: r.error.clone(),
        }
    }
}

#[derive(Serialize)]
pub struct MemoryRow<'a> {
    pub profile: &'a str,
    pub t_s: f64,
    pub total_mb: f64,
    pub booting: usize,
    pub running: usize,
    pub merged_mb: f64,
}

impl CsvHeaders for MemoryRow<'_> {
    const HEADERS: &'static [&'static str] = &["profile", "t_s", "total_mb", "booting", "running", "merged_mb"];
}

impl<'a> MemoryRow<'a> {
    pub fn new(profile: &'a str, s: &MemorySample) -> Self {
        Self {
            profile,
            t_s: s.t_s,
            total_mb: s.total_mb,
            booting: s.booting,
            running: s.running,
            merged_mb: s.merged_mb,
        }
    }
}

#[derive(Serialize)]
pub struct CpuRow<'a> {
    pub profile: &'a str,
    pub t_s: f64,
    pub instances: usize,
    pub used_cores: f64,
    pub utilization: f64,
}

impl CsvHeaders for CpuRow<'_> {
    const HEADERS: &'static [&'static str] = &["profile", "t_s", "instances", "used_cores", "utilization"];
}

impl<'a> CpuRow<'a> {
    pub fn new(profile: &'a str, s: &CpuSample) -> Self {
        Self {
            profile,
            t_s: s.t_s,
            instances: s.instances,
            used_cores: s.used_cores,
            utilization: s.utilization,
        }
    }
}
