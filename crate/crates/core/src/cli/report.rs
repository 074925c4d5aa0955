//! Report tables and their CSV / JSON renderings.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::cli::config::{CommandKind, OutputFormat, RawConfig};
use crate::error::{Error, Result};
use crate::sensitivity::{FitStatus, GEstimate, RelevanceCheck, SweepResult};
use crate::simulation::{DgpConfig, MonteCarloReport};
use crate::smm::Link;

/// One α of a fit or sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub psi_hat: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    /// `exp` of the ψ columns; logit link only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub or_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub or_lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub or_hi: Option<f64>,
    pub status: FitStatus,
    pub n_roots: usize,
}

impl SweepRow {
    pub fn from_estimate(g: &GEstimate, link: Link) -> Self {
        let odds = |v: Option<f64>| {
            if link == Link::Logit {
                v.map(f64::exp)
            } else {
                None
            }
        };
        let (lo, hi) = match g.ci {
            Some((lo, hi)) => (Some(lo), Some(hi)),
            None => (None, None),
        };
        SweepRow {
            alpha: g.alpha,
            psi_hat: g.psi,
            se: g.psi_variance().map(f64::sqrt),
            ci_lo: lo,
            ci_hi: hi,
            or_hat: odds(g.psi),
            or_lo: odds(lo),
            or_hi: odds(hi),
            status: g.status,
            n_roots: g.diagnostics.n_roots,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub link: Link,
    pub n_obs: usize,
    pub rows: Vec<SweepRow>,
    /// Smallest and largest α with a solution.
    pub solvable_range: Option<(f64, f64)>,
}

impl SweepTable {
    pub fn from_sweep(result: &SweepResult, link: Link, n_obs: usize) -> Self {
        SweepTable {
            link,
            n_obs,
            rows: result
                .entries
                .iter()
                .map(|g| SweepRow::from_estimate(g, link))
                .collect(),
            solvable_range: result.solvable_range,
        }
    }

    pub fn from_estimate(g: &GEstimate, link: Link, n_obs: usize) -> Self {
        SweepTable {
            link,
            n_obs,
            rows: vec![SweepRow::from_estimate(g, link)],
            solvable_range: g.is_solved().then_some((g.alpha, g.alpha)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ReportBody {
    Sweep(SweepTable),
    Simulation(MonteCarloReport),
    Calibration(DgpConfig),
    Relevance(RelevanceCheck),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub command: CommandKind,
    pub body: ReportBody,
    pub seed: Option<u64>,
    pub config: RawConfig,
}

#[derive(Serialize)]
struct JsonEnvelope<'a> {
    version: &'static str,
    command: CommandKind,
    seed: Option<u64>,
    config: &'a RawConfig,
    result: &'a ReportBody,
}

/// Three decimals, without a `-0.000`.
pub fn fmt3(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".to_string()
    } else {
        s
    }
}

fn opt3(v: Option<f64>) -> String {
    v.filter(|t| t.is_finite())
        .map_or_else(|| "NA".to_string(), fmt3)
}

fn to_string(buffer: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = buffer
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn csv_write(w: &mut csv::Writer<Vec<u8>>, record: &[String]) -> Result<()> {
    w.write_record(record)
        .map_err(|e| Error::InvalidArgument(format!("csv record: {e}")))
}

pub fn render_csv(report: &Report) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    match &report.body {
        ReportBody::Sweep(table) => {
            let logit = table.link == Link::Logit;
            let mut header = vec!["alpha", "psi_hat", "ci_lo", "ci_hi"];
            if logit {
                header.extend(["or_hat", "or_lo", "or_hi"]);
            }
            header.push("status");
            csv_write(
                &mut w,
                &header.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            )?;
            for row in &table.rows {
                let mut rec = vec![
                    fmt3(row.alpha),
                    opt3(row.psi_hat),
                    opt3(row.ci_lo),
                    opt3(row.ci_hi),
                ];
                if logit {
                    rec.extend([opt3(row.or_hat), opt3(row.or_lo), opt3(row.or_hi)]);
                }
                rec.push(row.status.as_str().to_string());
                csv_write(&mut w, &rec)?;
            }
        }
        ReportBody::Simulation(mc) => {
            let header = [
                "alpha",
                "coverage",
                "mean_ci_length",
                "mean_est",
                "q25",
                "q50",
                "q75",
                "n_solved",
                "n_failed",
            ];
            csv_write(&mut w, &header.map(String::from))?;
            for row in &mc.rows {
                csv_write(
                    &mut w,
                    &[
                        fmt3(row.alpha),
                        fmt3(row.coverage),
                        opt3(row.mean_ci_length),
                        opt3(row.mean_est),
                        opt3(row.q25),
                        opt3(row.q50),
                        opt3(row.q75),
                        row.n_solved.to_string(),
                        row.n_failed().to_string(),
                    ],
                )?;
            }
        }
        ReportBody::Calibration(config) => {
            // coefficients keep full precision so they can be reused as inputs
            csv_write(&mut w, &["parameter".to_string(), "value".to_string()])?;
            let value =
                serde_json::to_value(config).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            if let serde_json::Value::Object(map) = value {
                for (k, v) in map {
                    let text = match v {
                        serde_json::Value::String(s) => s,
                        other => other.to_string(),
                    };
                    csv_write(&mut w, &[k, text])?;
                }
            }
        }
        ReportBody::Relevance(r) => {
            let header = ["f_stat", "df1", "df2", "p_value", "coef", "ci_lo", "ci_hi"];
            csv_write(&mut w, &header.map(String::from))?;
            let f = if r.f_stat.is_finite() {
                fmt3(r.f_stat)
            } else {
                "Inf".to_string()
            };
            csv_write(
                &mut w,
                &[
                    f,
                    r.df.0.to_string(),
                    r.df.1.to_string(),
                    fmt3(r.p_value),
                    fmt3(r.coef),
                    fmt3(r.ci.0),
                    fmt3(r.ci.1),
                ],
            )?;
        }
    }
    to_string(w)
}

pub fn render_json(report: &Report) -> Result<String> {
    let envelope = JsonEnvelope {
        version: env!("CARGO_PKG_VERSION"),
        command: report.command,
        seed: report.seed,
        config: &report.config,
        result: &report.body,
    };
    let mut s = serde_json::to_string_pretty(&envelope)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Writes the report to `path`, or to standard output when `path` is `None`.
pub fn emit_report(report: &Report, format: OutputFormat, path: Option<&Path>) -> Result<()> {
    let text = match format {
        OutputFormat::Csv => render_csv(report)?,
        OutputFormat::Json => render_json(report)?,
    };
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => std::io::stdout()
            .lock()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}
