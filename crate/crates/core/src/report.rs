//! CSV serialization of run results.
//!
//! Every file starts with one comment line
//! `# sfpe version=<v> seed=<seed> config_hash=<hex>` followed by a header row.
//! Points are written as `x` with coordinates joined by `;`. Floats use the
//! shortest representation that round-trips, so equal results give equal bytes.

use nalgebra::DVector;

use crate::bel::MomentReport;
use crate::error::{Error, Result};
use crate::picard::ValueGradient;
use crate::problem::{ConditionReport, LyapunovReport};
use crate::stats::Estimate;
use crate::verification::{CertificateRow, CrosscheckReport, ResidualReport, StudyAxis, StudyRow};

/// Identifies the run that produced a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
}

impl RunMetadata {
    pub fn line(&self) -> String {
        format!(
            "# sfpe version={} seed={} config_hash={}\n",
            env!("CARGO_PKG_VERSION"),
            self.seed,
            self.config_hash
        )
    }
}

/// A labelled estimate at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    pub t: f64,
    pub x: DVector<f64>,
    pub components: Vec<String>,
    pub estimate: Estimate,
}

impl PointEstimate {
    /// Components named `v, grad_1, ..., grad_d`.
    pub fn from_value_gradient(vg: &ValueGradient) -> Self {
        let d = vg.x.len();
        let mut components = vec!["v".to_string()];
        components.extend((1..=d).map(|i| format!("grad_{i}")));
        Self {
            t: vg.t,
            x: vg.x.clone(),
            components,
            estimate: Estimate {
                mean: vg.vg.iter().copied().collect(),
                stderr: vg.stderr.iter().copied().collect(),
                n_samples: vg.n_samples,
            },
        }
    }
}

pub fn format_point(x: &DVector<f64>) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn table(meta: &RunMetadata, header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Internal(format!("csv: {e}"));
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    let body = w.into_inner().map_err(|e| Error::Internal(format!("csv: {e}")))?;
    let body = String::from_utf8(body).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(meta.line() + &body)
}

/// Columns: `t,x,component,mean,stderr,n_samples`.
pub fn estimates_csv(meta: &RunMetadata, points: &[PointEstimate]) -> Result<String> {
    let mut rows = Vec::new();
    for p in points {
        for (j, name) in p.components.iter().enumerate() {
            rows.push(vec![
                p.t.to_string(),
                format_point(&p.x),
                name.clone(),
                p.estimate.mean[j].to_string(),
                p.estimate.stderr[j].to_string(),
                p.estimate.n_samples.to_string(),
            ]);
        }
    }
    table(meta, &["t", "x", "component", "mean", "stderr", "n_samples"], rows)
}

/// Columns: `check,t,x,residual,stderr,scale,tolerance,pass`.
pub fn residuals_csv(meta: &RunMetadata, reports: &[(&str, &ResidualReport)]) -> Result<String> {
    let mut rows = Vec::new();
    for (name, r) in reports {
        for (j, (t, x)) in r.probes.iter().enumerate() {
            rows.push(vec![
                name.to_string(),
                t.to_string(),
                format_point(x),
                r.residuals[j].to_string(),
                r.stderrs[j].to_string(),
                r.scales[j].to_string(),
                r.tolerance.to_string(),
                r.pass[j].to_string(),
            ]);
        }
    }
    table(
        meta,
        &["check", "t", "x", "residual", "stderr", "scale", "tolerance", "pass"],
        rows,
    )
}

/// Columns: `t,x,component,bel,bel_stderr,fd,fd_stderr,gap,gap_stderr,tolerance,pass`.
pub fn crosscheck_csv(meta: &RunMetadata, reports: &[CrosscheckReport]) -> Result<String> {
    let mut rows = Vec::new();
    for r in reports {
        for i in 0..r.bel.mean.len() {
            rows.push(vec![
                r.t.to_string(),
                format_point(&r.x),
                format!("grad_{}", i + 1),
                r.bel.mean[i].to_string(),
                r.bel.stderr[i].to_string(),
                r.finite_difference.mean[i].to_string(),
                r.finite_difference.stderr[i].to_string(),
                r.gap.mean[i].to_string(),
                r.gap.stderr[i].to_string(),
                r.tolerance[i].to_string(),
                (r.gap.mean[i].abs() <= r.tolerance[i]).to_string(),
            ]);
        }
    }
    let header = [
        "t",
        "x",
        "component",
        "bel",
        "bel_stderr",
        "fd",
        "fd_stderr",
        "gap",
        "gap_stderr",
        "tolerance",
        "pass",
    ];
    table(meta, &header, rows)
}

/// Columns: `axis,parameter,component,estimate,stderr,value_error,gradient_error`.
pub fn convergence_csv(meta: &RunMetadata, axis: StudyAxis, rows_in: &[StudyRow]) -> Result<String> {
    let mut rows = Vec::new();
    for r in rows_in {
        for j in 0..r.estimate.len() {
            let component = if j == 0 { "v".to_string() } else { format!("grad_{j}") };
            rows.push(vec![
                axis.name().to_string(),
                r.parameter.to_string(),
                component,
                r.estimate[j].to_string(),
                r.stderr[j].to_string(),
                opt(r.value_error),
                opt(r.gradient_error),
            ]);
        }
    }
    let header = [
        "axis",
        "parameter",
        "component",
        "estimate",
        "stderr",
        "value_error",
        "gradient_error",
    ];
    table(meta, &header, rows)
}

/// Columns: `q,rho,s,mean,stderr,bound,pass`.
pub fn certificates_csv(meta: &RunMetadata, q: f64, rho: f64, rows_in: &[CertificateRow]) -> Result<String> {
    let rows = rows_in
        .iter()
        .map(|r| {
            vec![
                q.to_string(),
                rho.to_string(),
                r.s.to_string(),
                r.mean.to_string(),
                r.stderr.to_string(),
                r.bound.to_string(),
                r.pass.to_string(),
            ]
        })
        .collect();
    table(meta, &["q", "rho", "s", "mean", "stderr", "bound", "pass"], rows)
}

/// Columns: `t,s,n_paths,mean_norm,second_moment,second_moment_stderr,bound,pass`.
pub fn weight_moments_csv(meta: &RunMetadata, reports: &[MomentReport]) -> Result<String> {
    let rows = reports
        .iter()
        .map(|r| {
            vec![
                r.t.to_string(),
                r.s.to_string(),
                r.n_paths.to_string(),
                r.mean_norm.to_string(),
                r.second_moment.to_string(),
                r.second_moment_stderr.to_string(),
                r.bound.to_string(),
                r.pass.to_string(),
            ]
        })
        .collect();
    let header = [
        "t",
        "s",
        "n_paths",
        "mean_norm",
        "second_moment",
        "second_moment_stderr",
        "bound",
        "pass",
    ];
    table(meta, &header, rows)
}

/// Columns: `condition,statistic,threshold,n_probes,pass`.
///
/// A Lyapunov report contributes one row whose statistic is the smallest
/// passing rate on its probes and whose threshold is the rate checked.
pub fn conditions_csv(meta: &RunMetadata, reports: &[ConditionReport], lyapunov: &[LyapunovReport]) -> Result<String> {
    let mut rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.condition.to_string(),
                r.statistic.to_string(),
                r.threshold.to_string(),
                r.n_probes.to_string(),
                r.pass.to_string(),
            ]
        })
        .collect();
    for l in lyapunov {
        rows.push(vec![
            format!("lyapunov_q{}", l.q),
            l.implied_rho.to_string(),
            l.rho.to_string(),
            l.n_probes.to_string(),
            l.pass.to_string(),
        ]);
    }
    table(meta, &["condition", "statistic", "threshold", "n_probes", "pass"], rows)
}

/// Columns: `stage,seconds`. Wall times vary between runs and carry no metadata line.
pub fn timings_csv(stages: &[(String, f64)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Internal(format!("csv: {e}"));
    w.write_record(["stage", "seconds"]).map_err(io)?;
    for (stage, secs) in stages {
        w.write_record([stage.as_str(), &secs.to_string()]).map_err(io)?;
    }
    let body = w.into_inner().map_err(|e| Error::Internal(format!("csv: {e}")))?;
    String::from_utf8(body).map_err(|e| Error::Internal(e.to_string()))
}
