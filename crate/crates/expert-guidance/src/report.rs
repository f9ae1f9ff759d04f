//! CSV emission with fixed, documented headers. Floats print in Rust's
//! shortest round-trip form, so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use crate::error::Result;
use crate::eval::{MetricReport, SweepRow, TrajectoryReport};
use crate::guidance::SamplerTrace;

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

fn push_vec(line: &mut String, v: &DVector<f64>) {
    for x in v.iter() {
        let _ = write!(line, ",{x}");
    }
}

/// `sample,obs_0,...,obs_{d-1}`
pub fn write_samples(path: &Path, samples: &[DVector<f64>]) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.len());
    let mut out = String::from("sample");
    for i in 0..d {
        let _ = write!(out, ",obs_{i}");
    }
    out.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let _ = write!(out, "{i}");
        push_vec(&mut out, s);
        out.push('\n');
    }
    write_file(path, &out)
}

/// One row per (chain, step):
/// `chain,step,t,z_*,x0_*,obs_*,loss,grad_norm,clipped_fraction,clipped_max_abs,applied_weight`
pub fn write_traces(path: &Path, traces: &[SamplerTrace]) -> Result<()> {
    let (d, d_obs) = traces
        .first()
        .and_then(|t| t.steps.first())
        .map_or((0, 0), |s| (s.z.len(), s.obs.len()));
    let mut out = String::from("chain,step,t");
    for i in 0..d {
        let _ = write!(out, ",z_{i}");
    }
    for i in 0..d {
        let _ = write!(out, ",x0_{i}");
    }
    for i in 0..d_obs {
        let _ = write!(out, ",obs_{i}");
    }
    out.push_str(",loss,grad_norm,clipped_fraction,clipped_max_abs,applied_weight\n");
    for (chain, trace) in traces.iter().enumerate() {
        for s in &trace.steps {
            let _ = write!(out, "{chain},{},{}", s.step_index, s.t);
            push_vec(&mut out, &s.z);
            push_vec(&mut out, &s.x0_hat);
            push_vec(&mut out, &s.obs);
            let _ = writeln!(
                out,
                ",{},{},{},{},{}",
                s.loss, s.grad_norm, s.clipped_fraction, s.clipped_max_abs, s.applied_weight
            );
        }
    }
    write_file(path, &out)
}

/// `expert,metric,quality_nll,sw_to_reference,penalty_count,n_samples,fingerprint`
pub fn write_metrics(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut out =
        String::from("expert,metric,quality_nll,sw_to_reference,penalty_count,n_samples,fingerprint\n");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{}",
            r.metric, r.quality_nll, r.sw_to_reference, r.penalty_count, r.n_samples, r.fingerprint
        );
    }
    write_file(path, &out)
}

/// `step,t,backend,sw,cosine` plus a trailing baseline comment row.
pub fn write_trajectory(path: &Path, report: &TrajectoryReport) -> Result<()> {
    let mut out = String::from("step,t,backend,sw,cosine\n");
    for r in &report.rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.step_index, r.t, r.backend, r.sw, r.cosine);
    }
    let _ = writeln!(out, "# baseline_sw,{}", report.baseline_sw);
    write_file(path, &out)
}

/// `axis,value,metric,quality_nll,sw_to_reference,penalty_count,n_samples,fingerprint`
pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from(
        "axis,value,metric,quality_nll,sw_to_reference,penalty_count,n_samples,fingerprint\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.report.metric,
            r.report.quality_nll,
            r.report.sw_to_reference,
            r.report.penalty_count,
            r.report.n_samples,
            r.report.fingerprint
        );
    }
    write_file(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_csv_layout() {
        let dir = std::env::temp_dir().join("eg_report_test");
        let path = dir.join("samples.csv");
        let samples = vec![
            DVector::from_vec(vec![1.0, -0.5]),
            DVector::from_vec(vec![0.25, 2.0]),
        ];
        write_samples(&path, &samples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "sample,obs_0,obs_1");
        assert_eq!(lines.next().unwrap(), "0,1,-0.5");
        assert_eq!(lines.next().unwrap(), "1,0.25,2");
        std::fs::remove_dir_all(&dir).ok();
    }
}
