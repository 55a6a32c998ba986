use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::EstimatorError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepEstimate {
    pub t: usize,
    pub estimate: f64,
    pub truth: Option<f64>,
    pub abs_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AceReport {
    pub method: String,
    pub seed: Option<u64>,
    pub steps: Vec<StepEstimate>,
}

impl AceReport {
    pub fn new(method: &str) -> Self {
        Self { method: method.to_string(), seed: None, steps: Vec::new() }
    }

    pub fn push(&mut self, t: usize, estimate: f64) {
        self.steps.push(StepEstimate { t, estimate, truth: None, abs_error: None });
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.estimate).collect()
    }

    /// Mean absolute error over steps `t >= from`, if every such step has one.
    pub fn mean_abs_error(&self, from: usize) -> Option<f64> {
        let errs: Option<Vec<f64>> = self.steps.iter().filter(|s| s.t >= from).map(|s| s.abs_error).collect();
        let errs = errs?;
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

/// Attaches `truth[t - 1]` and the absolute error to every step.
pub fn evaluate(report: &AceReport, truth: &[f64]) -> Result<AceReport, EstimatorError> {
    let mut out = report.clone();
    for s in &mut out.steps {
        let Some(&v) = truth.get(s.t.wrapping_sub(1)) else {
            return Err(EstimatorError::Horizon { expected: s.t, got: truth.len() });
        };
        s.truth = Some(v);
        s.abs_error = Some((s.estimate - v).abs());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub t: usize,
    pub method: String,
    pub mean_abs_error: f64,
    /// Population standard deviation across replicates.
    pub std: f64,
    pub reps: usize,
}

/// Mean and standard deviation of the absolute error per (method, step).
/// Methods keep their order of first appearance.
pub fn aggregate(reports: &[AceReport]) -> Result<Vec<AggregateRow>, EstimatorError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    let mut steps_of: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in reports {
        let m = match order.iter().position(|&m| m == r.method) {
            Some(i) => i,
            None => {
                order.push(&r.method);
                order.len() - 1
            }
        };
        let ts: Vec<usize> = r.steps.iter().map(|s| s.t).collect();
        match steps_of.get(r.method.as_str()) {
            Some(prev) if *prev != ts => {
                return Err(EstimatorError::Horizon { expected: prev.len(), got: ts.len() });
            }
            _ => {
                steps_of.insert(&r.method, ts);
            }
        }
        for s in &r.steps {
            let e = s.abs_error.ok_or(EstimatorError::MissingTruth("report has not been evaluated"))?;
            groups.entry((m, s.t)).or_default().push(e);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((m, t), errs)| {
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            AggregateRow { t, method: order[m].to_string(), mean_abs_error: mean, std: var.sqrt(), reps: errs.len() }
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct ReportRow {
    t: usize,
    method: String,
    estimate: f64,
    truth: Option<f64>,
    abs_error: Option<f64>,
}

/// `t,method,estimate,truth,abs_error`; missing truth is an empty cell.
pub fn write_report_csv(reports: &[AceReport], out: impl Write) -> Result<(), EstimatorError> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for s in &r.steps {
            w.serialize(ReportRow {
                t: s.t,
                method: r.method.clone(),
                estimate: s.estimate,
                truth: s.truth,
                abs_error: s.abs_error,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_report_csv`]; consecutive rows with the same method
/// form one report.
pub fn read_report_csv(input: impl Read) -> Result<Vec<AceReport>, EstimatorError> {
    let mut out: Vec<AceReport> = Vec::new();
    for row in csv::Reader::from_reader(input).deserialize() {
        let row: ReportRow = row?;
        if out.last().map_or(true, |r| r.method != row.method) {
            out.push(AceReport::new(&row.method));
        }
        let step = StepEstimate { t: row.t, estimate: row.estimate, truth: row.truth, abs_error: row.abs_error };
        out.last_mut().expect("pushed above").steps.push(step);
    }
    Ok(out)
}

/// `t,method,mean_abs_error,std,reps`.
pub fn write_aggregate_csv(rows: &[AggregateRow], out: impl Write) -> Result<(), EstimatorError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
