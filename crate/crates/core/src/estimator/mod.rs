//! Per-step average causal effect estimation: the conditional-instrument
//! ratio and two-stage forms, a naive regression baseline, and the
//! absolute-error evaluation harness.
//!
//! Steps are numbered from 1 in reports. Step `t` estimates the effect of
//! the treatment at `t` on the outcome that follows it; the first step has
//! no history and is never reported.

mod ols;
mod report;

pub use ols::{fitted, least_squares, partial_coefficient, Column, RegressionDesign};
pub use report::{
    aggregate, evaluate, read_report_csv, write_aggregate_csv, write_report_csv, AceReport, AggregateRow,
    StepEstimate,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthdata::PanelDataset;

pub const DEFAULT_WEAK_INSTRUMENT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("collinear design: column `{column}` is a linear combination of earlier columns")]
    Collinear { column: String },
    #[error("{rows} rows cannot support {columns} columns plus two")]
    TooFewRows { rows: usize, columns: usize },
    #[error("weak instrument at step {t}: first-stage coefficient {denominator:e}")]
    WeakInstrument { t: usize, denominator: f64 },
    #[error("at step {t}: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<EstimatorError>,
    },
    #[error("horizon mismatch: expected {expected} steps, got {got}")]
    Horizon { expected: usize, got: usize },
    #[error("{0}")]
    Shape(String),
    #[error("ground truth missing: {0}")]
    MissingTruth(&'static str),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EstimatorError {
    fn at(self, t: usize) -> Self {
        match self {
            e @ (EstimatorError::WeakInstrument { .. } | EstimatorError::AtStep { .. }) => e,
            e => EstimatorError::AtStep { t, source: Box::new(e) },
        }
    }
}

/// Aligned cross-sectional inputs for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInputs {
    pub t: usize,
    pub instruments: Vec<Column>,
    pub treatment: Vec<f64>,
    pub outcome: Vec<f64>,
    pub controls: Vec<Column>,
}

/// Ratio of the instrument's partial coefficients on outcome and treatment.
/// Needs exactly one instrument column.
pub fn ace_civ_ratio(method: &str, steps: &[StepInputs], tolerance: f64) -> Result<AceReport, EstimatorError> {
    let mut report = AceReport::new(method);
    for step in steps {
        let [instrument] = step.instruments.as_slice() else {
            return Err(EstimatorError::Shape(format!(
                "ratio form needs one instrument column, got {}",
                step.instruments.len()
            )));
        };
        let first = RegressionDesign::new(step.treatment.clone(), instrument.clone(), step.controls.clone());
        let denominator = match partial_coefficient(&first) {
            Ok(v) => v,
            Err(EstimatorError::Collinear { column }) if column == instrument.name => 0.0,
            Err(e) => return Err(e.at(step.t)),
        };
        if denominator.abs() < tolerance {
            return Err(EstimatorError::WeakInstrument { t: step.t, denominator });
        }
        let reduced = RegressionDesign { response: step.outcome.clone(), ..first };
        let numerator = partial_coefficient(&reduced).map_err(|e| e.at(step.t))?;
        report.push(step.t, numerator / denominator);
    }
    Ok(report)
}

/// Two-stage least squares: treatment on instruments and controls, then the
/// outcome on the fitted treatment and the same controls.
pub fn ace_two_stage(method: &str, steps: &[StepInputs], tolerance: f64) -> Result<AceReport, EstimatorError> {
    let mut report = AceReport::new(method);
    for step in steps {
        let n = step.treatment.len();
        let ones = Column::new("intercept", vec![1.0; n]);
        let mut first: Vec<&Column> = std::iter::once(&ones).chain(&step.controls).collect();
        let k = first.len();
        first.extend(&step.instruments);
        let beta = match least_squares(&first, &step.treatment) {
            Ok(b) => b,
            Err(EstimatorError::Collinear { column }) if step.instruments.iter().any(|c| c.name == column) => {
                return Err(EstimatorError::WeakInstrument { t: step.t, denominator: 0.0 })
            }
            Err(e) => return Err(e.at(step.t)),
        };
        let strength = beta[k..].iter().map(|b| b * b).sum::<f64>().sqrt();
        if strength < tolerance {
            return Err(EstimatorError::WeakInstrument { t: step.t, denominator: strength });
        }
        let w_hat = Column::new("w_hat", fitted(&first, &beta));
        first.truncate(k);
        first.push(&w_hat);
        let second = least_squares(&first, &step.outcome).map_err(|e| e.at(step.t))?;
        report.push(step.t, second[k]);
    }
    Ok(report)
}

/// Treatment coefficient in an OLS of the outcome on treatment, current
/// covariates, previous treatment and previous outcome.
pub fn ace_naive(d: &PanelDataset) -> Result<AceReport, EstimatorError> {
    let mut report = AceReport::new("naive");
    for k in 1..d.horizon {
        let mut controls = x_columns(d, k);
        controls.push(Column::new(format!("w[{k}]"), column(&d.w, d.horizon, k - 1)));
        controls.push(Column::new(format!("y[{k}]"), column(&d.y, d.horizon, k - 1)));
        let design = RegressionDesign::new(
            column(&d.y, d.horizon, k),
            Column::new(format!("w[{}]", k + 1), column(&d.w, d.horizon, k)),
            controls,
        );
        let est = partial_coefficient(&design).map_err(|e| e.at(k + 1))?;
        report.push(k + 1, est);
    }
    Ok(report)
}

fn column(values: &[f64], horizon: usize, k: usize) -> Vec<f64> {
    PanelDataset::column(values, horizon, k)
}

/// Channel `j` of a `[n, T, dim]` array at step `k`.
fn channel(values: &[f64], horizon: usize, dim: usize, k: usize, j: usize) -> Vec<f64> {
    values.iter().skip(k * dim + j).step_by(horizon * dim).copied().collect()
}

fn x_columns(d: &PanelDataset, k: usize) -> Vec<Column> {
    (0..d.dim_x)
        .map(|j| Column::new(format!("x{j}[{}]", k + 1), channel(&d.x, d.horizon, d.dim_x, k, j)))
        .collect()
}

/// Treatments and outcomes strictly before step `k` (zero-based).
fn treatment_outcome_history(d: &PanelDataset, k: usize) -> Vec<Column> {
    let mut out = Vec::new();
    for l in 0..k {
        out.push(Column::new(format!("w[{}]", l + 1), column(&d.w, d.horizon, l)));
        out.push(Column::new(format!("y[{}]", l + 2), column(&d.y, d.horizon, l)));
    }
    out
}

/// Steps fed with the generator's true instrument and conditioning set:
/// instrument `S_t`; controls `Z_1..Z_t`, `S_1..S_{t-1}` and the treatment
/// and outcome history.
pub fn oracle_steps(d: &PanelDataset) -> Result<Vec<StepInputs>, EstimatorError> {
    let s = d.s_true.as_ref().ok_or(EstimatorError::MissingTruth("s_true"))?;
    let (dz, z) = d.z_true.as_ref().ok_or(EstimatorError::MissingTruth("z_true"))?;
    let mut steps = Vec::new();
    for k in 1..d.horizon {
        let mut controls = Vec::new();
        for l in 0..=k {
            for j in 0..*dz {
                controls.push(Column::new(format!("z{j}[{}]", l + 1), channel(z, d.horizon, *dz, l, j)));
            }
        }
        for l in 0..k {
            controls.push(Column::new(format!("s[{}]", l + 1), column(s, d.horizon, l)));
        }
        controls.extend(treatment_outcome_history(d, k));
        steps.push(StepInputs {
            t: k + 1,
            instruments: vec![Column::new(format!("s[{}]", k + 1), column(s, d.horizon, k))],
            treatment: column(&d.w, d.horizon, k),
            outcome: column(&d.y, d.horizon, k),
            controls,
        });
    }
    Ok(steps)
}

/// Which observed quantities accompany the learned conditioning set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSet {
    /// Covariates, treatments and outcomes strictly before the step.
    #[default]
    LaggedHistory,
    /// The recurrent hidden state at the step.
    HiddenState,
}

/// Learned per-(sample, step) representations as flat `[n, T, dim]` arrays.
#[derive(Clone, Copy, Debug)]
pub struct Learned<'a> {
    pub s: &'a [f64],
    pub dim_s: usize,
    pub z: &'a [f64],
    pub dim_z: usize,
    pub h: &'a [f64],
    pub dim_h: usize,
}

/// Steps fed with learned representations: instrument(s) `S_t`; controls
/// `Z_t` plus the chosen [`ControlSet`].
pub fn learned_steps(d: &PanelDataset, r: Learned<'_>, controls: ControlSet) -> Result<Vec<StepInputs>, EstimatorError> {
    let cells = d.n_samples * d.horizon;
    if r.s.len() != cells * r.dim_s || r.z.len() != cells * r.dim_z || r.h.len() != cells * r.dim_h {
        return Err(EstimatorError::Shape("representation arrays do not match the panel".into()));
    }
    let mut steps = Vec::new();
    for k in 1..d.horizon {
        let mut cols: Vec<Column> = (0..r.dim_z)
            .map(|j| Column::new(format!("z_hat{j}[{}]", k + 1), channel(r.z, d.horizon, r.dim_z, k, j)))
            .collect();
        match controls {
            ControlSet::LaggedHistory => {
                for l in 0..k {
                    cols.extend(x_columns(d, l));
                }
                cols.extend(treatment_outcome_history(d, k));
            }
            ControlSet::HiddenState => {
                cols.extend((0..r.dim_h).map(|j| {
                    Column::new(format!("h{j}[{}]", k + 1), channel(r.h, d.horizon, r.dim_h, k, j))
                }));
            }
        }
        steps.push(StepInputs {
            t: k + 1,
            instruments: (0..r.dim_s)
                .map(|j| Column::new(format!("s_hat{j}[{}]", k + 1), channel(r.s, d.horizon, r.dim_s, k, j)))
                .collect(),
            treatment: column(&d.w, d.horizon, k),
            outcome: column(&d.y, d.horizon, k),
            controls: cols,
        });
    }
    Ok(steps)
}

/// Ratio form for a single instrument, two-stage otherwise.
pub fn ace_civ(method: &str, steps: &[StepInputs], tolerance: f64) -> Result<AceReport, EstimatorError> {
    if steps.iter().all(|s| s.instruments.len() == 1) {
        ace_civ_ratio(method, steps, tolerance)
    } else {
        ace_two_stage(method, steps, tolerance)
    }
}
