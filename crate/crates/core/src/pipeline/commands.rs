use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{echo_config, sha256_hex, Method, PipelineError, RunConfig, RunLayout};
use crate::civgraph::{check_civ, theorem_conditioning, CivVerdict, FullTimeDag, TimedNode};
use crate::estimator::{
    ace_civ, ace_naive, aggregate, evaluate as join_truth, learned_steps, oracle_steps, write_aggregate_csv,
    write_report_csv, AceReport, AggregateRow, EstimatorError,
};
use crate::seqvae::{extract_representations, load_checkpoint, train as fit, write_checkpoint, TrainConfig};
use crate::synthdata::{generate_dataset, read_panel, write_panel_to, PanelDataset};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateEntry {
    pub index: usize,
    pub seed: u64,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    pub config_hash: String,
    pub replicates: Vec<ReplicateEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub index: usize,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub checkpoint_sha256: String,
}

/// A replicate whose estimate was abandoned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub replicate: usize,
    pub method: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationSummary {
    /// Evaluated reports, replicate-major in the configured method order.
    pub reports: Vec<AceReport>,
    pub aggregate: Vec<AggregateRow>,
    pub failures: Vec<Failure>,
}

impl EvaluationSummary {
    /// Mean over replicates of each method's mean error over `t >= from`.
    pub fn mean_error(&self, method: &str, from: usize) -> Option<f64> {
        let errs: Vec<f64> =
            self.reports.iter().filter(|r| r.method == method).filter_map(|r| r.mean_abs_error(from)).collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(PipelineError::io(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(PipelineError::io(path))
}

/// Runs `f` for `0..n` on at most `jobs` threads; results keep index order.
fn fan_out<T, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>, PipelineError>
where
    T: Send,
    F: Fn(usize) -> Result<T, PipelineError> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|k| f(k).map_err(|e| PipelineError::Replicate { index: k, source: Box::new(e) }))
            .collect()
    })
}

/// Writes one panel per replicate and the manifest.
pub fn generate(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    echo_config(cfg, out, "generate")?;
    let layout = RunLayout::new(out, &cfg.paths);
    create_dir(&layout.data)?;
    let replicates = fan_out(jobs, cfg.replicates, |k| {
        let gen = cfg.replicate_data(k);
        let d = generate_dataset(&gen)?;
        let mut bytes = Vec::new();
        write_panel_to(&d, &mut bytes)?;
        let file = RunLayout::panel_name(k);
        write_file(&layout.data.join(&file), &bytes)?;
        Ok(ReplicateEntry { index: k, seed: gen.seed, file, sha256: sha256_hex(&bytes) })
    })?;
    let manifest = Manifest { master_seed: cfg.seed, config_hash: cfg.data_hash(), replicates };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&layout.manifest(), text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(layout: &RunLayout) -> Result<Manifest, PipelineError> {
    let path = layout.manifest();
    let text = fs::read_to_string(&path).map_err(PipelineError::io(&path))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Input { path: path.clone(), message: e.to_string() })?;
    if m.replicates.iter().enumerate().any(|(k, r)| r.index != k) {
        return Err(PipelineError::Input { path, message: "replicate indices are not 0, 1, 2, ...".into() });
    }
    Ok(m)
}

fn load_panel(layout: &RunLayout, entry: &ReplicateEntry) -> Result<PanelDataset, PipelineError> {
    let path = layout.data.join(&entry.file);
    if !path.exists() {
        return Err(PipelineError::Input { path, message: "panel file is missing".into() });
    }
    Ok(read_panel(&path)?)
}

/// Trains one model per replicate listed in the manifest.
pub fn train(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<TrainSummary>, PipelineError> {
    cfg.validate()?;
    echo_config(cfg, out, "train")?;
    let layout = RunLayout::new(out, &cfg.paths);
    let manifest = read_manifest(&layout)?;
    create_dir(&layout.models)?;
    fan_out(jobs, manifest.replicates.len(), |k| {
        let entry = &manifest.replicates[k];
        let d = load_panel(&layout, entry)?;
        let tc = TrainConfig { seed: entry.seed, ..cfg.training.clone() };
        let outcome = fit(&d, &cfg.model, &tc)?;
        let mut bytes = Vec::new();
        write_checkpoint(&outcome.model, &mut bytes)?;
        write_file(&layout.checkpoint(k), &bytes)?;
        let mut trace = csv::Writer::from_writer(Vec::new());
        for row in &outcome.trace {
            trace.serialize(row)?;
        }
        let trace = trace.into_inner().map_err(|e| PipelineError::Io {
            path: layout.loss_trace(k),
            source: std::io::Error::other(e.to_string()),
        })?;
        write_file(&layout.loss_trace(k), &trace)?;
        Ok(TrainSummary {
            index: k,
            seed: entry.seed,
            epochs: outcome.trace.len(),
            final_loss: outcome.trace.last().map_or(f64::NAN, |e| e.total),
            checkpoint_sha256: sha256_hex(&bytes),
        })
    })
}

fn run_method(
    cfg: &RunConfig,
    layout: &RunLayout,
    k: usize,
    d: &PanelDataset,
    method: Method,
) -> Result<AceReport, PipelineError> {
    let tol = cfg.estimation.weak_instrument_tolerance;
    let report = match method {
        Method::Naive => ace_naive(d)?,
        Method::Oracle => ace_civ(method.label(), &oracle_steps(d)?, tol)?,
        Method::Tdciv => {
            let path = layout.checkpoint(k);
            if !path.exists() {
                return Err(PipelineError::Input { path, message: "missing checkpoint; run `train` first".into() });
            }
            let model = load_checkpoint(&path)?;
            let latents = extract_representations(&model, d, cfg.estimation.extract)?;
            let steps = learned_steps(d, latents.learned(), cfg.estimation.controls)?;
            ace_civ(method.label(), &steps, tol)?
        }
    };
    Ok(report)
}

fn weak_failure(e: &PipelineError, replicate: usize, method: Method) -> Option<Failure> {
    match e {
        PipelineError::Estimator(err @ EstimatorError::WeakInstrument { .. }) => {
            Some(Failure { replicate, method: method.label().to_string(), message: err.to_string() })
        }
        _ => None,
    }
}

fn write_reports(path: &Path, reports: &[AceReport]) -> Result<(), PipelineError> {
    let mut bytes = Vec::new();
    write_report_csv(reports, &mut bytes)?;
    write_file(path, &bytes)
}

fn write_failures(path: &Path, failures: &[Failure]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["replicate", "method", "message"])?;
    for f in failures {
        w.write_record([f.replicate.to_string(), f.method.clone(), f.message.clone()])?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    write_file(path, &bytes)
}

/// Per-replicate estimates from the trained models, or from the true
/// latents when `oracle` is set. Weak-instrument replicates are reported as
/// failures and skipped.
pub fn estimate(
    cfg: &RunConfig,
    out: &Path,
    jobs: usize,
    oracle: bool,
) -> Result<(Vec<AceReport>, Vec<Failure>), PipelineError> {
    cfg.validate()?;
    echo_config(cfg, out, "estimate")?;
    let layout = RunLayout::new(out, &cfg.paths);
    let manifest = read_manifest(&layout)?;
    let method = if oracle { Method::Oracle } else { Method::Tdciv };
    create_dir(&out.join("estimates"))?;
    let results = fan_out(jobs, manifest.replicates.len(), |k| {
        let entry = &manifest.replicates[k];
        let d = load_panel(&layout, entry)?;
        match run_method(cfg, &layout, k, &d, method) {
            Ok(mut r) => {
                r.seed = Some(entry.seed);
                write_reports(&layout.estimates(k, method), std::slice::from_ref(&r))?;
                Ok(Ok(r))
            }
            Err(e) => weak_failure(&e, k, method).map(Err).ok_or(e),
        }
    })?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(r) => reports.push(r),
            Err(f) => failures.push(f),
        }
    }
    write_failures(&out.join("estimates").join("failures.csv"), &failures)?;
    Ok((reports, failures))
}

/// Runs every configured method on every replicate, joins the estimates
/// with the true effects and aggregates the absolute errors per step.
pub fn evaluate(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<EvaluationSummary, PipelineError> {
    cfg.validate()?;
    echo_config(cfg, out, "evaluate")?;
    let layout = RunLayout::new(out, &cfg.paths);
    let manifest = read_manifest(&layout)?;
    let dir = layout.evaluation();
    create_dir(&dir)?;
    let per_replicate = fan_out(jobs, manifest.replicates.len(), |k| {
        let entry = &manifest.replicates[k];
        let d = load_panel(&layout, entry)?;
        let truth = d.true_ace.clone().ok_or(EstimatorError::MissingTruth("true_ace"))?;
        let mut reports = Vec::new();
        let mut failures = Vec::new();
        for &method in &cfg.estimation.methods {
            match run_method(cfg, &layout, k, &d, method) {
                Ok(r) => {
                    let mut r = join_truth(&r, &truth)?;
                    r.seed = Some(entry.seed);
                    reports.push(r);
                }
                Err(e) => failures.push(weak_failure(&e, k, method).ok_or(e)?),
            }
        }
        write_reports(&dir.join(format!("replicate_{k:03}.csv")), &reports)?;
        Ok((reports, failures))
    })?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_replicate {
        reports.extend(r);
        failures.extend(f);
    }
    let rows = aggregate(&reports)?;
    let mut bytes = Vec::new();
    write_aggregate_csv(&rows, &mut bytes)?;
    write_file(&dir.join("aggregate.csv"), &bytes)?;
    write_failures(&dir.join("failures.csv"), &failures)?;
    Ok(EvaluationSummary { reports, aggregate: rows, failures })
}

/// Inputs of a conditional-instrument check. Unset roles default to
/// `S[t]`, `W[t]` and `Y[t+1]`; unset conditioning defaults to the history
/// set for step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CivCheckRequest {
    pub step: u32,
    pub instrument: Option<TimedNode>,
    pub treatment: Option<TimedNode>,
    pub outcome: Option<TimedNode>,
    pub given: Option<Vec<TimedNode>>,
    /// Removed from the conditioning set after defaults are applied.
    pub without: Vec<TimedNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CivCheckResult {
    pub instrument: TimedNode,
    pub treatment: TimedNode,
    pub outcome: TimedNode,
    pub given: Vec<TimedNode>,
    pub verdict: CivVerdict,
}

pub fn civ_check(g: &FullTimeDag, req: &CivCheckRequest) -> Result<CivCheckResult, PipelineError> {
    let t = req.step;
    let instrument = req.instrument.clone().unwrap_or_else(|| TimedNode::new("S", t));
    let treatment = req.treatment.clone().unwrap_or_else(|| TimedNode::new("W", t));
    let outcome = req.outcome.clone().unwrap_or_else(|| TimedNode::new("Y", t + 1));
    let mut given = req.given.clone().unwrap_or_else(|| theorem_conditioning(t));
    for node in &req.without {
        if !given.contains(node) {
            return Err(PipelineError::Config(format!("{node} is not in the conditioning set")));
        }
        given.retain(|x| x != node);
    }
    let verdict = check_civ(g, &instrument, &treatment, &outcome, &given)?;
    Ok(CivCheckResult { instrument, treatment, outcome, given, verdict })
}
