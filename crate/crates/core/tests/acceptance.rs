//! End-to-end acceptance checks. Every criterion runs in sequence inside one
//! test so the timing limits are measured without competing threads, and
//! each prints a PASS or FAIL line to stderr as it finishes.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tdciv::civgraph::{build_paper_dag, check_civ, theorem_conditioning, CivCondition, TimedNode};
use tdciv::diffmath::{grad_check, Tensor};
use tdciv::estimator::{
    ace_civ, ace_civ_ratio, ace_naive, ace_two_stage, evaluate, learned_steps, oracle_steps, ControlSet,
    DEFAULT_WEAK_INSTRUMENT_TOLERANCE,
};
use tdciv::pipeline::{self, sha256_hex, RunConfig};
use tdciv::seqvae::{
    extract_representations, fit_standardizer, gaussian_log_density, kl_gaussian, loss_terms, step_batches,
    toy_loss, train, Dims, ExtractMode, GaussianParams, ModelConfig, Noise, TdcivModel, TrainConfig,
};
use tdciv::synthdata::{generate_dataset, GenConfig};

use common::{compose, composition_points, oracle_path_open, PathOracle, COMPOSITION_OPS};

// Criterion 1
const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_COMPOSITIONS: usize = 100;
const GRAD_PERTURBATION: f64 = 1e-5;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(60);
// Criterion 2
const KL_PAIRS: usize = 20;
const KL_SAMPLES: usize = 1_000_000;
const KL_STANDARD_ERRORS: f64 = 3.0;
const KL_REFERENCE: f64 = 0.8068528;
const KL_REFERENCE_TOLERANCE: f64 = 1e-6;
// Criterion 3
const GRAPH_HORIZON: u32 = 4;
const GRAPH_TIME_LIMIT: Duration = Duration::from_secs(10);
// Criterion 4
const ORACLE_SEEDS: u64 = 5;
const ORACLE_MAX_ERROR: f64 = 0.05;
const ORACLE_FORM_AGREEMENT: f64 = 1e-8;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(120);
// Criteria 5 and 6
const DEBIAS_SEEDS: [u64; 3] = [0, 1, 2];
const DEBIAS_FROM_STEP: usize = 5;
const NAIVE_MIN_ERROR: f64 = 0.08;
const TDCIV_MAX_ERROR: f64 = 0.15;
const DEBIAS_TIME_LIMIT: Duration = Duration::from_secs(45 * 60);
const TDCIV_MAX_DEGRADATION: f64 = 2.0;
const NAIVE_MIN_DEGRADATION: f64 = 3.0;
// Criterion 7
const SANITY_EPOCHS: usize = 50;
const SANITY_WINDOW: usize = 10;
const SANITY_MIN_FRACTION: f64 = 0.95;

const WEAK: f64 = DEFAULT_WEAK_INSTRUMENT_TOLERANCE;

/// Written straight to stderr so the line shows even when output is captured.
fn report(criterion: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {criterion}: {verdict} {detail}");
}

fn progress(line: &str) {
    let _ = writeln!(std::io::stderr(), "    {line}");
}

fn gradient_correctness() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_COMPOSITIONS {
        let len = rng.gen_range(1..9);
        let ops: Vec<u8> = (0..len).map(|_| rng.gen_range(0..COMPOSITION_OPS)).collect();
        let reduce = rng.gen_range(0..3u8);
        let points = composition_points(rng.gen());
        let f = |tape: &mut tdciv::diffmath::Tape, v: &[tdciv::diffmath::Var]| compose(tape, v, &ops, reduce);
        match grad_check(f, &points, GRAD_PERTURBATION) {
            Ok(r) => worst = worst.max(r.max_relative_error),
            Err(e) => return (false, format!("composition {ops:?}: {e}")),
        }
    }

    let data = GenConfig { n_samples: 2, horizon: 2, dim_x: 2, proxy_injection: false, seed: 3, ..GenConfig::default() };
    let d = generate_dataset(&data).unwrap();
    let config = ModelConfig { hidden: 6, mlp_hidden: 6, init_sd: 0.5, ..ModelConfig::default() };
    let dims = Dims::resolve(&config, d.dim_x, 2);
    let std = fit_standardizer(&d, config.outcome).unwrap();
    let model = TdcivModel::init(config, dims, std, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let batch = step_batches(&d, &model.standardizer).unwrap();
    let mut nrng = ChaCha8Rng::seed_from_u64(5);
    let mut normal = |c: usize| Tensor::from_fn(2, c, |_, _| rand_distr::StandardNormal.sample(&mut nrng));
    let eps = (0..2).map(|_| (normal(model.dims.s), normal(model.dims.z))).collect();
    let noise = Noise { eps: Some(eps), masks: None };
    let toy = match grad_check(toy_loss(&model.dims, &model.config, &batch, &noise), &model.params, GRAD_PERTURBATION) {
        Ok(r) => r,
        Err(e) => return (false, format!("toy loss: {e}")),
    };
    worst = worst.max(toy.max_relative_error);
    let elapsed = start.elapsed();
    let pass = worst <= GRAD_TOLERANCE && elapsed <= GRAD_TIME_LIMIT && toy.checked > 0;
    (
        pass,
        format!(
            "max relative error {worst:.2e} over {GRAD_COMPOSITIONS} compositions and {} toy-loss coordinates \
             (limit {GRAD_TOLERANCE:e}), {:.1}s",
            toy.checked,
            elapsed.as_secs_f64()
        ),
    )
}

fn kl_correctness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_z: f64 = 0.0;
    for _ in 0..KL_PAIRS {
        let dim = rng.gen_range(1..4);
        let draw = |dim: usize, rng: &mut ChaCha8Rng| {
            let mean = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let lv = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            GaussianParams::new(mean, lv).unwrap()
        };
        let q = draw(dim, &mut rng);
        let p = draw(dim, &mut rng);
        let closed = kl_gaussian(&q, &p).unwrap();
        let samplers: Vec<Normal<f64>> =
            (0..dim).map(|j| Normal::new(q.mean[j], (0.5 * q.log_variance[j]).exp()).unwrap()).collect();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..KL_SAMPLES {
            let mut v = 0.0;
            for (j, s) in samplers.iter().enumerate() {
                let x = s.sample(&mut rng);
                v += gaussian_log_density(x, q.mean[j], q.log_variance[j].exp())
                    - gaussian_log_density(x, p.mean[j], p.log_variance[j].exp());
            }
            sum += v;
            sum_sq += v * v;
        }
        let n = KL_SAMPLES as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) * n / (n - 1.0) / n).sqrt();
        worst_z = worst_z.max((mean - closed).abs() / se);
    }
    let unit = |v: f64| GaussianParams::new(vec![0.0], vec![v.ln()]).unwrap();
    let reference = kl_gaussian(&unit(4.0), &unit(1.0)).unwrap();
    let pass = worst_z <= KL_STANDARD_ERRORS && (reference - KL_REFERENCE).abs() <= KL_REFERENCE_TOLERANCE;
    (pass, format!("largest deviation {worst_z:.2} standard errors over {KL_PAIRS} pairs; KL(N(0,4)||N(0,1)) = {reference:.7}"))
}

fn theorem_check() -> (bool, String) {
    let start = Instant::now();
    let g = build_paper_dag(GRAPH_HORIZON, true).unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for t in 2..GRAPH_HORIZON {
        let (s, w, y) = (TimedNode::new("S", t), TimedNode::new("W", t), TimedNode::new("Y", t + 1));
        let given = theorem_conditioning(t);
        let v = check_civ(&g, &s, &w, &y, &given).unwrap();
        let oracle = PathOracle::civ(&g, &s, &w, &y, &given);
        pass &= v.holds() && oracle == (true, true, true);

        let dropped: Vec<TimedNode> = given.iter().filter(|n| **n != TimedNode::new("Z", t)).cloned().collect();
        let v2 = check_civ(&g, &s, &w, &y, &dropped).unwrap();
        let oracle2 = PathOracle::civ(&g, &s, &w, &y, &dropped);
        let witness_ok = v2.witness.as_ref().is_some_and(|wit| {
            wit.condition == CivCondition::Exclusion
                && wit.path.first() == Some(&s)
                && wit.path.last() == Some(&y)
                && oracle_path_open(&g.remove_edge(&w, &y).unwrap(), &wit.path, &dropped)
        });
        pass &= !v2.exclusion && !oracle2.1 && witness_ok;
        notes.push(format!("t={t} holds={} without Z[{t}] exclusion={} witness valid={witness_ok}", v.holds(), v2.exclusion));
    }
    let elapsed = start.elapsed();
    pass &= elapsed <= GRAPH_TIME_LIMIT;
    (pass, format!("{}; {:.2}s", notes.join("; "), elapsed.as_secs_f64()))
}

fn oracle_consistency() -> (bool, String) {
    let start = Instant::now();
    let mut per = Vec::new();
    let mut errs = Vec::new();
    let mut gap: f64 = 0.0;
    for seed in 0..ORACLE_SEEDS {
        let d = generate_dataset(&GenConfig { seed, ..GenConfig::default() }).unwrap();
        let steps = oracle_steps(&d).unwrap();
        match (ace_civ_ratio("oracle", &steps, WEAK), ace_two_stage("oracle", &steps, WEAK)) {
            (Ok(ratio), Ok(tsls)) => {
                for (a, b) in ratio.estimates().iter().zip(tsls.estimates()) {
                    gap = gap.max((a - b).abs());
                }
                let e = evaluate(&ratio, d.true_ace.as_ref().unwrap()).unwrap().mean_abs_error(2).unwrap();
                per.push(format!("{e:.4}"));
                errs.push(e);
            }
            (Err(e), _) | (_, Err(e)) => per.push(format!("failed ({e})")),
        }
    }
    let complete = errs.len() as u64 == ORACLE_SEEDS;
    let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    let elapsed = start.elapsed();
    let pass = complete && mean <= ORACLE_MAX_ERROR && gap <= ORACLE_FORM_AGREEMENT && elapsed <= ORACLE_TIME_LIMIT;
    (
        pass,
        format!(
            "mean |error| {mean:.4} over {} of {ORACLE_SEEDS} seeds (per seed {}; limit {ORACLE_MAX_ERROR}); \
             ratio vs two-stage max gap {gap:.1e}; {:.1}s",
            errs.len(),
            per.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

#[derive(Clone, Debug)]
struct DebiasRun {
    naive: f64,
    tdciv: Result<f64, String>,
}

fn debias_run(dim_u: usize, seed: u64) -> DebiasRun {
    let d = generate_dataset(&GenConfig { dim_u, seed, ..GenConfig::default() }).unwrap();
    let truth = d.true_ace.clone().unwrap();
    let naive = evaluate(&ace_naive(&d).unwrap(), &truth).unwrap().mean_abs_error(DEBIAS_FROM_STEP).unwrap();
    let started = Instant::now();
    let tdciv = (|| -> Result<f64, String> {
        let fit = train(&d, &ModelConfig::default(), &TrainConfig { seed, ..TrainConfig::default() })
            .map_err(|e| e.to_string())?;
        let latents = extract_representations(&fit.model, &d, ExtractMode::Means).map_err(|e| e.to_string())?;
        let steps = learned_steps(&d, latents.learned(), ControlSet::LaggedHistory).map_err(|e| e.to_string())?;
        let r = ace_civ("tdciv", &steps, WEAK).map_err(|e| e.to_string())?;
        Ok(evaluate(&r, &truth).unwrap().mean_abs_error(DEBIAS_FROM_STEP).unwrap())
    })();
    progress(&format!(
        "dim_u={dim_u} seed={seed}: naive {naive:.4}, tdciv {}, {:.0}s",
        tdciv.as_ref().map_or_else(|e| e.clone(), |v| format!("{v:.4}")),
        started.elapsed().as_secs_f64()
    ));
    DebiasRun { naive, tdciv }
}

fn debiasing(runs: &[DebiasRun], elapsed: Duration) -> (bool, String) {
    let mut pass = elapsed <= DEBIAS_TIME_LIMIT;
    let mut notes = Vec::new();
    for (seed, r) in DEBIAS_SEEDS.iter().zip(runs) {
        let ok = match &r.tdciv {
            Ok(e) => r.naive >= NAIVE_MIN_ERROR && *e <= TDCIV_MAX_ERROR && *e < r.naive,
            Err(_) => false,
        };
        pass &= ok;
        let t = r.tdciv.as_ref().map_or_else(|e| format!("failed ({e})"), |v| format!("{v:.4}"));
        notes.push(format!("seed {seed}: naive {:.4} tdciv {t}", r.naive));
    }
    (
        pass,
        format!(
            "{} (need naive >= {NAIVE_MIN_ERROR}, tdciv <= {TDCIV_MAX_ERROR} and below naive); {:.0}s",
            notes.join("; "),
            elapsed.as_secs_f64()
        ),
    )
}

fn mean_or_none(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn robustness(three: &[DebiasRun], six: &[DebiasRun]) -> (bool, String) {
    let naive = |runs: &[DebiasRun]| runs.iter().map(|r| r.naive).sum::<f64>() / runs.len() as f64;
    let tdciv = |runs: &[DebiasRun]| mean_or_none(runs.iter().map(|r| r.tdciv.as_ref().ok().copied()));
    let naive_ratio = naive(six) / naive(three);
    match (tdciv(three), tdciv(six)) {
        (Some(a), Some(b)) => {
            let ratio = b / a;
            let pass = ratio <= TDCIV_MAX_DEGRADATION && naive_ratio >= NAIVE_MIN_DEGRADATION;
            (
                pass,
                format!(
                    "tdciv {a:.4} -> {b:.4} ({ratio:.2}x, limit {TDCIV_MAX_DEGRADATION}x); naive {:.4} -> {:.4} \
                     ({naive_ratio:.2}x, need {NAIVE_MIN_DEGRADATION}x)",
                    naive(three),
                    naive(six)
                ),
            )
        }
        _ => (false, format!("tdciv failed on some seed; naive degrades {naive_ratio:.2}x")),
    }
}

fn training_sanity() -> (bool, String) {
    let d = generate_dataset(&GenConfig { n_samples: 256, horizon: 5, seed: 7, ..GenConfig::default() }).unwrap();
    let fit = train(&d, &ModelConfig::default(), &TrainConfig { epochs: SANITY_EPOCHS, seed: 7, ..TrainConfig::default() })
        .unwrap();
    let losses: Vec<f64> = fit.trace.iter().map(|e| e.total).collect();
    let avg: Vec<f64> = losses.windows(SANITY_WINDOW).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    let steps = avg.len() - 1;
    let down = avg.windows(2).filter(|w| w[1] <= w[0]).count();
    let fraction = down as f64 / steps as f64;

    let config = ModelConfig { alpha: 0.0, beta: 0.0, ..ModelConfig::default() };
    let dims = Dims::resolve(&config, d.dim_x, 3);
    let std = fit_standardizer(&d, config.outcome).unwrap();
    let model = TdcivModel::init(config, dims, std, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let batch = step_batches(&d, &model.standardizer).unwrap();
    let terms = loss_terms(&model.params, &model.dims, &model.config, &batch, &Noise::default()).unwrap();
    let gap = (terms.total + terms.elbo()).abs();
    let exact = gap <= f64::EPSILON * terms.total.abs();
    (
        fraction >= SANITY_MIN_FRACTION && exact,
        format!(
            "moving average non-increasing on {down}/{steps} epochs ({:.1}%, need {:.0}%); |loss + elbo| = {gap:e} \
             with alpha = beta = 0",
            100.0 * fraction,
            100.0 * SANITY_MIN_FRACTION
        ),
    )
}

/// Relative path to contents of every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> (bool, String) {
    let cfg = RunConfig {
        seed: 42,
        replicates: 2,
        data: GenConfig { n_samples: 256, horizon: 5, ..GenConfig::default() },
        training: TrainConfig { epochs: 5, ..TrainConfig::default() },
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, jobs: usize| {
        let out = dir.path().join(name);
        pipeline::generate(&cfg, &out, jobs).unwrap();
        pipeline::train(&cfg, &out, jobs).unwrap();
        pipeline::estimate(&cfg, &out, jobs, false).unwrap();
        pipeline::estimate(&cfg, &out, jobs, true).unwrap();
        pipeline::evaluate(&cfg, &out, jobs).unwrap();
        snapshot(&out)
    };
    let a = run("first", 1);
    let b = run("second", 2);
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let csvs = a.keys().filter(|k| k.ends_with(".csv")).count();
    let checkpoints: Vec<String> = a
        .iter()
        .filter(|(k, _)| k.starts_with("models") && k.ends_with(".json"))
        .map(|(_, v)| sha256_hex(v)[..12].to_string())
        .collect();
    let pass = differing.is_empty() && a.len() == b.len() && csvs > 0 && !checkpoints.is_empty();
    (
        pass,
        format!(
            "{} files compared ({csvs} CSV), {} differ; checkpoint hashes {}",
            a.len(),
            differing.len(),
            checkpoints.join(", ")
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, bool)> = Vec::new();
    let mut record = |n: usize, (pass, detail): (bool, String)| {
        report(n, pass, &detail);
        results.push((n, pass));
    };
    // The harness has already written `test acceptance_criteria ... ` without a newline.
    let _ = writeln!(std::io::stderr());

    record(1, gradient_correctness());
    record(2, kl_correctness());
    record(3, theorem_check());
    record(4, oracle_consistency());
    record(7, training_sanity());
    record(8, determinism());

    let start = Instant::now();
    let three: Vec<DebiasRun> = DEBIAS_SEEDS.iter().map(|&s| debias_run(3, s)).collect();
    record(5, debiasing(&three, start.elapsed()));
    let six: Vec<DebiasRun> = DEBIAS_SEEDS.iter().map(|&s| debias_run(6, s)).collect();
    record(6, robustness(&three, &six));

    let failed: Vec<usize> = results.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
