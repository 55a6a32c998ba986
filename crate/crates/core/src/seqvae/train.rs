use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::forward::{forward, history, Noise, StepBatch};
use super::model::{Dims, Head, Standardizer, TdcivModel};
use super::{ModelConfig, OutcomeKind, SeqVaeError};
use crate::diffmath::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::synthdata::PanelDataset;

/// Rows per forward pass during extraction.
const EXTRACT_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 128, adam: AdamConfig::default(), seed: 0 }
    }
}

/// Row-weighted epoch means of the loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl_s: f64,
    pub kl_z: f64,
    pub treatment: f64,
    pub outcome: f64,
    /// Bernoulli terms raised to the probability floor during the epoch.
    pub clamped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TdcivModel,
    pub trace: Vec<EpochLoss>,
}

/// Raw step inputs `[X_t, W_{t-1}, Y_t]`, one `[n, dim_x + 2]` tensor per
/// step; the lagged treatment and outcome are zero at the first step.
pub fn step_inputs(d: &PanelDataset) -> Vec<Tensor> {
    let din = d.dim_x + 2;
    (0..d.horizon)
        .map(|k| {
            let mut data = Vec::with_capacity(d.n_samples * din);
            for i in 0..d.n_samples {
                data.extend_from_slice(d.x_at(i, k));
                if k == 0 {
                    data.extend([0.0, 0.0]);
                } else {
                    data.extend([d.w_at(i, k - 1), d.y_at(i, k - 1)]);
                }
            }
            Tensor::new(d.n_samples, din, data)
        })
        .collect()
}

fn mean_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

/// Per-(step, feature) mean and population standard deviation of the step
/// inputs and, for a continuous outcome, of the outcome. Constant features
/// keep unit scale.
pub fn fit_standardizer(d: &PanelDataset, outcome: OutcomeKind) -> Result<Standardizer, SeqVaeError> {
    if d.n_samples == 0 || d.horizon == 0 {
        return Err(SeqVaeError::EmptyDataset);
    }
    let inputs = step_inputs(d);
    let din = d.dim_x + 2;
    let mut s = Standardizer::identity(d.horizon, din);
    for (k, x) in inputs.iter().enumerate() {
        for j in 0..din {
            let (m, sc) = mean_scale((0..d.n_samples).map(|i| x.get(i, j)));
            s.input_mean[k * din + j] = m;
            s.input_scale[k * din + j] = sc;
        }
        if outcome == OutcomeKind::Continuous {
            let (m, sc) = mean_scale((0..d.n_samples).map(|i| d.y_at(i, k)));
            s.outcome_mean[k] = m;
            s.outcome_scale[k] = sc;
        }
    }
    Ok(s)
}

/// Standardized per-step tensors for every row of `d`.
pub fn step_batches(d: &PanelDataset, s: &Standardizer) -> Result<Vec<StepBatch>, SeqVaeError> {
    let din = d.dim_x + 2;
    if s.horizon() != d.horizon || s.input_mean.len() != d.horizon * din {
        return Err(SeqVaeError::Mismatch(format!(
            "standardizer covers {} steps of width {}, data has {} steps of width {din}",
            s.horizon(),
            s.input_mean.len() / s.horizon().max(1),
            d.horizon
        )));
    }
    Ok(step_inputs(d)
        .into_iter()
        .enumerate()
        .map(|(k, raw)| {
            let (mean, scale) = (&s.input_mean[k * din..(k + 1) * din], &s.input_scale[k * din..(k + 1) * din]);
            let input = Tensor::from_fn(d.n_samples, din, |i, j| (raw.get(i, j) - mean[j]) / scale[j]);
            let treatment = Tensor::column((0..d.n_samples).map(|i| d.w_at(i, k)).collect());
            let outcome = Tensor::column(
                (0..d.n_samples).map(|i| (d.y_at(i, k) - s.outcome_mean[k]) / s.outcome_scale[k]).collect(),
            );
            StepBatch { input, treatment, outcome }
        })
        .collect())
}

fn check_model_fits(model: &TdcivModel, d: &PanelDataset) -> Result<(), SeqVaeError> {
    if model.dims.input != d.dim_x + 2 || model.horizon() != d.horizon {
        return Err(SeqVaeError::Mismatch(format!(
            "model expects {} steps of width {}, data has {} steps of width {}",
            model.horizon(),
            model.dims.input,
            d.horizon,
            d.dim_x + 2
        )));
    }
    Ok(())
}

fn draw_noise(rng: &mut ChaCha8Rng, dims: &Dims, keep: f64, rows: usize, steps: usize) -> Noise {
    let mut normal = |c: usize| Tensor::from_fn(rows, c, |_, _| rng.sample(StandardNormal));
    let eps = (0..steps).map(|_| (normal(dims.s), normal(dims.z))).collect();
    let masks = (keep < 1.0).then(|| {
        (0..steps)
            .map(|_| {
                Head::ALL
                    .iter()
                    .map(|_| {
                        Tensor::from_fn(rows, dims.mlp_hidden, |_, _| {
                            if rng.gen::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                    })
                    .collect()
            })
            .collect()
    });
    Noise { eps: Some(eps), masks }
}

/// Initialises a model from `train.seed` and fits it to `d`.
pub fn train(d: &PanelDataset, config: &ModelConfig, train: &TrainConfig) -> Result<TrainOutcome, SeqVaeError> {
    config.validate()?;
    let standardizer = fit_standardizer(d, config.outcome)?;
    let default_dim_z = d.z_true.as_ref().map_or(d.dim_x, |(dim, _)| *dim);
    let dims = Dims::resolve(config, d.dim_x, default_dim_z);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let model = TdcivModel::init(config.clone(), dims, standardizer, &mut rng)?;
    run(model, d, train, &mut rng)
}

/// Continues training an existing model with a generator seeded from `train.seed`.
pub fn train_model(model: TdcivModel, d: &PanelDataset, train: &TrainConfig) -> Result<TrainOutcome, SeqVaeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    run(model, d, train, &mut rng)
}

fn run(
    mut model: TdcivModel,
    d: &PanelDataset,
    train: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome, SeqVaeError> {
    model.config.validate()?;
    check_model_fits(&model, d)?;
    if d.n_samples == 0 {
        return Err(SeqVaeError::EmptyDataset);
    }
    if train.batch_size == 0 {
        return Err(SeqVaeError::Config("batch_size must be positive".into()));
    }
    let full = step_batches(d, &model.standardizer)?;
    let mut adam = Adam::new(train.adam, &model.params);
    let mut order: Vec<usize> = (0..d.n_samples).collect();
    let mut trace = Vec::with_capacity(train.epochs);

    for epoch in 0..train.epochs {
        order.shuffle(rng);
        let mut acc = EpochLoss { epoch, total: 0.0, recon: 0.0, kl_s: 0.0, kl_z: 0.0, treatment: 0.0, outcome: 0.0, clamped: 0 };
        for (b, rows) in order.chunks(train.batch_size).enumerate() {
            let batch: Vec<StepBatch> = full
                .iter()
                .map(|s| StepBatch {
                    input: s.input.select_rows(rows),
                    treatment: s.treatment.select_rows(rows),
                    outcome: s.outcome.select_rows(rows),
                })
                .collect();
            let noise = draw_noise(rng, &model.dims, model.config.keep_prob, rows.len(), d.horizon);

            let mut tape = Tape::new();
            let p: Vec<Var> = model.params.iter().map(|t| tape.leaf(t.clone())).collect();
            let pass = forward(&mut tape, &p, &model.dims, &model.config, &batch, &noise)?;
            let terms = pass.terms.values(&tape);
            if !terms.is_finite() {
                return Err(SeqVaeError::NonFiniteLoss { epoch, batch: b, terms: format!("{terms:?}") });
            }
            let mut grads = tape.backward(pass.terms.total)?;
            let g: Vec<Tensor> = p.iter().map(|v| grads.take(*v)).collect();
            adam.step(&mut model.params, &g)?;

            let w = rows.len() as f64;
            acc.total += w * terms.total;
            acc.recon += w * terms.recon;
            acc.kl_s += w * terms.kl_s;
            acc.kl_z += w * terms.kl_z;
            acc.treatment += w * terms.treatment;
            acc.outcome += w * terms.outcome;
            acc.clamped += pass.clamped;
        }
        let n = d.n_samples as f64;
        for v in [&mut acc.total, &mut acc.recon, &mut acc.kl_s, &mut acc.kl_z, &mut acc.treatment, &mut acc.outcome] {
            *v /= n;
        }
        trace.push(acc);
    }
    Ok(TrainOutcome { model, trace })
}

/// How extracted latents are formed from the posteriors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractMode {
    #[default]
    Means,
    /// One reparameterized draw per step from a generator with this seed.
    Sampled { seed: u64 },
}

/// Per-(sample, step) posteriors, the latents passed downstream and the
/// recurrent states, as flat `[n, T, dim]` arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPath {
    pub n_samples: usize,
    pub horizon: usize,
    pub dim_s: usize,
    pub dim_z: usize,
    pub dim_h: usize,
    pub s_mean: Vec<f64>,
    pub s_log_var: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_log_var: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub h: Vec<f64>,
}

impl LatentPath {
    fn empty(n: usize, horizon: usize, dims: &Dims) -> Self {
        let cells = n * horizon;
        Self {
            n_samples: n,
            horizon,
            dim_s: dims.s,
            dim_z: dims.z,
            dim_h: dims.hidden,
            s_mean: vec![0.0; cells * dims.s],
            s_log_var: vec![0.0; cells * dims.s],
            z_mean: vec![0.0; cells * dims.z],
            z_log_var: vec![0.0; cells * dims.z],
            s: vec![0.0; cells * dims.s],
            z: vec![0.0; cells * dims.z],
            h: vec![0.0; cells * dims.hidden],
        }
    }

    pub fn learned(&self) -> crate::estimator::Learned<'_> {
        crate::estimator::Learned {
            s: &self.s,
            dim_s: self.dim_s,
            z: &self.z,
            dim_z: self.dim_z,
            h: &self.h,
            dim_h: self.dim_h,
        }
    }
}

/// Writes the rows of a `[rows, dim]` step tensor into a `[n, T, dim]` array.
fn scatter(dst: &mut [f64], src: &Tensor, first_row: usize, horizon: usize, k: usize) {
    let dim = src.cols();
    for r in 0..src.rows() {
        let at = ((first_row + r) * horizon + k) * dim;
        dst[at..at + dim].copy_from_slice(src.row_slice(r));
    }
}

/// Posterior means (or draws) of `S_t`, `Z_t` and the states `H_t` for every
/// row of `d`, with dropout off.
pub fn extract_representations(model: &TdcivModel, d: &PanelDataset, mode: ExtractMode) -> Result<LatentPath, SeqVaeError> {
    check_model_fits(model, d)?;
    if d.n_samples == 0 {
        return Err(SeqVaeError::EmptyDataset);
    }
    let full = step_batches(d, &model.standardizer)?;
    let mut out = LatentPath::empty(d.n_samples, d.horizon, &model.dims);
    let mut rng = match mode {
        ExtractMode::Means => None,
        ExtractMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let all: Vec<usize> = (0..d.n_samples).collect();
    for rows in all.chunks(EXTRACT_CHUNK) {
        let batch: Vec<StepBatch> = full
            .iter()
            .map(|s| StepBatch {
                input: s.input.select_rows(rows),
                treatment: s.treatment.select_rows(rows),
                outcome: s.outcome.select_rows(rows),
            })
            .collect();
        let noise = match rng.as_mut() {
            None => Noise::default(),
            Some(r) => Noise { masks: None, ..draw_noise(r, &model.dims, 1.0, rows.len(), d.horizon) },
        };
        let mut tape = Tape::new();
        let p: Vec<Var> = model.params.iter().map(|t| tape.leaf(t.clone())).collect();
        let pass = forward(&mut tape, &p, &model.dims, &model.config, &batch, &noise)?;
        for (k, st) in pass.steps.iter().enumerate() {
            let first = rows[0];
            scatter(&mut out.s_mean, tape.value(st.s_mean), first, d.horizon, k);
            scatter(&mut out.s_log_var, tape.value(st.s_log_var), first, d.horizon, k);
            scatter(&mut out.z_mean, tape.value(st.z_mean), first, d.horizon, k);
            scatter(&mut out.z_log_var, tape.value(st.z_log_var), first, d.horizon, k);
            scatter(&mut out.s, tape.value(st.s), first, d.horizon, k);
            scatter(&mut out.z, tape.value(st.z), first, d.horizon, k);
            scatter(&mut out.h, tape.value(st.h), first, d.horizon, k);
        }
    }
    Ok(out)
}

/// Recurrent states `H_1..H_T` for standardized step inputs (`[rows, input]` each).
pub fn encode_history(model: &TdcivModel, inputs: &[Tensor]) -> Result<Vec<Tensor>, SeqVaeError> {
    if inputs.iter().any(|x| x.cols() != model.dims.input) {
        return Err(SeqVaeError::Mismatch(format!("step inputs must have {} columns", model.dims.input)));
    }
    let mut tape = Tape::new();
    let p: Vec<Var> = model.params.iter().map(|t| tape.leaf(t.clone())).collect();
    let hs = history(&mut tape, &p, &model.dims, inputs)?;
    Ok(hs.into_iter().map(|h| tape.value(h).clone()).collect())
}
