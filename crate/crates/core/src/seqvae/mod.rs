//! Sequential variational model that learns a per-step instrument `S_t` and
//! conditioning set `Z_t` from observed covariates, treatments and outcomes.
//!
//! A recurrent encoder summarises the history into `H_t`. Two posterior
//! heads produce diagonal Gaussians for `S_t` and `Z_t`; `S_t` has a
//! standard-normal prior and `Z_t` a prior conditioned on `H_t`. A decoder
//! reconstructs the step input from `(Z_t, S_t)` and two auxiliary heads
//! predict the treatment and the next outcome. Everything runs on the
//! [`crate::diffmath`] tape in `f64`.

mod checkpoint;
mod forward;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use forward::{encode_latents, loss_terms, toy_loss, LossTerms, Noise, StepBatch};
pub use model::{Dims, Head, Standardizer, TdcivModel};
pub use train::{
    encode_history, extract_representations, fit_standardizer, step_batches, step_inputs, train, train_model,
    EpochLoss, ExtractMode, LatentPath, TrainConfig, TrainOutcome,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::{softplus, DiffError};

/// Smallest probability a Bernoulli likelihood may assign to the observed label.
pub const PROBABILITY_FLOOR: f64 = 1e-7;

/// Added to the softplus outcome variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SeqVaeError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {terms}")]
    NonFiniteLoss { epoch: usize, batch: usize, terms: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset does not match the model: {0}")]
    Mismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    /// Gaussian with learned mean and softplus variance.
    #[default]
    Continuous,
    /// Bernoulli with a learned logit.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Recurrent state width.
    pub hidden: usize,
    /// Hidden width of every fully-connected head.
    pub mlp_hidden: usize,
    pub dim_s: usize,
    /// Defaults to the latent covariate dimension of the data.
    pub dim_z: Option<usize>,
    /// Weight of the treatment log-likelihood.
    pub alpha: f64,
    /// Weight of the outcome log-likelihood.
    pub beta: f64,
    /// Dropout keep probability on the heads' hidden layers during training.
    pub keep_prob: f64,
    /// Standard deviation of the initial weights.
    pub init_sd: f64,
    pub outcome: OutcomeKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            mlp_hidden: 128,
            dim_s: 1,
            dim_z: None,
            alpha: 1.0,
            beta: 1.0,
            keep_prob: 0.8,
            init_sd: 0.1,
            outcome: OutcomeKind::Continuous,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), SeqVaeError> {
        let fail = |m: &str| Err(SeqVaeError::Config(m.to_string()));
        if self.hidden == 0 || self.mlp_hidden == 0 {
            return fail("hidden and mlp_hidden must be positive");
        }
        if self.dim_s == 0 || self.dim_z == Some(0) {
            return fail("dim_s and dim_z must be at least 1");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return fail("alpha and beta must be finite and non-negative");
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return fail("keep_prob must lie in (0, 1]");
        }
        if !(self.init_sd >= 0.0) || !self.init_sd.is_finite() {
            return fail("init_sd must be finite and non-negative");
        }
        Ok(())
    }
}

/// Diagonal Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self, SeqVaeError> {
        if mean.len() != log_variance.len() {
            return Err(SeqVaeError::Mismatch(format!(
                "mean has {} entries, log-variance {}",
                mean.len(),
                log_variance.len()
            )));
        }
        if !mean.iter().chain(&log_variance).all(|v| v.is_finite()) {
            return Err(SeqVaeError::Mismatch("Gaussian parameters must be finite".into()));
        }
        Ok(Self { mean, log_variance })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_variance: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(q || p)` between diagonal Gaussians, summed over coordinates.
pub fn kl_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<f64, SeqVaeError> {
    if q.dim() != p.dim() {
        return Err(SeqVaeError::Mismatch(format!("KL between dims {} and {}", q.dim(), p.dim())));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (mq, lq, mp, lp) = (q.mean[i], q.log_variance[i], p.mean[i], p.log_variance[i]);
        let d = mq - mp;
        kl += 0.5 * (lp - lq + (lq.exp() + d * d) / lp.exp() - 1.0);
    }
    Ok(kl)
}

/// `mean + exp(log_variance / 2) * eps` with `eps` standard normal.
pub fn sample_reparam(params: &GaussianParams, rng: &mut impl Rng) -> Vec<f64> {
    params
        .mean
        .iter()
        .zip(&params.log_variance)
        .map(|(m, l)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + (0.5 * l).exp() * eps
        })
        .collect()
}

/// `ln p(x)` under `N(mean, variance)`.
pub fn gaussian_log_density(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + variance.ln() + d * d / variance)
}

/// Bernoulli log-likelihood of `label` given a logit. The second value
/// reports whether the probability of the label underflowed and was raised
/// to [`PROBABILITY_FLOOR`].
pub fn bernoulli_log_likelihood(logit: f64, label: f64) -> (f64, bool) {
    let ll = label * logit - softplus(logit);
    if bernoulli_clamped(logit, label) {
        (PROBABILITY_FLOOR.ln(), true)
    } else {
        (ll, false)
    }
}

/// True when `sigmoid(logit)` rounds to exactly 0 or 1 against the label.
pub(crate) fn bernoulli_clamped(logit: f64, label: f64) -> bool {
    let p = crate::diffmath::sigmoid(logit);
    (p == 0.0 && label > 0.5) || (p == 1.0 && label < 0.5)
}
