use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, OutcomeKind, SeqVaeError};
use crate::diffmath::Tensor;

/// Fully-connected heads, in parameter order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// `q(S_t | H_t, S_{t-1})`
    PosteriorS,
    /// `q(Z_t | H_t, Z_{t-1})`
    PosteriorZ,
    /// `p(Z_t | H_t)`
    PriorZ,
    /// `p(step input | Z_t, S_t)`
    Decoder,
    /// Treatment logit from `(Z_t, S_t, H_t)`.
    Treatment,
    /// Outcome parameters from `(Z_t, H_t)`.
    Outcome,
}

impl Head {
    pub const ALL: [Head; 6] =
        [Head::PosteriorS, Head::PosteriorZ, Head::PriorZ, Head::Decoder, Head::Treatment, Head::Outcome];

    pub fn name(self) -> &'static str {
        match self {
            Head::PosteriorS => "posterior_s",
            Head::PosteriorZ => "posterior_z",
            Head::PriorZ => "prior_z",
            Head::Decoder => "decoder",
            Head::Treatment => "treatment",
            Head::Outcome => "outcome",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }
}

/// Resolved sizes of every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Width of the step input `[X_t, W_{t-1}, Y_t]`.
    pub input: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub s: usize,
    pub z: usize,
    pub outcome_out: usize,
}

impl Dims {
    pub fn resolve(config: &ModelConfig, dim_x: usize, default_dim_z: usize) -> Self {
        Self {
            input: dim_x + 2,
            hidden: config.hidden,
            mlp_hidden: config.mlp_hidden,
            s: config.dim_s,
            z: config.dim_z.unwrap_or(default_dim_z),
            outcome_out: match config.outcome {
                OutcomeKind::Continuous => 2,
                OutcomeKind::Binary => 1,
            },
        }
    }

    /// `(in, out)` of a head.
    pub fn head(&self, head: Head) -> (usize, usize) {
        let (m, s, z) = (self.hidden, self.s, self.z);
        match head {
            Head::PosteriorS => (m + s, 2 * s),
            Head::PosteriorZ => (m + z, 2 * z),
            Head::PriorZ => (m, 2 * z),
            Head::Decoder => (z + s, 2 * self.input),
            Head::Treatment => (z + s + m, 1),
            Head::Outcome => (z + m, self.outcome_out),
        }
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let m = self.hidden;
        let mut out = vec![
            ("lstm.weight".to_string(), self.input + m, 4 * m),
            ("lstm.bias".to_string(), 1, 4 * m),
            ("lstm.xi".to_string(), 1, m),
        ];
        for head in Head::ALL {
            let (i, o) = self.head(head);
            let n = head.name();
            out.push((format!("{n}.weight1"), i, self.mlp_hidden));
            out.push((format!("{n}.bias1"), 1, self.mlp_hidden));
            out.push((format!("{n}.weight2"), self.mlp_hidden, o));
            out.push((format!("{n}.bias2"), 1, o));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().iter().map(|(_, r, c)| r * c).sum()
    }
}

pub(crate) const LSTM_WEIGHT: usize = 0;
pub(crate) const LSTM_BIAS: usize = 1;
pub(crate) const LSTM_XI: usize = 2;

/// Index of the first tensor of `head` (weight1, bias1, weight2, bias2 follow).
pub(crate) fn head_offset(head: Head) -> usize {
    3 + 4 * head.index()
}

/// Per-(step, feature) affine standardization of the step inputs and of the
/// outcome targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// `[T, input]`
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// `[T]`; identity for a binary outcome.
    pub outcome_mean: Vec<f64>,
    pub outcome_scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(horizon: usize, input: usize) -> Self {
        Self {
            input_mean: vec![0.0; horizon * input],
            input_scale: vec![1.0; horizon * input],
            outcome_mean: vec![0.0; horizon],
            outcome_scale: vec![1.0; horizon],
        }
    }

    pub fn horizon(&self) -> usize {
        self.outcome_mean.len()
    }
}

/// Trained or freshly initialised model: configuration, resolved sizes,
/// standardization and parameter tensors in [`Dims::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct TdcivModel {
    pub config: ModelConfig,
    pub dims: Dims,
    pub standardizer: Standardizer,
    pub params: Vec<Tensor>,
}

impl TdcivModel {
    /// Weights drawn from `N(0, init_sd^2)` (including the initial state),
    /// biases zero.
    pub fn init(
        config: ModelConfig,
        dims: Dims,
        standardizer: Standardizer,
        rng: &mut impl Rng,
    ) -> Result<Self, SeqVaeError> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_sd).map_err(|e| SeqVaeError::Config(e.to_string()))?;
        let params = dims
            .layout()
            .into_iter()
            .map(|(name, r, c)| {
                if name.contains("bias") {
                    Tensor::zeros(r, c)
                } else {
                    Tensor::from_fn(r, c, |_, _| normal.sample(rng))
                }
            })
            .collect();
        Ok(Self { config, dims, standardizer, params })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig, dims: Dims, standardizer: Standardizer) -> Self {
        let params = dims.layout().into_iter().map(|(_, r, c)| Tensor::zeros(r, c)).collect();
        Self { config, dims, standardizer, params }
    }

    pub fn horizon(&self) -> usize {
        self.standardizer.horizon()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }
}
