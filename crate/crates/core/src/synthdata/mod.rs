//! Synthetic panels from a p-order autoregressive process with a latent
//! instrument `S`, a conditioning set `Z`, latent confounders `U`, a binary
//! treatment `W` and a continuous outcome `Y`.
//!
//! Arrays are flat and row-major over `(sample, t, channel)`. Time index `t`
//! is zero-based in code; `y[t]` holds the outcome one step after `w[t]`.

mod panel_csv;

pub use panel_csv::{read_panel, read_panel_from, write_panel, write_panel_to};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffmath::sigmoid;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: String, message: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("dataset is inconsistent: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_samples: usize,
    pub horizon: usize,
    pub p_order: usize,
    pub dim_x: usize,
    pub dim_u: usize,
    pub seed: u64,
    pub rho_w: f64,
    pub rho_z: f64,
    pub rho_u: f64,
    pub noise_sd_x: f64,
    pub noise_sd_u: f64,
    /// Noise of the instrument's own recursion.
    pub noise_sd_s: f64,
    /// Spread of the random first-step state of `X`, `U` and `S`. Zero gives
    /// a pure zero-history start.
    pub init_sd: f64,
    /// When false the treatment ignores `U` (`mu_u = 0`).
    pub confounded_treatment: bool,
    /// Redraw autoregressive self-coefficients until each recursion is stable.
    pub stable_coefficients: bool,
    pub proxy_injection: bool,
    pub proxy_noise_sd: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_samples: 8000,
            horizon: 10,
            p_order: 1,
            dim_x: 3,
            dim_u: 3,
            seed: 0,
            rho_w: 0.5,
            rho_z: 0.5,
            rho_u: 0.5,
            noise_sd_x: 0.01,
            noise_sd_u: 0.01,
            noise_sd_s: 1.0,
            init_sd: 1.0,
            confounded_treatment: true,
            stable_coefficients: true,
            proxy_injection: true,
            proxy_noise_sd: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Config(m));
        if self.n_samples == 0 {
            return fail("n_samples must be positive".into());
        }
        if self.horizon < 2 {
            return fail(format!("horizon must be at least 2, got {}", self.horizon));
        }
        if self.p_order < 1 {
            return fail("p_order must be at least 1".into());
        }
        if self.p_order >= self.horizon {
            return fail(format!(
                "p_order ({}) must be less than horizon ({})",
                self.p_order, self.horizon
            ));
        }
        if self.dim_x == 0 || self.dim_u == 0 {
            return fail("dim_x and dim_u must be positive".into());
        }
        for (name, sd) in [
            ("noise_sd_x", self.noise_sd_x),
            ("noise_sd_u", self.noise_sd_u),
            ("noise_sd_s", self.noise_sd_s),
            ("proxy_noise_sd", self.proxy_noise_sd),
        ] {
            if !(sd > 0.0 && sd.is_finite()) {
                return fail(format!("{name} must be positive, got {sd}"));
            }
        }
        if !(self.init_sd >= 0.0 && self.init_sd.is_finite()) {
            return fail(format!("init_sd must be non-negative, got {}", self.init_sd));
        }
        for (name, v) in [("rho_w", self.rho_w), ("rho_z", self.rho_z), ("rho_u", self.rho_u)] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        Ok(())
    }

    /// Observed covariate width, including the proxy channel.
    pub fn observed_dim_x(&self) -> usize {
        self.dim_x + usize::from(self.proxy_injection)
    }
}

/// Per-dataset process coefficients. Lag-indexed arrays are `[lag - 1][channel]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub alpha: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub mu_x: Vec<f64>,
    pub mu_u: Vec<f64>,
    pub mu_s: f64,
    pub mu_z: Vec<f64>,
    pub c: f64,
}

impl Coefficients {
    /// All coefficients zero.
    pub fn zeros(p: usize, dim_x: usize, dim_u: usize) -> Self {
        Self {
            alpha: vec![vec![0.0; dim_x]; p],
            omega: vec![vec![0.0; dim_x]; p],
            beta: vec![vec![0.0; dim_u]; p],
            lambda: vec![vec![0.0; dim_u]; p],
            mu_x: vec![0.0; dim_x],
            mu_u: vec![0.0; dim_u],
            mu_s: 0.0,
            mu_z: vec![0.0; dim_x],
            c: 0.0,
        }
    }
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite, non-negative sd")
}

/// `N(1 - i/p, (i/p)^2)` for lag `i`.
fn decaying(i: usize, p: usize) -> Normal<f64> {
    let r = i as f64 / p as f64;
    normal(1.0 - r, r)
}

fn draw_lagged(
    rng: &mut impl Rng,
    p: usize,
    dim: usize,
    dist: impl Fn(usize) -> Normal<f64>,
    stable: bool,
) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]; p];
    for (lag, row) in out.iter_mut().enumerate() {
        let d = dist(lag + 1);
        for v in row.iter_mut() {
            *v = d.sample(rng);
        }
    }
    if stable {
        for j in 0..dim {
            while !recursion_is_stable(&out.iter().map(|r| r[j]).collect::<Vec<_>>()) {
                for (lag, row) in out.iter_mut().enumerate() {
                    row[j] = dist(lag + 1).sample(rng);
                }
            }
        }
    }
    out
}

/// Whether `x_t = (1/p) sum_i a_i x_{t-i}` is stable. Uses the sufficient
/// condition `(1/p) sum |a_i| < 1`.
fn recursion_is_stable(a: &[f64]) -> bool {
    a.iter().map(|v| v.abs()).sum::<f64>() / (a.len() as f64) < 1.0
}

pub fn draw_coefficients(cfg: &GenConfig, rng: &mut impl Rng) -> Coefficients {
    let p = cfg.p_order;
    let stable = cfg.stable_coefficients;
    let half = |_| normal(0.0, 0.5);
    let alpha = draw_lagged(rng, p, cfg.dim_x, half, stable);
    let omega = draw_lagged(rng, p, cfg.dim_x, |i| decaying(i, p), false);
    let beta = draw_lagged(rng, p, cfg.dim_u, |i| decaying(i, p), stable);
    let lambda = draw_lagged(rng, p, cfg.dim_u, half, false);
    let std = normal(0.0, 1.0);
    let mu_x = (0..cfg.dim_x).map(|_| std.sample(rng)).collect();
    let mut mu_u: Vec<f64> = (0..cfg.dim_u).map(|_| std.sample(rng)).collect();
    if !cfg.confounded_treatment {
        mu_u.iter_mut().for_each(|v| *v = 0.0);
    }
    let mu_s = std.sample(rng);
    let mu_z = (0..cfg.dim_x).map(|_| std.sample(rng)).collect();
    let c = std.sample(rng);
    Coefficients { alpha, omega, beta, lambda, mu_x, mu_u, mu_s, mu_z, c }
}

/// Deterministic part of a covariate step:
/// `(1/p) sum_{i=1..p} (a_i * v_{t-i} + b_i * w_{t-i})`, per channel.
///
/// `past` and `past_w` hold the steps before `t`, oldest first; lags
/// reaching before the first step contribute zero.
pub fn covariate_step(a: &[Vec<f64>], b: &[Vec<f64>], past: &[&[f64]], past_w: &[f64]) -> Vec<f64> {
    let p = a.len();
    let dim = a[0].len();
    let mut out = vec![0.0; dim];
    for i in 1..=p.min(past.len()) {
        let v = past[past.len() - i];
        let w = past_w[past_w.len() - i];
        for j in 0..dim {
            out[j] += a[i - 1][j] * v[j] + b[i - 1][j] * w;
        }
    }
    out.iter_mut().for_each(|x| *x /= p as f64);
    out
}

/// Deterministic part of the instrument step: mean of the last `p` values.
pub fn civ_step(p: usize, past: &[f64]) -> f64 {
    past.iter().rev().take(p).sum::<f64>() / p as f64
}

/// Deterministic part of the conditioning step:
/// `(1/p) sum_{i=1..p} (z_{t-i} + x_t)`, where missing lags count as zero.
pub fn conditioning_step(p: usize, past: &[&[f64]], x_t: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = x_t.to_vec();
    for v in past.iter().rev().take(p) {
        for (o, z) in out.iter_mut().zip(v.iter()) {
            *o += z / p as f64;
        }
    }
    out
}

/// `theta_t`: dot products of the `mu` vectors with sums over the last `p`
/// steps (current step included). Each slice holds history up to and
/// including `t`.
pub fn treatment_index(
    coef: &Coefficients,
    p: usize,
    x: &[&[f64]],
    u: &[&[f64]],
    s: &[f64],
    z: &[&[f64]],
) -> f64 {
    let dot_recent = |mu: &[f64], hist: &[&[f64]]| -> f64 {
        let mut acc = 0.0;
        for row in hist.iter().rev().take(p) {
            for (m, v) in mu.iter().zip(row.iter()) {
                acc += m * v;
            }
        }
        acc
    };
    dot_recent(&coef.mu_x, x)
        + dot_recent(&coef.mu_u, u)
        + coef.mu_s * s.iter().rev().take(p).sum::<f64>()
        + dot_recent(&coef.mu_z, z)
}

/// `P(W_t = 1) = sigmoid(c * theta)`.
pub fn treatment_probability(c: f64, theta: f64) -> f64 {
    sigmoid(c * theta)
}

/// `Y_{t+1} = rho_w W_t + rho_z sum(Z_t) + rho_u sum(U_t)`.
pub fn outcome(cfg: &GenConfig, w: f64, z_t: &[f64], u_t: &[f64]) -> f64 {
    cfg.rho_w * w + cfg.rho_z * z_t.iter().sum::<f64>() + cfg.rho_u * u_t.iter().sum::<f64>()
}

/// N x T panel. Latent fields are present for synthetic data only.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelDataset {
    pub n_samples: usize,
    pub horizon: usize,
    pub dim_x: usize,
    /// `[n, T, dim_x]`
    pub x: Vec<f64>,
    /// `[n, T]`, entries 0 or 1.
    pub w: Vec<f64>,
    /// `[n, T]`; index `t` stores the outcome after treatment `t`.
    pub y: Vec<f64>,
    /// `[n, T, dim_u]` with its width.
    pub u: Option<(usize, Vec<f64>)>,
    /// `[n, T]`
    pub s_true: Option<Vec<f64>>,
    /// `[n, T, dim_z]` with its width.
    pub z_true: Option<(usize, Vec<f64>)>,
    /// Per-step effect of `W_t` on the next outcome.
    pub true_ace: Option<Vec<f64>>,
}

impl PanelDataset {
    #[inline]
    pub fn x_at(&self, i: usize, t: usize) -> &[f64] {
        let k = (i * self.horizon + t) * self.dim_x;
        &self.x[k..k + self.dim_x]
    }

    #[inline]
    pub fn w_at(&self, i: usize, t: usize) -> f64 {
        self.w[i * self.horizon + t]
    }

    #[inline]
    pub fn y_at(&self, i: usize, t: usize) -> f64 {
        self.y[i * self.horizon + t]
    }

    pub fn u_at(&self, i: usize, t: usize) -> Option<&[f64]> {
        self.u.as_ref().map(|(d, v)| &v[(i * self.horizon + t) * d..(i * self.horizon + t + 1) * d])
    }

    pub fn s_at(&self, i: usize, t: usize) -> Option<f64> {
        self.s_true.as_ref().map(|v| v[i * self.horizon + t])
    }

    pub fn z_at(&self, i: usize, t: usize) -> Option<&[f64]> {
        self.z_true.as_ref().map(|(d, v)| &v[(i * self.horizon + t) * d..(i * self.horizon + t + 1) * d])
    }

    /// Column of a per-(sample, t) scalar across samples at step `t`.
    pub fn column(values: &[f64], horizon: usize, t: usize) -> Vec<f64> {
        values.iter().skip(t).step_by(horizon).copied().collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let cells = self.n_samples * self.horizon;
        let bad = |m: String| Err(SynthError::Shape(m));
        if self.x.len() != cells * self.dim_x || self.w.len() != cells || self.y.len() != cells {
            return bad("x, w or y length does not match n x T".into());
        }
        if let Some((d, u)) = &self.u {
            if u.len() != cells * d {
                return bad("u length does not match n x T x dim_u".into());
            }
        }
        if let Some((d, z)) = &self.z_true {
            if z.len() != cells * d {
                return bad("z length does not match n x T x dim_z".into());
            }
        }
        if self.s_true.as_ref().is_some_and(|s| s.len() != cells) {
            return bad("s_true length does not match n x T".into());
        }
        if self.true_ace.as_ref().is_some_and(|a| a.len() != self.horizon) {
            return bad("true_ace length does not match T".into());
        }
        if let Some(k) = self.w.iter().position(|&v| v != 0.0 && v != 1.0) {
            return bad(format!("treatment at cell {k} is {}, not 0 or 1", self.w[k]));
        }
        let all = self
            .x
            .iter()
            .chain(&self.y)
            .chain(self.u.iter().flat_map(|(_, v)| v))
            .chain(self.s_true.iter().flatten())
            .chain(self.z_true.iter().flat_map(|(_, v)| v))
            .chain(self.true_ace.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        Ok(())
    }
}

/// Generates a dataset with coefficients drawn from the config's seed.
pub fn generate_dataset(cfg: &GenConfig) -> Result<PanelDataset, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coef = draw_coefficients(cfg, &mut rng);
    let data = generate_with(cfg, &coef, &mut rng);
    data.validate()?;
    Ok(data)
}

/// Runs the process forward with fixed coefficients.
pub fn generate_with(cfg: &GenConfig, coef: &Coefficients, rng: &mut impl Rng) -> PanelDataset {
    let (n, tt, p, dx, du) = (cfg.n_samples, cfg.horizon, cfg.p_order, cfg.dim_x, cfg.dim_u);
    let eps_x = normal(0.0, cfg.noise_sd_x);
    let eps_u = normal(0.0, cfg.noise_sd_u);
    let eps_s = normal(0.0, cfg.noise_sd_s);
    let init = normal(0.0, cfg.init_sd);

    let mut x = vec![0.0; n * tt * dx];
    let mut u = vec![0.0; n * tt * du];
    let mut s = vec![0.0; n * tt];
    let mut z = vec![0.0; n * tt * dx];
    let mut w = vec![0.0; n * tt];
    let mut y = vec![0.0; n * tt];

    let hist = |buf: &[f64], d: usize, from: usize, to: usize| -> Vec<Vec<f64>> {
        buf[from * d..to * d].chunks(d).map(<[f64]>::to_vec).collect()
    };
    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    for i in 0..n {
        let base = i * tt;
        for t in 0..tt {
            let cell = base + t;
            let past_w = &w[base..cell];

            let mut xt = covariate_step(&coef.alpha, &coef.omega, &refs(&hist(&x, dx, base, cell)), past_w);
            xt.iter_mut().for_each(|v| *v += eps_x.sample(rng));
            let mut ut = covariate_step(&coef.beta, &coef.lambda, &refs(&hist(&u, du, base, cell)), past_w);
            ut.iter_mut().for_each(|v| *v += eps_u.sample(rng));
            let mut st = civ_step(p, &s[base..cell]) + eps_s.sample(rng);
            if t == 0 && cfg.init_sd > 0.0 {
                xt.iter_mut().for_each(|v| *v += init.sample(rng));
                ut.iter_mut().for_each(|v| *v += init.sample(rng));
                st += init.sample(rng);
            }
            let mut zt = conditioning_step(p, &refs(&hist(&z, dx, base, cell)), &xt);
            zt.iter_mut().for_each(|v| *v += eps_u.sample(rng));

            x[cell * dx..(cell + 1) * dx].copy_from_slice(&xt);
            u[cell * du..(cell + 1) * du].copy_from_slice(&ut);
            s[cell] = st;
            z[cell * dx..(cell + 1) * dx].copy_from_slice(&zt);

            let theta = treatment_index(
                coef,
                p,
                &refs(&hist(&x, dx, base, cell + 1)),
                &refs(&hist(&u, du, base, cell + 1)),
                &s[base..=cell],
                &refs(&hist(&z, dx, base, cell + 1)),
            );
            let wt = if rng.gen::<f64>() < treatment_probability(coef.c, theta) { 1.0 } else { 0.0 };
            w[cell] = wt;
            y[cell] = outcome(cfg, wt, &zt, &ut);
        }
    }

    let (x_obs, dim_obs) = if cfg.proxy_injection {
        let eps_p = normal(0.0, cfg.proxy_noise_sd);
        let mut out = Vec::with_capacity(n * tt * (dx + 1));
        for cell in 0..n * tt {
            out.extend_from_slice(&x[cell * dx..(cell + 1) * dx]);
            out.push(s[cell] + eps_p.sample(rng));
        }
        (out, dx + 1)
    } else {
        (x, dx)
    };

    PanelDataset {
        n_samples: n,
        horizon: tt,
        dim_x: dim_obs,
        x: x_obs,
        w,
        y,
        u: Some((du, u)),
        s_true: Some(s),
        z_true: Some((dx, z)),
        true_ace: Some(vec![cfg.rho_w; tt]),
    }
}
