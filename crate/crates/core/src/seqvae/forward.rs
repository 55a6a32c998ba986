use super::model::{head_offset, Dims, Head, LSTM_BIAS, LSTM_WEIGHT, LSTM_XI};
use super::model::TdcivModel;
use super::{bernoulli_clamped, GaussianParams, ModelConfig, OutcomeKind, SeqVaeError, PROBABILITY_FLOOR, VARIANCE_FLOOR};
use crate::diffmath::{DiffError, Tape, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One step of a batch, already standardized.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch {
    /// `[rows, input]`: `[X_t, W_{t-1}, Y_t]`.
    pub input: Tensor,
    /// `[rows, 1]`: `W_t`.
    pub treatment: Tensor,
    /// `[rows, 1]`: `Y_{t+1}`.
    pub outcome: Tensor,
}

/// Randomness of one forward pass, drawn up front so the pass itself is a
/// pure function. `None` entries mean posterior means and no dropout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Noise {
    /// Per step: standard-normal draws for `S_t` and `Z_t`.
    pub eps: Option<Vec<(Tensor, Tensor)>>,
    /// Per step, per head: inverted-dropout masks (entries 0 or `1 / keep`).
    pub masks: Option<Vec<Vec<Tensor>>>,
}

/// Loss components, each summed over steps and averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms<V = f64> {
    pub recon: V,
    pub kl_s: V,
    pub kl_z: V,
    /// Treatment log-likelihood.
    pub treatment: V,
    /// Outcome log-likelihood.
    pub outcome: V,
    /// `-(recon - kl_s - kl_z) - alpha * treatment - beta * outcome`.
    pub total: V,
}

impl LossTerms<f64> {
    pub fn elbo(&self) -> f64 {
        self.recon - self.kl_s - self.kl_z
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.kl_s, self.kl_z, self.treatment, self.outcome, self.total].iter().all(|v| v.is_finite())
    }
}

impl LossTerms<Var> {
    pub(crate) fn values(&self, tape: &Tape) -> LossTerms<f64> {
        let v = |x: Var| tape.value(x).item();
        LossTerms {
            recon: v(self.recon),
            kl_s: v(self.kl_s),
            kl_z: v(self.kl_z),
            treatment: v(self.treatment),
            outcome: v(self.outcome),
            total: v(self.total),
        }
    }
}

/// Per-step nodes kept for extraction.
pub(crate) struct StepNodes {
    pub h: Var,
    pub s_mean: Var,
    pub s_log_var: Var,
    pub z_mean: Var,
    pub z_log_var: Var,
    pub s: Var,
    pub z: Var,
}

pub(crate) struct Pass {
    pub terms: LossTerms<Var>,
    pub steps: Vec<StepNodes>,
    /// Bernoulli terms raised to the probability floor.
    pub clamped: usize,
}

fn mlp(tape: &mut Tape, p: &[Var], head: Head, input: Var, mask: Option<&Tensor>) -> Result<Var, DiffError> {
    let o = head_offset(head);
    let pre = tape.affine(input, p[o], p[o + 1])?;
    let mut hidden = tape.tanh(pre);
    if let Some(m) = mask {
        let m = tape.leaf(m.clone());
        hidden = tape.mul(hidden, m)?;
    }
    tape.affine(hidden, p[o + 2], p[o + 3])
}

fn split(tape: &mut Tape, v: Var, width: usize) -> Result<(Var, Var), DiffError> {
    Ok((tape.slice_cols(v, 0, width)?, tape.slice_cols(v, width, 2 * width)?))
}

/// `mean + exp(log_var / 2) * eps`, or the mean when `eps` is absent.
pub(crate) fn reparam(tape: &mut Tape, mean: Var, log_var: Var, eps: Option<&Tensor>) -> Result<Var, DiffError> {
    let Some(eps) = eps else { return Ok(mean) };
    let half = tape.scale(log_var, 0.5);
    let sd = tape.exp(half)?;
    let e = tape.leaf(eps.clone());
    let noise = tape.mul(sd, e)?;
    tape.add(mean, noise)
}

/// Sum over rows and coordinates of `KL(N(mq, e^lq) || N(mp, e^lp))`.
/// With `prior` absent the prior is standard normal.
fn kl_sum(tape: &mut Tape, mq: Var, lq: Var, prior: Option<(Var, Var)>) -> Result<Var, DiffError> {
    let var_q = tape.exp(lq)?;
    let terms = match prior {
        None => {
            let sq = tape.square(mq);
            let a = tape.add(var_q, sq)?;
            let b = tape.sub(a, lq)?;
            tape.add_scalar(b, -1.0)
        }
        Some((mp, lp)) => {
            let d = tape.sub(mq, mp)?;
            let sq = tape.square(d);
            let num = tape.add(var_q, sq)?;
            let neg_lp = tape.neg(lp);
            let inv = tape.exp(neg_lp)?;
            let ratio = tape.mul(num, inv)?;
            let diff = tape.sub(lp, lq)?;
            let a = tape.add(diff, ratio)?;
            tape.add_scalar(a, -1.0)
        }
    };
    let s = tape.sum(terms);
    Ok(tape.scale(s, 0.5))
}

/// Sum of Gaussian log-densities of `target` under `N(mean, e^log_var)`.
fn gaussian_ll_sum(tape: &mut Tape, target: Var, mean: Var, log_var: Var) -> Result<Var, DiffError> {
    let count = tape.value(target).len() as f64;
    let d = tape.sub(target, mean)?;
    let sq = tape.square(d);
    let neg = tape.neg(log_var);
    let inv = tape.exp(neg)?;
    let scaled = tape.mul(sq, inv)?;
    let per = tape.add(log_var, scaled)?;
    let s = tape.sum(per);
    let s = tape.add_scalar(s, count * LN_2PI);
    Ok(tape.scale(s, -0.5))
}

/// Sum of Bernoulli log-likelihoods of `labels` under `logits`, with labels
/// whose probability underflows raised to the floor.
fn bernoulli_ll_sum(tape: &mut Tape, logits: Var, labels: &Tensor, clamped: &mut usize) -> Result<Var, DiffError> {
    let y = tape.leaf(labels.clone());
    let yl = tape.mul(y, logits)?;
    let sp = tape.softplus(logits);
    let mut ll = tape.sub(yl, sp)?;
    let lv = tape.value(logits);
    let floored: Vec<bool> = lv.data().iter().zip(labels.data()).map(|(&l, &w)| bernoulli_clamped(l, w)).collect();
    let n = floored.iter().filter(|&&f| f).count();
    if n > 0 {
        *clamped += n;
        let (r, c) = (lv.rows(), lv.cols());
        let keep = tape.leaf(Tensor::new(r, c, floored.iter().map(|&f| if f { 0.0 } else { 1.0 }).collect()));
        let floor = PROBABILITY_FLOOR.ln();
        let fill = tape.leaf(Tensor::new(r, c, floored.iter().map(|&f| if f { floor } else { 0.0 }).collect()));
        let kept = tape.mul(ll, keep)?;
        ll = tape.add(kept, fill)?;
    }
    Ok(tape.sum(ll))
}

/// Initial state: `xi` broadcast over the batch, zero cell.
fn initial_state(tape: &mut Tape, p: &[Var], rows: usize, m: usize) -> Result<(Var, Var), DiffError> {
    let zeros = tape.leaf(Tensor::zeros(rows, m));
    let h = tape.add_row(zeros, p[LSTM_XI])?;
    let c = tape.leaf(Tensor::zeros(rows, m));
    Ok((h, c))
}

/// One recurrent step with gate order input, forget, output, candidate.
fn lstm_step(tape: &mut Tape, p: &[Var], m: usize, x: Var, h: Var, c: Var) -> Result<(Var, Var), DiffError> {
    let cat = tape.concat_cols(&[x, h])?;
    let g = tape.affine(cat, p[LSTM_WEIGHT], p[LSTM_BIAS])?;
    let gi = tape.slice_cols(g, 0, m)?;
    let gf = tape.slice_cols(g, m, 2 * m)?;
    let go = tape.slice_cols(g, 2 * m, 3 * m)?;
    let gg = tape.slice_cols(g, 3 * m, 4 * m)?;
    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let o = tape.sigmoid(go);
    let cand = tape.tanh(gg);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Recurrent states `H_1..H_T` only.
pub(crate) fn history(tape: &mut Tape, p: &[Var], dims: &Dims, inputs: &[Tensor]) -> Result<Vec<Var>, SeqVaeError> {
    let rows = inputs.first().map_or(0, Tensor::rows);
    let (mut h, mut c) = initial_state(tape, p, rows, dims.hidden)?;
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        let x = tape.leaf(x.clone());
        (h, c) = lstm_step(tape, p, dims.hidden, x, h, c)?;
        out.push(h);
    }
    Ok(out)
}

/// Builds the full loss for a batch on `tape`, with `p` the parameter leaves
/// in layout order.
pub(crate) fn forward(
    tape: &mut Tape,
    p: &[Var],
    dims: &Dims,
    config: &ModelConfig,
    batch: &[StepBatch],
    noise: &Noise,
) -> Result<Pass, SeqVaeError> {
    let rows = batch.first().ok_or(SeqVaeError::EmptyDataset)?.input.rows();
    if rows == 0 {
        return Err(SeqVaeError::EmptyDataset);
    }
    let (ds, dz, m, din) = (dims.s, dims.z, dims.hidden, dims.input);
    let (mut h, mut c) = initial_state(tape, p, rows, m)?;
    let mut s_prev = tape.leaf(Tensor::zeros(rows, ds));
    let mut z_prev = tape.leaf(Tensor::zeros(rows, dz));
    let mut clamped = 0;
    let mut sums: Option<[Var; 5]> = None;
    let mut steps = Vec::with_capacity(batch.len());

    for (k, step) in batch.iter().enumerate() {
        let mask = |head: Head| noise.masks.as_ref().map(|m| &m[k][head.index()]);
        let eps = noise.eps.as_ref().map(|e| &e[k]);

        let x = tape.leaf(step.input.clone());
        (h, c) = lstm_step(tape, p, m, x, h, c)?;

        let qs_in = tape.concat_cols(&[h, s_prev])?;
        let qs = mlp(tape, p, Head::PosteriorS, qs_in, mask(Head::PosteriorS))?;
        let (ms, ls) = split(tape, qs, ds)?;
        let qz_in = tape.concat_cols(&[h, z_prev])?;
        let qz = mlp(tape, p, Head::PosteriorZ, qz_in, mask(Head::PosteriorZ))?;
        let (mz, lz) = split(tape, qz, dz)?;
        let pz = mlp(tape, p, Head::PriorZ, h, mask(Head::PriorZ))?;
        let (mp, lp) = split(tape, pz, dz)?;

        let s = reparam(tape, ms, ls, eps.map(|e| &e.0))?;
        let z = reparam(tape, mz, lz, eps.map(|e| &e.1))?;

        let dec_in = tape.concat_cols(&[z, s])?;
        let dec = mlp(tape, p, Head::Decoder, dec_in, mask(Head::Decoder))?;
        let (dm, dl) = split(tape, dec, din)?;
        let recon = gaussian_ll_sum(tape, x, dm, dl)?;

        let kl_s = kl_sum(tape, ms, ls, None)?;
        let kl_z = kl_sum(tape, mz, lz, Some((mp, lp)))?;

        let g1_in = tape.concat_cols(&[z, s, h])?;
        let logit = mlp(tape, p, Head::Treatment, g1_in, mask(Head::Treatment))?;
        let treat = bernoulli_ll_sum(tape, logit, &step.treatment, &mut clamped)?;

        let out_in = tape.concat_cols(&[z, h])?;
        let out = mlp(tape, p, Head::Outcome, out_in, mask(Head::Outcome))?;
        let outcome = match config.outcome {
            OutcomeKind::Continuous => {
                let mean = tape.slice_cols(out, 0, 1)?;
                let raw = tape.slice_cols(out, 1, 2)?;
                let sp = tape.softplus(raw);
                let var = tape.add_scalar(sp, VARIANCE_FLOOR);
                let log_var = tape.log(var)?;
                let y = tape.leaf(step.outcome.clone());
                gaussian_ll_sum(tape, y, mean, log_var)?
            }
            OutcomeKind::Binary => bernoulli_ll_sum(tape, out, &step.outcome, &mut clamped)?,
        };

        let parts = [recon, kl_s, kl_z, treat, outcome];
        sums = Some(match sums {
            None => parts,
            Some(acc) => {
                let mut next = acc;
                for (a, b) in next.iter_mut().zip(parts) {
                    *a = tape.add(*a, b)?;
                }
                next
            }
        });
        steps.push(StepNodes { h, s_mean: ms, s_log_var: ls, z_mean: mz, z_log_var: lz, s, z });
        s_prev = s;
        z_prev = z;
    }

    let [recon, kl_s, kl_z, treatment, outcome] = sums.ok_or(SeqVaeError::EmptyDataset)?;
    let inv = 1.0 / rows as f64;
    let recon = tape.scale(recon, inv);
    let kl_s = tape.scale(kl_s, inv);
    let kl_z = tape.scale(kl_z, inv);
    let treatment = tape.scale(treatment, inv);
    let outcome = tape.scale(outcome, inv);

    let kl = tape.add(kl_s, kl_z)?;
    let elbo = tape.sub(recon, kl)?;
    let mut total = tape.neg(elbo);
    if config.alpha != 0.0 {
        let a = tape.scale(treatment, config.alpha);
        total = tape.sub(total, a)?;
    }
    if config.beta != 0.0 {
        let b = tape.scale(outcome, config.beta);
        total = tape.sub(total, b)?;
    }
    Ok(Pass { terms: LossTerms { recon, kl_s, kl_z, treatment, outcome, total }, steps, clamped })
}

/// Loss components of `params` on `batch`, without gradients.
pub fn loss_terms(
    params: &[Tensor],
    dims: &Dims,
    config: &ModelConfig,
    batch: &[StepBatch],
    noise: &Noise,
) -> Result<LossTerms, SeqVaeError> {
    let mut tape = Tape::new();
    let p: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let pass = forward(&mut tape, &p, dims, config, batch, noise)?;
    Ok(pass.terms.values(&tape))
}

/// Total loss as a tape function of the parameter leaves, for gradient checks.
pub fn toy_loss<'a>(
    dims: &'a Dims,
    config: &'a ModelConfig,
    batch: &'a [StepBatch],
    noise: &'a Noise,
) -> impl Fn(&mut Tape, &[Var]) -> Result<Var, DiffError> + 'a {
    move |tape, p| match forward(tape, p, dims, config, batch, noise) {
        Ok(pass) => Ok(pass.terms.total),
        Err(SeqVaeError::Diff(e)) => Err(e),
        Err(e) => Err(DiffError::Domain { op: "seqvae", detail: e.to_string() }),
    }
}

/// Posterior Gaussians of `S_t` and `Z_t` for one row, given `H_t` and the
/// previous latent draws.
pub fn encode_latents(
    model: &TdcivModel,
    h: &[f64],
    s_prev: &[f64],
    z_prev: &[f64],
) -> Result<(GaussianParams, GaussianParams), SeqVaeError> {
    let d = &model.dims;
    if h.len() != d.hidden || s_prev.len() != d.s || z_prev.len() != d.z {
        return Err(SeqVaeError::Mismatch(format!(
            "encode_latents expects widths ({}, {}, {})",
            d.hidden, d.s, d.z
        )));
    }
    let mut tape = Tape::new();
    let p: Vec<Var> = model.params.iter().map(|t| tape.leaf(t.clone())).collect();
    let h = tape.leaf(Tensor::row(h.to_vec()));
    let sp = tape.leaf(Tensor::row(s_prev.to_vec()));
    let zp = tape.leaf(Tensor::row(z_prev.to_vec()));
    let qs_in = tape.concat_cols(&[h, sp])?;
    let qs = mlp(&mut tape, &p, Head::PosteriorS, qs_in, None)?;
    let qz_in = tape.concat_cols(&[h, zp])?;
    let qz = mlp(&mut tape, &p, Head::PosteriorZ, qz_in, None)?;
    let gaussian = |v: &Tensor, w: usize| GaussianParams { mean: v.data()[..w].to_vec(), log_variance: v.data()[w..].to_vec() };
    Ok((gaussian(tape.value(qs), d.s), gaussian(tape.value(qz), d.z)))
}
