use super::{DiffError, Tape, Tensor, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |analytic|, |numeric|)` over checked coordinates.
    pub max_relative_error: f64,
    /// `(tensor, coordinate)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    /// Coordinates where the one-sided slopes disagree (a kink); not compared.
    pub non_smooth: Vec<(usize, usize)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn is_clean(&self) -> bool {
        self.non_smooth.is_empty()
    }
}

fn evaluate<F>(f: &F, points: &[Tensor]) -> Result<f64, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(DiffError::NonScalarRoot { shape: v.shape() });
    }
    Ok(v.item())
}

/// Checks the gradient of a scalar function of several tensors at `points`
/// against central finite differences with step `perturbation`.
pub fn grad_check<F>(f: F, points: &[Tensor], perturbation: f64) -> Result<GradCheck, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if !(perturbation > 0.0) {
        return Err(DiffError::BadPerturbation(perturbation));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let centre = tape.value(root).item();
    if !centre.is_finite() {
        return Err(DiffError::Probe { tensor: 0, coordinate: 0 });
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut probe = points.to_vec();
    let mut report = GradCheck { max_relative_error: 0.0, worst: None, non_smooth: Vec::new(), checked: 0 };
    for ti in 0..points.len() {
        for ci in 0..points[ti].len() {
            let x0 = points[ti].data()[ci];
            probe[ti].data_mut()[ci] = x0 + perturbation;
            let up = evaluate(&f, &probe);
            probe[ti].data_mut()[ci] = x0 - perturbation;
            let down = evaluate(&f, &probe);
            probe[ti].data_mut()[ci] = x0;
            let (Ok(up), Ok(down)) = (up, down) else {
                return Err(DiffError::Probe { tensor: ti, coordinate: ci });
            };
            if !up.is_finite() || !down.is_finite() {
                return Err(DiffError::Probe { tensor: ti, coordinate: ci });
            }

            let forward = (up - centre) / perturbation;
            let backward = (centre - down) / perturbation;
            if (forward - backward).abs() > 0.1 * 1f64.max(forward.abs()).max(backward.abs()) {
                report.non_smooth.push((ti, ci));
                continue;
            }
            let numeric = (up - down) / (2.0 * perturbation);
            let a = analytic[ti].data()[ci];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                if rel >= report.max_relative_error {
                    report.worst = Some((ti, ci));
                }
            }
        }
    }
    Ok(report)
}
