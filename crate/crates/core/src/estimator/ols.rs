use super::EstimatorError;

/// Columns with a residual norm below this fraction of their own norm, after
/// projecting out the preceding columns, are treated as collinear.
const RANK_TOLERANCE: f64 = 1e-10;

/// A named design column.
#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self { name: name.into(), values }
    }
}

/// Least-squares fit of `response` on `columns` by Householder QR, in column
/// order. Returns one coefficient per column.
pub fn least_squares(columns: &[&Column], response: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    let n = response.len();
    let k = columns.len();
    if n <= k + 2 {
        return Err(EstimatorError::TooFewRows { rows: n, columns: k });
    }
    if let Some(c) = columns.iter().find(|c| c.values.len() != n) {
        return Err(EstimatorError::Shape(format!(
            "column `{}` has {} rows, response has {n}",
            c.name,
            c.values.len()
        )));
    }

    // Column-major working copy; reflections overwrite it with R.
    let mut a: Vec<Vec<f64>> = columns.iter().map(|c| c.values.clone()).collect();
    let norms: Vec<f64> = a.iter().map(|c| norm(c)).collect();
    let mut qty = response.to_vec();
    let mut v = vec![0.0; n];

    for j in 0..k {
        let sigma = norm(&a[j][j..]);
        if norms[j] == 0.0 || sigma <= RANK_TOLERANCE * norms[j] {
            return Err(EstimatorError::Collinear { column: columns[j].name.clone() });
        }
        let alpha = if a[j][j] > 0.0 { -sigma } else { sigma };
        v[j..].copy_from_slice(&a[j][j..]);
        v[j] -= alpha;
        let vnorm2 = dot(&v[j..], &v[j..]);
        let reflect = |col: &mut [f64]| {
            let f = 2.0 * dot(&v[j..], &col[j..]) / vnorm2;
            for (x, vi) in col[j..].iter_mut().zip(&v[j..]) {
                *x -= f * vi;
            }
        };
        for col in a.iter_mut().skip(j) {
            reflect(col);
        }
        reflect(&mut qty);
    }

    let mut beta = vec![0.0; k];
    for j in (0..k).rev() {
        let mut acc = qty[j];
        for (l, b) in beta.iter().enumerate().skip(j + 1) {
            acc -= a[l][j] * b;
        }
        beta[j] = acc / a[j][j];
    }
    Ok(beta)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Fitted values `sum_j beta_j * column_j`.
pub fn fitted(columns: &[&Column], beta: &[f64]) -> Vec<f64> {
    let n = columns.first().map_or(0, |c| c.values.len());
    let mut out = vec![0.0; n];
    for (c, b) in columns.iter().zip(beta) {
        for (o, x) in out.iter_mut().zip(&c.values) {
            *o += b * x;
        }
    }
    out
}

/// Response, focal regressor and controls for one partial coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionDesign {
    pub response: Vec<f64>,
    pub focal: Column,
    pub controls: Vec<Column>,
    pub intercept: bool,
}

impl RegressionDesign {
    pub fn new(response: Vec<f64>, focal: Column, controls: Vec<Column>) -> Self {
        Self { response, focal, controls, intercept: true }
    }
}

/// OLS coefficient of the focal column with the controls (and intercept) included.
pub fn partial_coefficient(design: &RegressionDesign) -> Result<f64, EstimatorError> {
    // Focal last, so a focal column in the span of the controls is the one
    // reported as collinear.
    let ones = design.intercept.then(|| Column::new("intercept", vec![1.0; design.response.len()]));
    let mut cols: Vec<&Column> = ones.iter().chain(&design.controls).collect();
    cols.push(&design.focal);
    let beta = least_squares(&cols, &design.response)?;
    Ok(*beta.last().expect("focal column present"))
}
