//! Closed-form ridge regression with an unpenalized intercept.

use serde::{Deserialize, Serialize};

use super::{data_hash, validate_matrix, Model, ModelError, ModelPayload};

/// Ridge solution: `y_hat = coefficients . x + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

impl LinearModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.coefficients.iter().zip(row).map(|(c, x)| c * x).sum::<f64>() + self.intercept
    }
}

/// Solves the normal equations `(X'X + lambda*D) beta = X'y` exactly,
/// where `D` is the identity with a zero in the intercept position.
///
/// The system can only be singular at `lambda = 0` (collinear columns);
/// that case retries once with a 1e-8 diagonal stabilizer so duplicated
/// features degrade gracefully instead of erroring.
pub fn train_linear(
    x: &[Vec<f64>],
    y: &[f64],
    columns: &[String],
    lambda: f64,
) -> Result<Model, ModelError> {
    let (_, p) = validate_matrix(x, y)?;
    let dim = p + 1;
    // Normal-equation matrix over the design [x, 1]; intercept is last.
    let mut base = vec![vec![0.0f64; dim]; dim];
    let mut rhs = vec![0.0f64; dim];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..dim {
            let xi = if i == p { 1.0 } else { row[i] };
            rhs[i] += xi * yi;
            for j in i..dim {
                let xj = if j == p { 1.0 } else { row[j] };
                base[i][j] += xi * xj;
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            base[i][j] = base[j][i];
        }
    }

    let solve = |stabilizer: f64| -> Option<Vec<f64>> {
        let mut a = base.clone();
        let mut b = rhs.clone();
        for (i, row) in a.iter_mut().enumerate() {
            if i < p {
                row[i] += lambda;
            }
            row[i] += stabilizer;
        }
        gaussian_solve(&mut a, &mut b)
    };

    let beta = solve(0.0).or_else(|| solve(1e-8)).ok_or(ModelError::Unsolvable)?;

    let payload = LinearModel {
        coefficients: beta[..p].to_vec(),
        intercept: beta[p],
        lambda,
    };
    Ok(Model {
        columns: columns.to_vec(),
        payload: ModelPayload::Linear(payload),
        seed: 0,
        data_hash: data_hash(x, y),
    })
}

/// Gaussian elimination with partial pivoting; None when a pivot vanishes.
fn gaussian_solve(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())?;
        if a[pivot_row][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}
