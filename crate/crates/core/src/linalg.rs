//! Small dense linear solves used by the surrogate-model methods.

use crate::error::{CoreError, Result};

/// Solve `A x = b` for a dense row-major `n x n` matrix by Gaussian
/// elimination with partial pivoting. `A` and `b` are consumed in place.
pub fn solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let scale: f64 = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                a[r1 * n + col]
                    .abs()
                    .partial_cmp(&a[r2 * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot_row * n + col].abs() < 1e-12 * scale {
            return Err(CoreError::SingularSystem);
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// Weighted ridge regression: minimize
/// `sum_i w_i (y_i - x_i . beta)^2 + lambda * |beta_penalized|^2`.
///
/// Rows of `xs` are observations with `dim` columns; `penalize` marks which
/// coefficients the ridge term applies to (intercepts stay unpenalized).
pub fn weighted_ridge(
    xs: &[Vec<f64>],
    y: &[f64],
    weights: &[f64],
    lambda: f64,
    penalize: &[bool],
    dim: usize,
) -> Result<Vec<f64>> {
    debug_assert_eq!(xs.len(), y.len());
    debug_assert_eq!(xs.len(), weights.len());
    debug_assert_eq!(penalize.len(), dim);
    let mut gram = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    for ((row, &target), &w) in xs.iter().zip(y).zip(weights) {
        debug_assert_eq!(row.len(), dim);
        for i in 0..dim {
            let wxi = w * row[i];
            rhs[i] += wxi * target;
            for j in i..dim {
                gram[i * dim + j] += wxi * row[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            gram[i * dim + j] = gram[j * dim + i];
        }
        if penalize[i] {
            gram[i * dim + i] += lambda;
        }
    }
    solve(gram, rhs, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        // [2 1; 1 3] x = [5; 10] -> x = (1, 3)
        let x = solve(vec![2.0, 1.0, 1.0, 3.0], vec![5.0, 10.0], 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singular_system_is_an_error() {
        let r = solve(vec![1.0, 2.0, 2.0, 4.0], vec![1.0, 2.0], 2);
        assert!(matches!(r, Err(CoreError::SingularSystem)));
    }

    #[test]
    fn ridge_recovers_exact_linear_fit() {
        // y = 2 + 3a - b over a small grid, intercept unpenalized.
        let mut xs = Vec::new();
        let mut y = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                xs.push(vec![1.0, a as f64, b as f64]);
                y.push(2.0 + 3.0 * a as f64 - b as f64);
            }
        }
        let w = vec![1.0; xs.len()];
        let beta = weighted_ridge(&xs, &y, &w, 1e-9, &[false, true, true], 3).unwrap();
        assert!((beta[0] - 2.0).abs() < 1e-6);
        assert!((beta[1] - 3.0).abs() < 1e-6);
        assert!((beta[2] + 1.0).abs() < 1e-6);
    }
}
