//! Shapley-value attribution: exact enumeration and the kernel-weighted
//! least-squares estimator.
//!
//! Coalition semantics: a feature in the coalition keeps its input value,
//! features outside take the baseline value, and the payoff is the target
//! logit. Kernel SHAP solves the Shapley-kernel weighted least squares with
//! the sum constraint `sum(phi) = f(input) - f(baseline)` folded in by
//! eliminating the last feature; with a budget covering every proper
//! coalition it enumerates exactly and matches brute force.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::linalg::solve;
use crate::rng::rng_split;
use crate::tensor::Tensor;

use super::Predictor;

const BRUTE_FORCE_LIMIT: usize = 16;

fn coalition_input(input: &Tensor, baseline: &Tensor, mask: u64) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(baseline.data())
        .enumerate()
        .map(|(i, (&x, &b))| if mask >> i & 1 == 1 { x } else { b })
        .collect();
    Tensor::from_raw(input.shape().to_vec(), data)
}

/// Exact Shapley values of `logit[target]` by full coalition enumeration;
/// feature count is capped at 16.
pub fn brute_force_shapley(
    model: &dyn Predictor,
    input: &Tensor,
    target: usize,
    baseline: &Tensor,
) -> Result<Tensor> {
    input.check_same_shape(baseline)?;
    let d = input.len();
    if d > BRUTE_FORCE_LIMIT {
        return Err(CoreError::Precondition(format!(
            "brute-force Shapley supports at most {BRUTE_FORCE_LIMIT} features, got {d}"
        )));
    }
    let total = 1usize << d;
    let mut payoff = vec![0.0; total];
    for (mask, slot) in payoff.iter_mut().enumerate() {
        *slot = model.logit(&coalition_input(input, baseline, mask as u64), target)?;
    }

    let mut factorial = vec![1.0f64; d + 1];
    for i in 1..=d {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let mut phi = vec![0.0; d];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in 0..total {
            if mask & bit != 0 {
                continue;
            }
            let s = (mask as u64).count_ones() as usize;
            let weight = factorial[s] * factorial[d - s - 1] / factorial[d];
            *phi_i += weight * (payoff[mask | bit] - payoff[mask]);
        }
    }
    Ok(Tensor::from_raw(input.shape().to_vec(), phi))
}

/// Shapley kernel weight for a coalition of size `s` out of `d` features.
fn kernel_weight(d: usize, s: usize) -> f64 {
    let mut binom = 1.0f64;
    for k in 0..s {
        binom = binom * (d - k) as f64 / (k + 1) as f64;
    }
    (d - 1) as f64 / (binom * (s * (d - s)) as f64)
}

/// Kernel SHAP estimate of the Shapley values of `logit[target]`.
///
/// Returns the attribution tensor and whether the coalition space was
/// enumerated exhaustively (in which case the run consumed no randomness).
pub fn kernel_shap(
    model: &dyn Predictor,
    input: &Tensor,
    target: usize,
    baseline: &Tensor,
    coalition_budget: usize,
    seed: u64,
) -> Result<(Tensor, bool)> {
    input.check_same_shape(baseline)?;
    let d = input.len();
    if coalition_budget < 1 {
        return Err(CoreError::Precondition(
            "coalition budget must be at least 1".into(),
        ));
    }
    let v_empty = model.logit(baseline, target)?;
    let v_full = model.logit(input, target)?;
    let delta = v_full - v_empty;
    if d == 1 {
        // The sum constraint determines the single attribution.
        return Ok((Tensor::from_raw(input.shape().to_vec(), vec![delta]), true));
    }

    let exhaustive = d <= 20 && coalition_budget >= (1usize << d) - 2;
    let coalitions: Vec<(u64, f64)> = if exhaustive {
        (1..((1u64 << d) - 1))
            .map(|mask| (mask, kernel_weight(d, mask.count_ones() as usize)))
            .collect()
    } else {
        // Sample sizes proportionally to the kernel weight mass, then a
        // uniform subset of that size; sampling absorbs the weights.
        let size_mass: Vec<f64> = (1..d).map(|s| 1.0 / (s * (d - s)) as f64).collect();
        let mass_total: f64 = size_mass.iter().sum();
        let mut rng = rng_split(seed, 0);
        let mut indices: Vec<usize> = (0..d).collect();
        (0..coalition_budget)
            .map(|_| {
                let mut pick = rng.gen::<f64>() * mass_total;
                let mut size = 1;
                for (s, &m) in size_mass.iter().enumerate() {
                    size = s + 1;
                    pick -= m;
                    if pick <= 0.0 {
                        break;
                    }
                }
                indices.shuffle(&mut rng);
                let mask = indices[..size].iter().fold(0u64, |m, &i| m | 1 << i);
                (mask, 1.0)
            })
            .collect()
    };

    // Eliminate the last feature with the constraint
    // phi[d-1] = delta - sum(others); unknowns are phi[0..d-1].
    let n = d - 1;
    let mut gram = vec![0.0; n * n];
    let mut rhs = vec![0.0; n];
    let mut row = vec![0.0; n];
    for &(mask, weight) in &coalitions {
        let z_last = (mask >> (d - 1) & 1) as f64;
        for (j, r) in row.iter_mut().enumerate() {
            *r = (mask >> j & 1) as f64 - z_last;
        }
        let y = model.logit(&coalition_input(input, baseline, mask), target)? - v_empty
            - z_last * delta;
        for i in 0..n {
            if row[i] == 0.0 {
                continue;
            }
            let wxi = weight * row[i];
            rhs[i] += wxi * y;
            for j in 0..n {
                gram[i * n + j] += wxi * row[j];
            }
        }
    }
    let head = solve(gram, rhs, n).map_err(|e| match e {
        CoreError::SingularSystem => CoreError::DegenerateSampling(
            "kernel SHAP system is singular; increase the coalition budget".into(),
        ),
        other => other,
    })?;
    let mut phi = head;
    phi.push(delta - phi.iter().sum::<f64>());
    Ok((Tensor::from_raw(input.shape().to_vec(), phi), exhaustive))
}
