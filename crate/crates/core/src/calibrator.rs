//! Post-training conversion of empirical privacy measurements into
//! per-sample epsilon bounds with confidence, conversion to
//! (epsilon, delta)-differential privacy, and release filtering.
//!
//! For a sample `x` with density estimate `fhat`, CI halfwidth `hw`, density
//! gradient `grad_fhat`, and Jacobian term `jac = grad_x sum_k log|det J_k|`:
//!
//! ```text
//! lower = || grad_fhat / (fhat - hw) - jac ||      (shrunken denominator)
//! upper = || grad_fhat / (fhat + hw) - jac ||      (grown denominator)
//! eps'  = max(lower, upper)
//! eps   = eps' + d sqrt(K / (4 fhat)) z_{1-alpha/2},   K = mu_K / (n h^d)
//! ```
//!
//! Denominators are floored at `1e-12` (flagged and counted). The final
//! bound holds with probability `1 - alpha`, which is exactly the `delta`
//! of the DP conversion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{DensityEval, DensityModel};
use crate::numkit::matrix::{norm2, Matrix};
use crate::privatizer::{PrivatizeError, PrivatizerParams};

/// Floor applied to CI denominators to keep epsilon finite.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// The `eps'` piece with its CI endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonPrime {
    pub eps_prime: f64,
    pub lower: f64,
    pub upper: f64,
    /// true when a denominator hit the floor
    pub clamped: bool,
}

/// Per-sample calibration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub index: usize,
    pub eps_prime: f64,
    pub eps_final: f64,
    pub alpha: f64,
    pub fhat: f64,
    pub halfwidth: f64,
    pub released: bool,
    pub clamped: bool,
    /// sample could not be privatized (singular map beyond jitter); its
    /// epsilon is infinite and it is never released
    pub unprivatizable: bool,
}

/// Lipschitz level converted to (epsilon, delta)-DP under an l2 adjacency
/// of radius `lambda_adj`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub eps_lipschitz: f64,
    pub lambda_adj: f64,
    pub eps_dp: f64,
    pub delta: f64,
}

/// `eps' = max(lower, upper)` from raw parts.
pub fn epsilon_prime_from_parts(
    grad_fhat: &[f64],
    fhat: f64,
    halfwidth: f64,
    jac: &[f64],
) -> EpsilonPrime {
    debug_assert_eq!(grad_fhat.len(), jac.len());
    fn scaled_norm(grad_fhat: &[f64], jac: &[f64], denom: f64, clamped: &mut bool) -> f64 {
        let d = if denom > DENOMINATOR_FLOOR {
            denom
        } else {
            *clamped = true;
            DENOMINATOR_FLOOR
        };
        let diff: Vec<f64> = grad_fhat.iter().zip(jac).map(|(&g, &j)| g / d - j).collect();
        norm2(&diff)
    }
    let mut clamped = false;
    let lower = scaled_norm(grad_fhat, jac, fhat - halfwidth, &mut clamped);
    let upper = scaled_norm(grad_fhat, jac, fhat + halfwidth, &mut clamped);
    EpsilonPrime { eps_prime: lower.max(upper), lower, upper, clamped }
}

/// CI-widened add-on `d sqrt(K/(4 fhat)) z` for given constants.
pub fn epsilon_final_addon(dim: usize, variance_constant: f64, fhat: f64, z: f64) -> f64 {
    let f = fhat.max(DENOMINATOR_FLOOR);
    dim as f64 * (variance_constant / (4.0 * f)).sqrt() * z
}

/// `eps'` for one sample through the privatizer and density model.
pub fn epsilon_prime(
    privatizer: &PrivatizerParams,
    density: &DensityModel<f64>,
    x: &[f64],
) -> Result<EpsilonPrime, PrivatizeError> {
    let sample = privatizer.privatize(x)?;
    let ev = density.evaluate(x)?;
    Ok(epsilon_prime_from_parts(&ev.grad_fhat, ev.fhat, ev.halfwidth, &sample.logdet_grad_x))
}

/// Final per-sample epsilon bound (holds with probability `1 - alpha`).
pub fn epsilon_final(
    privatizer: &PrivatizerParams,
    density: &DensityModel<f64>,
    x: &[f64],
) -> Result<f64, PrivatizeError> {
    let ep = epsilon_prime(privatizer, density, x)?;
    let ev = density.evaluate(x)?;
    Ok(ep.eps_prime
        + epsilon_final_addon(density.dim(), density.variance_constant(), ev.fhat, density.z_alpha()))
}

/// Lipschitz-to-DP conversion: `eps_dp = eps * lambda_adj`, `delta = alpha`.
pub fn to_dp(eps_lipschitz: f64, lambda_adj: f64, alpha: f64) -> DpGuarantee {
    assert!(lambda_adj > 0.0, "adjacency radius must be positive");
    DpGuarantee { eps_lipschitz, lambda_adj, eps_dp: eps_lipschitz * lambda_adj, delta: alpha }
}

/// Calibrate every listed sample. Unprivatizable samples get an infinite
/// epsilon instead of aborting the batch. Parallel over samples with
/// slot-indexed output, so results are deterministic.
pub fn calibrate_samples(
    privatizer: &PrivatizerParams,
    density: &DensityModel<f64>,
    x: &Matrix<f64>,
    indices: &[usize],
) -> Vec<CalibrationRecord> {
    let dim = density.dim();
    let k = density.variance_constant();
    let z = density.z_alpha();
    let alpha = density.alpha();
    indices
        .par_iter()
        .map(|&i| {
            let xi = x.row(i);
            let ev: DensityEval<f64> = density.evaluate(xi).expect("dimension checked upstream");
            match privatizer.privatize(xi) {
                Ok(sample) => {
                    let ep = epsilon_prime_from_parts(
                        &ev.grad_fhat,
                        ev.fhat,
                        ev.halfwidth,
                        &sample.logdet_grad_x,
                    );
                    let eps_final =
                        ep.eps_prime + epsilon_final_addon(dim, k, ev.fhat, z);
                    CalibrationRecord {
                        index: i,
                        eps_prime: ep.eps_prime,
                        eps_final,
                        alpha,
                        fhat: ev.fhat,
                        halfwidth: ev.halfwidth,
                        released: false,
                        clamped: ep.clamped,
                        unprivatizable: false,
                    }
                }
                Err(_) => CalibrationRecord {
                    index: i,
                    eps_prime: f64::INFINITY,
                    eps_final: f64::INFINITY,
                    alpha,
                    fhat: ev.fhat,
                    halfwidth: ev.halfwidth,
                    released: false,
                    clamped: false,
                    unprivatizable: true,
                },
            }
        })
        .collect()
}

/// Aggregate privacy report for one release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    /// histogram bin edges: 40 equal bins over `[0, 2 eps_target]` plus an
    /// overflow bin, fixed so reports are reproducible
    pub bin_edges: Vec<f64>,
    /// counts per bin over all calibrated samples (last entry = overflow)
    pub counts: Vec<usize>,
    pub alpha: f64,
    pub eps_target: f64,
    pub total_count: usize,
    pub released_count: usize,
    pub clamp_count: usize,
    pub unprivatizable_count: usize,
    /// conservative dataset-level epsilon: max over released samples
    pub eps_max_released: f64,
    pub eps_mean: f64,
    pub empty_release: bool,
    pub dp: DpGuarantee,
}

/// Mark `released = eps_final <= eps_target`, build the report.
pub fn filter_release(
    records: &mut [CalibrationRecord],
    eps_target: f64,
    lambda_adj: f64,
) -> PrivacyReport {
    let alpha = records.first().map_or(0.05, |r| r.alpha);
    let bins = 40usize;
    let hi = 2.0 * eps_target.max(f64::MIN_POSITIVE);
    let bin_edges: Vec<f64> = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins + 1];
    let mut released_count = 0usize;
    let mut clamp_count = 0usize;
    let mut unprivatizable_count = 0usize;
    let mut eps_max_released = 0.0f64;
    let mut eps_sum = 0.0f64;
    for r in records.iter_mut() {
        r.released = r.eps_final <= eps_target;
        if r.released {
            released_count += 1;
            eps_max_released = eps_max_released.max(r.eps_final);
        }
        if r.clamped {
            clamp_count += 1;
        }
        if r.unprivatizable {
            unprivatizable_count += 1;
        }
        eps_sum += if r.eps_final.is_finite() { r.eps_final } else { 0.0 };
        let slot = if r.eps_final >= hi || !r.eps_final.is_finite() {
            bins
        } else {
            ((r.eps_final / hi) * bins as f64).floor() as usize
        };
        counts[slot.min(bins)] += 1;
    }
    let total = records.len();
    PrivacyReport {
        bin_edges,
        counts,
        alpha,
        eps_target,
        total_count: total,
        released_count,
        clamp_count,
        unprivatizable_count,
        eps_max_released,
        eps_mean: if total > 0 { eps_sum / total as f64 } else { 0.0 },
        empty_release: released_count == 0,
        dp: to_dp(eps_max_released, lambda_adj, alpha),
    }
}

/// Calibration CSV: `index,eps_prime,eps_final,fhat,halfwidth,released`.
pub fn records_to_csv(records: &[CalibrationRecord]) -> String {
    let mut out = String::from("index,eps_prime,eps_final,fhat,halfwidth,released\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
            r.index, r.eps_prime, r.eps_final, r.fhat, r.halfwidth, r.released as u8
        ));
    }
    out
}

/// Wasserstein-1 distance between two empirical distributions (the area
/// between their CDFs). Used for the train/test epsilon-histogram
/// generalization check.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).expect("finite values"));
    ys.sort_by(|p, q| p.partial_cmp(q).expect("finite values"));
    let na = xs.len() as f64;
    let nb = ys.len() as f64;
    let mut i = 0usize;
    let mut j = 0usize;
    let mut dist = 0.0;
    let mut prev = xs[0].min(ys[0]);
    while i < xs.len() || j < ys.len() {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        let fa = i as f64 / na;
        let fb = j as f64 / nb;
        dist += (fa - fb).abs() * (next - prev);
        prev = next;
        while i < xs.len() && xs[i] == next {
            i += 1;
        }
        while j < ys.len() && ys[j] == next {
            j += 1;
        }
    }
    dist
}
