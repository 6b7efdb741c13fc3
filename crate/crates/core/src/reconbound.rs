//! Reconstruction-error lower bounds: the exact van-Trees form
//! `d^2 / (eps^2 + Tr I(f_X))`, and the empirically calibrated form that
//! inflates the denominator with the KDE score-estimation error
//! `c1^2 / (n h^{d+4})`.

use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::numkit::matrix::Matrix;
use crate::numkit::rng::Rng;

/// A bound value, or the degenerate case where the denominator vanishes (the
/// trivial-nullspace assumption fails and no finite bound exists).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Bound {
    Bounded { value: f64 },
    Unbounded,
}

impl Bound {
    pub fn value(&self) -> Option<f64> {
        match self {
            Bound::Bounded { value } => Some(*value),
            Bound::Unbounded => None,
        }
    }
}

/// Inputs to the empirical bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconBoundInputs {
    pub d: usize,
    /// Lipschitz privacy level of the mechanism.
    pub eps: f64,
    pub fisher_trace: f64,
    pub n: usize,
    pub h: f64,
    /// KDE score-error constant (estimated per run; the analysis defines it
    /// only existentially).
    pub c1: f64,
}

/// `R(A) >= d^2 / (eps^2 + Tr I(f_X))` for the identity-mean estimator case.
pub fn recon_lower_bound(d: usize, eps: f64, fisher_trace: f64) -> Bound {
    assert!(fisher_trace >= 0.0, "Fisher trace is nonnegative");
    let denom = eps * eps + fisher_trace;
    if denom <= 0.0 {
        return Bound::Unbounded;
    }
    Bound::Bounded { value: (d * d) as f64 / denom }
}

/// `R(A) >= d^2 / (eps^2 + Tr Ihat + c1^2/(n h^{d+4}))`.
pub fn empirical_recon_bound(inputs: &ReconBoundInputs) -> Bound {
    assert!(inputs.n > 0 && inputs.h > 0.0, "need positive n and h");
    let kde_term = inputs.c1 * inputs.c1 / (inputs.n as f64 * inputs.h.powi(inputs.d as i32 + 4));
    let denom = inputs.eps * inputs.eps + inputs.fisher_trace + kde_term;
    if denom <= 0.0 {
        return Bound::Unbounded;
    }
    Bound::Bounded { value: (inputs.d * inputs.d) as f64 / denom }
}

/// Estimate `c1^2` as the ratio between the observed score-estimation MSE on
/// held-out points and `1/(n h^{d+4})`, given the true scores.
pub fn estimate_c1_sq(
    density: &DensityModel<f64>,
    heldout: &Matrix<f64>,
    true_scores: &Matrix<f64>,
) -> f64 {
    assert_eq!(heldout.rows(), true_scores.rows());
    let mut mse = 0.0;
    for i in 0..heldout.rows() {
        let s = density.score(heldout.row(i)).expect("dimension matches");
        let t = true_scores.row(i);
        mse += s.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>();
    }
    mse /= heldout.rows() as f64;
    let rate = 1.0 / (density.n() as f64 * density.bandwidth().powi(density.dim() as i32 + 4));
    mse / rate
}

/// Monte-Carlo diagnostics for the two supporting lemmas: the
/// variance-trace identity and the zero-mean score.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LemmaDiagnostics {
    /// `E||A(z) - mu||^2` for `A(z) = z`, `z ~ N(mu, I_d)`; should match `d`.
    pub mc_second_moment: f64,
    pub expected_trace: f64,
    /// MC standard error of the second-moment estimate.
    pub mc_standard_error: f64,
    /// Norm of the mean KDE score over mixture self-samples.
    pub score_mean_norm: f64,
    /// 3x the per-coordinate standard error budget for the score mean.
    pub score_tolerance: f64,
    pub lemma1_ok: bool,
    pub lemma2_ok: bool,
}

/// Verify the lemmas by simulation against the given density model.
pub fn check_lemmas(density: &DensityModel<f64>, sample_count: usize, seed: u64) -> LemmaDiagnostics {
    let d = density.dim();
    let mut rng = Rng::new(seed);
    // lemma 1 with A(z) = z, z ~ N(mu, I_d): E||z - mu||^2 = Tr(I_d) = d
    let mu: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let mut acc = 0.0;
    let mut acc_sq = 0.0;
    for _ in 0..sample_count {
        let sq: f64 = mu.iter().map(|&m| {
            let z = m + rng.normal();
            (z - m) * (z - m)
        }).sum();
        acc += sq;
        acc_sq += sq * sq;
    }
    let mean = acc / sample_count as f64;
    let var = (acc_sq / sample_count as f64 - mean * mean).max(0.0);
    let se = (var / sample_count as f64).sqrt();
    let lemma1_ok = (mean - d as f64).abs() <= 3.0 * se.max(1e-12);

    // lemma 2: mean score over self-samples of the mixture is zero
    let mut sums = vec![0.0f64; d];
    let mut sums_sq = vec![0.0f64; d];
    for _ in 0..sample_count {
        let x = density.sample(&mut rng);
        let s = density.score(&x).expect("self-sample has model dimension");
        for j in 0..d {
            sums[j] += s[j];
            sums_sq[j] += s[j] * s[j];
        }
    }
    let mut lemma2_ok = true;
    let mut norm_sq = 0.0;
    let mut tol = 0.0f64;
    for j in 0..d {
        let m = sums[j] / sample_count as f64;
        let v = (sums_sq[j] / sample_count as f64 - m * m).max(0.0);
        let se_j = (v / sample_count as f64).sqrt();
        if m.abs() > 3.0 * se_j.max(1e-12) {
            lemma2_ok = false;
        }
        norm_sq += m * m;
        tol = tol.max(3.0 * se_j);
    }
    LemmaDiagnostics {
        mc_second_moment: mean,
        expected_trace: d as f64,
        mc_standard_error: se,
        score_mean_norm: norm_sq.sqrt(),
        score_tolerance: tol,
        lemma1_ok,
        lemma2_ok,
    }
}

/// JSON-serializable bound report.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundReport {
    pub d: usize,
    pub eps: f64,
    pub fisher_trace: f64,
    pub c1: f64,
    pub n: usize,
    pub h: f64,
    pub bound_exact: Bound,
    pub bound_empirical: Bound,
}

/// Bundle both bounds for reporting. Degenerate Fisher information (zero
/// trace with zero eps) is reported as unbounded rather than a number.
pub fn bound_report(inputs: &ReconBoundInputs) -> BoundReport {
    BoundReport {
        d: inputs.d,
        eps: inputs.eps,
        fisher_trace: inputs.fisher_trace,
        c1: inputs.c1,
        n: inputs.n,
        h: inputs.h,
        bound_exact: recon_lower_bound(inputs.d, inputs.eps, inputs.fisher_trace),
        bound_empirical: empirical_recon_bound(inputs),
    }
}
