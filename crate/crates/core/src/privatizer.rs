//! The power mechanism. A network produces a per-sample matrix
//! `H = I + reshape(P_N(x))`; the embedding is `z = H^p x` with the same `H`
//! reused for all `p` steps, and every layer contributes `log|det H|` to the
//! Jacobian log-determinant sum. The two-layer tanh variant
//! `z = tanh(W2 W1 x + b2)` has closed-form log-determinant gradients and is
//! the subject of the smoothness analysis in [`crate::trainer`].
//!
//! The privacy-inducing loss is
//! `L_P(x) = || score(x) - grad_x sum_k log|det J_k| ||_2`
//! with `score` coming from the KDE in [`crate::density`]. Parameter
//! gradients of `L_P` need the derivative of an input-gradient, which is
//! where [`crate::numkit::Mlp::rop_backprop`] comes in; everything here is
//! checked against the finite-difference oracle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::DensityModel;
use crate::numkit::matrix::{norm2, sub, Matrix};
use crate::numkit::mlp::{Activation, Mlp, MlpCache, MlpGrads};
use crate::numkit::rng::Rng;
use crate::numkit::NumError;

/// `|det|` below this threshold triggers the jitter policy.
pub const DET_ABS_FLOOR: f64 = 1e-8;
/// Default diagonal jitter added to a near-singular map.
pub const DEFAULT_DET_JITTER: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum PrivatizeError {
    #[error("sample is unprivatizable: map stays singular after jitter")]
    Unprivatizable,
    #[error(transparent)]
    Shape(#[from] NumError),
    #[error("density error: {0}")]
    Density(#[from] crate::density::DensityError),
}

/// Which functional form the privatizer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    LinearPower,
    TwoLayerTanh,
}

/// Trainable privatizer parameters.
#[derive(Debug, Clone)]
pub enum PrivatizerParams {
    /// `z = H^p x`, `H = I + reshape(net(x))`, `net: d -> ... -> d*d`.
    LinearPower { net: Mlp<f64>, dim: usize, power: u32, det_jitter: f64 },
    /// `z = tanh(W2 W1 x + b2)` with `W1: h_w x d`, `W2: d x h_w`.
    TwoLayerTanh { w1: Matrix<f64>, w2: Matrix<f64>, b2: Vec<f64>, det_jitter: f64 },
}

/// One privatized sample with its Jacobian accounting.
#[derive(Debug, Clone)]
pub struct PrivatizedSample {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    /// `sum_k log|det J_k|` under the frozen-Jacobian convention.
    pub logdet_sum: f64,
    /// `d/dx` of `logdet_sum`.
    pub logdet_grad_x: Vec<f64>,
    /// Sign of the determinant of the per-step map (tracked, not used in the
    /// loss, which is defined on `log|det|`).
    pub det_sign: i8,
    pub jittered: bool,
}

/// Privatized sample plus the internal caches gradient passes reuse.
pub struct PrivatizeCache {
    pub sample: PrivatizedSample,
    detail: CacheDetail,
}

enum CacheDetail {
    LinearPower {
        net_cache: MlpCache<f64>,
        h: Matrix<f64>,
        h_inv_t_vec: Vec<f64>,
        /// `x, Hx, ..., H^p x`
        powers: Vec<Vec<f64>>,
    },
    TwoLayerTanh {
        /// effective map `W2 W1 (+ jitter I)`
        m_eff: Matrix<f64>,
        tanh_a: Vec<f64>,
    },
}

/// Parameter gradients matching a [`PrivatizerParams`] layout.
#[derive(Debug, Clone)]
pub enum PrivGrads {
    LinearPower(MlpGrads<f64>),
    TwoLayerTanh { dw1: Matrix<f64>, dw2: Matrix<f64>, db2: Vec<f64> },
}

impl PrivGrads {
    pub fn zeros_like(params: &PrivatizerParams) -> Self {
        match params {
            PrivatizerParams::LinearPower { net, .. } => PrivGrads::LinearPower(MlpGrads::zeros_like(net)),
            PrivatizerParams::TwoLayerTanh { w1, w2, b2, .. } => PrivGrads::TwoLayerTanh {
                dw1: Matrix::zeros(w1.rows(), w1.cols()),
                dw2: Matrix::zeros(w2.rows(), w2.cols()),
                db2: vec![0.0; b2.len()],
            },
        }
    }

    pub fn add_scaled(&mut self, other: &PrivGrads, scale: f64) {
        match (self, other) {
            (PrivGrads::LinearPower(a), PrivGrads::LinearPower(b)) => a.add_scaled(b, scale),
            (
                PrivGrads::TwoLayerTanh { dw1, dw2, db2 },
                PrivGrads::TwoLayerTanh { dw1: o1, dw2: o2, db2: ob },
            ) => {
                dw1.add_scaled(o1, scale);
                dw2.add_scaled(o2, scale);
                for (x, &y) in db2.iter_mut().zip(ob) {
                    *x += scale * y;
                }
            }
            _ => panic!("gradient variant mismatch"),
        }
    }

    pub fn scale(&mut self, s: f64) {
        match self {
            PrivGrads::LinearPower(g) => g.scale(s),
            PrivGrads::TwoLayerTanh { dw1, dw2, db2 } => {
                dw1.scale(s);
                dw2.scale(s);
                for v in db2.iter_mut() {
                    *v *= s;
                }
            }
        }
    }

    /// Flat layout matching [`PrivatizerParams::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        match self {
            PrivGrads::LinearPower(g) => g.flat(),
            PrivGrads::TwoLayerTanh { dw1, dw2, db2 } => {
                let mut out = Vec::new();
                out.extend_from_slice(dw1.as_slice());
                out.extend_from_slice(dw2.as_slice());
                out.extend_from_slice(db2);
                out
            }
        }
    }
}

impl PrivatizerParams {
    /// Random linear-power privatizer: `d -> hidden... -> d*d` with tanh
    /// hidden layers and a linear output, weights uniform in
    /// `±1/sqrt(fan_in)`. The output layer is additionally scaled by 0.1 so
    /// that, together with the identity offset on the reshaped output, the
    /// initial map is genuinely close to the identity and the early privacy
    /// loss sits near the score norm.
    pub fn linear_power(dim: usize, hidden: &[usize], power: u32, rng: &mut Rng) -> Self {
        assert!(power >= 1, "power must be at least 1");
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(dim);
        sizes.extend_from_slice(hidden);
        sizes.push(dim * dim);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        let mut net = Mlp::new(&sizes, &acts).expect("valid layer spec");
        net.init_uniform(rng);
        if let Some(last) = net.layers_mut().last_mut() {
            last.weight.scale(0.1);
        }
        PrivatizerParams::LinearPower { net, dim, power, det_jitter: DEFAULT_DET_JITTER }
    }

    /// Linear-power privatizer with all-zero weights: `H = I`, `z = x`.
    pub fn identity(dim: usize, power: u32) -> Self {
        let net = Mlp::new(&[dim, dim * dim], &[Activation::Identity]).expect("valid layer spec");
        PrivatizerParams::LinearPower { net, dim, power, det_jitter: DEFAULT_DET_JITTER }
    }

    /// Random two-layer tanh privatizer with first-layer width `hidden_w`.
    pub fn two_layer_tanh(dim: usize, hidden_w: usize, rng: &mut Rng) -> Self {
        let mut w1 = Matrix::zeros(hidden_w, dim);
        let mut w2 = Matrix::zeros(dim, hidden_w);
        let b1 = 1.0 / (dim as f64).sqrt();
        for v in w1.as_mut_slice() {
            *v = rng.uniform_in(-b1, b1);
        }
        let b2s = 1.0 / (hidden_w as f64).sqrt();
        for v in w2.as_mut_slice() {
            *v = rng.uniform_in(-b2s, b2s);
        }
        PrivatizerParams::TwoLayerTanh { w1, w2, b2: vec![0.0; dim], det_jitter: DEFAULT_DET_JITTER }
    }

    pub fn kind(&self) -> VariantKind {
        match self {
            PrivatizerParams::LinearPower { .. } => VariantKind::LinearPower,
            PrivatizerParams::TwoLayerTanh { .. } => VariantKind::TwoLayerTanh,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PrivatizerParams::LinearPower { dim, .. } => *dim,
            PrivatizerParams::TwoLayerTanh { w1, .. } => w1.cols(),
        }
    }

    pub fn power(&self) -> u32 {
        match self {
            PrivatizerParams::LinearPower { power, .. } => *power,
            PrivatizerParams::TwoLayerTanh { .. } => 1,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            PrivatizerParams::LinearPower { net, .. } => net.param_count(),
            PrivatizerParams::TwoLayerTanh { w1, w2, b2, .. } => {
                w1.as_slice().len() + w2.as_slice().len() + b2.len()
            }
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        match self {
            PrivatizerParams::LinearPower { net, .. } => net.params_flat(),
            PrivatizerParams::TwoLayerTanh { w1, w2, b2, .. } => {
                let mut out = Vec::with_capacity(self.param_count());
                out.extend_from_slice(w1.as_slice());
                out.extend_from_slice(w2.as_slice());
                out.extend_from_slice(b2);
                out
            }
        }
    }

    pub fn set_params_from(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        match self {
            PrivatizerParams::LinearPower { net, .. } => net.set_params_from(flat),
            PrivatizerParams::TwoLayerTanh { w1, w2, b2, .. } => {
                let (wl, rest) = flat.split_at(w1.as_slice().len());
                let (w2l, bl) = rest.split_at(w2.as_slice().len());
                w1.as_mut_slice().copy_from_slice(wl);
                w2.as_mut_slice().copy_from_slice(w2l);
                b2.copy_from_slice(bl);
            }
        }
    }

    /// Privatize one sample.
    pub fn privatize(&self, x: &[f64]) -> Result<PrivatizedSample, PrivatizeError> {
        Ok(self.privatize_cached(x)?.sample)
    }

    /// Privatize and keep the internal caches for gradient passes.
    pub fn privatize_cached(&self, x: &[f64]) -> Result<PrivatizeCache, PrivatizeError> {
        match self {
            PrivatizerParams::LinearPower { net, dim, power, det_jitter } => {
                let d = *dim;
                if x.len() != d {
                    return Err(NumError::Shape {
                        expected: format!("input of length {d}"),
                        got: format!("{}", x.len()),
                    }
                    .into());
                }
                let net_cache = net.forward_cached(x)?;
                let mut h = Matrix::from_vec(d, d, net_cache.output().to_vec())?;
                h.add_scaled_identity(1.0);
                let (sign, logabs, jittered) = apply_jitter_policy(&mut h, *det_jitter)?;
                let p = *power as usize;
                let mut powers = Vec::with_capacity(p + 1);
                powers.push(x.to_vec());
                for k in 0..p {
                    powers.push(h.matvec(&powers[k]));
                }
                let h_inv = h.inverse().ok_or(PrivatizeError::Unprivatizable)?;
                // w = vec(H^{-T}) row-major, the adjoint of log|det H| on H
                let h_inv_t_vec = h_inv.transpose().as_slice().to_vec();
                let mut grad = net.backprop_input_only(&net_cache, &h_inv_t_vec);
                for g in grad.iter_mut() {
                    *g *= p as f64;
                }
                let sample = PrivatizedSample {
                    x: x.to_vec(),
                    z: powers[p].clone(),
                    logdet_sum: p as f64 * logabs,
                    logdet_grad_x: grad,
                    det_sign: sign,
                    jittered,
                };
                Ok(PrivatizeCache {
                    sample,
                    detail: CacheDetail::LinearPower { net_cache, h, h_inv_t_vec, powers },
                })
            }
            PrivatizerParams::TwoLayerTanh { w1, w2, b2, det_jitter } => {
                let d = w2.rows();
                assert_eq!(w1.cols(), d, "two-layer variant needs m = d for invertibility");
                if x.len() != d {
                    return Err(NumError::Shape {
                        expected: format!("input of length {d}"),
                        got: format!("{}", x.len()),
                    }
                    .into());
                }
                let mut m_eff = w2.matmul(w1);
                let (sign, logabs, jittered) = apply_jitter_policy(&mut m_eff, *det_jitter)?;
                let mut a = m_eff.matvec(x);
                for (ai, &bi) in a.iter_mut().zip(b2) {
                    *ai += bi;
                }
                let tanh_a: Vec<f64> = a.iter().map(|v| v.tanh()).collect();
                let z = tanh_a.clone();
                // sum_i log phi'(a_i) computed stably from |a|
                let log_phi_prime_sum: f64 = a.iter().map(|&ai| ln_sech2(ai)).sum();
                // grad_x of the phi' sum: M^T u with u_i = -2 tanh(a_i)
                let u: Vec<f64> = tanh_a.iter().map(|&t| -2.0 * t).collect();
                let grad = m_eff.matvec_t(&u);
                let sample = PrivatizedSample {
                    x: x.to_vec(),
                    z,
                    logdet_sum: log_phi_prime_sum + logabs,
                    logdet_grad_x: grad,
                    det_sign: sign,
                    jittered,
                };
                Ok(PrivatizeCache { sample, detail: CacheDetail::TwoLayerTanh { m_eff, tanh_a } })
            }
        }
    }

    /// `d/dx sum_k log|det J_k|` at `x`.
    pub fn logdet_grad_x(&self, x: &[f64]) -> Result<Vec<f64>, PrivatizeError> {
        Ok(self.privatize(x)?.logdet_grad_x)
    }

    /// `L_P(x) = || score(x) - logdet_grad_x(x) ||_2`.
    pub fn privacy_loss(&self, density: &DensityModel<f64>, x: &[f64]) -> Result<f64, PrivatizeError> {
        let score = density.score(x)?;
        let cache = self.privatize_cached(x)?;
        Ok(norm2(&sub(&score, &cache.sample.logdet_grad_x)))
    }

    /// Privacy loss and its parameter gradient, given the (parameter-free)
    /// KDE score at `x`.
    pub fn privacy_loss_grads(
        &self,
        score: &[f64],
        cache: &PrivatizeCache,
    ) -> (f64, PrivGrads) {
        let r = &cache.sample.logdet_grad_x;
        let v = sub(score, r);
        let lp = norm2(&v);
        if lp < 1e-300 {
            return (lp, PrivGrads::zeros_like(self));
        }
        // dLp/dr = (r - score)/lp
        let q: Vec<f64> = v.iter().map(|&vi| -vi / lp).collect();
        match (self, &cache.detail) {
            (
                PrivatizerParams::LinearPower { net, dim, power, .. },
                CacheDetail::LinearPower { net_cache, h, h_inv_t_vec, .. },
            ) => {
                let d = *dim;
                // r = p * B^T w with B = dt/dx and w = vec(H^{-T});
                // term 1: d/dtheta of w^T (B q) with w, q held fixed
                let tangent = net.forward_tangent(net_cache, &q);
                let mut grads = net.rop_backprop(net_cache, &tangent, h_inv_t_vec);
                // term 2: (B q)^T dw/dtheta through the matrix inverse:
                // adjoint on H is -(H^{-T} U^T H^{-T}) with U = mat(B q)
                let u_mat = Matrix::from_vec(d, d, tangent.output().to_vec())
                    .expect("tangent output is finite");
                let h_inv_t = Matrix::from_vec(d, d, h_inv_t_vec.clone()).expect("cached inverse");
                let mut g_h = h_inv_t.matmul(&u_mat.transpose()).matmul(&h_inv_t);
                g_h.scale(-1.0);
                let _ = h; // H itself is not needed beyond its inverse here
                let (inv_grads, _) = net.backprop(net_cache, g_h.as_slice());
                grads.add_scaled(&inv_grads, 1.0);
                grads.scale(*power as f64);
                (lp, PrivGrads::LinearPower(grads))
            }
            (
                PrivatizerParams::TwoLayerTanh { w1, w2, .. },
                CacheDetail::TwoLayerTanh { m_eff, tanh_a },
            ) => {
                // r = M^T u(a), a = M x + b2, u_i = -2 tanh(a_i)
                let u: Vec<f64> = tanh_a.iter().map(|&t| -2.0 * t).collect();
                let mq = m_eff.matvec(&q);
                // u'_i = -2 (1 - tanh^2 a_i)
                let gb2: Vec<f64> = mq
                    .iter()
                    .zip(tanh_a)
                    .map(|(&mqi, &t)| mqi * (-2.0 * (1.0 - t * t)))
                    .collect();
                let mut dm = Matrix::outer(&u, &q);
                dm.add_scaled(&Matrix::outer(&gb2, &cache.sample.x), 1.0);
                let dw2 = dm.matmul(&w1.transpose());
                let dw1 = w2.transpose().matmul(&dm);
                (lp, PrivGrads::TwoLayerTanh { dw1, dw2, db2: gb2 })
            }
            _ => panic!("cache variant mismatch"),
        }
    }

    /// Parameter gradient of a scalar loss through the embedding, given the
    /// adjoint `dL/dz`.
    pub fn backprop_embedding(&self, cache: &PrivatizeCache, z_adjoint: &[f64]) -> PrivGrads {
        match (self, &cache.detail) {
            (
                PrivatizerParams::LinearPower { net, dim, power, .. },
                CacheDetail::LinearPower { net_cache, h, powers, .. },
            ) => {
                let d = *dim;
                let p = *power as usize;
                // dL/dH = sum_{k=0}^{p-1} (H^T)^k gz (H^{p-1-k} x)^T
                let mut acc = Matrix::zeros(d, d);
                let mut left = z_adjoint.to_vec();
                for k in 0..p {
                    acc.add_scaled(&Matrix::outer(&left, &powers[p - 1 - k]), 1.0);
                    if k + 1 < p {
                        left = h.matvec_t(&left);
                    }
                }
                let (grads, _) = net.backprop(net_cache, acc.as_slice());
                PrivGrads::LinearPower(grads)
            }
            (
                PrivatizerParams::TwoLayerTanh { w1, w2, .. },
                CacheDetail::TwoLayerTanh { tanh_a, .. },
            ) => {
                // z = tanh(a): da = (1 - tanh^2 a) .* gz
                let da: Vec<f64> =
                    tanh_a.iter().zip(z_adjoint).map(|(&t, &g)| (1.0 - t * t) * g).collect();
                let dm = Matrix::outer(&da, &cache.sample.x);
                let dw2 = dm.matmul(&w1.transpose());
                let dw1 = w2.transpose().matmul(&dm);
                PrivGrads::TwoLayerTanh { dw1, dw2, db2: da }
            }
            _ => panic!("cache variant mismatch"),
        }
    }

    /// Debug mode for small dimensions: log-determinant of the Jacobian of
    /// the realized map `x -> z` (including the dependence of `H` on `x`),
    /// by finite differences. The training objective uses the frozen-`H`
    /// convention instead; this exists to quantify the difference.
    pub fn full_composition_logdet_fd(&self, x: &[f64], step: f64) -> Result<(i8, f64), PrivatizeError> {
        let d = self.dim();
        assert!(d <= 4, "debug mode is restricted to d <= 4");
        let mut jac = Matrix::zeros(d, d);
        let mut probe = x.to_vec();
        for j in 0..d {
            probe[j] = x[j] + step;
            let zp = self.privatize(&probe)?.z;
            probe[j] = x[j] - step;
            let zm = self.privatize(&probe)?.z;
            probe[j] = x[j];
            for i in 0..d {
                jac.set(i, j, (zp[i] - zm[i]) / (2.0 * step));
            }
        }
        Ok(jac.slogdet()?)
    }
}

/// Shared determinant-safety policy: if `|det| < 1e-8`, add `jitter * I`
/// once and re-check; a map that stays singular is unprivatizable.
fn apply_jitter_policy(
    m: &mut Matrix<f64>,
    jitter: f64,
) -> Result<(i8, f64, bool), PrivatizeError> {
    let (sign, logabs) = m.slogdet()?;
    if sign != 0 && logabs >= DET_ABS_FLOOR.ln() {
        return Ok((sign, logabs, false));
    }
    m.add_scaled_identity(jitter);
    let (sign, logabs) = m.slogdet()?;
    if sign != 0 && logabs >= DET_ABS_FLOOR.ln() {
        return Ok((sign, logabs, true));
    }
    Err(PrivatizeError::Unprivatizable)
}

/// `ln(1 - tanh^2 a) = 2 (ln 2 - |a| - ln(1 + exp(-2|a|)))`, stable for
/// large `|a|` where the naive form underflows.
fn ln_sech2(a: f64) -> f64 {
    let y = a.abs();
    2.0 * (std::f64::consts::LN_2 - y - (-2.0 * y).exp().ln_1p())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::BandwidthMode;
    use crate::numkit::{grad_oracle, Rng};
    use approx::assert_relative_eq;

    fn small_density(seed: u64, d: usize) -> DensityModel<f64> {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
        DensityModel::with_mode(Matrix::from_rows(&rows).unwrap(), BandwidthMode::Scott, 0.05).unwrap()
    }

    /// Linear-power params whose net output is the constant `vec(T)`, so
    /// `H = I + T` regardless of `x`.
    fn constant_h(dim: usize, power: u32, t: &Matrix<f64>) -> PrivatizerParams {
        let mut params = PrivatizerParams::identity(dim, power);
        if let PrivatizerParams::LinearPower { net, .. } = &mut params {
            net.layers_mut()[0].bias.copy_from_slice(t.as_slice());
        }
        params
    }

    #[test]
    fn identity_privatizer_is_identity() {
        let params = PrivatizerParams::identity(3, 1);
        let s = params.privatize(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(s.z, vec![0.5, -1.0, 2.0]);
        assert_eq!(s.logdet_sum, 0.0);
        assert_eq!(s.logdet_grad_x, vec![0.0; 3]);
        assert_eq!(s.det_sign, 1);
        assert!(!s.jittered);
    }

    #[test]
    fn constant_double_identity_powers() {
        // H = 2I, d = 2, p = 3: z = 8x, logdet_sum = 3 ln 4
        let t = Matrix::identity(2);
        let params = constant_h(2, 3, &t);
        let s = params.privatize(&[1.0, -0.5]).unwrap();
        assert_eq!(s.z, vec![8.0, -4.0]);
        assert_relative_eq!(s.logdet_sum, 3.0 * 4.0f64.ln(), epsilon = 1e-12);
        assert!((s.logdet_sum - 4.158883).abs() < 1e-6);
        assert_eq!(s.logdet_grad_x, vec![0.0, 0.0]);
    }

    #[test]
    fn frozen_jacobian_matches_slogdet_exactly() {
        let mut rng = Rng::new(3);
        let mut t = Matrix::zeros(3, 3);
        for v in t.as_mut_slice() {
            *v = rng.uniform_in(-0.3, 0.3);
        }
        let params = constant_h(3, 1, &t);
        let s = params.privatize(&[0.1, 0.2, -0.4]).unwrap();
        let mut h = t.clone();
        h.add_scaled_identity(1.0);
        let (_, logabs) = h.slogdet().unwrap();
        assert_eq!(s.logdet_sum, logabs);
    }

    #[test]
    fn two_layer_forward_matches_straight_line_arithmetic() {
        let mut rng = Rng::new(1);
        let params = PrivatizerParams::two_layer_tanh(2, 3, &mut rng);
        let x = [0.5, -0.5];
        let s = params.privatize(&x).unwrap();
        if let PrivatizerParams::TwoLayerTanh { w1, w2, b2, .. } = &params {
            // independent evaluation with explicit index arithmetic
            let mut hidden = [0.0f64; 3];
            for i in 0..3 {
                hidden[i] = w1.get(i, 0) * x[0] + w1.get(i, 1) * x[1];
            }
            for i in 0..2 {
                let a = w2.get(i, 0) * hidden[0] + w2.get(i, 1) * hidden[1] + w2.get(i, 2) * hidden[2]
                    + b2[i];
                assert_relative_eq!(s.z[i], a.tanh(), epsilon = 1e-15);
            }
        } else {
            unreachable!();
        }
    }

    #[test]
    fn two_layer_grad_vanishes_when_preactivations_vanish() {
        let mut rng = Rng::new(6);
        let mut params = PrivatizerParams::two_layer_tanh(2, 4, &mut rng);
        let x = [0.7, -0.2];
        // choose b2 = -Mx so a = 0 and tanh(a) = 0
        if let PrivatizerParams::TwoLayerTanh { w1, w2, b2, .. } = &mut params {
            let m = w2.matmul(w1);
            let mx = m.matvec(&x);
            for (b, &v) in b2.iter_mut().zip(&mx) {
                *b = -v;
            }
        }
        let s = params.privatize(&x).unwrap();
        assert!(s.logdet_grad_x.iter().all(|g| g.abs() < 1e-14), "{:?}", s.logdet_grad_x);
    }

    #[test]
    fn constant_h_has_zero_x_gradient() {
        // zero first-layer weights make the net output constant in x
        let mut rng = Rng::new(5);
        let mut params = PrivatizerParams::linear_power(2, &[4], 2, &mut rng);
        if let PrivatizerParams::LinearPower { net, .. } = &mut params {
            for v in net.layers_mut()[0].weight.as_mut_slice() {
                *v = 0.0;
            }
        }
        let s = params.privatize(&[0.3, 0.9]).unwrap();
        assert!(s.logdet_grad_x.iter().all(|g| g.abs() < 1e-14));
    }

    #[test]
    fn logdet_grad_x_matches_finite_differences() {
        for seed in 0..12u64 {
            let mut rng = Rng::new(seed);
            let d = 2 + (seed % 3) as usize; // 2..4
            let params: PrivatizerParams = if seed % 2 == 0 {
                PrivatizerParams::linear_power(d, &[2 * d], 1 + (seed % 2) as u32, &mut rng)
            } else {
                PrivatizerParams::two_layer_tanh(d, d + 2, &mut rng)
            };
            let x: Vec<f64> = (0..d).map(|_| rng.normal() * 0.7).collect();
            let s = params.privatize(&x).unwrap();
            let fd = grad_oracle(
                |p: &[f64]| params.privatize(p).unwrap().logdet_sum,
                &x,
                1e-5,
            )
            .unwrap();
            for (a, b) in s.logdet_grad_x.iter().zip(&fd) {
                assert!(
                    (a - b).abs() <= 1e-4 * (1.0 + b.abs()),
                    "seed {seed}: analytic {a} vs fd {b}"
                );
            }
        }
    }

    #[test]
    fn privacy_loss_of_identity_is_score_norm() {
        let density = small_density(8, 2);
        let params = PrivatizerParams::identity(2, 1);
        let x = [0.4, -1.1];
        let lp = params.privacy_loss(&density, &x).unwrap();
        let s = density.score(&x).unwrap();
        assert_relative_eq!(lp, norm2(&s), epsilon = 1e-12);
        // a constant scaling has zero x-gradient of log|det|, same loss
        let mut t = Matrix::identity(2);
        t.scale(0.7);
        let scaled = constant_h(2, 1, &t);
        assert_relative_eq!(scaled.privacy_loss(&density, &x).unwrap(), lp, epsilon = 1e-12);
    }

    #[test]
    fn privacy_loss_single_kernel_offset() {
        // n=1 KDE (duplicated to meet the floor), identity privatizer:
        // L_P = |X1 - x| / h^2 = 0.3
        let refs = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let density = DensityModel::new(refs, 1.0, 0.05).unwrap();
        let params = PrivatizerParams::identity(1, 1);
        let lp = params.privacy_loss(&density, &[1.3]).unwrap();
        assert_relative_eq!(lp, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn privacy_loss_grads_match_finite_differences() {
        // the load-bearing test: d/dtheta of || score - grad_x logdet ||
        for seed in 0..16u64 {
            let mut rng = Rng::new(100 + seed);
            let d = 2 + (seed % 3) as usize;
            let density = small_density(seed, d);
            let mut params: PrivatizerParams = if seed % 2 == 0 {
                PrivatizerParams::linear_power(d, &[2 * d], 1 + (seed % 3) as u32, &mut rng)
            } else {
                PrivatizerParams::two_layer_tanh(d, d + 1, &mut rng)
            };
            let x: Vec<f64> = (0..d).map(|_| rng.normal() * 0.8).collect();
            let score = density.score(&x).unwrap();
            let cache = params.privatize_cached(&x).unwrap();
            let (lp, grads) = params.privacy_loss_grads(&score, &cache);
            assert!(lp.is_finite());
            let theta = params.params_flat();
            let fd = grad_oracle(
                |p: &[f64]| {
                    params.set_params_from(p);
                    let c = params.privatize(&x).unwrap();
                    norm2(&sub(&score, &c.logdet_grad_x))
                },
                &theta,
                1e-5,
            )
            .unwrap();
            params.set_params_from(&theta);
            let flat = grads.flat();
            let scale = 1.0 + norm2(&fd);
            for (i, (a, b)) in flat.iter().zip(&fd).enumerate() {
                assert!(
                    (a - b).abs() <= 1e-4 * scale,
                    "seed {seed} param {i}: analytic {a} vs fd {b}"
                );
            }
        }
    }

    #[test]
    fn embedding_backprop_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = Rng::new(300 + seed);
            let d = 2 + (seed % 2) as usize;
            let mut params: PrivatizerParams = if seed % 2 == 0 {
                PrivatizerParams::linear_power(d, &[d + 2], 1 + (seed % 3) as u32, &mut rng)
            } else {
                PrivatizerParams::two_layer_tanh(d, d + 2, &mut rng)
            };
            let x: Vec<f64> = (0..d).map(|_| rng.normal() * 0.6).collect();
            let gz: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let cache = params.privatize_cached(&x).unwrap();
            let grads = params.backprop_embedding(&cache, &gz);
            let theta = params.params_flat();
            let fd = grad_oracle(
                |p: &[f64]| {
                    params.set_params_from(p);
                    let z = params.privatize(&x).unwrap().z;
                    gz.iter().zip(&z).map(|(a, b)| a * b).sum()
                },
                &theta,
                1e-5,
            )
            .unwrap();
            params.set_params_from(&theta);
            let scale = 1.0 + norm2(&fd);
            for (a, b) in grads.flat().iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-4 * scale, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn jitter_rescues_singular_h_and_sets_flag() {
        // T = diag(-1, 0) makes H = diag(0, 1): singular, rescued by jitter
        let mut t = Matrix::zeros(2, 2);
        t.set(0, 0, -1.0);
        let params = constant_h(2, 1, &t);
        let s = params.privatize(&[1.0, 1.0]).unwrap();
        assert!(s.jittered);
        assert!(s.logdet_sum.is_finite());
    }

    #[test]
    fn unprivatizable_when_jitter_is_not_enough() {
        // H = diag(0, -jitter): singular, and adding jitter*I leaves a zero
        // eigenvalue, so the determinant stays at the floor
        let mut t = Matrix::zeros(2, 2);
        t.set(0, 0, -1.0);
        t.set(1, 1, -1.0 - DEFAULT_DET_JITTER);
        let params = constant_h(2, 1, &t);
        match params.privatize(&[1.0, 1.0]) {
            Err(PrivatizeError::Unprivatizable) => {}
            other => panic!("expected unprivatizable, got {other:?}"),
        }
    }

    #[test]
    fn two_layer_bound_on_logdet_gradient() {
        // with ||W1||_2 <= sqrt(h_w) and ||W2||_F <= sqrt(m), the gradient
        // norm is at most 2 m sqrt(h_w) at every probe
        let d = 3usize; // m = d
        let h_w = 5usize;
        let bound = 2.0 * d as f64 * (h_w as f64).sqrt();
        let mut violations = 0;
        for seed in 0..1000u64 {
            let mut rng = Rng::new(40_000 + seed);
            let mut params = PrivatizerParams::two_layer_tanh(d, h_w, &mut rng);
            if let PrivatizerParams::TwoLayerTanh { w1, w2, b2, .. } = &mut params {
                for v in w1.as_mut_slice() {
                    *v = rng.uniform_in(-2.0, 2.0);
                }
                for v in w2.as_mut_slice() {
                    *v = rng.uniform_in(-2.0, 2.0);
                }
                for v in b2.iter_mut() {
                    *v = rng.uniform_in(-1.0, 1.0);
                }
                w1.clamp_spectral_norm((h_w as f64).sqrt(), 60);
                w2.clamp_frobenius_norm((d as f64).sqrt());
            }
            let x: Vec<f64> = (0..d).map(|_| rng.normal() * 2.0).collect();
            let s = params.privatize(&x).unwrap();
            if norm2(&s.logdet_grad_x) > bound {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn full_composition_debug_mode_runs() {
        let mut rng = Rng::new(77);
        let params = PrivatizerParams::linear_power(2, &[4], 2, &mut rng);
        let (sign, logabs) = params.full_composition_logdet_fd(&[0.2, -0.3], 1e-5).unwrap();
        assert!(sign != 0);
        assert!(logabs.is_finite());
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = Rng::new(15);
        let mut params = PrivatizerParams::two_layer_tanh(3, 4, &mut rng);
        let flat = params.params_flat();
        let mut perturbed = flat.clone();
        perturbed[0] += 1.0;
        params.set_params_from(&perturbed);
        assert_eq!(params.params_flat(), perturbed);
    }
}
