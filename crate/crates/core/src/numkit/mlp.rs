//! Small dense MLP with hand-derived gradients.
//!
//! Three gradient paths are exposed, all verified against the
//! finite-difference oracle in [`crate::numkit::fd`]:
//!
//! - [`Mlp::backprop`]: plain reverse pass for an adjoint on the output.
//! - [`Mlp::forward_tangent`]: forward (dual) pass for a directional input
//!   derivative, used to evaluate Jacobian-vector products.
//! - [`Mlp::rop_backprop`]: parameter gradient of `w^T (J(x) q)`, the
//!   Pearlmutter-style reverse-over-forward pass. This is what makes the
//!   input-gradient of a log-determinant trainable.

use serde::{Deserialize, Serialize};

use crate::numkit::matrix::{Matrix, NumError};
use crate::numkit::rng::Rng;
use crate::scalar::Real;

/// Per-layer activation. `Softmax` is only meaningful as the output layer of
/// a classifier and is always paired with cross-entropy via
/// [`Mlp::backprop_logits_delta`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Softmax,
}

impl Activation {
    fn apply<F: Real>(self, pre: &[F]) -> Vec<F> {
        match self {
            Activation::Identity => pre.to_vec(),
            Activation::Tanh => pre.iter().map(|v| v.tanh()).collect(),
            Activation::Relu => pre.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect(),
            Activation::Softmax => {
                let max = pre.iter().cloned().fold(F::neg_infinity(), F::max);
                let exps: Vec<F> = pre.iter().map(|&v| (v - max).exp()).collect();
                let sum = exps.iter().fold(F::zero(), |a, &b| a + b);
                exps.iter().map(|&e| e / sum).collect()
            }
        }
    }

    /// First derivative at a cached pre-activation.
    fn deriv<F: Real>(self, pre: F) -> F {
        match self {
            Activation::Identity => F::one(),
            Activation::Tanh => {
                let t = pre.tanh();
                F::one() - t * t
            }
            Activation::Relu => {
                if pre > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Softmax => panic!("softmax has no elementwise derivative; use backprop_logits_delta"),
        }
    }

    /// Second derivative at a cached pre-activation (zero a.e. for relu).
    fn deriv2<F: Real>(self, pre: F) -> F {
        match self {
            Activation::Identity | Activation::Relu => F::zero(),
            Activation::Tanh => {
                let t = pre.tanh();
                let two = F::c(2.0);
                -two * t * (F::one() - t * t)
            }
            Activation::Softmax => panic!("softmax unsupported in second-order pass"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<F> {
    pub weight: Matrix<F>,
    pub bias: Vec<F>,
    pub activation: Activation,
}

/// Feed-forward network; layer `l` maps `sizes[l]` to `sizes[l+1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<F> {
    layers: Vec<Layer<F>>,
}

/// Forward-pass cache. `post[0]` is the input; `pre[l]` and `post[l+1]` are
/// layer `l`'s pre-activation and output.
#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    pub pre: Vec<Vec<F>>,
    pub post: Vec<Vec<F>>,
}

impl<F: Real> MlpCache<F> {
    pub fn output(&self) -> &[F] {
        self.post.last().expect("cache has at least the input")
    }
}

/// Tangent (dual) values from a forward directional pass.
#[derive(Debug, Clone)]
pub struct TangentCache<F> {
    pub pre_t: Vec<Vec<F>>,
    pub post_t: Vec<Vec<F>>,
}

impl<F: Real> TangentCache<F> {
    pub fn output(&self) -> &[F] {
        self.post_t.last().expect("tangent cache has at least the input")
    }
}

/// Parameter gradients with the same shapes as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads<F> {
    pub weights: Vec<Matrix<F>>,
    pub biases: Vec<Vec<F>>,
}

impl<F: Real> MlpGrads<F> {
    pub fn zeros_like(mlp: &Mlp<F>) -> Self {
        MlpGrads {
            weights: mlp.layers.iter().map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols())).collect(),
            biases: mlp.layers.iter().map(|l| vec![F::zero(); l.bias.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads<F>, scale: F) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(b, scale);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for w in self.weights.iter_mut() {
            w.scale(s);
        }
        for b in self.biases.iter_mut() {
            for v in b.iter_mut() {
                *v = *v * s;
            }
        }
    }

    /// Flatten in layer order, weights row-major then bias, matching
    /// [`Mlp::params_flat`].
    pub fn flat(&self) -> Vec<F> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

impl<F: Real> Mlp<F> {
    /// `sizes` has length `layers + 1`; one activation per layer.
    pub fn new(sizes: &[usize], activations: &[Activation]) -> Result<Self, NumError> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(NumError::Shape {
                expected: format!("{} activations for {} layer sizes", sizes.len().saturating_sub(1), sizes.len()),
                got: format!("{}", activations.len()),
            });
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Layer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![F::zero(); w[1]],
                activation,
            })
            .collect();
        Ok(Mlp { layers })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init_uniform(&mut self, rng: &mut Rng) {
        for layer in self.layers.iter_mut() {
            let bound = 1.0 / (layer.weight.cols() as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = F::c(rng.uniform_in(-bound, bound));
            }
        }
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.rows()
    }

    pub fn forward(&self, x: &[F]) -> Result<Vec<F>, NumError> {
        Ok(self.forward_cached(x)?.post.into_iter().last().expect("output"))
    }

    pub fn forward_cached(&self, x: &[F]) -> Result<MlpCache<F>, NumError> {
        if x.len() != self.input_dim() {
            return Err(NumError::Shape {
                expected: format!("input of length {}", self.input_dim()),
                got: format!("{}", x.len()),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.to_vec());
        for layer in &self.layers {
            let mut a = layer.weight.matvec(post.last().expect("previous activation"));
            for (v, &b) in a.iter_mut().zip(&layer.bias) {
                *v = *v + b;
            }
            post.push(layer.activation.apply(&a));
            pre.push(a);
        }
        Ok(MlpCache { pre, post })
    }

    /// Reverse pass from an adjoint on the network output. Returns parameter
    /// gradients and the gradient with respect to the input.
    pub fn backprop(&self, cache: &MlpCache<F>, out_adjoint: &[F]) -> (MlpGrads<F>, Vec<F>) {
        let last = self.layers.len() - 1;
        let act = self.layers[last].activation;
        assert!(act != Activation::Softmax, "use backprop_logits_delta for softmax outputs");
        let delta: Vec<F> = cache.pre[last]
            .iter()
            .zip(out_adjoint)
            .map(|(&p, &g)| act.deriv(p) * g)
            .collect();
        self.backprop_from_delta(cache, delta)
    }

    /// Reverse pass when the caller supplies the adjoint at the last
    /// pre-activation. With a softmax output and cross-entropy loss that
    /// adjoint is `yhat - y`.
    pub fn backprop_logits_delta(&self, cache: &MlpCache<F>, delta_last: Vec<F>) -> (MlpGrads<F>, Vec<F>) {
        self.backprop_from_delta(cache, delta_last)
    }

    fn backprop_from_delta(&self, cache: &MlpCache<F>, mut delta: Vec<F>) -> (MlpGrads<F>, Vec<F>) {
        let mut grads = MlpGrads::zeros_like(self);
        for l in (0..self.layers.len()).rev() {
            let input = &cache.post[l];
            // dW = delta * input^T, db = delta
            let gw = &mut grads.weights[l];
            for (i, &d) in delta.iter().enumerate() {
                for (j, &a) in input.iter().enumerate() {
                    gw.set(i, j, d * a);
                }
            }
            grads.biases[l].copy_from_slice(&delta);
            let upstream = self.layers[l].weight.matvec_t(&delta);
            if l == 0 {
                return (grads, upstream);
            }
            let act = self.layers[l - 1].activation;
            delta = cache.pre[l - 1]
                .iter()
                .zip(&upstream)
                .map(|(&p, &g)| act.deriv(p) * g)
                .collect();
        }
        unreachable!("loop always returns at l == 0")
    }

    /// Input gradient only, skipping the parameter-gradient outer products.
    /// Worth having because the privatizer evaluates this once per sample
    /// when generating embeddings.
    pub fn backprop_input_only(&self, cache: &MlpCache<F>, out_adjoint: &[F]) -> Vec<F> {
        let last = self.layers.len() - 1;
        let act = self.layers[last].activation;
        assert!(act != Activation::Softmax, "softmax output has no use here");
        let mut delta: Vec<F> = cache.pre[last]
            .iter()
            .zip(out_adjoint)
            .map(|(&p, &g)| act.deriv(p) * g)
            .collect();
        for l in (0..self.layers.len()).rev() {
            let upstream = self.layers[l].weight.matvec_t(&delta);
            if l == 0 {
                return upstream;
            }
            let act = self.layers[l - 1].activation;
            delta = cache.pre[l - 1]
                .iter()
                .zip(&upstream)
                .map(|(&p, &g)| act.deriv(p) * g)
                .collect();
        }
        unreachable!()
    }

    /// Directional derivative of every unit for an input tangent `q`:
    /// `post_t[L]` is `J(x) q`.
    pub fn forward_tangent(&self, cache: &MlpCache<F>, q: &[F]) -> TangentCache<F> {
        assert_eq!(q.len(), self.input_dim(), "tangent dimension");
        let mut pre_t = Vec::with_capacity(self.layers.len());
        let mut post_t = Vec::with_capacity(self.layers.len() + 1);
        post_t.push(q.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let a_t = layer.weight.matvec(post_t.last().expect("previous tangent"));
            let out_t: Vec<F> = cache.pre[l]
                .iter()
                .zip(&a_t)
                .map(|(&p, &t)| layer.activation.deriv(p) * t)
                .collect();
            pre_t.push(a_t);
            post_t.push(out_t);
        }
        TangentCache { pre_t, post_t }
    }

    /// Parameter gradient of `psi = w^T (J(x) q)` for fixed `w` and `q`.
    ///
    /// Reverse pass over the forward-tangent computation: each layer carries
    /// a primal adjoint `r` and a tangent adjoint `rt`. The curvature of the
    /// activation enters through its second derivative.
    pub fn rop_backprop(&self, cache: &MlpCache<F>, tangent: &TangentCache<F>, w: &[F]) -> MlpGrads<F> {
        assert_eq!(w.len(), self.output_dim(), "rop adjoint dimension");
        let mut grads = MlpGrads::zeros_like(self);
        let nl = self.layers.len();
        let mut r_post = vec![F::zero(); self.output_dim()];
        let mut rt_post = w.to_vec();
        for l in (0..nl).rev() {
            let act = self.layers[l].activation;
            let pre = &cache.pre[l];
            let pre_t = &tangent.pre_t[l];
            // activation node: post = act(pre); post_t = act'(pre) .* pre_t
            let mut r_pre = vec![F::zero(); pre.len()];
            let mut rt_pre = vec![F::zero(); pre.len()];
            for i in 0..pre.len() {
                let d1 = act.deriv(pre[i]);
                let d2 = act.deriv2(pre[i]);
                r_pre[i] = d1 * r_post[i] + d2 * pre_t[i] * rt_post[i];
                rt_pre[i] = d1 * rt_post[i];
            }
            // linear node: pre = W post_{l-1} + b; pre_t = W post_t_{l-1}
            let input = &cache.post[l];
            let input_t = &tangent.post_t[l];
            let gw = &mut grads.weights[l];
            for (i, (&rp, &rtp)) in r_pre.iter().zip(&rt_pre).enumerate() {
                for j in 0..input.len() {
                    gw.set(i, j, rp * input[j] + rtp * input_t[j]);
                }
            }
            grads.biases[l].copy_from_slice(&r_pre);
            if l > 0 {
                r_post = self.layers[l].weight.matvec_t(&r_pre);
                rt_post = self.layers[l].weight.matvec_t(&rt_pre);
            }
        }
        grads
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Flat parameter vector: per layer, weights row-major then bias.
    pub fn params_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params_from(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length");
        let mut offset = 0;
        for layer in self.layers.iter_mut() {
            let wlen = layer.weight.as_slice().len();
            layer.weight.as_mut_slice().copy_from_slice(&flat[offset..offset + wlen]);
            offset += wlen;
            let blen = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + blen]);
            offset += blen;
        }
    }
}

/// Cross-entropy `-sum_i y_i log yhat_i` for a one-hot label, computed from
/// cached softmax logits with the usual max-shift for stability.
pub fn cross_entropy_from_logits<F: Real>(logits: &[F], class: usize) -> F {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let log_sum = logits.iter().map(|&v| (v - max).exp()).fold(F::zero(), |a, b| a + b).ln() + max;
    log_sum - logits[class]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::fd::grad_oracle;
    use crate::numkit::matrix::norm2;
    use approx::assert_relative_eq;

    fn random_net(seed: u64, sizes: &[usize], acts: &[Activation]) -> Mlp<f64> {
        let mut net = Mlp::new(sizes, acts).unwrap();
        let mut rng = Rng::new(seed);
        net.init_uniform(&mut rng);
        for layer in net.layers_mut() {
            for b in layer.bias.iter_mut() {
                *b = rng.uniform_in(-0.3, 0.3);
            }
        }
        net
    }

    #[test]
    fn zero_net_maps_to_zero() {
        let net: Mlp<f64> = Mlp::new(&[3, 3], &[Activation::Identity]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_tanh_at_origin() {
        let mut net: Mlp<f64> = Mlp::new(&[2, 2], &[Activation::Tanh]).unwrap();
        net.layers_mut()[0].weight = Matrix::identity(2);
        assert_eq!(net.forward(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_straight_line_arithmetic() {
        // Independent oracle: the same 2-3-2 seed-1 weights evaluated by
        // explicit index arithmetic, no shared code with forward().
        let net = random_net(1, &[2, 3, 2], &[Activation::Tanh, Activation::Identity]);
        let x = [1.0, -1.0];
        let w0 = net.layers()[0].weight.clone();
        let b0 = net.layers()[0].bias.clone();
        let w1 = net.layers()[1].weight.clone();
        let b1 = net.layers()[1].bias.clone();
        let mut hidden = [0.0f64; 3];
        for i in 0..3 {
            hidden[i] = (w0.get(i, 0) * x[0] + w0.get(i, 1) * x[1] + b0[i]).tanh();
        }
        let mut expect = [0.0f64; 2];
        for i in 0..2 {
            expect[i] = w1.get(i, 0) * hidden[0] + w1.get(i, 1) * hidden[1] + w1.get(i, 2) * hidden[2] + b1[i];
        }
        let got = net.forward(&x).unwrap();
        assert_eq!(got, expect.to_vec());
    }

    #[test]
    fn softmax_output_sums_to_one() {
        let net = random_net(4, &[3, 4, 3], &[Activation::Tanh, Activation::Softmax]);
        let y = net.forward(&[0.2, -0.7, 1.5]).unwrap();
        let sum: f64 = y.iter().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        assert!(y.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = random_net(2, &[3, 2], &[Activation::Identity]);
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for seed in 0..20u64 {
            let net = random_net(seed, &[3, 5, 2], &[Activation::Tanh, Activation::Identity]);
            let x = {
                let mut rng = Rng::new(seed + 500);
                [rng.normal(), rng.normal(), rng.normal()]
            };
            let adj = [0.7, -1.3];
            let cache = net.forward_cached(&x).unwrap();
            let (grads, input_grad) = net.backprop(&cache, &adj);
            let theta = net.params_flat();
            let mut probe = net.clone();
            let fd = grad_oracle(
                |p: &[f64]| {
                    probe.set_params_from(p);
                    let y = probe.forward(&x).unwrap();
                    adj.iter().zip(&y).map(|(a, b)| a * b).sum()
                },
                &theta,
                1e-5,
            )
            .unwrap();
            let analytic = grads.flat();
            for (a, f) in analytic.iter().zip(&fd) {
                assert!((a - f).abs() <= 1e-4 * (1.0 + f.abs()), "param grad mismatch {a} vs {f}");
            }
            // input gradient against a direct probe
            let fd_in = grad_oracle(
                |p: &[f64]| {
                    let y = net.forward(p).unwrap();
                    adj.iter().zip(&y).map(|(a, b)| a * b).sum()
                },
                &x,
                1e-5,
            )
            .unwrap();
            for (a, f) in input_grad.iter().zip(&fd_in) {
                assert!((a - f).abs() <= 1e-6 * (1.0 + f.abs()));
            }
        }
    }

    #[test]
    fn softmax_ce_delta_matches_finite_differences() {
        let net = random_net(11, &[3, 4, 3], &[Activation::Tanh, Activation::Softmax]);
        let x = [0.4, -0.2, 0.9];
        let class = 1usize;
        let cache = net.forward_cached(&x).unwrap();
        let yhat = cache.output();
        let mut delta = yhat.to_vec();
        delta[class] -= 1.0;
        let (grads, _) = net.backprop_logits_delta(&cache, delta);
        let theta = net.params_flat();
        let mut probe = net.clone();
        let fd = grad_oracle(
            |p: &[f64]| {
                probe.set_params_from(p);
                let c = probe.forward_cached(&x).unwrap();
                cross_entropy_from_logits(&c.pre[1], class)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        for (a, f) in grads.flat().iter().zip(&fd) {
            assert!((a - f).abs() <= 1e-4 * (1.0 + f.abs()));
        }
    }

    #[test]
    fn forward_tangent_matches_directional_difference() {
        let net = random_net(3, &[3, 6, 3], &[Activation::Tanh, Activation::Tanh]);
        let x = [0.3, -0.8, 0.1];
        let q = [1.0, 0.5, -2.0];
        let cache = net.forward_cached(&x).unwrap();
        let tangent = net.forward_tangent(&cache, &q);
        let eps = 1e-6;
        let plus: Vec<f64> = x.iter().zip(&q).map(|(a, b)| a + eps * b).collect();
        let minus: Vec<f64> = x.iter().zip(&q).map(|(a, b)| a - eps * b).collect();
        let fp = net.forward(&plus).unwrap();
        let fm = net.forward(&minus).unwrap();
        for i in 0..3 {
            let fd = (fp[i] - fm[i]) / (2.0 * eps);
            assert_relative_eq!(tangent.output()[i], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn rop_backprop_matches_finite_differences() {
        // psi(theta) = w^T J(x; theta) q, gradient checked against the
        // finite-difference oracle applied on top of the tangent pass.
        for seed in 0..20u64 {
            let net = random_net(seed + 40, &[2, 4, 4], &[Activation::Tanh, Activation::Identity]);
            let mut rng = Rng::new(seed + 900);
            let x = [rng.normal() * 0.5, rng.normal() * 0.5];
            let q = [rng.normal(), rng.normal()];
            let w: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let cache = net.forward_cached(&x).unwrap();
            let tangent = net.forward_tangent(&cache, &q);
            let grads = net.rop_backprop(&cache, &tangent, &w);
            let theta = net.params_flat();
            let mut probe = net.clone();
            let fd = grad_oracle(
                |p: &[f64]| {
                    probe.set_params_from(p);
                    let c = probe.forward_cached(&x).unwrap();
                    let t = probe.forward_tangent(&c, &q);
                    w.iter().zip(t.output()).map(|(a, b)| a * b).sum()
                },
                &theta,
                1e-5,
            )
            .unwrap();
            let analytic = grads.flat();
            let scale = 1.0 + norm2(&fd);
            for (a, f) in analytic.iter().zip(&fd) {
                assert!((a - f).abs() <= 1e-4 * scale, "rop grad mismatch: {a} vs {f}");
            }
        }
    }
}
