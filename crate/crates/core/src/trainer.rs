//! Joint minimization of `L = L_P + lambda * L_U` over the privatizer and
//! the client utility network, plus the closed-form smoothness constant and
//! SGD rate bound that guide the step size.
//!
//! Batch gradients are evaluated per sample in fixed-size chunks and merged
//! in chunk order, so a run is bit-reproducible regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::TabularDataset;
use crate::density::{BandwidthMode, DensityModel};
use crate::numkit::matrix::{norm2, Matrix};
use crate::numkit::mlp::{cross_entropy_from_logits, Activation, Mlp, MlpGrads};
use crate::numkit::rng::Rng;
use crate::privatizer::{PrivGrads, PrivatizeError, PrivatizerParams, VariantKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (lp={lp}, lu={lu})")]
    NonFinite { step: usize, lp: f64, lu: f64 },
    #[error("privatization failed during training: {0}")]
    Privatize(#[from] PrivatizeError),
    #[error("density construction failed: {0}")]
    Density(#[from] crate::density::DensityError),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Shape(#[from] crate::numkit::NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a flat parameter vector. Adam uses the usual
/// bias-corrected moments (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { vec![0.0; n_params] } else { Vec::new() };
        Optimizer { kind, lr, t: 0, m: state.clone(), v: state }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                const BETA1: f64 = 0.9;
                const BETA2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let bc1 = 1.0 - BETA1.powi(self.t as i32);
                let bc2 = 1.0 - BETA2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
                }
            }
        }
    }
}

/// Client training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub variant: VariantKind,
    /// Power `p` (linear-power variant).
    pub power: u32,
    /// Hidden sizes of the matrix-producing network (linear-power).
    pub privatizer_hidden: Vec<usize>,
    /// First-layer width of the two-layer tanh variant.
    pub two_layer_width: usize,
    /// Hidden sizes of the client utility network.
    pub utility_hidden: Vec<usize>,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub bandwidth: BandwidthMode,
    /// Project `||W1||_2 <= sqrt(h_w)` and `||W2||_F <= sqrt(m)` after each
    /// step (two-layer variant; used by the smoothness-theorem tests).
    pub weight_norm_projection: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            variant: VariantKind::LinearPower,
            power: 1,
            privatizer_hidden: Vec::new(), // filled per-dataset as [2d] when empty
            two_layer_width: 8,
            utility_hidden: vec![8],
            lambda: 1.0,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch: 64,
            steps: 200,
            bandwidth: BandwidthMode::Scott,
            weight_norm_projection: false,
        }
    }
}

/// One history record per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lp: f64,
    pub lu: f64,
    pub joint: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    /// CSV with columns `step,lp,lu,joint,gradnorm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lp,lu,joint,gradnorm\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.step, r.lp, r.lu, r.joint, r.grad_norm
            ));
        }
        out
    }
}

/// Trained client state.
pub struct ClientModel {
    pub privatizer: PrivatizerParams,
    pub utility: Mlp<f64>,
    pub history: TrainHistory,
    pub density: DensityModel<f64>,
}

/// Inputs to the two-layer smoothness bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmoothnessInputs {
    /// tanh layer width `m`.
    pub m: usize,
    /// first-layer width bound `h_w`.
    pub h_w: usize,
    /// class count `c`.
    pub c: usize,
    pub lambda: f64,
    /// gradient noise bound `sigma^2`.
    pub sigma_sq: f64,
    /// step count `T`.
    pub steps: usize,
    /// initial optimality gap `L(theta_0) - L*`.
    pub initial_gap: f64,
}

/// `L = 4 m^2 h_w + lambda c h_w` and the step-size ceiling `1/L`.
pub fn smoothness_bound(s: &SmoothnessInputs) -> (f64, f64) {
    let m = s.m as f64;
    let h = s.h_w as f64;
    let c = s.c as f64;
    let l = 4.0 * m * m * h + s.lambda * c * h;
    (l, 1.0 / l)
}

/// Descent-lemma bound on `min_t E||grad L(theta_t)||^2` for `eta < 1/L`:
/// `gap / (eta (1 - L eta / 2) T) + L eta sigma^2 / (2 (1 - L eta / 2))`.
pub fn sgd_rate_bound(s: &SmoothnessInputs, eta: f64) -> Result<f64, TrainError> {
    let (l, eta_max) = smoothness_bound(s);
    if !(eta < eta_max) {
        return Err(TrainError::BadConfig(format!(
            "step size {eta} must be strictly below 1/L = {eta_max}"
        )));
    }
    let damp = 1.0 - l * eta / 2.0;
    Ok(s.initial_gap / (eta * damp * s.steps as f64) + l * eta * s.sigma_sq / (2.0 * damp))
}

/// Fresh client networks for a dataset with `dim` features and `n_classes`
/// labels, seeded deterministically from the config.
pub fn init_client(dim: usize, n_classes: usize, cfg: &TrainConfig) -> (PrivatizerParams, Mlp<f64>) {
    let mut rng = Rng::new(cfg.seed);
    let privatizer = match cfg.variant {
        VariantKind::LinearPower => {
            let hidden: Vec<usize> =
                if cfg.privatizer_hidden.is_empty() { vec![2 * dim] } else { cfg.privatizer_hidden.clone() };
            PrivatizerParams::linear_power(dim, &hidden, cfg.power, &mut rng)
        }
        VariantKind::TwoLayerTanh => PrivatizerParams::two_layer_tanh(dim, cfg.two_layer_width, &mut rng),
    };
    let mut sizes = vec![dim];
    sizes.extend_from_slice(&cfg.utility_hidden);
    sizes.push(n_classes);
    let mut acts = vec![Activation::Tanh; cfg.utility_hidden.len()];
    acts.push(Activation::Softmax);
    let mut utility = Mlp::new(&sizes, &acts).expect("valid utility net spec");
    let mut urng = rng.derive(1);
    utility.init_uniform(&mut urng);
    (privatizer, utility)
}

struct BatchGrads {
    lp_sum: f64,
    lu_sum: f64,
    priv_grads: PrivGrads,
    util_grads: MlpGrads<f64>,
}

/// Mean losses and gradients over a batch. Per-sample evaluations run in
/// parallel chunks of 16; sums happen in index order.
fn batch_eval(
    privatizer: &PrivatizerParams,
    utility: &Mlp<f64>,
    density: &DensityModel<f64>,
    x: &Matrix<f64>,
    y: &[usize],
    batch_idx: &[usize],
    lambda: f64,
) -> Result<(f64, f64, PrivGrads, MlpGrads<f64>), TrainError> {
    const CHUNK: usize = 16;
    let chunks: Vec<&[usize]> = batch_idx.chunks(CHUNK).collect();
    let partials: Vec<Result<BatchGrads, TrainError>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut acc = BatchGrads {
                lp_sum: 0.0,
                lu_sum: 0.0,
                priv_grads: PrivGrads::zeros_like(privatizer),
                util_grads: MlpGrads::zeros_like(utility),
            };
            for &i in chunk.iter() {
                let xi = x.row(i);
                let cache = privatizer.privatize_cached(xi)?;
                let score = density.score(xi)?;
                let (lp, pg) = privatizer.privacy_loss_grads(&score, &cache);
                acc.lp_sum += lp;
                acc.priv_grads.add_scaled(&pg, 1.0);
                if lambda != 0.0 {
                    let ucache = utility.forward_cached(&cache.sample.z)?;
                    let logits = &ucache.pre[ucache.pre.len() - 1];
                    let lu = cross_entropy_from_logits(logits, y[i]);
                    acc.lu_sum += lu;
                    let mut delta = ucache.output().to_vec();
                    delta[y[i]] -= 1.0;
                    let (ug, z_adj) = utility.backprop_logits_delta(&ucache, delta);
                    acc.util_grads.add_scaled(&ug, lambda);
                    let pg_util = privatizer.backprop_embedding(&cache, &z_adj);
                    acc.priv_grads.add_scaled(&pg_util, lambda);
                } else {
                    // keep the loss trace meaningful even when unweighted
                    let ucache = utility.forward_cached(&cache.sample.z)?;
                    let logits = &ucache.pre[ucache.pre.len() - 1];
                    acc.lu_sum += cross_entropy_from_logits(logits, y[i]);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut lp_sum = 0.0;
    let mut lu_sum = 0.0;
    let mut priv_grads = PrivGrads::zeros_like(privatizer);
    let mut util_grads = MlpGrads::zeros_like(utility);
    for partial in partials {
        let p = partial?;
        lp_sum += p.lp_sum;
        lu_sum += p.lu_sum;
        priv_grads.add_scaled(&p.priv_grads, 1.0);
        util_grads.add_scaled(&p.util_grads, 1.0);
    }
    let inv = 1.0 / batch_idx.len() as f64;
    priv_grads.scale(inv);
    util_grads.scale(inv);
    Ok((lp_sum * inv, lu_sum * inv, priv_grads, util_grads))
}

/// One optimizer update on the mean batch loss. Returns `(L_P, L_U)` means.
pub fn joint_step(
    privatizer: &mut PrivatizerParams,
    utility: &mut Mlp<f64>,
    density: &DensityModel<f64>,
    x: &Matrix<f64>,
    y: &[usize],
    batch_idx: &[usize],
    lambda: f64,
    optimizer: &mut Optimizer,
    step: usize,
) -> Result<(f64, f64, f64), TrainError> {
    let (lp, lu, pg, ug) = batch_eval(privatizer, utility, density, x, y, batch_idx, lambda)?;
    if !lp.is_finite() || !lu.is_finite() {
        return Err(TrainError::NonFinite { step, lp, lu });
    }
    let mut flat = privatizer.params_flat();
    let util_flat = utility.params_flat();
    let split = flat.len();
    flat.extend_from_slice(&util_flat);
    let mut grads = pg.flat();
    grads.extend_from_slice(&ug.flat());
    let grad_norm = norm2(&grads);
    optimizer.step(&mut flat, &grads);
    privatizer.set_params_from(&flat[..split]);
    utility.set_params_from(&flat[split..]);
    Ok((lp, lu, grad_norm))
}

/// Project the two-layer weights onto the norm balls the smoothness theorem
/// assumes. No-op for the linear-power variant.
pub fn project_weight_norms(privatizer: &mut PrivatizerParams) {
    if let PrivatizerParams::TwoLayerTanh { w1, w2, .. } = privatizer {
        let h_w = w1.rows() as f64;
        let m = w2.rows() as f64;
        w1.clamp_spectral_norm(h_w.sqrt(), 60);
        w2.clamp_frobenius_norm(m.sqrt());
    }
}

/// Train the client: build the KDE once from the training split (frozen),
/// then run `cfg.steps` joint updates over seeded minibatches drawn with
/// replacement. Deterministic given the seed.
pub fn train_client(ds: &TabularDataset, cfg: &TrainConfig) -> Result<ClientModel, TrainError> {
    let train_x = ds.rows_of(&ds.train_idx);
    let density = DensityModel::with_mode(train_x, cfg.bandwidth, 0.05)?;
    let (mut privatizer, mut utility) = init_client(ds.dim(), ds.schema.n_classes(), cfg);
    let mut optimizer =
        Optimizer::new(cfg.optimizer, cfg.lr, privatizer.param_count() + utility.param_count());
    let mut batch_rng = Rng::new(cfg.seed).derive(2);
    let mut history = TrainHistory::default();
    let batch = cfg.batch.min(ds.train_idx.len()).max(1);
    for step in 0..cfg.steps {
        let picks = batch_rng.sample_with_replacement(ds.train_idx.len(), batch);
        let batch_idx: Vec<usize> = picks.into_iter().map(|k| ds.train_idx[k]).collect();
        let (lp, lu, grad_norm) = joint_step(
            &mut privatizer,
            &mut utility,
            &density,
            &ds.x,
            &ds.y,
            &batch_idx,
            cfg.lambda,
            &mut optimizer,
            step,
        )?;
        if cfg.weight_norm_projection {
            project_weight_norms(&mut privatizer);
        }
        history.records.push(StepRecord {
            step,
            lp,
            lu,
            joint: lp + cfg.lambda * lu,
            grad_norm,
        });
    }
    Ok(ClientModel { privatizer, utility, history, density })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::grad_oracle;
    use crate::synth;
    use approx::assert_relative_eq;

    #[test]
    fn sgd_on_quadratic_scales_by_point_eight() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 2);
        let mut theta = vec![1.0, -2.0];
        // loss = ||theta||^2, grad = 2 theta, update: theta (1 - 2*0.1)
        for _ in 0..3 {
            let grads: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
            let before = theta.clone();
            opt.step(&mut theta, &grads);
            for (b, a) in before.iter().zip(&theta) {
                assert_relative_eq!(*a, b * 0.8, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn adam_with_zero_gradients_changes_nothing() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, 3);
        let mut theta = vec![0.5, -1.5, 3.0];
        let before = theta.clone();
        for _ in 0..5 {
            opt.step(&mut theta, &[0.0, 0.0, 0.0]);
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn smoothness_bound_worked_constants() {
        let mut s = SmoothnessInputs {
            m: 4,
            h_w: 8,
            c: 2,
            lambda: 0.0,
            sigma_sq: 0.0,
            steps: 1,
            initial_gap: 1.0,
        };
        let (l, eta) = smoothness_bound(&s);
        assert_eq!(l, 512.0);
        assert!((eta - 0.0019531).abs() < 1e-6);
        s.lambda = 1.0;
        assert_eq!(smoothness_bound(&s).0, 528.0);
        s.m = 1;
        s.h_w = 1;
        s.lambda = 0.0;
        assert_eq!(smoothness_bound(&s).0, 4.0);
    }

    #[test]
    fn sgd_rate_bound_worked_constants() {
        // L = 4 from (m=1, h_w=1, lambda=0)
        let s = SmoothnessInputs {
            m: 1,
            h_w: 1,
            c: 2,
            lambda: 0.0,
            sigma_sq: 0.01,
            steps: 100,
            initial_gap: 1.0,
        };
        let b = sgd_rate_bound(&s, 0.125).unwrap();
        assert!((b - (1.0 / 9.375 + 0.005 / 1.5)).abs() < 1e-12);
        assert!((b - 0.11000).abs() < 1e-5);
        // zero noise: bound = gap/(eta(1-L eta/2)T), halves when T doubles
        let mut s0 = s;
        s0.sigma_sq = 0.0;
        let b1 = sgd_rate_bound(&s0, 0.125).unwrap();
        s0.steps = 200;
        let b2 = sgd_rate_bound(&s0, 0.125).unwrap();
        assert_relative_eq!(b1, 2.0 * b2, epsilon = 1e-12);
        // eta >= 1/L rejected
        assert!(sgd_rate_bound(&s, 0.25).is_err());
        assert!(sgd_rate_bound(&s, 0.3).is_err());
    }

    #[test]
    fn lambda_zero_leaves_utility_unchanged_under_sgd() {
        let ds = synth::two_gaussians(60, 1.5, 3);
        let cfg = TrainConfig {
            seed: 3,
            lambda: 0.0,
            optimizer: OptimizerKind::Sgd,
            lr: 1e-3,
            batch: 16,
            steps: 4,
            variant: VariantKind::TwoLayerTanh,
            two_layer_width: 4,
            ..TrainConfig::default()
        };
        let (_, utility_init) = init_client(ds.dim(), 2, &cfg);
        let model = train_client(&ds, &cfg).unwrap();
        assert_eq!(model.utility.params_flat(), utility_init.params_flat());
        assert_eq!(model.history.records.len(), 4);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let ds = synth::two_gaussians(40, 1.0, 5);
        let cfg = TrainConfig { seed: 5, steps: 0, ..TrainConfig::default() };
        let (priv_init, util_init) = init_client(ds.dim(), 2, &cfg);
        let model = train_client(&ds, &cfg).unwrap();
        assert_eq!(model.privatizer.params_flat(), priv_init.params_flat());
        assert_eq!(model.utility.params_flat(), util_init.params_flat());
        assert!(model.history.records.is_empty());
    }

    #[test]
    fn same_seed_gives_bit_identical_histories() {
        let ds = synth::two_gaussians(80, 1.2, 6);
        let cfg = TrainConfig { seed: 11, steps: 6, batch: 24, ..TrainConfig::default() };
        let a = train_client(&ds, &cfg).unwrap();
        let b = train_client(&ds, &cfg).unwrap();
        assert_eq!(a.history.records, b.history.records);
        assert_eq!(a.privatizer.params_flat(), b.privatizer.params_flat());
        assert_eq!(a.utility.params_flat(), b.utility.params_flat());
    }

    #[test]
    fn joint_descends_on_synthetic_data() {
        let ds = synth::two_gaussians(120, 1.5, 7);
        let cfg = TrainConfig { seed: 7, steps: 200, batch: 32, lr: 3e-3, ..TrainConfig::default() };
        let model = train_client(&ds, &cfg).unwrap();
        let first = &model.history.records[0];
        let last = model.history.records.last().unwrap();
        assert!(
            last.joint < first.joint,
            "joint loss should descend: {} -> {}",
            first.joint,
            last.joint
        );
    }

    #[test]
    fn utility_gradient_is_lambda_scaled() {
        // d(joint)/d(U_N params) must equal lambda * d(L_U)/d(U_N params)
        let ds = synth::two_gaussians(50, 1.0, 8);
        let lambda = 0.7;
        let cfg = TrainConfig {
            seed: 8,
            lambda,
            variant: VariantKind::TwoLayerTanh,
            two_layer_width: 4,
            utility_hidden: vec![4],
            ..TrainConfig::default()
        };
        let (privatizer, mut utility) = init_client(ds.dim(), 2, &cfg);
        let train_x = ds.rows_of(&ds.train_idx);
        let density = DensityModel::with_mode(train_x, BandwidthMode::Scott, 0.05).unwrap();
        let batch: Vec<usize> = ds.train_idx[..8].to_vec();
        let (_, _, _, ug) =
            batch_eval(&privatizer, &utility, &density, &ds.x, &ds.y, &batch, lambda).unwrap();
        let theta = utility.params_flat();
        let fd = grad_oracle(
            |p: &[f64]| {
                utility.set_params_from(p);
                let mut acc = 0.0;
                for &i in &batch {
                    let z = privatizer.privatize(ds.x.row(i)).unwrap().z;
                    let c = utility.forward_cached(&z).unwrap();
                    acc += cross_entropy_from_logits(&c.pre[c.pre.len() - 1], ds.y[i]);
                }
                lambda * acc / batch.len() as f64
            },
            &theta,
            1e-5,
        )
        .unwrap();
        utility.set_params_from(&theta);
        for (a, b) in ug.flat().iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn mean_privacy_loss_drops_by_a_third_on_blobs() {
        let ds = synth::gaussian_blob(300, 2, 14);
        let cfg = TrainConfig {
            seed: 7,
            steps: 600,
            batch: 32,
            lr: 3e-3,
            privatizer_hidden: vec![8],
            ..TrainConfig::default()
        };
        let model = train_client(&ds, &cfg).unwrap();
        let first = model.history.records[0].lp;
        let last = model.history.records.last().unwrap().lp;
        assert!(
            last <= 0.7 * first,
            "mean L_P should drop by at least 30%: {first} -> {last}"
        );
    }

    #[test]
    fn trained_privacy_loss_is_monotone_in_power() {
        // after training to convergence, mean L_P should not increase with
        // the power p; checked as a majority-vote trend over three seeds
        let ds = synth::two_gaussians(240, 1.5, 60);
        let mut wins = 0;
        for seed in [1u64, 2, 3] {
            let mut means = Vec::new();
            for p in [1u32, 2, 3] {
                let cfg = TrainConfig {
                    seed,
                    power: p,
                    lambda: 0.0,
                    steps: 400,
                    batch: 32,
                    lr: 3e-3,
                    ..TrainConfig::default()
                };
                let model = train_client(&ds, &cfg).unwrap();
                let train_x = ds.rows_of(&ds.train_idx);
                let mut total = 0.0;
                for i in 0..train_x.rows() {
                    total += model
                        .privatizer
                        .privacy_loss(&model.density, train_x.row(i))
                        .unwrap();
                }
                means.push(total / train_x.rows() as f64);
            }
            if means[0] >= means[1] && means[1] >= means[2] {
                wins += 1;
            }
        }
        assert!(wins >= 2, "monotone-p trend failed: {wins}/3 seeds");
    }

    #[test]
    fn measured_gradient_norms_respect_the_rate_bound() {
        // two-layer setting of the smoothness theorem: projection on,
        // eta = eta_max / 2, sigma^2 estimated empirically; the measured
        // running-average full-batch squared gradient norm must stay within
        // 5x the bound
        let ds = synth::two_gaussians(200, 1.2, 31);
        let d = ds.dim();
        let h_w = 3usize;
        let lambda = 1.0;
        let inputs = SmoothnessInputs {
            m: d,
            h_w,
            c: 2,
            lambda,
            sigma_sq: 0.0,
            steps: 200,
            initial_gap: 0.0,
        };
        let (_, eta_max) = smoothness_bound(&inputs);
        let eta = eta_max / 2.0;
        let cfg = TrainConfig {
            seed: 31,
            variant: VariantKind::TwoLayerTanh,
            two_layer_width: h_w,
            lambda,
            optimizer: OptimizerKind::Sgd,
            lr: eta,
            batch: 16,
            steps: 200,
            weight_norm_projection: true,
            ..TrainConfig::default()
        };
        let (mut privatizer, mut utility) = init_client(d, 2, &cfg);
        crate::trainer::project_weight_norms(&mut privatizer);
        let train_x = ds.rows_of(&ds.train_idx);
        let density = DensityModel::with_mode(train_x, cfg.bandwidth, 0.05).unwrap();
        let full: Vec<usize> = ds.train_idx.clone();
        // full-batch loss and gradient norm at the initial point
        let full_grad_sq = |p: &PrivatizerParams, u: &Mlp<f64>| -> (f64, f64) {
            let (lp, lu, pg, ug) =
                batch_eval(p, u, &density, &ds.x, &ds.y, &full, lambda).unwrap();
            let mut g = pg.flat();
            g.extend_from_slice(&ug.flat());
            (lp + lambda * lu, norm2(&g).powi(2))
        };
        let (loss0, _) = full_grad_sq(&privatizer, &utility);
        // per-sample gradient variance at the start, scaled by batch size
        let mut per_sample_sq = Vec::new();
        let (_, _, pg_mean, ug_mean) =
            batch_eval(&privatizer, &utility, &density, &ds.x, &ds.y, &full, lambda).unwrap();
        let mut mean_flat = pg_mean.flat();
        mean_flat.extend_from_slice(&ug_mean.flat());
        for &i in full.iter().take(60) {
            let (_, _, pg, ug) =
                batch_eval(&privatizer, &utility, &density, &ds.x, &ds.y, &[i], lambda).unwrap();
            let mut g = pg.flat();
            g.extend_from_slice(&ug.flat());
            let diff: f64 =
                g.iter().zip(&mean_flat).map(|(a, b)| (a - b) * (a - b)).sum();
            per_sample_sq.push(diff);
        }
        let sigma_sq_sample = per_sample_sq.iter().sum::<f64>() / per_sample_sq.len() as f64;
        let sigma_sq = sigma_sq_sample / cfg.batch as f64;
        let mut optimizer = Optimizer::new(OptimizerKind::Sgd, eta, privatizer.param_count() + utility.param_count());
        let mut batch_rng = crate::numkit::Rng::new(cfg.seed).derive(2);
        let mut grad_sq_sum = 0.0;
        for step in 0..cfg.steps {
            let (_, g2) = full_grad_sq(&privatizer, &utility);
            grad_sq_sum += g2;
            let picks = batch_rng.sample_with_replacement(full.len(), cfg.batch);
            let batch_idx: Vec<usize> = picks.into_iter().map(|k| full[k]).collect();
            joint_step(
                &mut privatizer,
                &mut utility,
                &density,
                &ds.x,
                &ds.y,
                &batch_idx,
                lambda,
                &mut optimizer,
                step,
            )
            .unwrap();
            project_weight_norms(&mut privatizer);
        }
        let measured = grad_sq_sum / cfg.steps as f64;
        let bound_inputs = SmoothnessInputs {
            sigma_sq,
            initial_gap: loss0, // L* >= 0 for both loss terms
            ..inputs
        };
        let bound = sgd_rate_bound(&bound_inputs, eta).unwrap();
        assert!(
            measured <= 5.0 * bound,
            "running-average grad norm {measured} exceeds 5x bound {bound}"
        );
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let ds = synth::two_gaussians(40, 1.0, 9);
        let cfg = TrainConfig { seed: 9, steps: 3, batch: 8, ..TrainConfig::default() };
        let model = train_client(&ds, &cfg).unwrap();
        let csv = model.history.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,lp,lu,joint,gradnorm");
        assert_eq!(lines.len(), 4);
    }
}
