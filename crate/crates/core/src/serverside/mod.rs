//! Downstream learners trained solely on a decoded release bundle: an MLP
//! classifier, a bagged random forest, and gradient-boosted trees, plus
//! evaluation. `train_server` receives nothing but the bundle, so the DP
//! post-processing property holds by construction.

pub mod tree;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::split_indices;
use crate::numkit::matrix::Matrix;
use crate::numkit::mlp::{cross_entropy_from_logits, Activation, Mlp};
use crate::numkit::rng::Rng;
use crate::protocol::{crc32, ReleaseBundle};
use crate::trainer::{Optimizer, OptimizerKind};
use tree::{argmax_lowest, Forest, Gbt};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("bundle is empty")]
    EmptyBundle,
    #[error("bundle too small to re-split: {0} rows")]
    TooSmall(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model blob malformed: {0}")]
    Blob(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServerKind {
    Mlp,
    Forest,
    Gbt,
}

/// Server model configuration; unused fields are ignored per kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerConfig {
    pub kind: ServerKind,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            kind: ServerKind::Mlp,
            hidden: vec![16],
            steps: 2000,
            batch: 64,
            lr: 3e-3,
            trees: 100,
            max_depth: 4,
            shrinkage: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum ModelInner {
    Mlp(Mlp<f64>),
    Forest(Forest),
    Gbt(Gbt),
    /// degenerate single-class bundle
    Constant(usize),
}

/// A trained server model over the bundle's label alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerModel {
    /// sorted distinct labels seen in the bundle
    pub classes: Vec<i64>,
    inner: ModelInner,
    /// set when the bundle had a single class and the model is constant
    pub degenerate: bool,
}

impl ServerModel {
    /// Predicted index into `classes`.
    pub fn predict(&self, x: &[f64]) -> usize {
        match &self.inner {
            ModelInner::Mlp(net) => {
                let out = net.forward(x).expect("dimension checked at train time");
                argmax_lowest(&out)
            }
            ModelInner::Forest(f) => f.predict(x),
            ModelInner::Gbt(g) => g.predict(x),
            ModelInner::Constant(c) => *c,
        }
    }

    pub fn predict_label(&self, x: &[f64]) -> i64 {
        self.classes[self.predict(x)]
    }
}

/// Accuracy report from held-out evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// per-class `(label, correct, total)`
    pub per_class: Vec<(i64, usize, usize)>,
    pub n_train: usize,
    pub n_test: usize,
}

/// Train on the bundle with an internal 80/20 re-split; returns the model
/// and its held-out evaluation.
pub fn train_server(
    bundle: &ReleaseBundle,
    cfg: &ServerConfig,
    seed: u64,
) -> Result<(ServerModel, EvalReport), ServerError> {
    if bundle.n() == 0 {
        return Err(ServerError::EmptyBundle);
    }
    let mut classes: Vec<i64> = bundle.labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let y: Vec<usize> = bundle
        .labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label in alphabet"))
        .collect();
    if classes.len() == 1 {
        log::warn!("single-class bundle: returning a constant predictor");
        let model =
            ServerModel { classes: classes.clone(), inner: ModelInner::Constant(0), degenerate: true };
        let report = evaluate(&model, &bundle.embeddings, &y);
        return Ok((model, report));
    }
    let (train_rows, test_rows) =
        split_indices(bundle.n(), seed).map_err(|_| ServerError::TooSmall(bundle.n()))?;
    let x = &bundle.embeddings;
    let inner = match cfg.kind {
        ServerKind::Forest => ModelInner::Forest(Forest::fit(
            x,
            &y,
            &train_rows,
            classes.len(),
            cfg.trees,
            cfg.max_depth,
            seed,
        )),
        ServerKind::Gbt => ModelInner::Gbt(Gbt::fit(
            x,
            &y,
            &train_rows,
            classes.len(),
            cfg.trees,
            cfg.max_depth,
            cfg.shrinkage,
        )),
        ServerKind::Mlp => {
            let mut sizes = vec![x.cols()];
            sizes.extend_from_slice(&cfg.hidden);
            sizes.push(classes.len());
            let mut acts = vec![Activation::Tanh; cfg.hidden.len()];
            acts.push(Activation::Softmax);
            let mut net = Mlp::new(&sizes, &acts).expect("valid layer spec");
            let mut rng = Rng::new(seed);
            net.init_uniform(&mut rng);
            let mut optimizer = Optimizer::new(OptimizerKind::Adam, cfg.lr, net.param_count());
            let batch = cfg.batch.min(train_rows.len()).max(1);
            for _ in 0..cfg.steps {
                let picks = rng.sample_with_replacement(train_rows.len(), batch);
                let mut grads = crate::numkit::mlp::MlpGrads::zeros_like(&net);
                let mut params = net.params_flat();
                for k in picks {
                    let r = train_rows[k];
                    let cache = net.forward_cached(x.row(r)).expect("dims fixed");
                    let mut delta = cache.output().to_vec();
                    delta[y[r]] -= 1.0;
                    let (g, _) = net.backprop_logits_delta(&cache, delta);
                    grads.add_scaled(&g, 1.0 / batch as f64);
                }
                optimizer.step(&mut params, &grads.flat());
                net.set_params_from(&params);
            }
            ModelInner::Mlp(net)
        }
    };
    let model = ServerModel { classes, inner, degenerate: false };
    let test_x = rows_matrix(x, &test_rows);
    let test_y: Vec<usize> = test_rows.iter().map(|&r| y[r]).collect();
    let mut report = evaluate(&model, &test_x, &test_y);
    report.n_train = train_rows.len();
    Ok((model, report))
}

fn rows_matrix(x: &Matrix<f64>, rows: &[usize]) -> Matrix<f64> {
    let mut out = Matrix::zeros(rows.len(), x.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(r));
    }
    out
}

/// Argmax prediction against integer labels (already indexed into the
/// model's class alphabet).
pub fn evaluate(model: &ServerModel, x: &Matrix<f64>, y: &[usize]) -> EvalReport {
    assert_eq!(x.rows(), y.len(), "evaluation shapes");
    let mut per_class: Vec<(i64, usize, usize)> =
        model.classes.iter().map(|&c| (c, 0usize, 0usize)).collect();
    let mut correct = 0usize;
    for i in 0..x.rows() {
        let pred = model.predict(x.row(i));
        per_class[y[i]].2 += 1;
        if pred == y[i] {
            correct += 1;
            per_class[y[i]].1 += 1;
        }
    }
    EvalReport {
        accuracy: if y.is_empty() { 0.0 } else { correct as f64 / y.len() as f64 },
        per_class,
        n_train: 0,
        n_test: y.len(),
    }
}

/// Train cross-entropy loss of the server MLP is not exposed; this helper
/// exists for diagnostics in experiments.
pub fn mlp_loss(net: &Mlp<f64>, x: &Matrix<f64>, y: &[usize]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.rows() {
        let cache = net.forward_cached(x.row(i)).expect("dims");
        acc += cross_entropy_from_logits(&cache.pre[cache.pre.len() - 1], y[i]);
    }
    acc / x.rows().max(1) as f64
}

const MODEL_MAGIC: &[u8; 7] = b"PMSRV1\n";

/// Versioned binary model dump: magic, JSON body, trailing CRC32.
pub fn encode_model(model: &ServerModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(serde_json::to_string(model).expect("model serializes").as_bytes());
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ServerModel, ServerError> {
    if bytes.len() < MODEL_MAGIC.len() + 4 || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(ServerError::Blob("bad magic or length".into()));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(ServerError::Blob("crc mismatch".into()));
    }
    serde_json::from_slice(&bytes[MODEL_MAGIC.len()..bytes.len() - 4])
        .map_err(|e| ServerError::Blob(format!("json: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::fnv1a32;
    use crate::synth;

    fn bundle_from(x: Matrix<f64>, labels: Vec<i64>) -> ReleaseBundle {
        ReleaseBundle {
            eps_target: 1.0,
            delta: 0.05,
            lambda_adj: 1.0,
            schema_hash: fnv1a32(b"test"),
            embeddings: x,
            labels,
        }
    }

    fn blob_bundle(seed: u64, n: usize) -> ReleaseBundle {
        let ds = synth::two_gaussians(n, 2.0, seed);
        let labels: Vec<i64> = ds.y.iter().map(|&v| v as i64).collect();
        bundle_from(ds.x, labels)
    }

    #[test]
    fn constant_label_bundle_is_perfect_on_itself() {
        let x = Matrix::from_rows(&vec![vec![0.1, 0.2]; 10]).unwrap();
        let bundle = bundle_from(x, vec![3; 10]);
        for kind in [ServerKind::Mlp, ServerKind::Forest, ServerKind::Gbt] {
            let cfg = ServerConfig { kind, ..ServerConfig::default() };
            let (model, report) = train_server(&bundle, &cfg, 1).unwrap();
            assert!(model.degenerate);
            assert_eq!(report.accuracy, 1.0);
            assert_eq!(model.predict_label(&[9.0, 9.0]), 3);
        }
    }

    #[test]
    fn empty_bundle_rejected() {
        let bundle = bundle_from(Matrix::zeros(0, 2), vec![]);
        assert!(matches!(
            train_server(&bundle, &ServerConfig::default(), 0),
            Err(ServerError::EmptyBundle)
        ));
    }

    #[test]
    fn mlp_solves_xor_embeddings() {
        let ds = synth::xor_pattern(400, 11);
        let labels: Vec<i64> = ds.y.iter().map(|&v| v as i64).collect();
        let bundle = bundle_from(ds.x, labels);
        let cfg = ServerConfig {
            kind: ServerKind::Mlp,
            hidden: vec![8],
            steps: 3000,
            batch: 32,
            lr: 5e-3,
            ..ServerConfig::default()
        };
        let (_, report) = train_server(&bundle, &cfg, 3).unwrap();
        assert!(report.accuracy >= 0.95, "xor accuracy {}", report.accuracy);
    }

    #[test]
    fn forest_and_gbt_solve_separable_blobs() {
        let bundle = blob_bundle(13, 400);
        for kind in [ServerKind::Forest, ServerKind::Gbt] {
            let cfg = ServerConfig { kind, trees: 60, ..ServerConfig::default() };
            let (_, report) = train_server(&bundle, &cfg, 5).unwrap();
            assert!(report.accuracy >= 0.95, "{kind:?} accuracy {}", report.accuracy);
        }
    }

    #[test]
    fn all_kinds_accept_the_same_bundle() {
        let bundle = blob_bundle(17, 200);
        for kind in [ServerKind::Mlp, ServerKind::Forest, ServerKind::Gbt] {
            let cfg = ServerConfig { kind, steps: 200, trees: 20, ..ServerConfig::default() };
            let (model, _) = train_server(&bundle, &cfg, 7).unwrap();
            assert_eq!(model.classes, vec![0, 1]);
        }
    }

    #[test]
    fn forest_votes_match_naive_reimplementation() {
        // independent oracle: explicit vote counting over leaf_for results
        let bundle = blob_bundle(3, 120);
        let cfg = ServerConfig { kind: ServerKind::Forest, trees: 15, ..ServerConfig::default() };
        let (model, _) = train_server(&bundle, &cfg, 3).unwrap();
        let ModelInner::Forest(forest) = &model.inner else { panic!("forest expected") };
        for i in 0..20 {
            let x = bundle.embeddings.row(i);
            let mut votes = vec![0.0f64; 2];
            for tree in &forest.trees {
                let dist = tree.leaf_for(x);
                let total: f64 = dist.iter().sum();
                for (v, &c) in votes.iter_mut().zip(dist) {
                    *v += c / total;
                }
            }
            let naive = if votes[1] > votes[0] { 1 } else { 0 };
            assert_eq!(model.predict(x), naive);
        }
    }

    #[test]
    fn evaluation_edge_cases() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![0.2], vec![0.9]]).unwrap();
        let model =
            ServerModel { classes: vec![0, 1], inner: ModelInner::Constant(0), degenerate: true };
        // constant predictor on balanced binary data scores one half
        let report = evaluate(&model, &x, &[0, 1, 0, 1]);
        assert_eq!(report.accuracy, 0.5);
        // predictions equal to labels score one
        let report = evaluate(&model, &x, &[0, 0, 0, 0]);
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn model_blob_round_trips_and_is_deterministic() {
        let bundle = blob_bundle(23, 150);
        let cfg = ServerConfig { kind: ServerKind::Gbt, trees: 10, ..ServerConfig::default() };
        let (m1, _) = train_server(&bundle, &cfg, 9).unwrap();
        let (m2, _) = train_server(&bundle, &cfg, 9).unwrap();
        let b1 = encode_model(&m1);
        let b2 = encode_model(&m2);
        assert_eq!(b1, b2, "same seed, same bytes");
        let back = decode_model(&b1).unwrap();
        assert_eq!(back, m1);
        let mut bad = b1.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x40;
        assert!(decode_model(&bad).is_err());
    }
}
