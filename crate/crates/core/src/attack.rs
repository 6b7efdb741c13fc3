//! Empirical leakage evaluation: a reconstruction adversary in the style of
//! feature-space hijacking. The adversary holds public data from a similar
//! distribution, queries the released mechanism black-box to build
//! `(embedding, feature)` pairs, and fits a decoder MLP by squared error.
//! This is deliberately simpler than the full GAN-style attack with
//! server-controlled gradients, so surviving it is necessary, not
//! sufficient, evidence of protection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{FeatureSchema, TabularDataset};
use crate::numkit::matrix::Matrix;
use crate::numkit::mlp::{Activation, Mlp, MlpGrads};
use crate::numkit::rng::Rng;
use crate::privatizer::PrivatizerParams;
use crate::protocol::ReleaseBundle;
use crate::trainer::{Optimizer, OptimizerKind};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("public dataset is empty")]
    EmptyPublic,
    #[error("no public sample could be privatized")]
    NothingPrivatizable,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub decoder_hidden: Vec<usize>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { decoder_hidden: vec![32], steps: 3000, batch: 32, lr: 3e-3 }
    }
}

/// Leakage metrics over the released samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// fraction of samples whose categorical one-hot groups were all
    /// recovered by argmax (0 when the schema has no categorical columns)
    pub categorical_accuracy: f64,
    /// mean squared error per standardized coordinate
    pub mse: f64,
    /// Pearson correlation between reconstructed and true entries
    pub correlation: f64,
    pub n: usize,
}

/// Fit the decoder `embedding -> features` on black-box privatizations of
/// the public data. Unprivatizable public rows are skipped.
pub fn train_attacker(
    public: &TabularDataset,
    privatizer: &PrivatizerParams,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Mlp<f64>, AttackError> {
    if public.n() == 0 {
        return Err(AttackError::EmptyPublic);
    }
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(public.n());
    for i in 0..public.n() {
        let x = public.x.row(i);
        if let Ok(sample) = privatizer.privatize(x) {
            pairs.push((sample.z, x.to_vec()));
        }
    }
    if pairs.is_empty() {
        return Err(AttackError::NothingPrivatizable);
    }
    let emb_dim = pairs[0].0.len();
    let feat_dim = pairs[0].1.len();
    let mut decoder = build_decoder(emb_dim, feat_dim, &cfg.decoder_hidden, seed);
    train_decoder_on_pairs(&mut decoder, &pairs, cfg, seed);
    Ok(decoder)
}

/// Decoder trained on arbitrary `(input, target)` pairs; exposed so
/// experiments can attack noise embeddings or other baselines.
pub fn train_decoder_on_pairs(
    decoder: &mut Mlp<f64>,
    pairs: &[(Vec<f64>, Vec<f64>)],
    cfg: &AttackConfig,
    seed: u64,
) {
    let mut rng = Rng::new(seed).derive(3);
    let mut optimizer = Optimizer::new(OptimizerKind::Adam, cfg.lr, decoder.param_count());
    let batch = cfg.batch.min(pairs.len()).max(1);
    for _ in 0..cfg.steps {
        let picks = rng.sample_with_replacement(pairs.len(), batch);
        let mut grads = MlpGrads::zeros_like(decoder);
        for k in picks {
            let (z, x) = &pairs[k];
            let cache = decoder.forward_cached(z).expect("decoder dims fixed");
            let out = cache.output();
            // squared error: adjoint 2 (out - x) / dim
            let adjoint: Vec<f64> =
                out.iter().zip(x).map(|(&o, &t)| 2.0 * (o - t) / x.len() as f64).collect();
            let (g, _) = decoder.backprop(&cache, &adjoint);
            grads.add_scaled(&g, 1.0 / batch as f64);
        }
        let mut params = decoder.params_flat();
        optimizer.step(&mut params, &grads.flat());
        decoder.set_params_from(&params);
    }
}

pub fn build_decoder(emb_dim: usize, feat_dim: usize, hidden: &[usize], seed: u64) -> Mlp<f64> {
    let mut sizes = vec![emb_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(feat_dim);
    let mut acts = vec![Activation::Tanh; hidden.len()];
    acts.push(Activation::Identity);
    let mut decoder = Mlp::new(&sizes, &acts).expect("valid decoder spec");
    let mut rng = Rng::new(seed).derive(4);
    decoder.init_uniform(&mut rng);
    decoder
}

/// Measure leakage of a bundle whose rows correspond one-to-one with
/// `private_rows` (standardized feature space).
pub fn leakage_metrics(
    attacker: &Mlp<f64>,
    private_rows: &Matrix<f64>,
    schema: &FeatureSchema,
    bundle: &ReleaseBundle,
) -> Result<AttackReport, AttackError> {
    if bundle.n() != private_rows.rows() {
        return Err(AttackError::SchemaMismatch(format!(
            "bundle has {} rows, private data has {}",
            bundle.n(),
            private_rows.rows()
        )));
    }
    if private_rows.cols() != schema.encoded_dim {
        return Err(AttackError::SchemaMismatch(format!(
            "private data has {} columns, schema encodes {}",
            private_rows.cols(),
            schema.encoded_dim
        )));
    }
    if attacker.input_dim() != bundle.dim() || attacker.output_dim() != schema.encoded_dim {
        return Err(AttackError::SchemaMismatch(format!(
            "decoder maps {} -> {}, expected {} -> {}",
            attacker.input_dim(),
            attacker.output_dim(),
            bundle.dim(),
            schema.encoded_dim
        )));
    }
    let groups = schema.one_hot_groups();
    let n = bundle.n();
    let mut leaked = 0usize;
    let mut se_sum = 0.0f64;
    let mut xs = Vec::with_capacity(n * schema.encoded_dim);
    let mut rs = Vec::with_capacity(n * schema.encoded_dim);
    for i in 0..n {
        let z = bundle.embeddings.row(i);
        let x = private_rows.row(i);
        let xhat = attacker.forward(z).expect("decoder dims checked");
        let mut all_groups_match = !groups.is_empty();
        for &(offset, width) in &groups {
            let truth = argmax(&x[offset..offset + width]);
            let guess = argmax(&xhat[offset..offset + width]);
            if truth != guess {
                all_groups_match = false;
            }
        }
        if all_groups_match {
            leaked += 1;
        }
        for (a, b) in xhat.iter().zip(x) {
            se_sum += (a - b) * (a - b);
        }
        xs.extend_from_slice(x);
        rs.extend_from_slice(&xhat);
    }
    let entries = (n * schema.encoded_dim) as f64;
    Ok(AttackReport {
        categorical_accuracy: if groups.is_empty() { 0.0 } else { leaked as f64 / n as f64 },
        mse: se_sum / entries,
        correlation: pearson(&rs, &xs),
        n,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}
