//! End-to-end pipeline driver: ingest, client training, calibration,
//! release, server training, attack, and report assembly, all working
//! through artifact files in a run directory. The CLI is a thin wrapper
//! around these stage functions, which keeps the whole flow testable
//! in-process.
//!
//! Every artifact embeds the run's config hash (FNV-1a of the canonical
//! config JSON with the release target zeroed out, since sweeping the
//! target within one run is expected); stages refuse inputs from a
//! different run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{leakage_metrics, train_attacker, AttackConfig, AttackError, AttackReport};
use crate::calibrator::{
    calibrate_samples, filter_release, records_to_csv, CalibrationRecord, PrivacyReport,
};
use crate::dataio::{load_csv, DataError, FeatureSchema, SchemaSpec, TabularDataset};
use crate::density::{BandwidthMode, DensityModel};
use crate::numkit::matrix::Matrix;
use crate::privatizer::{PrivatizerParams, VariantKind};
use crate::protocol::{
    self, decode_privatizer, encode_privatizer, fnv1a32, read_plb, write_plb, ProtocolError,
    ReleaseBundle,
};
use crate::serverside::{self, ServerConfig, ServerError, ServerKind};
use crate::trainer::{train_client, OptimizerKind, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("training error: {0}")]
    Train(#[from] TrainError),
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("server error: {0}")]
    Server(#[from] ServerError),
    #[error("attack error: {0}")]
    Attack(#[from] AttackError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact {path} belongs to config {found:08x}, expected {expected:08x}")]
    HashMismatch { path: String, found: u32, expected: u32 },
    #[error("missing artifact: {0} (run the earlier stage first)")]
    MissingArtifact(String),
}

impl HarnessError {
    /// Stable process exit code per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::HashMismatch { .. } => 2,
            HarnessError::Data(_) | HarnessError::MissingArtifact(_) | HarnessError::Io(_) => 3,
            HarnessError::Train(_) => 4,
            HarnessError::Protocol(_) => 5,
            HarnessError::Server(_) | HarnessError::Attack(_) => 3,
        }
    }
}

/// Full run configuration, parsed from JSON with unknown keys rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: VariantKind,
    pub power: u32,
    pub privatizer_hidden: Vec<usize>,
    pub two_layer_width: usize,
    pub utility_hidden: Vec<usize>,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub bandwidth: BandwidthMode,
    pub weight_norm_projection: bool,
    pub alpha: f64,
    pub eps_target: f64,
    pub lambda_adj: f64,
    pub server: ServerConfig,
    pub attack: AttackConfig,
    pub data_csv: String,
    pub schema_json: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            variant: VariantKind::LinearPower,
            power: 1,
            privatizer_hidden: Vec::new(),
            two_layer_width: 8,
            utility_hidden: vec![8],
            lambda: 1.0,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch: 64,
            steps: 200,
            bandwidth: BandwidthMode::Scott,
            weight_norm_projection: false,
            alpha: 0.05,
            eps_target: 1.0,
            lambda_adj: 1.0,
            server: ServerConfig::default(),
            attack: AttackConfig::default(),
            data_csv: String::new(),
            schema_json: String::new(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::Config(msg.to_string()));
        if self.power < 1 {
            return bad("power must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be nonnegative");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0,1)");
        }
        if !(self.eps_target > 0.0 && self.eps_target.is_finite()) {
            return bad("eps_target must be positive");
        }
        if !(self.lambda_adj > 0.0 && self.lambda_adj.is_finite()) {
            return bad("lambda_adj must be positive");
        }
        if let BandwidthMode::Fixed { value } = self.bandwidth {
            if !(value > 0.0) {
                return bad("fixed bandwidth must be positive");
            }
        }
        if let BandwidthMode::ScottTimes { factor } = self.bandwidth {
            if !(factor > 0.0) {
                return bad("bandwidth factor must be positive");
            }
        }
        Ok(())
    }

    /// Run identity: hash of the canonical JSON with the sweepable release
    /// target zeroed.
    pub fn config_hash(&self) -> u32 {
        let mut normalized = self.clone();
        normalized.eps_target = 0.0;
        fnv1a32(serde_json::to_string(&normalized).expect("config serializes").as_bytes())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            variant: self.variant,
            power: self.power,
            privatizer_hidden: self.privatizer_hidden.clone(),
            two_layer_width: self.two_layer_width,
            utility_hidden: self.utility_hidden.clone(),
            lambda: self.lambda,
            optimizer: self.optimizer,
            lr: self.lr,
            batch: self.batch,
            steps: self.steps,
            bandwidth: self.bandwidth,
            weight_norm_projection: self.weight_norm_projection,
        }
    }
}

// ---------------------------------------------------------------------------
// artifact container: magic, config_hash + kind header, payload, crc
// ---------------------------------------------------------------------------

const ARTIFACT_MAGIC: &[u8; 7] = b"PMART1\n";

fn write_artifact(path: &Path, config_hash: u32, kind: &str, payload: &[u8]) -> Result<(), HarnessError> {
    let mut out = Vec::with_capacity(payload.len() + 64);
    out.extend_from_slice(ARTIFACT_MAGIC);
    out.extend_from_slice(format!("config_hash={config_hash}\n").as_bytes());
    out.extend_from_slice(format!("kind={kind}\n").as_bytes());
    out.extend_from_slice(format!("len={}\n", payload.len()).as_bytes());
    out.push(b'\n');
    out.extend_from_slice(payload);
    let crc = protocol::crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

fn read_artifact(path: &Path, expected_kind: &str, expected_hash: u32) -> Result<Vec<u8>, HarnessError> {
    let bytes = std::fs::read(path)
        .map_err(|_| HarnessError::MissingArtifact(path.display().to_string()))?;
    let parse = |msg: &str| HarnessError::Config(format!("{}: {msg}", path.display()));
    if bytes.len() < ARTIFACT_MAGIC.len() + 4 || &bytes[..ARTIFACT_MAGIC.len()] != ARTIFACT_MAGIC {
        return Err(parse("not an artifact file"));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = protocol::crc32(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(parse("artifact crc mismatch"));
    }
    let body = &bytes[ARTIFACT_MAGIC.len()..bytes.len() - 4];
    let header_end = body
        .windows(2)
        .position(|w| w == b"\n\n")
        .map(|p| p + 1)
        .ok_or_else(|| parse("missing header terminator"))?;
    let header = std::str::from_utf8(&body[..header_end]).map_err(|_| parse("header not UTF-8"))?;
    let mut hash = None;
    let mut kind = None;
    let mut len = None;
    for line in header.lines() {
        match line.split_once('=') {
            Some(("config_hash", v)) => hash = v.parse::<u32>().ok(),
            Some(("kind", v)) => kind = Some(v.to_string()),
            Some(("len", v)) => len = v.parse::<usize>().ok(),
            _ => return Err(parse(&format!("unexpected header line {line:?}"))),
        }
    }
    let found = hash.ok_or_else(|| parse("missing config_hash"))?;
    if found != expected_hash {
        return Err(HarnessError::HashMismatch {
            path: path.display().to_string(),
            found,
            expected: expected_hash,
        });
    }
    if kind.as_deref() != Some(expected_kind) {
        return Err(parse(&format!("artifact kind {kind:?}, expected {expected_kind:?}")));
    }
    let payload = &body[header_end + 1..];
    if Some(payload.len()) != len {
        return Err(parse("payload length mismatch"));
    }
    Ok(payload.to_vec())
}

/// CSV artifacts carry the hash as a leading comment line.
fn write_csv_artifact(path: &Path, config_hash: u32, body: &str) -> Result<(), HarnessError> {
    std::fs::write(path, format!("# config_hash={config_hash}\n{body}"))?;
    Ok(())
}

fn read_csv_artifact(path: &Path, expected_hash: u32) -> Result<String, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| HarnessError::MissingArtifact(path.display().to_string()))?;
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| HarnessError::Config(format!("{}: empty csv", path.display())))?;
    let found: u32 = first
        .strip_prefix("# config_hash=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| HarnessError::Config(format!("{}: missing config hash line", path.display())))?;
    if found != expected_hash {
        return Err(HarnessError::HashMismatch {
            path: path.display().to_string(),
            found,
            expected: expected_hash,
        });
    }
    Ok(rest.to_string())
}

/// JSON artifacts carry the hash as a wrapper field.
#[derive(Serialize, Deserialize)]
struct JsonArtifact<T> {
    config_hash: u32,
    payload: T,
}

fn write_json_artifact<T: Serialize>(path: &Path, config_hash: u32, payload: &T) -> Result<(), HarnessError> {
    let doc = JsonArtifact { config_hash, payload };
    std::fs::write(path, serde_json::to_string_pretty(&doc).expect("serializes"))?;
    Ok(())
}

fn read_json_artifact<T: for<'de> Deserialize<'de>>(
    path: &Path,
    expected_hash: u32,
) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| HarnessError::MissingArtifact(path.display().to_string()))?;
    let doc: JsonArtifact<T> = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    if doc.config_hash != expected_hash {
        return Err(HarnessError::HashMismatch {
            path: path.display().to_string(),
            found: doc.config_hash,
            expected: expected_hash,
        });
    }
    Ok(doc.payload)
}

// ---------------------------------------------------------------------------
// dataset artifact
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetArtifact {
    schema: FeatureSchema,
    x: Matrix<f64>,
    y: Vec<usize>,
    train_idx: Vec<usize>,
    valid_idx: Vec<usize>,
    dropped_rows: usize,
}

fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.pmd")
}

fn save_dataset(out: &Path, hash: u32, ds: &TabularDataset) -> Result<(), HarnessError> {
    let artifact = DatasetArtifact {
        schema: ds.schema.clone(),
        x: ds.x.clone(),
        y: ds.y.clone(),
        train_idx: ds.train_idx.clone(),
        valid_idx: ds.valid_idx.clone(),
        dropped_rows: ds.dropped_rows,
    };
    let payload = serde_json::to_vec(&artifact).expect("dataset serializes");
    write_artifact(&dataset_path(out), hash, "dataset", &payload)
}

fn load_dataset(out: &Path, hash: u32) -> Result<TabularDataset, HarnessError> {
    let payload = read_artifact(&dataset_path(out), "dataset", hash)?;
    let artifact: DatasetArtifact = serde_json::from_slice(&payload)
        .map_err(|e| HarnessError::Config(format!("dataset artifact: {e}")))?;
    Ok(TabularDataset {
        x: artifact.x,
        y: artifact.y,
        schema: artifact.schema,
        train_idx: artifact.train_idx,
        valid_idx: artifact.valid_idx,
        dropped_rows: artifact.dropped_rows,
    })
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows: usize,
    pub encoded_dim: usize,
    pub n_classes: usize,
    pub train_rows: usize,
    pub valid_rows: usize,
    pub dropped_rows: usize,
}

pub fn run_ingest(cfg: &RunConfig, out: &Path) -> Result<IngestSummary, HarnessError> {
    std::fs::create_dir_all(out)?;
    let spec_text = std::fs::read_to_string(&cfg.schema_json)
        .map_err(|e| HarnessError::Config(format!("cannot read schema {}: {e}", cfg.schema_json)))?;
    let spec = SchemaSpec::from_json(&spec_text)
        .map_err(|e| HarnessError::Config(format!("schema json: {e}")))?;
    let ds = load_csv(Path::new(&cfg.data_csv), &spec, cfg.seed)?;
    let hash = cfg.config_hash();
    save_dataset(out, hash, &ds)?;
    let summary = IngestSummary {
        rows: ds.n(),
        encoded_dim: ds.dim(),
        n_classes: ds.schema.n_classes(),
        train_rows: ds.train_idx.len(),
        valid_rows: ds.valid_idx.len(),
        dropped_rows: ds.dropped_rows,
    };
    write_json_artifact(&out.join("ingest.json"), hash, &summary)?;
    log::info!(
        "ingested {} rows ({} dropped), {} encoded features, {} classes",
        summary.rows,
        summary.dropped_rows,
        summary.encoded_dim,
        summary.n_classes
    );
    Ok(summary)
}

pub fn run_train_client(cfg: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    let hash = cfg.config_hash();
    let ds = load_dataset(out, hash)?;
    let model = train_client(&ds, &cfg.train_config())?;
    write_artifact(&out.join("privatizer.pmp"), hash, "privatizer", &encode_privatizer(&model.privatizer))?;
    let utility_json = serde_json::to_vec(&model.utility).expect("mlp serializes");
    write_artifact(&out.join("utility.pmu"), hash, "utility", &utility_json)?;
    write_csv_artifact(&out.join("history.csv"), hash, &model.history.to_csv())?;
    if let Some(last) = model.history.records.last() {
        log::info!("client trained: final lp {:.4}, lu {:.4}", last.lp, last.lu);
    }
    Ok(())
}

fn load_privatizer_artifact(out: &Path, hash: u32) -> Result<PrivatizerParams, HarnessError> {
    let payload = read_artifact(&out.join("privatizer.pmp"), "privatizer", hash)?;
    Ok(decode_privatizer(&payload)?)
}

fn rebuild_density(cfg: &RunConfig, ds: &TabularDataset) -> Result<DensityModel<f64>, HarnessError> {
    let train_x = ds.rows_of(&ds.train_idx);
    Ok(DensityModel::with_mode(train_x, cfg.bandwidth, cfg.alpha)
        .map_err(|e| HarnessError::Config(format!("density: {e}")))?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub report: PrivacyReport,
    pub valid_eps_mean: f64,
}

pub fn run_calibrate(cfg: &RunConfig, out: &Path) -> Result<CalibrationSummary, HarnessError> {
    let hash = cfg.config_hash();
    let ds = load_dataset(out, hash)?;
    let privatizer = load_privatizer_artifact(out, hash)?;
    let density = rebuild_density(cfg, &ds)?;
    let mut train_records = calibrate_samples(&privatizer, &density, &ds.x, &ds.train_idx);
    let valid_records = calibrate_samples(&privatizer, &density, &ds.x, &ds.valid_idx);
    let report = filter_release(&mut train_records, cfg.eps_target, cfg.lambda_adj);
    write_csv_artifact(&out.join("calibration_train.csv"), hash, &records_to_csv(&train_records))?;
    write_csv_artifact(&out.join("calibration_valid.csv"), hash, &records_to_csv(&valid_records))?;
    write_json_artifact(&out.join("privacy_report.json"), hash, &report)?;
    let finite: Vec<f64> =
        valid_records.iter().map(|r| r.eps_final).filter(|e| e.is_finite()).collect();
    let valid_eps_mean =
        if finite.is_empty() { f64::NAN } else { finite.iter().sum::<f64>() / finite.len() as f64 };
    log::info!(
        "calibrated {} train samples: {} released at eps_target {}, mean eps {:.4}",
        report.total_count,
        report.released_count,
        cfg.eps_target,
        report.eps_mean
    );
    Ok(CalibrationSummary { report, valid_eps_mean })
}

fn parse_calibration_csv(body: &str) -> Result<Vec<CalibrationRecord>, HarnessError> {
    let mut records = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if lineno == 0 {
            continue; // header
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(HarnessError::Config(format!("calibration csv line {lineno} malformed")));
        }
        let bad = |e: std::num::ParseFloatError| HarnessError::Config(format!("calibration csv: {e}"));
        records.push(CalibrationRecord {
            index: parts[0].parse().map_err(|_| HarnessError::Config("bad index".into()))?,
            eps_prime: parts[1].parse().map_err(bad)?,
            eps_final: parts[2].parse().map_err(bad)?,
            alpha: 0.0,
            fhat: parts[3].parse().map_err(bad)?,
            halfwidth: parts[4].parse().map_err(bad)?,
            released: parts[5] == "1",
            clamped: false,
            unprivatizable: false,
        });
    }
    Ok(records)
}

fn eps_label(eps: f64) -> String {
    format!("{eps:.4}")
}

pub fn bundle_path(out: &Path, eps_target: f64) -> PathBuf {
    out.join(format!("release_eps{}.plb", eps_label(eps_target)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReleaseSummary {
    pub eps_target: f64,
    pub released: usize,
    pub total: usize,
    pub empty: bool,
}

/// Build the wire bundle from the calibrated training samples whose final
/// epsilon clears the target. The released row indices are stored in a
/// separate client-side artifact; the bundle itself carries no indices, no
/// raw features, and no per-sample epsilon values.
pub fn run_release(cfg: &RunConfig, out: &Path, eps_target: f64) -> Result<ReleaseSummary, HarnessError> {
    let hash = cfg.config_hash();
    let ds = load_dataset(out, hash)?;
    let privatizer = load_privatizer_artifact(out, hash)?;
    let body = read_csv_artifact(&out.join("calibration_train.csv"), hash)?;
    let records = parse_calibration_csv(&body)?;
    let released: Vec<usize> = records
        .iter()
        .filter(|r| r.eps_final <= eps_target)
        .map(|r| r.index)
        .collect();
    if released.is_empty() {
        log::warn!("release at eps_target {eps_target}: no sample clears the target; writing an empty bundle");
    }
    let mut embeddings = Matrix::zeros(released.len(), ds.dim());
    let mut labels = Vec::with_capacity(released.len());
    for (row, &i) in released.iter().enumerate() {
        let sample = privatizer
            .privatize(ds.x.row(i))
            .map_err(|e| HarnessError::Config(format!("released sample {i} failed: {e}")))?;
        embeddings.row_mut(row).copy_from_slice(&sample.z);
        labels.push(ds.schema.label_classes[ds.y[i]].parse::<i64>().unwrap_or(ds.y[i] as i64));
    }
    let bundle = ReleaseBundle {
        eps_target,
        delta: cfg.alpha,
        lambda_adj: cfg.lambda_adj,
        schema_hash: fnv1a32(ds.schema.canonical_json().as_bytes()),
        embeddings,
        labels,
    };
    write_plb(&bundle_path(out, eps_target), &bundle)?;
    write_json_artifact(
        &out.join(format!("released_idx_eps{}.json", eps_label(eps_target))),
        hash,
        &released,
    )?;
    Ok(ReleaseSummary {
        eps_target,
        released: released.len(),
        total: records.len(),
        empty: released.is_empty(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerEvalArtifact {
    pub eps_target: f64,
    pub kind: ServerKind,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

pub fn run_train_server(
    cfg: &RunConfig,
    out: &Path,
    bundle_file: &Path,
    kind: ServerKind,
) -> Result<ServerEvalArtifact, HarnessError> {
    let hash = cfg.config_hash();
    let bundle = read_plb(bundle_file)?;
    let server_cfg = ServerConfig { kind, ..cfg.server.clone() };
    let (model, report) = serverside::train_server(&bundle, &server_cfg, cfg.seed)?;
    let label = format!("eps{}_{}", eps_label(bundle.eps_target), kind_tag(kind));
    std::fs::write(out.join(format!("server_model_{label}.pms")), serverside::encode_model(&model))?;
    let artifact = ServerEvalArtifact {
        eps_target: bundle.eps_target,
        kind,
        accuracy: report.accuracy,
        n_train: report.n_train,
        n_test: report.n_test,
    };
    write_json_artifact(&out.join(format!("server_eval_{label}.json")), hash, &artifact)?;
    log::info!("server {:?} at eps {}: accuracy {:.4}", kind, bundle.eps_target, report.accuracy);
    Ok(artifact)
}

fn kind_tag(kind: ServerKind) -> &'static str {
    match kind {
        ServerKind::Mlp => "mlp",
        ServerKind::Forest => "forest",
        ServerKind::Gbt => "gbt",
    }
}

/// Attack the release at the config's target: the adversary trains on the
/// validation split (public data disjoint from the client's training split)
/// and is evaluated against the released training rows.
pub fn run_attack(cfg: &RunConfig, out: &Path) -> Result<AttackReport, HarnessError> {
    let hash = cfg.config_hash();
    let ds = load_dataset(out, hash)?;
    let privatizer = load_privatizer_artifact(out, hash)?;
    let bundle = read_plb(&bundle_path(out, cfg.eps_target))?;
    let released: Vec<usize> = read_json_artifact(
        &out.join(format!("released_idx_eps{}.json", eps_label(cfg.eps_target))),
        hash,
    )?;
    let public = TabularDataset {
        x: ds.rows_of(&ds.valid_idx),
        y: ds.labels_of(&ds.valid_idx),
        schema: ds.schema.clone(),
        train_idx: (0..ds.valid_idx.len()).collect(),
        valid_idx: Vec::new(),
        dropped_rows: 0,
    };
    let decoder = train_attacker(&public, &privatizer, &cfg.attack, cfg.seed)?;
    let private_rows = ds.rows_of(&released);
    let report = leakage_metrics(&decoder, &private_rows, &ds.schema, &bundle)?;
    write_json_artifact(&out.join("attack_report.json"), hash, &report)?;
    log::info!(
        "attack: categorical accuracy {:.4}, mse {:.4}, correlation {:.4}",
        report.categorical_accuracy,
        report.mse,
        report.correlation
    );
    Ok(report)
}

/// Assemble the three report CSVs from a finished run directory. Refuses
/// artifacts whose config hash disagrees with the current config.
pub fn run_report(cfg: &RunConfig, out: &Path) -> Result<(), HarnessError> {
    let hash = cfg.config_hash();
    // epsilon histogram from the privacy report
    let report: PrivacyReport = read_json_artifact(&out.join("privacy_report.json"), hash)?;
    let mut hist = String::from("bin_lo,bin_hi,count\n");
    for (i, &count) in report.counts.iter().enumerate() {
        let lo = report.bin_edges.get(i).copied().unwrap_or(f64::NAN);
        let hi = report.bin_edges.get(i + 1).copied().unwrap_or(f64::INFINITY);
        hist.push_str(&format!("{lo:.17e},{hi:.17e},{count}\n"));
    }
    write_csv_artifact(&out.join("report_eps_hist.csv"), hash, &hist)?;
    // loss curve straight from the training history
    let history = read_csv_artifact(&out.join("history.csv"), hash)?;
    write_csv_artifact(&out.join("report_loss_curve.csv"), hash, &history)?;
    // accuracy vs epsilon across every server evaluation in the directory
    let mut rows: Vec<ServerEvalArtifact> = Vec::new();
    for entry in std::fs::read_dir(out)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with("server_eval_") && name.ends_with(".json") {
            rows.push(read_json_artifact(&entry.path(), hash)?);
        }
    }
    rows.sort_by(|a, b| {
        a.eps_target
            .partial_cmp(&b.eps_target)
            .expect("finite eps")
            .then_with(|| kind_tag(a.kind).cmp(kind_tag(b.kind)))
    });
    let mut acc = String::from("eps_target,server_kind,accuracy,n_train,n_test\n");
    for r in &rows {
        acc.push_str(&format!(
            "{:.17e},{},{:.17e},{},{}\n",
            r.eps_target,
            kind_tag(r.kind),
            r.accuracy,
            r.n_train,
            r.n_test
        ));
    }
    write_csv_artifact(&out.join("report_accuracy_vs_eps.csv"), hash, &acc)?;
    Ok(())
}

/// Timing summary for the `bench` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub kde_points_per_sec: f64,
    pub train_steps_per_sec: f64,
    pub n_refs: usize,
    pub dim: usize,
}

pub fn run_bench(cfg: &RunConfig, out: &Path) -> Result<BenchReport, HarnessError> {
    let hash = cfg.config_hash();
    let ds = load_dataset(out, hash)?;
    let density = rebuild_density(cfg, &ds)?;
    let probe_count = 200.min(ds.n());
    let start = std::time::Instant::now();
    for i in 0..probe_count {
        let _ = density
            .evaluate(ds.x.row(i))
            .map_err(|e| HarnessError::Config(format!("density: {e}")))?;
    }
    let kde_rate = probe_count as f64 / start.elapsed().as_secs_f64().max(1e-9);
    let mut bench_cfg = cfg.train_config();
    bench_cfg.steps = 5;
    let start = std::time::Instant::now();
    let _ = train_client(&ds, &bench_cfg)?;
    let train_rate = 5.0 / start.elapsed().as_secs_f64().max(1e-9);
    let report = BenchReport {
        kde_points_per_sec: kde_rate,
        train_steps_per_sec: train_rate,
        n_refs: density.n(),
        dim: density.dim(),
    };
    write_json_artifact(&out.join("bench.json"), hash, &report)?;
    Ok(report)
}

/// Summary of one full offline pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub ingest: IngestSummary,
    pub calibration: CalibrationSummary,
    pub release: ReleaseSummary,
    pub server_eval: ServerEvalArtifact,
    pub attack: AttackReport,
}

/// ingest -> train-client -> calibrate -> release -> train-server -> attack
/// -> report, all offline in `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineSummary, HarnessError> {
    let ingest = run_ingest(cfg, out)?;
    run_train_client(cfg, out)?;
    let calibration = run_calibrate(cfg, out)?;
    let release = run_release(cfg, out, cfg.eps_target)?;
    let server_eval =
        run_train_server(cfg, out, &bundle_path(out, cfg.eps_target), cfg.server.kind)?;
    let attack = run_attack(cfg, out)?;
    run_report(cfg, out)?;
    Ok(PipelineSummary { ingest, calibration, release, server_eval, attack })
}
