//! `powermech`: command-line pipeline for Lipschitz-private embedding
//! release. Subcommands wire ingest -> train-client -> calibrate -> release
//! -> send/serve -> train-server -> attack -> report over a run directory;
//! every heavy operation lives in the `powermech` library.
//!
//! Log level comes from `POWERMECH_LOG` (error, info, or debug).

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use powermech::harness::{self, HarnessError, RunConfig};
use powermech::protocol;
use powermech::serverside::ServerKind;

#[derive(Parser)]
#[command(name = "powermech", version, about = "single-round private embedding release")]
struct Cli {
    /// Path to the run-config JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's release target.
    #[arg(long, global = true)]
    eps_target: Option<f64>,
    /// Override the config's confidence failure probability.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Cap the worker thread count (0 keeps the library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Mlp,
    Forest,
    Gbt,
}

impl From<KindArg> for ServerKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Mlp => ServerKind::Mlp,
            KindArg::Forest => ServerKind::Forest,
            KindArg::Gbt => ServerKind::Gbt,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load, encode, and split the configured CSV into the run directory.
    Ingest,
    /// Train the privatizer and utility networks.
    TrainClient,
    /// Compute per-sample epsilon records and the privacy report.
    Calibrate,
    /// Write the release bundle (`.plb`) at the configured target.
    Release,
    /// Send a release bundle to a listening server.
    Send {
        /// `host:port` of the server.
        #[arg(long)]
        connect: String,
        /// Bundle file; defaults to the run directory's bundle at the
        /// configured target.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Ack timeout in seconds.
        #[arg(long, default_value_t = 30)]
        timeout: u64,
    },
    /// Receive one bundle and store it in the run directory.
    Serve {
        /// `host:port` to listen on.
        #[arg(long)]
        listen: String,
        #[arg(long, default_value_t = 30)]
        timeout: u64,
    },
    /// Train a downstream model on a release bundle.
    TrainServer {
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Server model kind; defaults to the config's choice.
        #[arg(long)]
        kind: Option<KindArg>,
    },
    /// Train the reconstruction adversary and measure leakage.
    Attack,
    /// Assemble the report CSVs from a finished run directory.
    Report,
    /// Time KDE evaluation and client training throughput.
    Bench,
    /// Run the whole offline pipeline end to end.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                HarnessError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            RunConfig::from_json(&text)?
        }
        None => return Err(HarnessError::Config("--config is required".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(eps) = cli.eps_target {
        cfg.eps_target = eps;
    }
    if let Some(alpha) = cli.alpha {
        cfg.alpha = alpha;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    }
    let out: &Path = &cli.out;
    match &cli.command {
        Command::Ingest => {
            let cfg = load_config(cli)?;
            let summary = harness::run_ingest(&cfg, out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::TrainClient => {
            let cfg = load_config(cli)?;
            harness::run_train_client(&cfg, out)?;
            println!("client trained; history at {}", out.join("history.csv").display());
        }
        Command::Calibrate => {
            let cfg = load_config(cli)?;
            let summary = harness::run_calibrate(&cfg, out)?;
            println!(
                "calibrated {} samples: {} released at eps_target {} (delta = alpha = {})",
                summary.report.total_count,
                summary.report.released_count,
                summary.report.eps_target,
                summary.report.alpha
            );
        }
        Command::Release => {
            let cfg = load_config(cli)?;
            let summary = harness::run_release(&cfg, out, cfg.eps_target)?;
            if summary.empty {
                println!(
                    "warning: no sample cleared eps_target {}; wrote an empty bundle",
                    summary.eps_target
                );
            } else {
                println!(
                    "released {}/{} samples at eps_target {}",
                    summary.released, summary.total, summary.eps_target
                );
            }
        }
        Command::Send { connect, bundle, timeout } => {
            let cfg = load_config(cli)?;
            let path = bundle.clone().unwrap_or_else(|| harness::bundle_path(out, cfg.eps_target));
            let bundle = protocol::read_plb(&path)?;
            protocol::send_bundle(connect, &bundle, Duration::from_secs(*timeout))?;
            println!("bundle acknowledged by {connect}");
        }
        Command::Serve { listen, timeout } => {
            std::fs::create_dir_all(out)?;
            let listener = TcpListener::bind(listen).map_err(HarnessError::Io)?;
            println!("listening on {listen}");
            let bundle = protocol::serve_once(&listener, Duration::from_secs(*timeout))?;
            let path = out.join("received.plb");
            protocol::write_plb(&path, &bundle)?;
            println!("received {} embeddings ({} dims) -> {}", bundle.n(), bundle.dim(), path.display());
        }
        Command::TrainServer { bundle, kind } => {
            let cfg = load_config(cli)?;
            let path = bundle.clone().unwrap_or_else(|| harness::bundle_path(out, cfg.eps_target));
            let kind = kind.map(ServerKind::from).unwrap_or(cfg.server.kind);
            let eval = harness::run_train_server(&cfg, out, &path, kind)?;
            println!("{}", serde_json::to_string_pretty(&eval).expect("eval serializes"));
        }
        Command::Attack => {
            let cfg = load_config(cli)?;
            let report = harness::run_attack(&cfg, out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Report => {
            let cfg = load_config(cli)?;
            harness::run_report(&cfg, out)?;
            println!(
                "wrote report_eps_hist.csv, report_loss_curve.csv, report_accuracy_vs_eps.csv in {}",
                out.display()
            );
        }
        Command::Bench => {
            let cfg = load_config(cli)?;
            let report = harness::run_bench(&cfg, out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Pipeline => {
            let cfg = load_config(cli)?;
            let summary = harness::run_pipeline(&cfg, out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("POWERMECH_LOG", "error"),
    )
    .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
