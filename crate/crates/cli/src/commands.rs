//! Command-line surface and the implementation of each subcommand.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use icu_analytics::{AlConfig, AnnotationStore, Task};
use icu_core::{CartKey, ClinicalFeed, Clock, PseudonymKey, StorageLayout, SystemClock};
use icu_edge::{CartConfig, Fault, LinkConfig};
use icu_metrics::{compute_study_metrics, write_metrics, MetricsConfig, Plugins};
use icu_server::config::ControlListen;
use icu_server::{HealthState, ServerConfig};
use icu_transport::{Broker, BrokerConfig, BrokerServer, Credentials};
use icu_vision::{run_depth_pipeline, run_face_pipeline, PipelineConfig};
use rand::RngCore as _;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use tracing::{info, warn};

use crate::acceptance::{self, Options, CRITERIA};
use crate::harness::{self, BacklogScenario, DeliveryScenario, Outage, Topology};
use crate::manifest::{file_digest, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{failed} of {total} acceptance criteria failed")]
    Acceptance { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Acceptance { .. } => 1,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "icu", version, about = "ICU sensing pipeline: carts, broker, server, batch jobs and acceptance suite")]
pub struct Cli {
    /// Log filter, e.g. `info` or `icu_server=debug`. Overrides RUST_LOG.
    #[arg(long, global = true)]
    pub log: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cart agent: run it, or inject a fault into a running one.
    #[command(subcommand)]
    Edge(EdgeCommand),
    /// Standalone TLS broker.
    Broker {
        #[arg(long)]
        config: PathBuf,
    },
    /// Ingest server with the HTTP API.
    Server {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate certificates and keys.
    #[command(subcommand)]
    Keygen(KeygenCommand),
    /// Batch candidate selection for annotation.
    Pipeline(PipelineArgs),
    /// Compute patient metrics into the metrics directory.
    Metrics(MetricsArgs),
    /// Annotation reports.
    Analytics(AnalyticsArgs),
    /// Fleet simulations on a simulated clock.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Server and carts in one process, in real time.
    Demo(DemoArgs),
    /// Run the acceptance criteria and print one line per criterion.
    Acceptance(AcceptanceArgs),
}

#[derive(Debug, Subcommand)]
pub enum EdgeCommand {
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Ask a running cart to apply a fault at its next loop iteration.
    Inject {
        #[arg(long)]
        state_dir: PathBuf,
        #[command(subcommand)]
        fault: FaultArg,
    },
}

#[derive(Debug, Clone, Subcommand)]
pub enum FaultArg {
    NetDown {
        #[arg(long)]
        duration_ms: u64,
    },
    Crash,
    ClockSkew {
        #[arg(long, allow_hyphen_values = true)]
        offset_ms: i64,
    },
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::NetDown { duration_ms } => Fault::NetDown { duration_ms },
            FaultArg::Crash => Fault::Crash,
            FaultArg::ClockSkew { offset_ms } => Fault::ClockSkew { offset_ms },
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum KeygenCommand {
    /// CA plus one certificate per identity.
    Pki {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long = "identity", required = true)]
        identities: Vec<String>,
    },
    /// Cart sealing key; optionally appended to a server keyring.
    Cart {
        #[arg(long)]
        cart_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        keyring: Option<PathBuf>,
    },
    /// Pseudonymization key for the server.
    Pseudonym {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Which {
    Face,
    Depth,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Server config; supplies the storage root and clinical feed.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub which: Which,
    /// Study to process; every study when omitted.
    #[arg(long)]
    pub study: Option<String>,
    #[arg(long, default_value = "candidates")]
    pub out: PathBuf,
    /// TOML overrides for the pipeline settings.
    #[arg(long)]
    pub pipeline_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub study: Option<String>,
    /// TOML overrides for the metric rules.
    #[arg(long)]
    pub metrics_config: Option<PathBuf>,
    /// Output directory; the server's metrics directory by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Report {
    Weekly,
    AlQueue,
}

#[derive(Debug, Args)]
pub struct AnalyticsArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub report: Report,
    /// Week start in epoch ms (weekly report).
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub week_start: i64,
    /// face or depth (al-queue report).
    #[arg(long, default_value = "face")]
    pub task: String,
    #[arg(long)]
    pub al_config: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    /// Zero-loss delivery under outages and a crash.
    Delivery(DeliveryArgs),
    /// Outbox depth and age under nominal connectivity.
    Backlog(BacklogArgs),
}

#[derive(Debug, Args)]
pub struct DeliveryArgs {
    #[arg(long, default_value_t = 6)]
    pub carts: usize,
    #[arg(long, default_value_t = 300)]
    pub seconds: u64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Outages as `start_s:duration_s`, repeatable. Default: three.
    #[arg(long = "outage", value_parser = parse_outage)]
    pub outages: Vec<Outage>,
    #[arg(long)]
    pub no_crash: bool,
    /// fsync every durable write.
    #[arg(long)]
    pub sync: bool,
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
}

fn parse_outage(s: &str) -> Result<Outage, String> {
    let (a, b) = s.split_once(':').ok_or("expected start_s:duration_s")?;
    Ok(Outage { start_s: a.parse().map_err(|e| format!("{e}"))?, duration_s: b.parse().map_err(|e| format!("{e}"))? })
}

impl DeliveryArgs {
    fn scenario(&self) -> DeliveryScenario {
        let mut sc = DeliveryScenario { carts: self.carts, seconds: self.seconds, seed: self.seed, sync: self.sync, ..Default::default() };
        if !self.outages.is_empty() {
            sc.outages = self.outages.clone();
        }
        if self.no_crash {
            sc.crash = None;
        } else if let Some(c) = sc.crash.as_mut() {
            c.cart = c.cart.min(self.carts.saturating_sub(1));
            c.at_s = c.at_s.min(self.seconds / 2);
        }
        sc
    }
}

#[derive(Debug, Args)]
pub struct BacklogArgs {
    #[arg(long, default_value_t = 1)]
    pub carts: usize,
    #[arg(long, default_value_t = 180)]
    pub seconds: u64,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Pace the simulated clock with the wall clock.
    #[arg(long)]
    pub realtime: bool,
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
}

impl BacklogArgs {
    fn scenario(&self) -> BacklogScenario {
        BacklogScenario { carts: self.carts, seconds: self.seconds, seed: self.seed, realtime: self.realtime, ..Default::default() }
    }
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Directory for keys, configs and data.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value_t = 6)]
    pub carts: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub http_bind: SocketAddr,
    /// Stop after this long; run until interrupted when omitted.
    #[arg(long)]
    pub seconds: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AcceptanceArgs {
    /// Comma-separated criterion numbers; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<u8>,
    /// Keep scenario data here instead of a temporary directory.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    /// Run the backlog criterion against the wall clock (3 min).
    #[arg(long)]
    pub realtime: bool,
    /// One JSON object per criterion instead of text lines.
    #[arg(long)]
    pub json: bool,
}

/// Set on SIGINT or SIGTERM.
pub fn shutdown_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    std::thread::spawn(move || {
        let rt = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                warn!(error = %e, "no signal handling");
                return;
            }
        };
        rt.block_on(async {
            #[cfg(unix)]
            {
                use tokio::signal::unix::{signal, SignalKind};
                match signal(SignalKind::terminate()) {
                    Ok(mut term) => {
                        tokio::select! {
                            _ = tokio::signal::ctrl_c() => {}
                            _ = term.recv() => {}
                        }
                    }
                    Err(_) => {
                        let _ = tokio::signal::ctrl_c().await;
                    }
                }
            }
            #[cfg(not(unix))]
            let _ = tokio::signal::ctrl_c().await;
        });
        info!("shutdown requested");
        f.store(true, Ordering::SeqCst);
    });
    flag
}

fn load_toml_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))
        }
    }
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("report serializes"));
}

fn load_server_config(path: &Path) -> Result<ServerConfig, CliError> {
    let cfg = ServerConfig::load(path).map_err(config_err)?;
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

/// The clinical feed, or `None` with a warning when it is absent.
fn load_feed(cfg: &ServerConfig) -> Result<Option<ClinicalFeed>, CliError> {
    if !cfg.feed_file.exists() {
        warn!(path = %cfg.feed_file.display(), "no clinical feed");
        return Ok(None);
    }
    let key = PseudonymKey::load(&cfg.pseudonym_key_file).map_err(config_err)?;
    ClinicalFeed::load(&cfg.feed_file, &key).map(Some).map_err(config_err)
}

fn studies(layout: &StorageLayout, only: Option<&String>) -> Result<Vec<String>, CliError> {
    match only {
        Some(s) => Ok(vec![s.clone()]),
        None => layout.studies().map_err(runtime_err),
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Edge(EdgeCommand::Run { config }) => edge_run(&config),
        Command::Edge(EdgeCommand::Inject { state_dir, fault }) => {
            let fault: Fault = fault.into();
            icu_edge::inject_fault(&state_dir, &fault).map_err(runtime_err)?;
            info!(?fault, state_dir = %state_dir.display(), "fault injected");
            Ok(())
        }
        Command::Broker { config } => broker(&config),
        Command::Server { config } => server(&config),
        Command::Keygen(k) => keygen(k),
        Command::Pipeline(a) => pipeline(&a),
        Command::Metrics(a) => metrics(&a),
        Command::Analytics(a) => analytics(&a),
        Command::Sim(SimCommand::Delivery(a)) => with_work_dir(a.work_dir.as_deref(), |dir| {
            let sc = a.scenario();
            let manifest = RunManifest::begin("sim delivery", &sc, Some(sc.seed));
            let r = harness::run_delivery(dir, &sc).map_err(runtime_err)?;
            print_json(&r);
            finish_manifest(manifest, dir);
            Ok(())
        }),
        Command::Sim(SimCommand::Backlog(a)) => with_work_dir(a.work_dir.as_deref(), |dir| {
            let sc = a.scenario();
            let manifest = RunManifest::begin("sim backlog", &sc, Some(sc.seed));
            let r = harness::run_backlog(dir, &sc).map_err(runtime_err)?;
            print_json(&r);
            finish_manifest(manifest, dir);
            Ok(())
        }),
        Command::Demo(a) => demo(&a),
        Command::Acceptance(a) => acceptance_cmd(&a),
    }
}

fn finish_manifest(m: RunManifest, dir: &Path) {
    match m.finish(dir) {
        Ok(p) => info!(manifest = %p.display(), "run manifest written"),
        Err(e) => warn!(error = %e, "run manifest not written"),
    }
}

fn with_work_dir(dir: Option<&Path>, f: impl FnOnce(&Path) -> Result<(), CliError>) -> Result<(), CliError> {
    match dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(runtime_err)?;
            f(d)
        }
        None => {
            let t = tempfile::tempdir().map_err(runtime_err)?;
            f(t.path())
        }
    }
}

fn edge_run(path: &Path) -> Result<(), CliError> {
    let cfg = CartConfig::load(path).map_err(config_err)?;
    cfg.validate().map_err(config_err)?;
    let manifest = RunManifest::begin("edge run", &cfg, Some(cfg.seed));
    info!(run_id = %manifest.run_id, config_digest = %manifest.config_digest, cart = %cfg.cart_id, "starting cart");
    icu_edge::runner::run(cfg, shutdown_flag()).map_err(|e| if e.is_config() { config_err(e) } else { runtime_err(e) })
}

fn server(path: &Path) -> Result<(), CliError> {
    let cfg = load_server_config(path)?;
    let manifest = RunManifest::begin("server", &cfg, None);
    info!(run_id = %manifest.run_id, config_digest = %manifest.config_digest, "starting server");
    icu_server::runner::run(&cfg, Arc::new(SystemClock), shutdown_flag())
        .map_err(|e| if e.is_config() { config_err(e) } else { runtime_err(e) })
}

/// Standalone broker configuration (TOML).
///
/// ```toml
/// bind = "127.0.0.1:5671"
/// state_dir = "broker"
/// credentials_dir = "pki"
/// identity = "broker"          # default
/// ack_timeout_ms = 10000       # default
/// sync = true                  # default
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerFile {
    pub bind: SocketAddr,
    pub state_dir: PathBuf,
    pub credentials_dir: PathBuf,
    #[serde(default = "default_broker_identity")]
    pub identity: String,
    #[serde(default = "default_ack_timeout")]
    pub ack_timeout_ms: i64,
    #[serde(default = "default_compact")]
    pub compact_after: usize,
    #[serde(default = "default_true")]
    pub sync: bool,
}

fn default_broker_identity() -> String {
    "broker".into()
}
fn default_ack_timeout() -> i64 {
    BrokerConfig::default().ack_timeout_ms
}
fn default_compact() -> usize {
    BrokerConfig::default().compact_after
}
fn default_true() -> bool {
    true
}

impl BrokerFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.state_dir, &mut cfg.credentials_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.ack_timeout_ms <= 0 {
            return Err(config_err("invalid field `ack_timeout_ms`: must be positive"));
        }
        if cfg.compact_after == 0 {
            return Err(config_err("invalid field `compact_after`: must be positive"));
        }
        if cfg.identity.is_empty() {
            return Err(config_err("invalid field `identity`: must not be empty"));
        }
        Ok(cfg)
    }
}

fn broker(path: &Path) -> Result<(), CliError> {
    let cfg = BrokerFile::load(path)?;
    let manifest = RunManifest::begin("broker", &cfg, None);
    let creds = Credentials::load(&cfg.credentials_dir, &cfg.identity).map_err(config_err)?;
    let bcfg = BrokerConfig { ack_timeout_ms: cfg.ack_timeout_ms, compact_after: cfg.compact_after, sync: cfg.sync };
    let broker = Broker::open(&cfg.state_dir, bcfg, Arc::new(SystemClock)).map_err(runtime_err)?;
    let server = BrokerServer::start(cfg.bind, broker, &creds).map_err(runtime_err)?;
    info!(run_id = %manifest.run_id, addr = %server.local_addr(), "broker listening");
    let stop = shutdown_flag();
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    server.shutdown();
    info!("broker stopped");
    Ok(())
}

fn random_key() -> [u8; 32] {
    let mut k = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut k);
    k
}

fn write_new(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(runtime_err)?;
    }
    if path.exists() {
        return Err(config_err(format!("{} exists; refusing to overwrite a key", path.display())));
    }
    std::fs::write(path, text).map_err(runtime_err)
}

fn keygen(k: KeygenCommand) -> Result<(), CliError> {
    match k {
        KeygenCommand::Pki { dir, identities } => {
            let ids: Vec<&str> = identities.iter().map(String::as_str).collect();
            icu_transport::tls::generate(&dir, &ids).map_err(runtime_err)?;
            info!(dir = %dir.display(), ?identities, "certificates written");
        }
        KeygenCommand::Cart { cart_id, out, keyring } => {
            let line = CartKey::new(&cart_id, random_key()).to_line();
            write_new(&out, &format!("{line}\n"))?;
            if let Some(ring) = keyring {
                use std::io::Write as _;
                let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&ring).map_err(runtime_err)?;
                writeln!(f, "{line}").map_err(runtime_err)?;
            }
            info!(cart_id, out = %out.display(), "cart key written");
        }
        KeygenCommand::Pseudonym { out } => {
            let key = PseudonymKey::new(random_key().to_vec()).map_err(runtime_err)?;
            write_new(&out, &format!("{}\n", key.to_hex()))?;
            info!(out = %out.display(), "pseudonym key written");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PipelineRun<'a> {
    which: Which,
    studies: &'a [String],
    pipeline: &'a PipelineConfig,
    pain: Vec<(String, Vec<i64>)>,
}

fn pipeline(a: &PipelineArgs) -> Result<(), CliError> {
    let cfg = load_server_config(&a.config)?;
    let pcfg: PipelineConfig = load_toml_or_default(a.pipeline_config.as_deref())?;
    let layout = StorageLayout::new(&cfg.data_dir);
    let studies = studies(&layout, a.study.as_ref())?;
    let feed = match a.which {
        Which::Face => load_feed(&cfg)?,
        Which::Depth => None,
    };
    let pain: Vec<(String, Vec<i64>)> =
        studies.iter().map(|s| (s.clone(), feed.as_ref().map(|f| f.pain_of(s)).unwrap_or_default())).collect();
    let mut manifest = RunManifest::begin("pipeline", &PipelineRun { which: a.which, studies: &studies, pipeline: &pcfg, pain: pain.clone() }, None);
    for (study, pain_ts) in &pain {
        let report = match a.which {
            Which::Face => run_face_pipeline(&layout, study, pain_ts, &pcfg, &pcfg.face, &a.out),
            Which::Depth => run_depth_pipeline(&layout, study, &pcfg, &pcfg.person, &a.out),
        }
        .map_err(runtime_err)?;
        let listing = report.output_dir.join(icu_vision::pipeline::MANIFEST_FILE);
        if let Ok(d) = file_digest(&listing) {
            manifest.output(format!("{}/{}", report.pipeline, study), d);
        }
        print_json(&report);
    }
    finish_manifest(manifest, &a.out);
    Ok(())
}

#[derive(Serialize)]
struct MetricsRun<'a> {
    studies: &'a [String],
    rules: &'a MetricsConfig,
    feed_digest: Option<String>,
}

#[derive(Serialize)]
struct MetricsSummary<'a> {
    study_id: &'a str,
    points: usize,
    depth_frames: usize,
    count_gaps: usize,
    noise_samples: usize,
    light_samples: usize,
    undecodable: usize,
    digest: &'a str,
    path: PathBuf,
}

fn metrics(a: &MetricsArgs) -> Result<(), CliError> {
    let cfg = load_server_config(&a.config)?;
    let mcfg: MetricsConfig = load_toml_or_default(a.metrics_config.as_deref())?;
    mcfg.validate().map_err(config_err)?;
    let layout = StorageLayout::new(&cfg.data_dir);
    let studies = studies(&layout, a.study.as_ref())?;
    let feed = load_feed(&cfg)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.metrics_dir.clone());
    let feed_digest = feed.is_some().then(|| file_digest(&cfg.feed_file).ok()).flatten();
    let mut manifest = RunManifest::begin("metrics", &MetricsRun { studies: &studies, rules: &mcfg, feed_digest }, None);
    let plugins = Plugins::default();
    for study in &studies {
        let r = compute_study_metrics(&layout, study, feed.as_ref(), &plugins, &mcfg).map_err(runtime_err)?;
        let path = write_metrics(&out, study, &r.points).map_err(runtime_err)?;
        manifest.output(study.clone(), r.digest.clone());
        print_json(&MetricsSummary {
            study_id: study,
            points: r.points.len(),
            depth_frames: r.depth_frames,
            count_gaps: r.count_gaps,
            noise_samples: r.noise_samples,
            light_samples: r.light_samples,
            undecodable: r.undecodable,
            digest: &r.digest,
            path,
        });
    }
    finish_manifest(manifest, &out);
    Ok(())
}

fn analytics(a: &AnalyticsArgs) -> Result<(), CliError> {
    let cfg = load_server_config(&a.config)?;
    let store = AnnotationStore::open(&cfg.annotations_dir).map_err(runtime_err)?;
    let body = match a.report {
        Report::Weekly => {
            let anns = store.load_au().map_err(runtime_err)?;
            serde_json::to_string_pretty(&icu_analytics::weekly_summary(&anns, a.week_start))
        }
        Report::AlQueue => {
            let task: Task = a.task.parse().map_err(|e| config_err(format!("invalid field `task`: {e}")))?;
            let al: AlConfig = load_toml_or_default(a.al_config.as_deref())?;
            match task {
                Task::Face => {
                    let q = icu_analytics::face_queue(&store.load_au().map_err(runtime_err)?, &store.load_au_predictions().map_err(runtime_err)?, &al);
                    serde_json::to_string_pretty(&q)
                }
                Task::Depth => {
                    let q = icu_analytics::depth_queue(
                        &store.load_box().map_err(runtime_err)?,
                        &store.load_box_predictions().map_err(runtime_err)?,
                        &Default::default(),
                        &al,
                    );
                    serde_json::to_string_pretty(&q)
                }
            }
        }
    }
    .map_err(runtime_err)?;
    match &a.out {
        Some(p) => std::fs::write(p, body + "\n").map_err(runtime_err),
        None => {
            println!("{body}");
            Ok(())
        }
    }
}

fn write_toml<T: Serialize>(path: &Path, v: &T) {
    match toml::to_string(v) {
        Ok(text) => {
            if let Some(d) = path.parent() {
                let _ = std::fs::create_dir_all(d);
            }
            if let Err(e) = std::fs::write(path, text) {
                warn!(path = %path.display(), error = %e, "config not written");
            }
        }
        Err(e) => warn!(path = %path.display(), error = %e, "config not serializable"),
    }
}

#[derive(Serialize)]
struct DemoCart {
    cart_id: String,
    state: HealthState,
    sensors: usize,
}

fn demo(a: &DemoArgs) -> Result<(), CliError> {
    if a.carts == 0 {
        return Err(config_err("invalid field `carts`: must be at least 1"));
    }
    std::fs::create_dir_all(&a.dir).map_err(runtime_err)?;
    let now = SystemClock.now_ms();
    let mut topo = Topology::prepare(&a.dir, a.carts, a.seed, false, now).map_err(runtime_err)?;
    topo.server.http_bind = a.http_bind;
    topo.server.control = Some(ControlListen {
        bind: "127.0.0.1:0".parse().expect("literal address"),
        credentials_dir: topo.server.broker.credentials_dir.clone(),
        identity: "server".into(),
    });
    write_toml(&a.dir.join("server.toml"), &topo.server);
    let manifest = RunManifest::begin("demo", &topo.server, Some(a.seed));
    let server = icu_server::start(&topo.server, Arc::new(SystemClock)).map_err(|e| if e.is_config() { config_err(e) } else { runtime_err(e) })?;
    let broker_addr = server.broker_addr.ok_or_else(|| runtime_err("embedded broker has no address"))?;
    let control_addr = server.control_addr.ok_or_else(|| runtime_err("control listener has no address"))?;
    info!(run_id = %manifest.run_id, http = %server.http_addr, broker = %broker_addr, "demo server up");

    let stop = shutdown_flag();
    let carts_stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();
    for c in &topo.carts {
        let key_file = a.dir.join("keys").join(format!("{}.key", c.cart_id));
        write_toml_key(&key_file, &c.key)?;
        let link = |addr, id: &str| LinkConfig { addr, server_identity: id.into(), credentials_dir: Some(topo.server.broker.credentials_dir.clone()) };
        let cfg = CartConfig {
            cart_id: c.cart_id.clone(),
            room_id: c.room_id.clone(),
            state_dir: c.state_dir.clone(),
            key_file,
            codec: "deflate".into(),
            autostart: true,
            seed: c.seed,
            broker: Some(link(broker_addr, "broker")),
            control: Some(link(control_addr, "server")),
            sensors: harness::cart_sensors(c.seed),
        };
        write_toml(&a.dir.join("carts").join(format!("{}.toml", c.cart_id)), &cfg);
        let s = carts_stop.clone();
        let id = c.cart_id.clone();
        threads.push(std::thread::spawn(move || {
            if let Err(e) = icu_edge::runner::run(cfg, s) {
                tracing::error!(cart = %id, error = %e, "cart stopped");
            }
        }));
    }

    let deadline = Instant::now() + Duration::from_secs(60);
    let ids: Vec<String> = topo.carts.iter().map(|c| c.cart_id.clone()).collect();
    let all_live = || ids.iter().all(|id| server.health.cart(id).is_some_and(|h| h.state == HealthState::Live && h.sensors.len() == 6));
    while !all_live() && Instant::now() < deadline && !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(200));
    }
    let live = all_live();
    for id in &ids {
        if let Some(h) = server.health.cart(id) {
            print_json(&DemoCart { cart_id: id.clone(), state: h.state, sensors: h.sensors.len() });
        }
    }
    if live {
        info!(carts = ids.len(), http = %server.http_addr, "all carts live");
        let until = a.seconds.map(|s| Instant::now() + Duration::from_secs(s));
        while !stop.load(Ordering::SeqCst) && until.map_or(true, |u| Instant::now() < u) {
            std::thread::sleep(Duration::from_millis(200));
        }
    }
    carts_stop.store(true, Ordering::SeqCst);
    for t in threads {
        let _ = t.join();
    }
    server.shutdown();
    finish_manifest(manifest, &a.dir);
    if live {
        Ok(())
    } else {
        Err(runtime_err("not every cart reached live health within 60 s"))
    }
}

fn write_toml_key(path: &Path, key: &CartKey) -> Result<(), CliError> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(runtime_err)?;
    }
    std::fs::write(path, key.to_line() + "\n").map_err(runtime_err)
}

fn acceptance_cmd(a: &AcceptanceArgs) -> Result<(), CliError> {
    if let Some(bad) = a.only.iter().find(|id| !CRITERIA.iter().any(|c| c.0 == **id)) {
        return Err(config_err(format!("invalid field `only`: no criterion {bad}")));
    }
    let mut opts = Options { work_dir: a.work_dir.clone(), ..Default::default() };
    opts.backlog.realtime = a.realtime;
    let results = acceptance::run_all(&a.only, &opts, |r| {
        if a.json {
            print_json(r);
        } else {
            println!("{}", r.line());
        }
    });
    let failed = results.iter().filter(|r| !r.passed).count();
    if !a.json {
        println!("{} passed, {} failed", results.len() - failed, failed);
    }
    if failed > 0 {
        Err(CliError::Acceptance { failed, total: results.len() })
    } else {
        Ok(())
    }
}
