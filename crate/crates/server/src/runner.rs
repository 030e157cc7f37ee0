//! Process wiring: storage, broker consumers, clinical feed reload, control
//! listener and the HTTP API.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime};

use icu_analytics::{AlConfig, AnnotationStore};
use icu_core::{Clock, ClinicalFeed, Keyring, Modality, PseudonymKey};
use icu_transport::{Broker, BrokerConfig, BrokerServer, Credentials, DeliverySource, Endpoint, RoutingKey, TcpConsumer};
use tracing::{error, info, warn};

use crate::api::{router, ApiState};
use crate::config::{BrokerMode, ConfigError, ServerConfig};
use crate::control::{ControlHub, ControlServer};
use crate::health::HealthRegistry;
use crate::ingest::{consume, ConsumeStats, Ingestor};
use crate::preview::PreviewHub;
use crate::store::RecordStore;

const RECONNECT_DELAY: Duration = Duration::from_secs(1);

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("pseudonym key: {0}")]
    Pseudonym(#[from] icu_core::PseudonymError),
    #[error("keyring {path}: {message}")]
    Keyring { path: String, message: String },
    #[error(transparent)]
    Feed(#[from] icu_core::FeedError),
    #[error("credentials: {0}")]
    Tls(#[from] icu_transport::TlsError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Annotations(#[from] icu_analytics::StoreError),
    #[error(transparent)]
    Broker(#[from] icu_transport::BrokerError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl ServerError {
    /// Errors caused by the operator's inputs rather than the runtime.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ServerError::Config(_)
                | ServerError::Pseudonym(_)
                | ServerError::Keyring { .. }
                | ServerError::Feed(_)
                | ServerError::Tls(_)
        )
    }
}

pub fn load_keyring(path: &Path) -> Result<Keyring, ServerError> {
    let err = |message: String| ServerError::Keyring {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    Keyring::parse(&text).map_err(|e| err(e.to_string()))
}

/// A missing feed file is not fatal: records are quarantined until it shows up.
fn load_feed(path: &Path, key: &PseudonymKey) -> Result<ClinicalFeed, ServerError> {
    if !path.exists() {
        warn!(path = %path.display(), "clinical feed missing; no sessions known yet");
        return Ok(ClinicalFeed::default());
    }
    Ok(ClinicalFeed::load(path, key)?)
}

fn mtime(path: &Path) -> Option<SystemTime> {
    std::fs::metadata(path).and_then(|m| m.modified()).ok()
}

/// A running server. Dropping it stops everything.
pub struct ServerHandle {
    pub http_addr: SocketAddr,
    pub broker_addr: Option<SocketAddr>,
    pub control_addr: Option<SocketAddr>,
    pub ingestor: Arc<Ingestor>,
    pub health: Arc<HealthRegistry>,
    pub control: Arc<ControlHub>,
    pub preview: Arc<PreviewHub>,
    /// Set only for an embedded broker.
    pub broker: Option<Arc<Broker>>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    broker_server: Option<BrokerServer>,
    control_server: Option<ControlServer>,
    runtime: Option<tokio::runtime::Runtime>,
    http_stop: Option<tokio::sync::oneshot::Sender<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(tx) = self.http_stop.take() {
            let _ = tx.send(());
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(c) = self.control_server.take() {
            c.shutdown();
        }
        if let Some(b) = self.broker_server.take() {
            b.shutdown();
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(1));
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

type SourceFactory = Arc<dyn Fn(&str) -> Result<Box<dyn DeliverySource>, String> + Send + Sync>;

fn spawn_consumer(queue: String, factory: SourceFactory, ingestor: Arc<Ingestor>, stop: Arc<AtomicBool>) -> JoinHandle<()> {
    thread::Builder::new()
        .name(format!("consume-{queue}"))
        .spawn(move || {
            let mut stats = ConsumeStats::default();
            while !stop.load(Ordering::SeqCst) {
                match factory(&queue) {
                    Ok(mut src) => {
                        if let Err(e) = consume(src.as_mut(), &ingestor, &stop, &mut stats) {
                            warn!(%queue, error = %e, "consumer lost; reconnecting");
                        }
                    }
                    Err(e) => warn!(%queue, error = %e, "cannot subscribe; retrying"),
                }
                let mut waited = Duration::ZERO;
                while waited < RECONNECT_DELAY && !stop.load(Ordering::SeqCst) {
                    thread::sleep(Duration::from_millis(50));
                    waited += Duration::from_millis(50);
                }
            }
        })
        .expect("spawn consumer thread")
}

fn spawn_feed_watch(
    path: std::path::PathBuf,
    key: PseudonymKey,
    period: Duration,
    ingestor: Arc<Ingestor>,
    stop: Arc<AtomicBool>,
    mut seen: Option<SystemTime>,
) -> JoinHandle<()> {
    thread::Builder::new()
        .name("feed-watch".into())
        .spawn(move || {
            let mut waited = Duration::ZERO;
            while !stop.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(50));
                waited += Duration::from_millis(50);
                if waited < period {
                    continue;
                }
                waited = Duration::ZERO;
                let now = mtime(&path);
                if now.is_none() || now == seen {
                    continue;
                }
                match ClinicalFeed::load(&path, &key) {
                    Ok(feed) => {
                        info!(sessions = feed.sessions.len(), "clinical feed reloaded");
                        ingestor.set_sessions(&feed.sessions);
                        seen = now;
                    }
                    Err(e) => error!(error = %e, "clinical feed reload failed; keeping previous sessions"),
                }
            }
        })
        .expect("spawn feed watcher")
}

/// Starts every component described by `cfg`.
pub fn start(cfg: &ServerConfig, clock: Arc<dyn Clock>) -> Result<ServerHandle, ServerError> {
    cfg.validate()?;
    let pkey = PseudonymKey::load(&cfg.pseudonym_key_file)?;
    let keys = load_keyring(&cfg.keyring_file)?;
    let feed_seen = mtime(&cfg.feed_file);
    let feed = load_feed(&cfg.feed_file, &pkey)?;

    let store = Arc::new(RecordStore::open(&cfg.data_dir, cfg.sync)?);
    let health = Arc::new(HealthRegistry::new(clock.clone()));
    for c in &cfg.carts {
        health.register_cart(c);
    }
    let preview = Arc::new(PreviewHub::new());
    let ingestor = Arc::new(
        Ingestor::new(store, keys, &feed.sessions)
            .with_health(health.clone())
            .with_preview(preview.clone()),
    );
    let control = Arc::new(ControlHub::new(health.clone()));
    let annotations = Arc::new(AnnotationStore::open(&cfg.annotations_dir)?);
    std::fs::create_dir_all(&cfg.metrics_dir)?;

    let stop = Arc::new(AtomicBool::new(false));
    let b = &cfg.broker;
    let (factory, broker, broker_server, broker_addr): (SourceFactory, _, _, _) = match b.mode {
        BrokerMode::Embedded => {
            let state_dir = b.state_dir.as_ref().expect("validated");
            let broker = Broker::open(
                state_dir,
                BrokerConfig {
                    sync: cfg.sync,
                    ..BrokerConfig::default()
                },
                clock.clone(),
            )?;
            let creds = Credentials::load(&b.credentials_dir, &b.broker_identity)?;
            let server = BrokerServer::start(b.addr, broker.clone(), &creds)?;
            let addr = server.local_addr();
            let prefetch = b.prefetch as usize;
            let local = broker.clone();
            let f: SourceFactory = Arc::new(move |q: &str| {
                local
                    .consume(q, prefetch)
                    .map(|c| Box::new(c) as Box<dyn DeliverySource>)
                    .map_err(|e| e.to_string())
            });
            (f, Some(broker), Some(server), Some(addr))
        }
        BrokerMode::Remote => {
            let creds = Credentials::load(&b.credentials_dir, &b.identity)?;
            let endpoint = Endpoint::new(b.addr, b.broker_identity.clone(), creds)?;
            let prefetch = b.prefetch;
            let f: SourceFactory = Arc::new(move |q: &str| {
                TcpConsumer::subscribe(&endpoint, q, prefetch)
                    .map(|c| Box::new(c) as Box<dyn DeliverySource>)
                    .map_err(|e| e.to_string())
            });
            (f, None, None, Some(b.addr))
        }
    };

    let mut threads = Vec::new();
    for cart in &cfg.carts {
        for m in Modality::ALL {
            let q = RoutingKey::new(cart, m).expect("cart ids validated");
            threads.push(spawn_consumer(q.as_str().to_owned(), factory.clone(), ingestor.clone(), stop.clone()));
        }
    }
    threads.push(spawn_feed_watch(
        cfg.feed_file.clone(),
        pkey,
        Duration::from_millis(cfg.feed_reload_ms),
        ingestor.clone(),
        stop.clone(),
        feed_seen,
    ));

    let control_server = match &cfg.control {
        Some(c) => {
            let creds = Credentials::load(&c.credentials_dir, &c.identity)?;
            Some(ControlServer::start(c.bind, &creds, control.clone(), health.clone())?)
        }
        None => None,
    };
    let control_addr = control_server.as_ref().map(|c| c.local_addr());

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .thread_name("http")
        .build()?;
    let listener = std::net::TcpListener::bind(cfg.http_bind)?;
    listener.set_nonblocking(true)?;
    let http_addr = listener.local_addr()?;
    let app = router(ApiState {
        health: health.clone(),
        control: control.clone(),
        preview: preview.clone(),
        metrics_dir: cfg.metrics_dir.clone(),
        annotations,
        al: AlConfig::default(),
        preview_poll: Duration::from_millis(500),
    });
    let (http_stop, rx) = tokio::sync::oneshot::channel::<()>();
    runtime.spawn(async move {
        let listener = match tokio::net::TcpListener::from_std(listener) {
            Ok(l) => l,
            Err(e) => {
                error!(error = %e, "http listener");
                return;
            }
        };
        let served = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = rx.await;
        });
        if let Err(e) = served.await {
            error!(error = %e, "http server failed");
        }
    });
    info!(%http_addr, ?broker_addr, ?control_addr, carts = cfg.carts.len(), "server started");

    Ok(ServerHandle {
        http_addr,
        broker_addr,
        control_addr,
        ingestor,
        health,
        control,
        preview,
        broker,
        stop,
        threads,
        broker_server,
        control_server,
        runtime: Some(runtime),
        http_stop: Some(http_stop),
    })
}

/// Runs until `shutdown` is set.
pub fn run(cfg: &ServerConfig, clock: Arc<dyn Clock>, shutdown: Arc<AtomicBool>) -> Result<(), ServerError> {
    let handle = start(cfg, clock)?;
    while !shutdown.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(100));
    }
    info!("server shutting down");
    handle.shutdown();
    Ok(())
}
