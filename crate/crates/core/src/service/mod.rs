//! Operation backend: ingests telemetry from the bus into the store,
//! supervises gateways, dispatches alerts and serves the HTTP API.

pub mod alerts;
pub mod api;
pub mod config;
pub mod supervisor;
pub mod views;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;
use tokio::sync::{broadcast, watch};
use tokio::task::JoinHandle;

use crate::analytics::AnalyticsError;
use crate::clock::{sleep_until, SharedClock, Timestamp};
use crate::gateway::{decode_telemetry, BackoffPolicy, ControlCommand};
use crate::mqtt::{control_topic, house_of_topic, ClientOptions, MqttClient, Publish, Publisher, TELEMETRY_FILTER};
use crate::store::{Store, StoreError, StoreOptions};

pub use alerts::{
    AlertChannel, AlertDispatcher, AlertKind, AlertMessage, AlertRequest, AlertSink, DeliveryRecord, DeliveryStatus,
    FileSink, WebhookSink,
};
pub use config::{HouseEntry, ServiceConfig, SinkConfig};
pub use supervisor::{GatewayState, GatewayStatus, Supervisor, Transition};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("unknown house {0}")]
    UnknownHouse(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("gateway of house {0} is down")]
    GatewayDown(String),
    #[error("not connected to the broker")]
    BrokerUnavailable,
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

#[derive(Debug, Default)]
pub struct IngestStats {
    pub received: AtomicU64,
    pub stored: AtomicU64,
    pub malformed: AtomicU64,
    pub rejected: AtomicU64,
    pub connected: AtomicBool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IngestSnapshot {
    pub received: u64,
    pub stored: u64,
    pub malformed: u64,
    pub rejected: u64,
    pub connected: bool,
}

impl IngestStats {
    pub fn snapshot(&self) -> IngestSnapshot {
        IngestSnapshot {
            received: self.received.load(Ordering::Relaxed),
            stored: self.stored.load(Ordering::Relaxed),
            malformed: self.malformed.load(Ordering::Relaxed),
            rejected: self.rejected.load(Ordering::Relaxed),
            connected: self.connected.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceEvent {
    Telemetry {
        house: String,
        ts: Timestamp,
    },
    Status,
    /// Ends open event streams so graceful shutdown can finish.
    Shutdown,
}

pub struct ServiceState {
    pub config: ServiceConfig,
    pub store: Arc<Store>,
    pub clock: SharedClock,
    pub supervisor: Mutex<Supervisor>,
    pub alerts: AlertDispatcher,
    pub stats: IngestStats,
    pub events: broadcast::Sender<ServiceEvent>,
    publisher: RwLock<Option<Publisher>>,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

impl ServiceState {
    pub fn new(config: ServiceConfig, store: Arc<Store>, clock: SharedClock) -> Result<Self, ServiceError> {
        config.validate()?;
        let houses: Vec<String> = config.houses.iter().map(|h| h.house_id.clone()).collect();
        let sinks: Vec<Arc<dyn AlertSink>> = config
            .alert_sinks
            .iter()
            .map(|s| -> Arc<dyn AlertSink> {
                match s {
                    SinkConfig::File { path } => Arc::new(FileSink::new(path)),
                    SinkConfig::Webhook { url } => Arc::new(WebhookSink::new(url)),
                }
            })
            .collect();
        let alerts = AlertDispatcher::new(
            sinks,
            clock.clone(),
            houses.clone(),
            Duration::from_millis(config.alert_retry_delay_ms),
        );
        let supervisor = Supervisor::new(houses, config.refresh_period_s, config.stale_factor, config.down_factor);
        Ok(ServiceState {
            config,
            store,
            clock,
            supervisor: Mutex::new(supervisor),
            alerts,
            stats: IngestStats::default(),
            events: broadcast::channel(1024).0,
            publisher: RwLock::new(None),
        })
    }

    /// Handles one message from `acc/+/telemetry`. Never fails: bad input
    /// only moves counters.
    pub fn ingest(self: &Arc<Self>, msg: &Publish) {
        bump(&self.stats.received);
        let point = match decode_telemetry(&msg.payload) {
            Ok(p) if house_of_topic(&msg.topic) == Some(p.house_id.as_str()) => p,
            _ => {
                bump(&self.stats.malformed);
                return;
            }
        };
        let (house, ts, seq) = (point.house_id.clone(), point.ts, point.seq);
        match self.store.append(point) {
            Ok(()) => {
                bump(&self.stats.stored);
                self.supervisor
                    .lock()
                    .expect("supervisor poisoned")
                    .observe(&house, self.clock.now(), seq);
                let _ = self.events.send(ServiceEvent::Telemetry { house, ts });
            }
            Err(StoreError::InvalidHouse(_)) => bump(&self.stats.malformed),
            Err(e @ StoreError::MonotonicityViolation { .. }) => {
                bump(&self.stats.rejected);
                tracing::warn!("{e}");
                self.raise_fault(house, format!("energy register rolled back at {ts}; point rejected"));
            }
            Err(e) => {
                bump(&self.stats.rejected);
                tracing::debug!("telemetry rejected: {e}");
            }
        }
    }

    fn raise_fault(self: &Arc<Self>, house: String, body: String) {
        if !self.alerts.knows_house(&house) {
            return;
        }
        let req = AlertRequest {
            channel: AlertChannel::Notification,
            house,
            kind: AlertKind::SystemFault,
            body,
        };
        let state = self.clone();
        tokio::spawn(async move {
            state.alerts.dispatch(req).await;
        });
    }

    /// One supervision pass: reclassifies every gateway and sends one
    /// SystemFault alert per degradation.
    pub async fn supervise(&self, now: Timestamp) -> Vec<Transition> {
        let transitions = self.supervisor.lock().expect("supervisor poisoned").tick(now);
        for t in &transitions {
            let req = AlertRequest {
                channel: AlertChannel::Notification,
                house: t.house_id.clone(),
                kind: AlertKind::SystemFault,
                body: format!(
                    "gateway {} went from {} to {}",
                    t.house_id,
                    t.from.as_str(),
                    t.to.as_str()
                ),
            };
            self.alerts.dispatch(req).await;
        }
        let _ = self.events.send(ServiceEvent::Status);
        transitions
    }

    /// Publishes a control command for a house whose gateway is not Down.
    pub async fn send_control(&self, house: &str, cmd: &ControlCommand) -> Result<String, ServiceError> {
        self.config
            .house(house)
            .ok_or_else(|| ServiceError::UnknownHouse(house.into()))?;
        let state = self
            .supervisor
            .lock()
            .expect("supervisor poisoned")
            .status(house)
            .map_or(GatewayState::Down, |s| s.state);
        if state == GatewayState::Down {
            return Err(ServiceError::GatewayDown(house.into()));
        }
        let publisher = self.publisher.read().expect("publisher poisoned").clone();
        let publisher = publisher.ok_or(ServiceError::BrokerUnavailable)?;
        let topic = control_topic(house);
        publisher
            .publish(&topic, cmd.encode())
            .await
            .map_err(|_| ServiceError::BrokerUnavailable)?;
        Ok(topic)
    }

    fn set_publisher(&self, p: Option<Publisher>) {
        self.stats.connected.store(p.is_some(), Ordering::Relaxed);
        *self.publisher.write().expect("publisher poisoned") = p;
    }
}

async fn connect_bus(state: &ServiceState) -> Result<MqttClient, crate::mqtt::MqttError> {
    let mut opts = ClientOptions::new(&state.config.broker_addr, "acc-service");
    opts.username = state.config.broker_token.clone();
    let mut client = MqttClient::connect(&opts).await?;
    client.subscribe(&[TELEMETRY_FILTER]).await?;
    Ok(client)
}

/// Subscribes to every gateway's telemetry and feeds the store. Reconnects
/// with backoff when the broker is unreachable or the connection drops.
pub async fn ingest_loop(state: Arc<ServiceState>, backoff: BackoffPolicy, mut shutdown: watch::Receiver<bool>) {
    let mut attempt = 0u32;
    loop {
        if *shutdown.borrow() {
            return;
        }
        let mut client = match connect_bus(&state).await {
            Ok(c) => c,
            Err(e) => {
                let delay = backoff.delay(attempt);
                attempt = attempt.saturating_add(1);
                tracing::warn!(broker = %state.config.broker_addr, "broker unreachable ({e}); retrying in {delay:?}");
                tokio::select! {
                    _ = tokio::time::sleep(delay) => continue,
                    _ = shutdown.changed() => return,
                }
            }
        };
        tracing::info!(broker = %state.config.broker_addr, "subscribed to {TELEMETRY_FILTER}");
        attempt = 0;
        state.set_publisher(Some(client.publisher()));
        loop {
            tokio::select! {
                _ = shutdown.changed() => {
                    state.set_publisher(None);
                    client.disconnect().await;
                    return;
                }
                msg = client.recv() => match msg {
                    Some(p) => state.ingest(&p),
                    None => break,
                }
            }
        }
        state.set_publisher(None);
        tracing::warn!("lost broker connection");
    }
}

/// Runs [`ServiceState::supervise`] every supervision interval of
/// simulated time.
pub async fn supervision_loop(state: Arc<ServiceState>, mut shutdown: watch::Receiver<bool>) {
    let period = i64::from(state.config.supervision_interval_s());
    let mut next = state.clock.now() + period;
    loop {
        tokio::select! {
            _ = shutdown.changed() => return,
            _ = sleep_until(&*state.clock, next) => {}
        }
        state.supervise(next).await;
        next += period;
    }
}

pub struct ServiceHandle {
    pub addr: SocketAddr,
    pub state: Arc<ServiceState>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub async fn shutdown(self) {
        let _ = self.state.events.send(ServiceEvent::Shutdown);
        let _ = self.shutdown.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }

    pub fn shutdown_signal(&self) -> watch::Receiver<bool> {
        self.shutdown.subscribe()
    }
}

/// Opens the store, binds the API and starts ingest and supervision.
pub async fn start(config: ServiceConfig, clock: SharedClock) -> Result<ServiceHandle, ServiceError> {
    start_with(config, clock, StoreOptions::default(), BackoffPolicy::default()).await
}

pub async fn start_with(
    mut config: ServiceConfig,
    clock: SharedClock,
    store_options: StoreOptions,
    backoff: BackoffPolicy,
) -> Result<ServiceHandle, ServiceError> {
    config.validate()?;
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: config.listen.clone(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| ServiceError::Bind {
        addr: config.listen.clone(),
        source,
    })?;
    let store = Arc::new(Store::open_with(&config.store_dir, store_options)?);
    // houses already archived are served even when not configured
    for h in store.houses() {
        if config.house(&h).is_none() {
            config.houses.push(HouseEntry::new(h));
        }
    }
    let state = Arc::new(ServiceState::new(config, store, clock)?);
    let (tx, rx) = watch::channel(false);
    let tasks = vec![
        tokio::spawn(ingest_loop(state.clone(), backoff, rx.clone())),
        tokio::spawn(supervision_loop(state.clone(), rx.clone())),
        tokio::spawn(api::serve(listener, state.clone(), rx)),
    ];
    Ok(ServiceHandle {
        addr,
        state,
        shutdown: tx,
        tasks,
    })
}
