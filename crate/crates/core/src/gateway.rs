//! Software gateway: samples a meter's TIC output, publishes telemetry on
//! `acc/<house>/telemetry`, executes commands from `acc/<house>/control`
//! and reconnects with exponential backoff after broker loss.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::watch;

use crate::clock::{sleep_until, SharedClock, Timestamp};
use crate::mqtt::{control_topic, telemetry_topic, ClientOptions, MqttClient, MqttError, Publish, STATUS_TOPIC};
use crate::sim::{SimError, SimulatedHouse};
use crate::tic::{extract_reading, parse_frame, serialize_frame, FrameStream, MeterReading, TicMode, ETX, STX};

/// Consecutive TIC failures after which a status message is raised.
pub const TIC_FAILURE_THRESHOLD: u64 = 5;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("payload does not match the schema: {0}")]
    SchemaError(String),
    #[error("invalid gateway configuration: {0}")]
    Config(&'static str),
}

/// One telemetry message. The JSON field names are fixed:
/// `{"house","ts","seq","east_wh","eait_wh","sinsts_va","sinsti_va","tariff"}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TelemetryPoint {
    #[serde(rename = "house")]
    pub house_id: String,
    pub ts: Timestamp,
    pub seq: u64,
    pub east_wh: u64,
    pub eait_wh: u64,
    pub sinsts_va: u64,
    pub sinsti_va: u64,
    pub tariff: String,
}

impl TelemetryPoint {
    pub fn from_reading(house_id: &str, ts: Timestamp, seq: u64, r: &MeterReading) -> Self {
        TelemetryPoint {
            house_id: house_id.to_string(),
            ts,
            seq,
            east_wh: r.energy_consumed_wh,
            eait_wh: r.energy_injected_wh,
            sinsts_va: r.apparent_power_va,
            sinsti_va: r.injected_apparent_power_va,
            tariff: r.tariff_label.clone(),
        }
    }
}

pub fn encode_telemetry(p: &TelemetryPoint) -> Vec<u8> {
    serde_json::to_vec(p).expect("telemetry always serializes")
}

/// Unknown fields are ignored; missing or mistyped ones are a schema error.
pub fn decode_telemetry(bytes: &[u8]) -> Result<TelemetryPoint, GatewayError> {
    serde_json::from_slice(bytes).map_err(|e| GatewayError::SchemaError(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    On,
    Off,
    SetPower,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub device: String,
    pub action: ControlAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_w: Option<u32>,
}

impl ControlCommand {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.device.is_empty() {
            return Err(GatewayError::SchemaError("device must not be empty".into()));
        }
        if self.action == ControlAction::SetPower && self.value_w.is_none() {
            return Err(GatewayError::SchemaError("set_power requires value_w".into()));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("control command always serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, GatewayError> {
        let cmd: ControlCommand =
            serde_json::from_slice(bytes).map_err(|e| GatewayError::SchemaError(e.to_string()))?;
        cmd.validate()?;
        Ok(cmd)
    }

    /// Device draw after the command: `None` = rated power.
    fn target_watts(&self) -> Option<u32> {
        match self.action {
            ControlAction::On => None,
            ControlAction::Off => Some(0),
            ControlAction::SetPower => self.value_w,
        }
    }
}

/// Where a gateway reads TIC bytes from.
pub trait TicSource: Send {
    /// Raw bytes of the freshest complete frame at simulated time `now`.
    fn latest_frame(&mut self, now: Timestamp) -> Option<Vec<u8>>;

    fn apply_control(&mut self, cmd: &ControlCommand) -> Result<(), String> {
        let _ = cmd;
        Err("source has no controllable devices".into())
    }
}

/// A simulated house meter. The house is shared so the caller can read its
/// registers and day+1 history after the run.
pub struct SimulatedMeter {
    house: Arc<Mutex<SimulatedHouse>>,
    mode: TicMode,
}

impl SimulatedMeter {
    pub fn new(house: SimulatedHouse, mode: TicMode) -> Self {
        SimulatedMeter {
            house: Arc::new(Mutex::new(house)),
            mode,
        }
    }

    pub fn handle(&self) -> Arc<Mutex<SimulatedHouse>> {
        self.house.clone()
    }
}

impl TicSource for SimulatedMeter {
    fn latest_frame(&mut self, now: Timestamp) -> Option<Vec<u8>> {
        let mut house = self.house.lock().ok()?;
        house.advance_to(now);
        serialize_frame(&house.frame(self.mode)).ok()
    }

    fn apply_control(&mut self, cmd: &ControlCommand) -> Result<(), String> {
        let mut house = self.house.lock().map_err(|_| "house lock poisoned".to_string())?;
        house
            .set_device(&cmd.device, cmd.target_watts())
            .map_err(|e: SimError| e.to_string())
    }
}

/// Frames replayed from a capture, one per tick, in order.
pub struct RecordedFrames {
    frames: Vec<Vec<u8>>,
    next: usize,
}

impl RecordedFrames {
    /// Splits a capture into `STX..ETX` chunks without validating them.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut frames = Vec::new();
        let mut rest = bytes;
        while let Some(start) = rest.iter().position(|b| *b == STX) {
            let Some(len) = rest[start..].iter().position(|b| *b == ETX) else {
                break;
            };
            frames.push(rest[start..=start + len].to_vec());
            rest = &rest[start + len + 1..];
        }
        RecordedFrames { frames, next: 0 }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

impl TicSource for RecordedFrames {
    fn latest_frame(&mut self, _now: Timestamp) -> Option<Vec<u8>> {
        let f = self.frames.get(self.next).cloned();
        self.next += 1;
        f
    }
}

fn default_refresh() -> u32 {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub house_id: String,
    pub broker_addr: String,
    #[serde(default = "default_refresh")]
    pub refresh_period_s: u32,
    #[serde(default)]
    pub tic_mode: TicMode,
    /// Static bearer token sent as the CONNECT username.
    #[serde(default)]
    pub credentials: String,
}

impl GatewayConfig {
    pub fn new(house_id: impl Into<String>, broker_addr: impl Into<String>) -> Self {
        GatewayConfig {
            house_id: house_id.into(),
            broker_addr: broker_addr.into(),
            refresh_period_s: default_refresh(),
            tic_mode: TicMode::Standard,
            credentials: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.refresh_period_s < 1 {
            return Err(GatewayError::Config("refresh_period_s must be >= 1"));
        }
        if self.house_id.is_empty() {
            return Err(GatewayError::Config("house_id must not be empty"));
        }
        Ok(())
    }
}

/// Reconnection delays: `initial`, doubling up to `max`.
#[derive(Debug, Clone, Copy)]
pub struct BackoffPolicy {
    pub initial: Duration,
    pub max: Duration,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        BackoffPolicy {
            initial: Duration::from_secs(1),
            max: Duration::from_secs(60),
        }
    }
}

impl BackoffPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.min(31)).unwrap_or(u32::MAX);
        self.initial.saturating_mul(factor).min(self.max)
    }
}

#[derive(Clone)]
pub struct GatewayRuntime {
    pub clock: SharedClock,
    pub backoff: BackoffPolicy,
    /// First tick; defaults to the next multiple of the refresh period.
    pub first_tick: Option<Timestamp>,
    /// Last tick to publish, inclusive.
    pub end: Option<Timestamp>,
    pub keep_alive_s: u16,
}

impl GatewayRuntime {
    pub fn new(clock: SharedClock) -> Self {
        GatewayRuntime {
            clock,
            backoff: BackoffPolicy::default(),
            first_tick: None,
            end: None,
            keep_alive_s: 30,
        }
    }
}

#[derive(Debug, Default)]
pub struct GatewayStats {
    pub ticks: AtomicU64,
    pub published: AtomicU64,
    pub skipped_frames: AtomicU64,
    pub missed_ticks: AtomicU64,
    pub reconnects: AtomicU64,
    pub status_messages: AtomicU64,
    pub controls_applied: AtomicU64,
    pub control_errors: AtomicU64,
    pub last_seq: AtomicU64,
}

impl GatewayStats {
    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

fn bump(counter: &AtomicU64) {
    counter.fetch_add(1, Ordering::Relaxed);
}

#[derive(Serialize)]
struct StatusMessage<'a> {
    house: &'a str,
    ts: Timestamp,
    kind: &'static str,
    consecutive: u64,
    skipped_total: u64,
}

struct Gateway {
    config: GatewayConfig,
    source: Box<dyn TicSource>,
    stats: Arc<GatewayStats>,
    seq: u64,
    consecutive_failures: u64,
}

impl Gateway {
    fn read_tick(&mut self, t: Timestamp) -> Option<TelemetryPoint> {
        let mode = self.config.tic_mode;
        let reading = self.source.latest_frame(t).ok_or(()).and_then(|raw| {
            let (frame, _) = parse_frame(&raw, mode).map_err(|_| ())?;
            extract_reading(&frame).map_err(|_| ())
        });
        match reading {
            Ok(r) => {
                self.consecutive_failures = 0;
                Some(TelemetryPoint::from_reading(&self.config.house_id, t, self.seq, &r))
            }
            Err(()) => {
                bump(&self.stats.skipped_frames);
                self.consecutive_failures += 1;
                None
            }
        }
    }

    async fn tick(&mut self, t: Timestamp, conn: &mut Option<MqttClient>) -> bool {
        self.seq += 1;
        bump(&self.stats.ticks);
        self.stats.last_seq.store(self.seq, Ordering::Relaxed);
        let point = self.read_tick(t);
        let Some(client) = conn.as_ref() else {
            bump(&self.stats.missed_ticks);
            return true;
        };
        let result = match point {
            Some(p) => client
                .publish(&telemetry_topic(&self.config.house_id), encode_telemetry(&p))
                .await
                .map(|_| bump(&self.stats.published)),
            None if self.consecutive_failures == TIC_FAILURE_THRESHOLD + 1 => {
                bump(&self.stats.status_messages);
                let msg = StatusMessage {
                    house: &self.config.house_id,
                    ts: t,
                    kind: "tic_failure",
                    consecutive: self.consecutive_failures,
                    skipped_total: GatewayStats::get(&self.stats.skipped_frames),
                };
                client
                    .publish(STATUS_TOPIC, serde_json::to_vec(&msg).unwrap_or_default())
                    .await
            }
            None => Ok(()),
        };
        if result.is_err() {
            bump(&self.stats.missed_ticks);
            *conn = None;
            return false;
        }
        true
    }

    fn handle_control(&mut self, p: Publish) {
        match ControlCommand::decode(&p.payload)
            .map_err(|e| e.to_string())
            .and_then(|cmd| self.source.apply_control(&cmd))
        {
            Ok(()) => bump(&self.stats.controls_applied),
            Err(e) => {
                tracing::warn!(house = %self.config.house_id, "control rejected: {e}");
                bump(&self.stats.control_errors);
            }
        }
    }

    async fn connect(&mut self, keep_alive_s: u16) -> Result<MqttClient, MqttError> {
        let mut opts = ClientOptions::new(&self.config.broker_addr, format!("gw-{}", self.config.house_id));
        opts.keep_alive_s = keep_alive_s;
        opts.username = (!self.config.credentials.is_empty()).then(|| self.config.credentials.clone());
        let mut client = MqttClient::connect(&opts).await?;
        client.subscribe(&[&control_topic(&self.config.house_id)]).await?;
        Ok(client)
    }
}

async fn recv_control(conn: &mut Option<MqttClient>) -> Option<Publish> {
    match conn {
        Some(c) => c.recv().await,
        None => std::future::pending().await,
    }
}

enum Event {
    Shutdown,
    Tick,
    Control(Option<Publish>),
    Retry,
}

/// Runs until `shutdown` flips, or after the tick at `runtime.end`.
pub async fn run_gateway(
    config: GatewayConfig,
    source: Box<dyn TicSource>,
    runtime: GatewayRuntime,
    stats: Arc<GatewayStats>,
    mut shutdown: watch::Receiver<bool>,
) -> Result<(), GatewayError> {
    config.validate()?;
    let refresh = i64::from(config.refresh_period_s);
    let clock = runtime.clock.clone();
    let mut next_tick = runtime
        .first_tick
        .unwrap_or_else(|| (clock.now().div_euclid(refresh) + 1) * refresh);
    let mut gw = Gateway {
        config,
        source,
        stats,
        seq: 0,
        consecutive_failures: 0,
    };
    let mut conn: Option<MqttClient> = None;
    let mut attempt: u32 = 0;
    let mut ever_connected = false;
    let mut retry_at = tokio::time::Instant::now();

    loop {
        if runtime.end.is_some_and(|end| next_tick > end) {
            break;
        }
        if conn.is_none() && tokio::time::Instant::now() >= retry_at {
            match gw.connect(runtime.keep_alive_s).await {
                Ok(c) => {
                    if ever_connected {
                        bump(&gw.stats.reconnects);
                    }
                    ever_connected = true;
                    attempt = 0;
                    conn = Some(c);
                }
                Err(e) => {
                    tracing::debug!(house = %gw.config.house_id, "broker unreachable: {e}");
                    retry_at = tokio::time::Instant::now() + runtime.backoff.delay(attempt);
                    attempt = attempt.saturating_add(1);
                }
            }
        }
        let disconnected = conn.is_none();
        let event = tokio::select! {
            biased;
            _ = shutdown.changed() => Event::Shutdown,
            _ = sleep_until(&*clock, next_tick) => Event::Tick,
            msg = recv_control(&mut conn) => Event::Control(msg),
            _ = tokio::time::sleep_until(retry_at), if disconnected => Event::Retry,
        };
        match event {
            Event::Shutdown => break,
            Event::Tick => {
                if !gw.tick(next_tick, &mut conn).await {
                    retry_at = tokio::time::Instant::now() + runtime.backoff.delay(attempt);
                    attempt = attempt.saturating_add(1);
                }
                next_tick += refresh;
            }
            Event::Control(Some(p)) => gw.handle_control(p),
            Event::Control(None) => {
                conn = None;
                retry_at = tokio::time::Instant::now() + runtime.backoff.delay(attempt);
                attempt = attempt.saturating_add(1);
            }
            Event::Retry => {}
        }
    }
    if let Some(c) = conn {
        c.disconnect().await;
    }
    Ok(())
}

/// Parses every frame of a capture; used by tooling that inspects
/// recordings before replay.
pub fn decode_capture(bytes: &[u8], mode: TicMode) -> Vec<Result<MeterReading, String>> {
    let mut stream = FrameStream::new();
    stream.push(bytes);
    std::iter::from_fn(|| stream.next_frame(mode))
        .map(|r| {
            r.map_err(|e| e.to_string())
                .and_then(|f| extract_reading(&f).map_err(|e| e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point() -> TelemetryPoint {
        TelemetryPoint {
            house_id: "h1".into(),
            ts: 1_735_689_600,
            seq: 42,
            east_wh: 12_345,
            eait_wh: 678,
            sinsts_va: 750,
            sinsti_va: 0,
            tariff: "HP".into(),
        }
    }

    #[test]
    fn telemetry_json_layout_is_fixed() {
        let s = String::from_utf8(encode_telemetry(&point())).unwrap();
        assert_eq!(
            s,
            r#"{"house":"h1","ts":1735689600,"seq":42,"east_wh":12345,"eait_wh":678,"sinsts_va":750,"sinsti_va":0,"tariff":"HP"}"#
        );
        assert_eq!(decode_telemetry(s.as_bytes()).unwrap(), point());
    }

    #[test]
    fn telemetry_missing_ts_is_schema_error() {
        let s = r#"{"house":"h1","seq":42,"east_wh":1,"eait_wh":0,"sinsts_va":0,"sinsti_va":0,"tariff":"HP"}"#;
        assert!(matches!(
            decode_telemetry(s.as_bytes()),
            Err(GatewayError::SchemaError(_))
        ));
    }

    #[test]
    fn telemetry_extra_field_ignored() {
        let s = r#"{"house":"h1","ts":1735689600,"seq":42,"east_wh":12345,"eait_wh":678,"sinsts_va":750,"sinsti_va":0,"tariff":"HP","debug":true}"#;
        assert_eq!(decode_telemetry(s.as_bytes()).unwrap(), point());
    }

    #[test]
    fn control_json() {
        let c = ControlCommand::decode(br#"{"device":"heater","action":"on"}"#).unwrap();
        assert_eq!(c.action, ControlAction::On);
        assert_eq!(c.encode(), br#"{"device":"heater","action":"on"}"#.to_vec());
        assert!(ControlCommand::decode(br#"{"device":"heater","action":"set_power"}"#).is_err());
        let c = ControlCommand::decode(br#"{"device":"ev","action":"set_power","value_w":1200}"#).unwrap();
        assert_eq!(c.value_w, Some(1200));
        assert!(ControlCommand::decode(br#"{"device":"heater","action":"explode"}"#).is_err());
    }

    #[test]
    fn backoff_doubles_to_cap() {
        let b = BackoffPolicy::default();
        let secs: Vec<u64> = (0..9).map(|a| b.delay(a).as_secs()).collect();
        assert_eq!(secs, vec![1, 2, 4, 8, 16, 32, 60, 60, 60]);
        assert_eq!(b.delay(500).as_secs(), 60);
    }

    #[test]
    fn recorded_frames_split_capture() {
        let raw = [b"noise".as_slice(), &[STX, b'a', ETX], &[STX, b'b', ETX], &[STX, b'c']].concat();
        let mut r = RecordedFrames::from_bytes(&raw);
        assert_eq!(r.len(), 2);
        assert_eq!(r.latest_frame(0), Some(vec![STX, b'a', ETX]));
        assert_eq!(r.latest_frame(0), Some(vec![STX, b'b', ETX]));
        assert_eq!(r.latest_frame(0), None);
    }

    #[test]
    fn zero_refresh_rejected() {
        let mut c = GatewayConfig::new("h1", "127.0.0.1:1");
        c.refresh_period_s = 0;
        assert!(c.validate().is_err());
    }
}
