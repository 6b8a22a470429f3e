use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat};
use futures::future::BoxFuture;
use serde::{Deserialize, Serialize};
use tokio::io::AsyncWriteExt;

use crate::clock::{SharedClock, Timestamp};

pub const ALL_HOUSES: &str = "all";
pub const DELIVERY_RETRIES: u32 = 3;
const LOG_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertChannel {
    Email,
    Sms,
    Notification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertKind {
    ShiftConsumption,
    ReduceConsumption,
    SystemFault,
}

/// Body of `POST /api/alerts`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertRequest {
    pub channel: AlertChannel,
    /// A house id or `"all"`.
    pub house: String,
    pub kind: AlertKind,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertMessage {
    pub id: u64,
    pub channel: AlertChannel,
    pub house: String,
    pub kind: AlertKind,
    pub body: String,
    pub created_at: Timestamp,
    #[serde(default)]
    pub delivered_at: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryStatus {
    Delivered,
    Failed,
}

/// Outcome of delivering one alert to one house through one sink.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub alert_id: u64,
    pub house: String,
    pub channel: AlertChannel,
    pub kind: AlertKind,
    pub body: String,
    pub sink: String,
    pub attempts: u32,
    pub status: DeliveryStatus,
    pub created_at: Timestamp,
    pub delivered_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn iso8601(t: Timestamp) -> String {
    DateTime::from_timestamp(t, 0)
        .map(|d| d.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| t.to_string())
}

#[derive(Serialize)]
struct Delivery<'a> {
    id: u64,
    house: &'a str,
    channel: AlertChannel,
    kind: AlertKind,
    body: &'a str,
    created_at: String,
    delivered_at: String,
}

pub trait AlertSink: Send + Sync {
    fn name(&self) -> &str;
    fn deliver<'a>(
        &'a self,
        alert: &'a AlertMessage,
        house: &'a str,
        at: Timestamp,
    ) -> BoxFuture<'a, Result<(), String>>;
}

/// Appends one line per delivery: ISO-8601 time, a space, then JSON.
pub struct FileSink {
    path: PathBuf,
    lock: tokio::sync::Mutex<()>,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileSink {
            path: path.into(),
            lock: tokio::sync::Mutex::new(()),
        }
    }
}

impl AlertSink for FileSink {
    fn name(&self) -> &str {
        "file"
    }

    fn deliver<'a>(
        &'a self,
        alert: &'a AlertMessage,
        house: &'a str,
        at: Timestamp,
    ) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let d = Delivery {
                id: alert.id,
                house,
                channel: alert.channel,
                kind: alert.kind,
                body: &alert.body,
                created_at: iso8601(alert.created_at),
                delivered_at: iso8601(at),
            };
            let line = format!(
                "{} {}\n",
                iso8601(at),
                serde_json::to_string(&d).map_err(|e| e.to_string())?
            );
            let _guard = self.lock.lock().await;
            let mut f = tokio::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .await
                .map_err(|e| format!("{}: {e}", self.path.display()))?;
            f.write_all(line.as_bytes()).await.map_err(|e| e.to_string())?;
            f.flush().await.map_err(|e| e.to_string())
        })
    }
}

/// POSTs the delivery as JSON; any non-2xx answer is a failure.
pub struct WebhookSink {
    url: String,
    client: reqwest::Client,
}

impl WebhookSink {
    pub fn new(url: impl Into<String>) -> Self {
        WebhookSink {
            url: url.into(),
            client: reqwest::Client::builder()
                .timeout(Duration::from_secs(5))
                .build()
                .expect("http client builds"),
        }
    }
}

impl AlertSink for WebhookSink {
    fn name(&self) -> &str {
        "webhook"
    }

    fn deliver<'a>(
        &'a self,
        alert: &'a AlertMessage,
        house: &'a str,
        at: Timestamp,
    ) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let d = Delivery {
                id: alert.id,
                house,
                channel: alert.channel,
                kind: alert.kind,
                body: &alert.body,
                created_at: iso8601(alert.created_at),
                delivered_at: iso8601(at),
            };
            let resp = self
                .client
                .post(&self.url)
                .json(&d)
                .send()
                .await
                .map_err(|e| e.to_string())?;
            if resp.status().is_success() {
                Ok(())
            } else {
                Err(format!("webhook answered {}", resp.status()))
            }
        })
    }
}

/// Keeps alerts in the in-memory inbox only.
pub struct InboxSink;

impl AlertSink for InboxSink {
    fn name(&self) -> &str {
        "inbox"
    }

    fn deliver<'a>(&'a self, _: &'a AlertMessage, _: &'a str, _: Timestamp) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async { Ok(()) })
    }
}

pub struct AlertDispatcher {
    sinks: Vec<Arc<dyn AlertSink>>,
    clock: SharedClock,
    houses: Vec<String>,
    retry_delay: Duration,
    next_id: AtomicU64,
    log: Mutex<VecDeque<DeliveryRecord>>,
}

impl AlertDispatcher {
    /// With no sinks, alerts go to the in-memory inbox.
    pub fn new(sinks: Vec<Arc<dyn AlertSink>>, clock: SharedClock, houses: Vec<String>, retry_delay: Duration) -> Self {
        let sinks = if sinks.is_empty() {
            vec![Arc::new(InboxSink) as Arc<dyn AlertSink>]
        } else {
            sinks
        };
        AlertDispatcher {
            sinks,
            clock,
            houses,
            retry_delay,
            next_id: AtomicU64::new(1),
            log: Mutex::new(VecDeque::new()),
        }
    }

    pub fn knows_house(&self, house: &str) -> bool {
        house == ALL_HOUSES || self.houses.iter().any(|h| h == house)
    }

    /// Delivers to every target house through every sink. A failed
    /// delivery is retried up to three times before being recorded as
    /// failed.
    pub async fn dispatch(&self, req: AlertRequest) -> (AlertMessage, Vec<DeliveryRecord>) {
        let mut alert = AlertMessage {
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            channel: req.channel,
            house: req.house,
            kind: req.kind,
            body: req.body,
            created_at: self.clock.now(),
            delivered_at: None,
        };
        let targets: Vec<String> = if alert.house == ALL_HOUSES {
            self.houses.clone()
        } else {
            vec![alert.house.clone()]
        };
        let mut records = Vec::new();
        for house in &targets {
            for sink in &self.sinks {
                records.push(self.deliver_one(&alert, house, sink.as_ref()).await);
            }
        }
        alert.delivered_at = records.iter().filter_map(|r| r.delivered_at).max();
        let mut log = self.log.lock().expect("alert log poisoned");
        for r in &records {
            if log.len() == LOG_CAPACITY {
                log.pop_front();
            }
            log.push_back(r.clone());
        }
        (alert, records)
    }

    async fn deliver_one(&self, alert: &AlertMessage, house: &str, sink: &dyn AlertSink) -> DeliveryRecord {
        let mut attempts = 0;
        let mut error = None;
        let mut delivered_at = None;
        while attempts <= DELIVERY_RETRIES {
            if attempts > 0 {
                tokio::time::sleep(self.retry_delay).await;
            }
            attempts += 1;
            let at = self.clock.now().max(alert.created_at);
            match sink.deliver(alert, house, at).await {
                Ok(()) => {
                    delivered_at = Some(at);
                    error = None;
                    break;
                }
                Err(e) => {
                    tracing::warn!(sink = sink.name(), house, "alert delivery failed: {e}");
                    error = Some(e);
                }
            }
        }
        DeliveryRecord {
            alert_id: alert.id,
            house: house.to_string(),
            channel: alert.channel,
            kind: alert.kind,
            body: alert.body.clone(),
            sink: sink.name().to_string(),
            attempts,
            status: if delivered_at.is_some() {
                DeliveryStatus::Delivered
            } else {
                DeliveryStatus::Failed
            },
            created_at: alert.created_at,
            delivered_at,
            error,
        }
    }

    /// Delivery log, oldest first, optionally for one house.
    pub fn records(&self, house: Option<&str>) -> Vec<DeliveryRecord> {
        let log = self.log.lock().expect("alert log poisoned");
        log.iter()
            .filter(|r| house.is_none_or(|h| r.house == h))
            .cloned()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn req(house: &str) -> AlertRequest {
        AlertRequest {
            channel: AlertChannel::Sms,
            house: house.into(),
            kind: AlertKind::ShiftConsumption,
            body: "Shift your dishwasher to 13:00".into(),
        }
    }

    fn houses() -> Vec<String> {
        (1..=9).map(|i| format!("h{i}")).collect()
    }

    #[tokio::test]
    async fn file_sink_appends_iso_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alerts.log");
        let clock = Arc::new(ManualClock::new(1_735_689_600));
        let d = AlertDispatcher::new(vec![Arc::new(FileSink::new(&path))], clock, houses(), Duration::ZERO);
        let (a, r) = d.dispatch(req("h1")).await;
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].status, DeliveryStatus::Delivered);
        assert!(a.delivered_at.unwrap() >= a.created_at);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("2025-01-01T00:00:00Z {"), "{text}");
        assert_eq!(text.lines().count(), 1);
    }

    #[tokio::test]
    async fn broadcast_gives_one_record_per_house() {
        let clock = Arc::new(ManualClock::new(0));
        let d = AlertDispatcher::new(vec![], clock, houses(), Duration::ZERO);
        let (_, r) = d.dispatch(req(ALL_HOUSES)).await;
        assert_eq!(r.len(), 9);
        assert_eq!(d.records(Some("h4")).len(), 1);
    }

    #[tokio::test]
    async fn unreachable_webhook_fails_after_retries() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/hook", listener.local_addr().unwrap());
        drop(listener);
        let clock = Arc::new(ManualClock::new(0));
        let d = AlertDispatcher::new(
            vec![Arc::new(WebhookSink::new(url))],
            clock,
            houses(),
            Duration::from_millis(1),
        );
        let (a, r) = d.dispatch(req("h2")).await;
        assert_eq!(r[0].status, DeliveryStatus::Failed);
        assert_eq!(r[0].attempts, 1 + DELIVERY_RETRIES);
        assert!(r[0].error.is_some());
        assert_eq!(a.delivered_at, None);
    }
}
