use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use acc_core::analytics::period_rates;
use acc_core::clock::{ManualClock, SharedClock, Timestamp};
use acc_core::gateway::{encode_telemetry, BackoffPolicy, ControlCommand, TelemetryPoint};
use acc_core::mqtt::{telemetry_topic, Broker, BrokerLimits, ClientOptions, MqttClient, Publish};
use acc_core::service::{
    start_with, AlertKind, DeliveryStatus, GatewayState, HouseEntry, ServiceConfig, ServiceHandle, ServiceState,
    SinkConfig,
};
use acc_core::store::StoreOptions;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::time::{sleep, timeout, Instant};

/// 2025-01-01T10:00:00Z.
const T: Timestamp = 1_735_725_600;

fn point(house: &str, ts: Timestamp, seq: u64, east: u64, eait: u64) -> TelemetryPoint {
    TelemetryPoint {
        house_id: house.into(),
        ts,
        seq,
        east_wh: east,
        eait_wh: eait,
        sinsts_va: 800,
        sinsti_va: 0,
        tariff: "BASE".into(),
    }
}

fn publish(p: &TelemetryPoint) -> Publish {
    Publish {
        topic: telemetry_topic(&p.house_id),
        payload: encode_telemetry(p),
    }
}

fn config(dir: &std::path::Path) -> ServiceConfig {
    let mut c = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        broker_addr: "127.0.0.1:1".into(),
        store_dir: dir.to_path_buf(),
        // supervision is driven by hand
        supervision_interval_s: Some(1_000_000_000),
        alert_retry_delay_ms: 5,
        houses: (1..=3).map(|i| HouseEntry::new(format!("h{i}"))).collect(),
        ..ServiceConfig::default()
    };
    c.houses[1].token = Some("s3cret".into());
    c.admin_token = Some("adm".into());
    c
}

async fn start(c: ServiceConfig, clock: &ManualClock) -> ServiceHandle {
    let clock: SharedClock = Arc::new(clock.clone());
    let backoff = BackoffPolicy {
        initial: Duration::from_millis(20),
        max: Duration::from_millis(100),
    };
    start_with(c, clock, StoreOptions::default(), backoff).await.unwrap()
}

fn url(h: &ServiceHandle, path: &str) -> String {
    format!("http://{}{path}", h.addr)
}

async fn get(h: &ServiceHandle, path: &str) -> (StatusCode, Value) {
    let r = reqwest::get(url(h, path)).await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

async fn post(h: &ServiceHandle, path: &str, body: &str, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = reqwest::Client::new().post(url(h, path)).body(body.to_string());
    if let Some(t) = token {
        req = req.bearer_auth(t);
    }
    let r = req.send().await.unwrap();
    let status = r.status();
    (status, r.json().await.unwrap())
}

/// Two producers and a consumer, one point per 30 s from 09:00 to 10:00.
fn feed(state: &Arc<ServiceState>) {
    for k in 0..=120 {
        let ts = T - 3600 + 30 * k;
        let k = k as u64;
        state.ingest(&publish(&point("h1", ts, k + 1, 1_000 + k, 5_000 + 3 * k)));
        state.ingest(&publish(&point("h2", ts, k + 1, 2_000 + 2 * k, 100 + k)));
        state.ingest(&publish(&point("h3", ts, k + 1, 3_000 + 4 * k, 0)));
    }
}

#[tokio::test]
async fn polling_endpoints_serve_store_contents() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(T - 3600);
    let h = start(config(dir.path()), &clock).await;
    clock.set(T);
    feed(&h.state);
    assert_eq!(h.state.stats.snapshot().stored, 363);

    let (s, live) = get(&h, "/api/house/h1/live").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(live["house"], "h1");
    assert_eq!(live["reading"]["ts"], T);
    assert_eq!(live["reading"]["east_wh"], 1_120);
    assert_eq!(live["age_s"], 0);
    assert_eq!(live["stale"], false);
    assert_eq!(live["gateway"], "healthy");
    assert_eq!(live["active_power"]["draw_w"], 120.0);
    assert_eq!(live["active_power"]["inject_w"], 360.0);
    assert_eq!(live["today"]["consumed_wh"], 120);
    assert_eq!(live["tariff_label"], "BASE");
    // 120 Wh at 0.2516 €/kWh
    assert_eq!(live["today"]["cost_millicents"], 3_019);

    let (s, hist) = get(
        &h,
        &format!("/api/house/h1/history?from={}&to={}&bucket=1800", T - 3600, T),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let buckets = hist["buckets"].as_array().unwrap();
    assert_eq!(buckets.len(), 2);
    assert_eq!(
        buckets[0]["consumed_wh"].as_u64().unwrap() + buckets[1]["consumed_wh"].as_u64().unwrap(),
        120
    );

    let (s, summary) = get(&h, "/api/operation/summary").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(summary["houses_total"], 3);
    assert_eq!(summary["houses_online"], 3);
    assert_eq!(summary["today"]["consumed_wh"], 120 + 240 + 480);
    assert_eq!(summary["today"]["produced_wh"], 360 + 120);
    assert_eq!(summary["live"]["houses_reporting"], 3);
    // the collective view carries no per-house energy
    for house in summary["houses"].as_array().unwrap() {
        assert_eq!(house.as_object().unwrap().len(), 2, "{house}");
    }

    let (s, rates) = get(
        &h,
        &format!("/api/operation/rates?scale=period&from={}&to={}", T - 3600, T),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let store = &h.state.store;
    let series: BTreeMap<String, Vec<TelemetryPoint>> = store
        .houses()
        .into_iter()
        .map(|x| (x.clone(), store.query(&x, T - 3600, T).unwrap()))
        .collect();
    let offline = period_rates(&series, T - 3600, T, 300).unwrap();
    assert_eq!(rates, serde_json::to_value(&offline).unwrap());
    assert_eq!(rates["self_consumption"], 1.0);

    let (s, instant) = get(&h, "/api/operation/rates?scale=instant").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(instant["samples_used"], 3);
    let (s, half) = get(&h, "/api/operation/rates?scale=30min").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(half["window"], json!([T - 1800, T]));

    let (s, status) = get(&h, "/api/operation/status").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(status.as_array().unwrap().len(), 3);
    assert_eq!(status[0]["last_seq"], 121);

    let (s, ingest) = get(&h, "/api/operation/ingest").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ingest["stored"], 363);
    h.shutdown().await;
}

#[tokio::test]
async fn undefined_rates_serialize_as_na() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(T);
    let h = start(config(dir.path()), &clock).await;
    for k in 0..10 {
        h.state
            .ingest(&publish(&point("h3", T + 30 * k, k as u64 + 1, 100 + k as u64, 0)));
    }
    let (s, r) = get(&h, &format!("/api/operation/rates?from={T}&to={}", T + 300)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["self_consumption"], "n/a");
    assert_eq!(r["self_sufficiency"], 0.0);
    h.shutdown().await;
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(T);
    let h = start(config(dir.path()), &clock).await;

    assert_eq!(get(&h, "/api/house/nope/live").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&h, "/api/house/h2/live").await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(get(&h, "/api/house/h2/live?token=s3cret").await.0, StatusCode::OK);
    assert_eq!(get(&h, "/api/house/h2/live?token=adm").await.0, StatusCode::OK);
    let bearer = reqwest::Client::new()
        .get(url(&h, "/api/house/h2/live"))
        .bearer_auth("s3cret")
        .send()
        .await
        .unwrap();
    assert_eq!(bearer.status(), StatusCode::OK);

    for path in [
        "/api/house/h1/history?bucket=7".to_string(),
        format!("/api/house/h1/history?from={T}&to={T}"),
        "/api/house/h1/history?from=abc".to_string(),
        "/api/operation/rates?scale=weekly".to_string(),
        format!("/api/operation/rates?from={T}"),
        "/api/operation/rates?scale=period".to_string(),
    ] {
        let (s, body) = get(&h, &path).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{path}");
        assert!(body["error"].is_string());
    }

    let (s, _) = post(&h, "/api/house/h1/control", "{\"device\":\"heater\"}", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post(
        &h,
        "/api/house/h1/control",
        "{\"device\":\"heater\",\"action\":\"set_power\"}",
        None,
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = post(
        &h,
        "/api/house/zz/control",
        "{\"device\":\"heater\",\"action\":\"on\"}",
        None,
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let alert = r#"{"channel":"sms","house":"h1","kind":"shift_consumption","body":"x"}"#;
    assert_eq!(post(&h, "/api/alerts", alert, None).await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(
        post(&h, "/api/alerts", r#"{"channel":"fax"}"#, Some("adm")).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let unknown = r#"{"channel":"sms","house":"h9","kind":"shift_consumption","body":"x"}"#;
    assert_eq!(
        post(&h, "/api/alerts", unknown, Some("adm")).await.0,
        StatusCode::NOT_FOUND
    );
    h.shutdown().await;
}

#[tokio::test]
async fn silence_timeline_degrades_once_per_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(T);
    let h = start(config(dir.path()), &clock).await;
    let state = h.state.clone();
    state.ingest(&publish(&point("h1", T, 1, 10, 0)));
    state.supervise(T).await;
    let cmd = r#"{"device":"heater","action":"on"}"#;

    let mut timeline = Vec::new();
    for dt in (0..=240).step_by(15) {
        clock.set(T + dt);
        for t in state.supervise(T + dt).await {
            if t.house_id == "h1" {
                timeline.push((dt, t.from, t.to));
            }
        }
    }
    assert_eq!(
        timeline,
        vec![
            (60, GatewayState::Healthy, GatewayState::Stale),
            (180, GatewayState::Stale, GatewayState::Down)
        ]
    );
    let faults: Vec<_> = state
        .alerts
        .records(Some("h1"))
        .into_iter()
        .filter(|r| r.kind == AlertKind::SystemFault)
        .collect();
    assert_eq!(faults.len(), 2);
    assert!(faults.iter().all(|r| r.status == DeliveryStatus::Delivered));
    // never-seen houses start Down and raise nothing
    assert!(state.alerts.records(Some("h3")).is_empty());

    let (s, body) = post(&h, "/api/house/h1/control", cmd, None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(body["error"].as_str().unwrap().contains("down"));

    // fresh telemetry brings it back without an alert
    clock.set(T + 270);
    state.ingest(&publish(&point("h1", T + 270, 10, 20, 0)));
    assert!(state.supervise(T + 270).await.is_empty());
    assert_eq!(state.statuses()[0].state, GatewayState::Healthy);
    assert_eq!(state.statuses()[0].missed_ticks, 8);
    assert_eq!(state.alerts.records(Some("h1")).len(), 2);
    // no broker connection: 503
    assert_eq!(
        post(&h, "/api/house/h1/control", cmd, None).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    h.shutdown().await;
}

#[tokio::test]
async fn control_reaches_the_gateway_topic() {
    let broker = Broker::bind("127.0.0.1:0", BrokerLimits::default())
        .await
        .unwrap()
        .spawn();
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(T);
    let mut c = config(dir.path());
    c.broker_addr = broker.local_addr().to_string();
    let h = start(c, &clock).await;
    let mut gw = MqttClient::connect(&ClientOptions::new(broker.local_addr().to_string(), "gw-h1"))
        .await
        .unwrap();
    gw.subscribe(&["acc/h1/control"]).await.unwrap();

    // telemetry over the bus marks the gateway alive
    gw.publish("acc/h1/telemetry", encode_telemetry(&point("h1", T, 1, 5, 0)))
        .await
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    while h.state.stats.snapshot().stored == 0 || !h.state.stats.snapshot().connected {
        assert!(Instant::now() < deadline, "service never ingested");
        sleep(Duration::from_millis(10)).await;
    }
    let (s, ack) = post(
        &h,
        "/api/house/h1/control",
        r#"{"device":"heater","action":"set_power","value_w":700}"#,
        None,
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ack["status"], "sent");
    assert_eq!(ack["topic"], "acc/h1/control");
    let msg = timeout(Duration::from_secs(5), gw.recv()).await.unwrap().unwrap();
    let cmd = ControlCommand::decode(&msg.payload).unwrap();
    assert_eq!(cmd.value_w, Some(700));
    h.shutdown().await;
    broker.shutdown().await;
}

#[tokio::test]
async fn ingest_rejects_bad_messages_and_flags_rollbacks() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(T);
    let h = start(config(dir.path()), &clock).await;
    let s = h.state.clone();
    s.ingest(&publish(&point("h1", T, 1, 100, 0)));
    s.ingest(&Publish {
        topic: "acc/h2/telemetry".into(),
        payload: encode_telemetry(&point("h1", T + 30, 2, 101, 0)),
    });
    s.ingest(&Publish {
        topic: "acc/h1/telemetry".into(),
        payload: b"{\"house\":\"h1\"}".to_vec(),
    });
    s.ingest(&publish(&point("h1", T - 30, 2, 101, 0)));
    s.ingest(&publish(&point("h1", T + 60, 3, 99, 0)));
    let snap = s.stats.snapshot();
    assert_eq!(
        (snap.received, snap.stored, snap.malformed, snap.rejected),
        (5, 1, 2, 2)
    );
    let deadline = Instant::now() + Duration::from_secs(5);
    while s.alerts.records(Some("h1")).is_empty() {
        assert!(Instant::now() < deadline, "no fault alert for a rollback");
        sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(s.alerts.records(Some("h1"))[0].kind, AlertKind::SystemFault);
    h.shutdown().await;
}

#[tokio::test]
async fn broadcast_alert_reaches_every_house_and_sink() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("alerts.log");
    let clock = ManualClock::new(T);
    let mut c = config(&dir.path().join("store"));
    c.houses = (1..=9).map(|i| HouseEntry::new(format!("h{i}"))).collect();
    c.alert_sinks = vec![
        SinkConfig::File { path: log.clone() },
        SinkConfig::Webhook {
            url: "http://127.0.0.1:1/hook".into(),
        },
    ];
    let h = start(c, &clock).await;
    let body = r#"{"channel":"notification","house":"all","kind":"reduce_consumption","body":"Peak at 19:00"}"#;
    let (s, out) = post(&h, "/api/alerts", body, Some("adm")).await;
    assert_eq!(s, StatusCode::OK);
    let deliveries = out["deliveries"].as_array().unwrap();
    assert_eq!(deliveries.len(), 18);
    let file: Vec<&Value> = deliveries.iter().filter(|d| d["sink"] == "file").collect();
    assert_eq!(file.len(), 9);
    assert!(file.iter().all(|d| d["status"] == "delivered" && d["attempts"] == 1));
    let hooks: Vec<&Value> = deliveries.iter().filter(|d| d["sink"] != "file").collect();
    assert!(hooks.iter().all(|d| d["status"] == "failed" && d["attempts"] == 4));

    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 9);
    let (stamp, json) = lines[0].split_once(' ').unwrap();
    assert_eq!(stamp, "2025-01-01T10:00:00Z");
    let v: Value = serde_json::from_str(json).unwrap();
    assert_eq!(v["body"], "Peak at 19:00");

    let (s, list) = get(&h, "/api/alerts?house=h4").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 2);
    assert_eq!(get(&h, "/api/alerts").await.0, StatusCode::UNAUTHORIZED);
    assert_eq!(get(&h, "/api/alerts?token=adm").await.1.as_array().unwrap().len(), 18);
    h.shutdown().await;
}

async fn read_until(s: &mut TcpStream, buf: &mut String, needle: &str) {
    let mut chunk = [0u8; 4096];
    timeout(Duration::from_secs(5), async {
        while !buf.contains(needle) {
            let n = s.read(&mut chunk).await.unwrap();
            assert!(n > 0, "stream closed");
            buf.push_str(&String::from_utf8_lossy(&chunk[..n]));
        }
    })
    .await
    .unwrap_or_else(|_| panic!("no {needle:?} in {buf}"));
}

#[tokio::test]
async fn event_stream_pushes_status_summary_and_live() {
    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::new(T);
    let h = start(config(dir.path()), &clock).await;
    let mut s = TcpStream::connect(h.addr).await.unwrap();
    s.write_all(
        format!(
            "GET /api/events?house=h2&token=s3cret HTTP/1.1\r\nHost: {}\r\n\r\n",
            h.addr
        )
        .as_bytes(),
    )
    .await
    .unwrap();
    let mut buf = String::new();
    read_until(&mut s, &mut buf, "event: summary").await;
    assert!(buf.contains("text/event-stream"));
    assert!(buf.contains("event: status"));
    read_until(&mut s, &mut buf, "event: live").await;

    buf.clear();
    h.state.ingest(&publish(&point("h2", T, 1, 42, 0)));
    read_until(&mut s, &mut buf, "\"east_wh\":42").await;
    assert!(buf.contains("event: live"));

    buf.clear();
    h.state.supervise(T + 15).await;
    read_until(&mut s, &mut buf, "event: summary").await;
    assert!(buf.contains("event: status"));

    let denied = reqwest::get(url(&h, "/api/events?house=h2")).await.unwrap();
    assert_eq!(denied.status(), StatusCode::UNAUTHORIZED);
    h.shutdown().await;
}
