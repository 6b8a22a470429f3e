//! Input fixtures shared by the benchmarks. Everything is derived from the
//! default simulated fleet, so runs are reproducible.

use std::collections::BTreeMap;

use acc_core::analytics::DistributionKey;
use acc_core::clock::Timestamp;
use acc_core::gateway::{encode_telemetry, TelemetryPoint};
use acc_core::mqtt::{Connect, Packet, Publish, Subscribe};
use acc_core::sim::{DayPlusOneReport, FleetConfig, SimulatedHouse};
use acc_core::tic::{extract_reading, TicFrame, TicMode};

pub const START: Timestamp = 1_735_689_600;
pub const SEED: u64 = 1;

fn houses(step_s: i64) -> Vec<SimulatedHouse> {
    FleetConfig::default_fleet(SEED, START)
        .seeded_houses()
        .into_iter()
        .map(|h| SimulatedHouse::new(h, START, step_s))
        .collect()
}

/// Frames emitted by a producer every 30 s from midday on.
pub fn frames(mode: TicMode, n: usize) -> Vec<TicFrame> {
    let mut h = houses(10).swap_remove(0);
    (1..=n as i64)
        .map(|i| {
            h.advance_to(START + 12 * 3600 + 30 * i);
            h.frame(mode)
        })
        .collect()
}

/// Telemetry of the whole fleet, one point per house every `refresh_s`.
pub fn fleet_series(hours: i64, refresh_s: i64) -> BTreeMap<String, Vec<TelemetryPoint>> {
    let mut out = BTreeMap::new();
    for mut h in houses(10) {
        let id = h.config().house_id.clone();
        let points = (1..=hours * 3600 / refresh_s)
            .map(|i| {
                let ts = START + i * refresh_s;
                h.advance_to(ts);
                let r = extract_reading(&h.frame(TicMode::Standard)).expect("simulated frames decode");
                TelemetryPoint::from_reading(&id, ts, i as u64, &r)
            })
            .collect();
        out.insert(id, points);
    }
    out
}

/// Day-plus-one reports of the fleet over `days` whole days.
pub fn reports(days: i64) -> BTreeMap<String, Vec<DayPlusOneReport>> {
    houses(60)
        .into_iter()
        .map(|mut h| {
            h.advance_to(START + days * 86_400);
            (h.config().house_id.clone(), h.day_reports())
        })
        .collect()
}

pub fn static_key(houses: impl IntoIterator<Item = String>) -> DistributionKey {
    let ids: Vec<String> = houses.into_iter().collect();
    let share = 1.0 / ids.len() as f64;
    DistributionKey::StaticProportions {
        proportions: ids.into_iter().map(|h| (h, share)).collect(),
    }
}

/// `n` consumers with demands spread over two orders of magnitude.
pub fn consumption(n: usize) -> BTreeMap<String, u64> {
    (0..n as u64)
        .map(|i| (format!("h{i:03}"), 40 + (i * 7919) % 4000))
        .collect()
}

/// One packet of each kind the bus handles on its hot path.
pub fn packets() -> Vec<(&'static str, Packet)> {
    let point = fleet_series(1, 30).remove("h1").expect("h1").remove(0);
    vec![
        (
            "publish_telemetry",
            Packet::Publish(Publish {
                topic: "acc/h1/telemetry".into(),
                payload: encode_telemetry(&point),
            }),
        ),
        (
            "subscribe",
            Packet::Subscribe(Subscribe {
                packet_id: 1,
                filters: vec!["acc/+/telemetry".into(), "acc/ops/#".into()],
            }),
        ),
        (
            "connect",
            Packet::Connect(Connect {
                client_id: "gw-h1".into(),
                keep_alive_s: 30,
                clean_session: true,
                username: Some("token".into()),
                password: None,
            }),
        ),
    ]
}

/// Filter and topic pairs: exact, single-level and multi-level wildcards,
/// matching and not.
pub const TOPIC_PAIRS: [(&str, &str); 6] = [
    ("acc/h1/telemetry", "acc/h1/telemetry"),
    ("acc/+/telemetry", "acc/h7/telemetry"),
    ("acc/+/telemetry", "acc/h7/control"),
    ("acc/#", "acc/h7/control"),
    ("+/+/+/+", "acc/h7/control"),
    ("#", "$SYS/broker/load"),
];
