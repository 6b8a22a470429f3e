use std::sync::Arc;
use std::time::Duration;

use acc_core::clock::{AcceleratedClock, SharedClock, SystemClock};
use acc_core::gateway::{
    encode_telemetry, run_gateway, GatewayConfig, GatewayRuntime, GatewayStats, RecordedFrames, SimulatedMeter,
    TicSource,
};
use acc_core::mqtt::{telemetry_topic, Broker, BrokerLimits, ClientOptions, MqttClient};
use acc_core::service::{self, HouseEntry, ServiceConfig};
use acc_core::sim::{FleetConfig, HouseConfig, SimulatedHouse};
use acc_core::store::points_from_csv;
use acc_core::tic::TicMode;
use clap::ValueEnum;
use serde::Serialize;
use tokio::sync::watch;

use crate::settings::{self, read_file, to_json, DEFAULT_SEED};
use crate::{BrokerArgs, CliError, GatewayArgs, ReplayArgs, ServeArgs};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Mode {
    Standard,
    Historic,
}

impl From<Mode> for TicMode {
    fn from(m: Mode) -> TicMode {
        match m {
            Mode::Standard => TicMode::Standard,
            Mode::Historic => TicMode::Historic,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Role {
    Consumer,
    Producer,
    ProducerWithBattery,
}

fn clock_for(acceleration: Option<f64>, start: Option<i64>) -> SharedClock {
    match (acceleration, start) {
        (Some(a), Some(s)) => Arc::new(AcceleratedClock::new(s, a)),
        _ => Arc::new(SystemClock),
    }
}

pub async fn broker(config: ServiceConfig, args: BrokerArgs) -> Result<(), CliError> {
    let listen = args.listen.unwrap_or(config.broker_addr);
    let mut tokens = args.tokens;
    if tokens.is_empty() {
        tokens.extend(config.broker_token);
    }
    let limits = BrokerLimits {
        accepted_tokens: tokens,
        ..BrokerLimits::default()
    };
    let b = Broker::bind(&listen, limits).await?.spawn();
    out!("broker listening on {}", b.local_addr());
    settings::interrupted().await;
    b.shutdown().await;
    Ok(())
}

pub async fn serve(mut config: ServiceConfig, args: ServeArgs) -> Result<(), CliError> {
    if let Some(v) = args.listen {
        config.listen = v;
    }
    if let Some(v) = args.broker {
        config.broker_addr = v;
    }
    if let Some(v) = args.store {
        config.store_dir = v;
    }
    if let Some(v) = args.admin_token {
        config.admin_token = Some(v);
    }
    if let Some(v) = args.refresh {
        config.refresh_period_s = v;
    }
    if let Some(v) = args.fleet {
        config.fleet = Some(v);
    }
    config.resolve_fleet()?;
    for h in args.houses {
        if config.house(&h).is_none() {
            config.houses.push(HouseEntry::new(h));
        }
    }
    let clock = clock_for(args.acceleration, args.start);
    let handle = service::start(config, clock).await?;
    out!("api listening on {}", handle.addr);
    settings::interrupted().await;
    handle.shutdown().await;
    Ok(())
}

#[derive(Debug, Serialize)]
struct GatewayReport {
    house: String,
    ticks: u64,
    published: u64,
    skipped_frames: u64,
    missed_ticks: u64,
    reconnects: u64,
    controls_applied: u64,
    control_errors: u64,
}

fn simulated_house(args: &GatewayArgs) -> Result<HouseConfig, CliError> {
    if let Some(path) = &args.fleet {
        let fleet = FleetConfig::load(path)?;
        return fleet
            .seeded_houses()
            .into_iter()
            .find(|h| h.house_id == args.house)
            .ok_or_else(|| CliError::Config(format!("house {} is not in {}", args.house, path.display())));
    }
    let seed = if args.seed == 0 { DEFAULT_SEED } else { args.seed };
    let h = match args.role {
        Role::Consumer => HouseConfig::consumer(&args.house, seed),
        Role::Producer => HouseConfig::producer(&args.house, seed),
        Role::ProducerWithBattery => HouseConfig::producer_with_battery(&args.house, seed),
    };
    h.validate()?;
    Ok(h)
}

pub async fn gateway(config: ServiceConfig, args: GatewayArgs) -> Result<(), CliError> {
    let mut gw = GatewayConfig::new(&args.house, args.broker.clone().unwrap_or(config.broker_addr));
    gw.refresh_period_s = args.refresh.unwrap_or(config.refresh_period_s);
    gw.tic_mode = args.mode.into();
    gw.credentials = args.token.clone().or(config.broker_token).unwrap_or_default();
    let refresh = i64::from(gw.refresh_period_s.max(1));

    let clock = clock_for(args.acceleration, args.start);
    let now = clock.now();
    let first_tick = (now.div_euclid(refresh) + 1) * refresh;
    let (source, frames): (Box<dyn TicSource>, Option<usize>) = match &args.capture {
        Some(path) => {
            let rec = RecordedFrames::from_bytes(&read_file(path)?);
            if rec.is_empty() {
                return Err(CliError::Config(format!("{} holds no TIC frame", path.display())));
            }
            let n = rec.len();
            (Box::new(rec), Some(n))
        }
        None => {
            let house = SimulatedHouse::new(simulated_house(&args)?, now, 10);
            (Box::new(SimulatedMeter::new(house, gw.tic_mode)), None)
        }
    };
    let mut rt = GatewayRuntime::new(clock);
    rt.first_tick = Some(first_tick);
    let ticks = args.ticks.or(frames.map(|n| n as u64));
    if let Some(n) = ticks {
        if n == 0 {
            return Ok(());
        }
        rt.end = Some(first_tick + (n as i64 - 1) * refresh);
    }

    let stats = Arc::new(GatewayStats::default());
    let (stop_tx, stop_rx) = watch::channel(false);
    let task = tokio::spawn(run_gateway(gw, source, rt, stats.clone(), stop_rx));
    tokio::pin!(task);
    let result = tokio::select! {
        r = &mut task => r,
        _ = settings::interrupted() => {
            let _ = stop_tx.send(true);
            task.await
        }
    };
    let get = GatewayStats::get;
    let report = GatewayReport {
        house: args.house,
        ticks: get(&stats.ticks),
        published: get(&stats.published),
        skipped_frames: get(&stats.skipped_frames),
        missed_ticks: get(&stats.missed_ticks),
        reconnects: get(&stats.reconnects),
        controls_applied: get(&stats.controls_applied),
        control_errors: get(&stats.control_errors),
    };
    out!("{}", serde_json::to_string(&report).expect("plain data serializes"));
    result.map_err(|e| CliError::Incomplete(format!("gateway task failed: {e}")))??;
    Ok(())
}

pub async fn replay(config: ServiceConfig, args: ReplayArgs) -> Result<(), CliError> {
    let mut points = points_from_csv(&read_file(&args.csv)?)?;
    if let Some(h) = &args.house {
        points.retain(|p| &p.house_id == h);
    }
    points.sort_by(|a, b| a.ts.cmp(&b.ts).then_with(|| a.house_id.cmp(&b.house_id)));
    let mut opts = ClientOptions::new(args.broker.unwrap_or(config.broker_addr), "acc-replay");
    opts.username = config.broker_token;
    let client = MqttClient::connect(&opts).await?;
    let mut sent = 0u64;
    let mut prev = points.first().map(|p| p.ts);
    for p in &points {
        if let Some(t) = prev {
            let gap = (p.ts - t) as f64 / args.speed;
            if gap > 0.0 {
                tokio::time::sleep(Duration::from_secs_f64(gap)).await;
            }
        }
        prev = Some(p.ts);
        client
            .publish(&telemetry_topic(&p.house_id), encode_telemetry(p))
            .await?;
        sent += 1;
    }
    client.disconnect().await;
    out!("{}", to_json(&serde_json::json!({ "published": sent })));
    Ok(())
}
