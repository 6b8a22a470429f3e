use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use acc_core::clock::{AcceleratedClock, SharedClock, Timestamp};
use acc_core::gateway::{run_gateway, BackoffPolicy, GatewayConfig, GatewayRuntime, GatewayStats, SimulatedMeter};
use acc_core::mqtt::{Broker, BrokerHandle, BrokerLimits};
use acc_core::service::{self, ServiceHandle};
use acc_core::sim::SimulatedHouse;
use acc_core::store::StoreOptions;
use serde::Serialize;
use tokio::sync::watch;
use tokio::task::JoinSet;

use crate::settings::{self, fresh_store_dir, to_json, write_file};
use crate::{CliError, SimulateArgs};

/// Wall time the simulated clock is started ahead of the first tick so the
/// service and gateways are connected before it.
const LEAD_WALL_S: f64 = 0.3;
const DRAIN_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Serialize)]
struct Summary {
    houses: usize,
    start: Timestamp,
    end: Timestamp,
    acceleration: f64,
    ticks_per_house: u64,
    published: u64,
    stored: u64,
    missed_ticks: u64,
    skipped_frames: u64,
    wall_s: f64,
    api: String,
    broker: String,
}

fn fast_backoff() -> BackoffPolicy {
    BackoffPolicy {
        initial: Duration::from_millis(20),
        max: Duration::from_millis(500),
    }
}

async fn wait_connected(service: &ServiceHandle) -> Result<(), CliError> {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !service.state.stats.snapshot().connected {
        if Instant::now() > deadline {
            return Err(CliError::Incomplete("service could not subscribe to the broker".into()));
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    Ok(())
}

pub async fn run(mut config: acc_core::service::ServiceConfig, args: SimulateArgs) -> Result<(), CliError> {
    let mut fleet = settings::fleet(args.fleet.as_deref(), &config)?;
    if let Some(seed) = args.seed {
        fleet.seed = seed;
    }
    if let Some(start) = args.start {
        fleet.start = start;
    }
    if let Some(a) = args.acceleration {
        fleet.acceleration = a;
    }
    fleet.validate()?;
    if let Some(r) = args.refresh {
        config.refresh_period_s = r;
    }
    let refresh = i64::from(config.refresh_period_s.max(1));
    let start = fleet.start;
    let ticks = ((args.hours * 3600.0) as i64 / refresh).max(0) as u64;
    let end = start + ticks as i64 * refresh;

    if let Some(dir) = args.store {
        config.store_dir = dir;
    }
    fresh_store_dir(&config.store_dir)?;
    config.listen = args.listen.unwrap_or_else(|| "127.0.0.1:0".into());
    config.houses.clear();
    config.add_fleet(&fleet);

    let embedded: Option<BrokerHandle> = match &args.broker {
        Some(addr) => {
            config.broker_addr = addr.clone();
            None
        }
        None => {
            let limits = BrokerLimits {
                accepted_tokens: config.broker_token.iter().cloned().collect(),
                ..BrokerLimits::default()
            };
            let b = Broker::bind("127.0.0.1:0", limits).await?.spawn();
            config.broker_addr = b.local_addr().to_string();
            Some(b)
        }
    };
    let broker_addr = config.broker_addr.clone();

    let lead = (fleet.acceleration * LEAD_WALL_S).ceil() as i64;
    let clock: SharedClock = Arc::new(AcceleratedClock::new(start - lead, fleet.acceleration));
    let wall = Instant::now();
    let service = service::start_with(config.clone(), clock.clone(), StoreOptions::default(), fast_backoff()).await?;
    wait_connected(&service).await?;
    eprintln!("api listening on {}, broker {}", service.addr, broker_addr);

    let (stop_tx, stop_rx) = watch::channel(false);
    let mut gateways = JoinSet::new();
    let mut houses = BTreeMap::new();
    let mut stats = Vec::new();
    for h in fleet.seeded_houses() {
        let meter = SimulatedMeter::new(SimulatedHouse::new(h.clone(), start, fleet.step_s), fleet.tic_mode);
        houses.insert(h.house_id.clone(), meter.handle());
        let mut gw = GatewayConfig::new(&h.house_id, &broker_addr);
        gw.refresh_period_s = config.refresh_period_s;
        gw.tic_mode = fleet.tic_mode;
        gw.credentials = config.broker_token.clone().unwrap_or_default();
        let mut rt = GatewayRuntime::new(clock.clone());
        rt.backoff = fast_backoff();
        rt.first_tick = Some(start + refresh);
        rt.end = Some(end);
        let s = Arc::new(GatewayStats::default());
        stats.push(s.clone());
        gateways.spawn(run_gateway(gw, Box::new(meter), rt, s, stop_rx.clone()));
    }

    let mut failure = None;
    let mut interrupted = false;
    let interrupt = settings::interrupted();
    tokio::pin!(interrupt);
    loop {
        tokio::select! {
            joined = gateways.join_next() => match joined {
                None => break,
                Some(Ok(Ok(()))) => {}
                Some(Ok(Err(e))) => { failure.get_or_insert(CliError::Gateway(e)); }
                Some(Err(e)) => { failure.get_or_insert(CliError::Incomplete(format!("gateway task failed: {e}"))); }
            },
            _ = &mut interrupt, if !interrupted => {
                interrupted = true;
                let _ = stop_tx.send(true);
            }
        }
    }

    let sum = |f: fn(&GatewayStats) -> &std::sync::atomic::AtomicU64| -> u64 {
        stats.iter().map(|s| GatewayStats::get(f(s))).sum()
    };
    let published = sum(|s| &s.published);
    let deadline = Instant::now() + DRAIN_TIMEOUT;
    while service.state.stats.snapshot().stored < published && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let stored = service.state.stats.snapshot().stored;

    if let Some(path) = &args.export {
        let csv = service.state.store.export_csv(None, start, end + 1)?;
        write_file(path, &csv)?;
    }
    if let Some(dir) = &args.reports {
        for (house, handle) in &houses {
            let reports = handle
                .lock()
                .map_err(|_| CliError::Incomplete(format!("house {house} state poisoned")))?
                .day_reports();
            write_file(&dir.join(format!("{house}.json")), to_json(&reports).as_bytes())?;
        }
    }

    let summary = Summary {
        houses: houses.len(),
        start,
        end,
        acceleration: fleet.acceleration,
        ticks_per_house: ticks,
        published,
        stored,
        missed_ticks: sum(|s| &s.missed_ticks),
        skipped_frames: sum(|s| &s.skipped_frames),
        wall_s: wall.elapsed().as_secs_f64(),
        api: service.addr.to_string(),
        broker: broker_addr,
    };
    service.shutdown().await;
    if let Some(b) = embedded {
        b.shutdown().await;
    }

    if args.json {
        out!("{}", to_json(&summary));
    } else {
        out!(
            "simulated {} houses from {} to {} at {}x in {:.1} s wall",
            summary.houses,
            summary.start,
            summary.end,
            summary.acceleration,
            summary.wall_s
        );
        out!(
            "published {} points, stored {}, missed ticks {}, skipped frames {}",
            summary.published,
            summary.stored,
            summary.missed_ticks,
            summary.skipped_frames
        );
    }

    if let Some(e) = failure {
        return Err(e);
    }
    if interrupted {
        return Err(CliError::Incomplete("interrupted".into()));
    }
    let expected = ticks * houses.len() as u64;
    if stored != expected {
        return Err(CliError::Incomplete(format!(
            "stored {stored} of {expected} expected points; the dataset is incomplete"
        )));
    }
    Ok(())
}
