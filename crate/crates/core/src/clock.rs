//! Injectable simulation clocks. Every component takes time from a [`Clock`]
//! so a simulated day can run in seconds of wall time.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

/// Unix seconds, UTC.
pub type Timestamp = i64;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;

    /// Wall-clock time needed for `sim_secs` of simulated time to elapse.
    fn wall_for(&self, sim_secs: f64) -> Duration;
}

pub type SharedClock = Arc<dyn Clock>;

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0)
    }

    fn wall_for(&self, sim_secs: f64) -> Duration {
        Duration::from_secs_f64(sim_secs.max(0.0))
    }
}

/// Simulated time starting at `start` and running `factor` times faster than
/// the wall clock.
#[derive(Debug, Clone)]
pub struct AcceleratedClock {
    start: Timestamp,
    origin: Instant,
    factor: f64,
}

impl AcceleratedClock {
    pub fn new(start: Timestamp, factor: f64) -> Self {
        assert!(factor > 0.0, "acceleration factor must be positive");
        AcceleratedClock {
            start,
            origin: Instant::now(),
            factor,
        }
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }
}

impl Clock for AcceleratedClock {
    fn now(&self) -> Timestamp {
        self.start + (self.origin.elapsed().as_secs_f64() * self.factor).floor() as i64
    }

    fn wall_for(&self, sim_secs: f64) -> Duration {
        Duration::from_secs_f64((sim_secs / self.factor).max(0.0))
    }
}

/// A clock that only moves when told to. Used by scripted tests.
#[derive(Debug, Default, Clone)]
pub struct ManualClock {
    now: Arc<AtomicI64>,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock {
            now: Arc::new(AtomicI64::new(start)),
        }
    }

    pub fn set(&self, t: Timestamp) {
        self.now.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: i64) {
        self.now.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        self.now.load(Ordering::SeqCst)
    }

    fn wall_for(&self, _sim_secs: f64) -> Duration {
        Duration::from_millis(5)
    }
}

/// Sleeps until `clock` reaches `target`, polling in slices of at most
/// 100 ms so clock changes are noticed.
pub async fn sleep_until(clock: &dyn Clock, target: Timestamp) {
    loop {
        let now = clock.now();
        if now >= target {
            return;
        }
        let wait = clock.wall_for((target - now) as f64).min(Duration::from_millis(100));
        tokio::time::sleep(wait.max(Duration::from_micros(200))).await;
    }
}

pub const DAY: i64 = 86_400;

/// Start of the UTC day containing `t`.
pub fn day_start(t: Timestamp) -> Timestamp {
    t.div_euclid(DAY) * DAY
}

/// Seconds since UTC midnight.
pub fn time_of_day(t: Timestamp) -> i64 {
    t.rem_euclid(DAY)
}
