//! Response bodies shared by the HTTP endpoints and the event stream.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::analytics::{
    active_power_between, cost, instant_rates, period_rates, predict_day_consumption, thirty_min_rates, ActivePower,
    DailyProfile, RateReport, RateScale, TariffSchedule, DEFAULT_PREDICTION_DAYS,
};
use crate::clock::{day_start, Timestamp, DAY};
use crate::gateway::TelemetryPoint;
use crate::sim::{date_start, ContractKind};
use crate::store::StoreError;

use super::supervisor::{GatewayState, GatewayStatus};
use super::{ServiceError, ServiceState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTotals {
    pub consumed_wh: u64,
    pub injected_wh: u64,
    pub cost_eur: f64,
    pub cost_millicents: u64,
}

/// `GET /api/house/{id}/live`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveView {
    pub house: String,
    pub now: Timestamp,
    pub reading: Option<TelemetryPoint>,
    pub age_s: Option<i64>,
    /// True when the reading is missing or older than the stale threshold.
    pub stale: bool,
    pub gateway: GatewayState,
    pub active_power: Option<ActivePower>,
    pub contract: ContractKind,
    pub tariff_label: &'static str,
    pub pricing: TariffSchedule,
    pub today: EnergyTotals,
    pub month: EnergyTotals,
    pub prediction_wh: Option<f64>,
}

/// `GET /api/house/{id}/history`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub house: String,
    pub from: Timestamp,
    pub to: Timestamp,
    pub bucket_s: i64,
    pub buckets: Vec<crate::store::Bucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseOnline {
    pub house: String,
    pub state: GatewayState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LivePower {
    pub drawn_w: f64,
    pub reinjected_w: f64,
    pub balance_w: f64,
    pub apparent_va: u64,
    pub houses_reporting: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HorizonTotals {
    pub consumed_wh: u64,
    pub produced_wh: u64,
}

/// `GET /api/operation/summary`. Aggregates only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationSummary {
    pub now: Timestamp,
    pub houses_total: u64,
    pub houses_online: u64,
    pub houses: Vec<HouseOnline>,
    pub live: LivePower,
    pub today: HorizonTotals,
    pub month: HorizonTotals,
    pub since_start: HorizonTotals,
}

pub fn month_start(t: Timestamp) -> Timestamp {
    let d = chrono::DateTime::from_timestamp(t, 0).map_or(NaiveDate::MIN, |d| d.date_naive());
    NaiveDate::from_ymd_opt(d.year(), d.month(), 1).map_or(day_start(t), date_start)
}

impl ServiceState {
    fn stale_after_s(&self) -> i64 {
        i64::from(self.config.stale_factor) * i64::from(self.config.refresh_period_s)
    }

    fn register_delta(&self, house: &str, t0: Timestamp, t1: Timestamp) -> (u64, u64) {
        match (self.store.registers_at(house, t0), self.store.registers_at(house, t1)) {
            (Ok(Some(a)), Ok(Some(b))) => (b.0.saturating_sub(a.0), b.1.saturating_sub(a.1)),
            _ => (0, 0),
        }
    }

    fn totals(&self, house: &str, tariff: &TariffSchedule, t0: Timestamp, now: Timestamp) -> EnergyTotals {
        let (consumed_wh, injected_wh) = self.register_delta(house, t0, now);
        let bucket_s = self.config.bucket_s;
        let millicents = self
            .store
            .downsample(house, t0, now + 1, bucket_s)
            .ok()
            .and_then(|b| cost(&b, bucket_s, tariff).ok())
            .map_or(0, |m| m.0);
        EnergyTotals {
            consumed_wh,
            injected_wh,
            cost_eur: millicents as f64 / 100_000.0,
            cost_millicents: millicents,
        }
    }

    fn prediction(&self, house: &str, now: Timestamp, today_so_far: u64) -> Option<f64> {
        let today = day_start(now);
        let margin = self.stale_after_s();
        let mut history = Vec::new();
        for d in 1..=DEFAULT_PREDICTION_DAYS as i64 {
            let start = today - d * DAY;
            let Ok(points) = self.store.query(house, start - 3600, start + DAY + 1) else {
                break;
            };
            let complete =
                points.iter().any(|p| p.ts <= start + margin) && points.iter().any(|p| p.ts >= start + DAY - margin);
            if complete {
                history.push(DailyProfile::from_points(&points, start, crate::sim::SLOT_S).ok()?);
            }
        }
        predict_day_consumption(&history, today_so_far, now - today).ok()
    }

    pub fn live_view(&self, house: &str) -> Result<LiveView, ServiceError> {
        let entry = self
            .config
            .house(house)
            .ok_or_else(|| ServiceError::UnknownHouse(house.into()))?;
        let now = self.clock.now();
        let (reading, active_power) = match self.store.tail(house, 2) {
            Ok(t) => (
                t.last().cloned(),
                match t.as_slice() {
                    [a, b] => active_power_between(a, b).ok(),
                    _ => None,
                },
            ),
            Err(StoreError::UnknownHouse(_)) => (None, None),
            Err(e) => return Err(e.into()),
        };
        let age_s = reading.as_ref().map(|r| now - r.ts);
        let stale = age_s.is_none_or(|a| a >= self.stale_after_s());
        let today = self.totals(house, &entry.tariff, day_start(now), now);
        let month = self.totals(house, &entry.tariff, month_start(now), now);
        let prediction_wh = reading
            .as_ref()
            .and_then(|_| self.prediction(house, now, today.consumed_wh));
        let gateway = self
            .supervisor
            .lock()
            .expect("supervisor poisoned")
            .status(house)
            .map_or(GatewayState::Down, |s| s.state);
        Ok(LiveView {
            house: house.to_string(),
            now,
            reading,
            age_s,
            stale,
            gateway,
            active_power,
            contract: entry.contract,
            tariff_label: entry.tariff.label(now),
            pricing: entry.tariff.clone(),
            today,
            month,
            prediction_wh,
        })
    }

    pub fn history_view(
        &self,
        house: &str,
        from: Timestamp,
        to: Timestamp,
        bucket_s: i64,
    ) -> Result<HistoryView, ServiceError> {
        self.config
            .house(house)
            .ok_or_else(|| ServiceError::UnknownHouse(house.into()))?;
        let buckets = match self.store.downsample(house, from, to, bucket_s) {
            Err(StoreError::UnknownHouse(_)) => {
                crate::store::validate_bucket(bucket_s)?;
                crate::store::downsample_points(&[], from, to, bucket_s)
            }
            other => other?,
        };
        Ok(HistoryView {
            house: house.to_string(),
            from,
            to,
            bucket_s,
            buckets,
        })
    }

    pub fn statuses(&self) -> Vec<GatewayStatus> {
        self.supervisor.lock().expect("supervisor poisoned").statuses()
    }

    pub fn summary(&self) -> OperationSummary {
        let now = self.clock.now();
        let statuses = self.statuses();
        let mut live = LivePower {
            drawn_w: 0.0,
            reinjected_w: 0.0,
            balance_w: 0.0,
            apparent_va: 0,
            houses_reporting: 0,
        };
        let (mut today, mut month, mut since_start) = (
            HorizonTotals::default(),
            HorizonTotals::default(),
            HorizonTotals::default(),
        );
        let add = |acc: &mut HorizonTotals, (c, i): (u64, u64)| {
            acc.consumed_wh += c;
            acc.produced_wh += i;
        };
        for house in self.store.houses() {
            if let Ok(tail) = self.store.tail(&house, 2) {
                if let [a, b] = tail.as_slice() {
                    if now - b.ts <= self.stale_after_s() {
                        if let Ok(p) = active_power_between(a, b) {
                            live.drawn_w += p.draw_w;
                            live.reinjected_w += p.inject_w;
                            live.apparent_va += b.sinsts_va;
                            live.houses_reporting += 1;
                        }
                    }
                }
            }
            add(&mut today, self.register_delta(&house, day_start(now), now));
            add(&mut month, self.register_delta(&house, month_start(now), now));
            if let Ok(Some(first)) = self.store.first(&house) {
                add(&mut since_start, self.register_delta(&house, first.ts, now));
            }
        }
        live.balance_w = live.drawn_w - live.reinjected_w;
        OperationSummary {
            now,
            houses_total: statuses.len() as u64,
            houses_online: statuses.iter().filter(|s| s.state != GatewayState::Down).count() as u64,
            houses: statuses
                .iter()
                .map(|s| HouseOnline {
                    house: s.house_id.clone(),
                    state: s.state,
                })
                .collect(),
            live,
            today,
            month,
            since_start,
        }
    }

    /// Same computation as offline analytics over an export of the window.
    pub fn rates(&self, scale: RateScale, window: Option<(Timestamp, Timestamp)>) -> Result<RateReport, ServiceError> {
        let now = self.clock.now();
        let step = self.config.rate_step_s;
        let series = |t0: Timestamp, t1: Timestamp| -> Result<BTreeMap<String, Vec<TelemetryPoint>>, ServiceError> {
            let mut m = BTreeMap::new();
            for h in self.store.houses() {
                m.insert(h.clone(), self.store.query(&h, t0, t1)?);
            }
            Ok(m)
        };
        Ok(match scale {
            RateScale::Instantaneous => {
                let mut latest = BTreeMap::new();
                for h in self.store.houses() {
                    latest.insert(h.clone(), self.store.tail(&h, 2)?);
                }
                instant_rates(&latest, now, self.stale_after_s())
            }
            RateScale::ThirtyMin => {
                let t1 = now.div_euclid(1800) * 1800;
                thirty_min_rates(&series(t1 - 1800, t1)?, now, step)?
            }
            RateScale::DisplayPeriod => {
                let (t0, t1) = window.ok_or(ServiceError::BadRequest("period scale needs from and to".into()))?;
                if t0 >= t1 {
                    return Err(ServiceError::BadRequest(format!("empty window [{t0}, {t1})")));
                }
                period_rates(&series(t0, t1)?, t0, t1, step)?
            }
        })
    }
}
