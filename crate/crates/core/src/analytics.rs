//! Self-consumption and self-sufficiency rates, fleet aggregation,
//! distribution-key allocation, corrected indexes, costs and day
//! consumption prediction. Everything here is a pure function.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::clock::{Timestamp, DAY};
use crate::gateway::TelemetryPoint;
use crate::sim::{DayPlusOneReport, SLOTS_PER_DAY, SLOT_S};
use crate::store::{downsample_points, validate_bucket};

pub const DEFAULT_RATE_STEP_S: i64 = 300;
pub const THIRTY_MIN_S: i64 = 1800;
pub const DEFAULT_PREDICTION_DAYS: usize = 7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("rate is undefined: zero denominator")]
    UndefinedRate,
    #[error("no samples")]
    EmptySamples,
    #[error("negative or non-finite power in sample at {0}")]
    NegativePower(Timestamp),
    #[error("samples do not share a timestamp")]
    MixedTimestamps,
    #[error("need at least two points with increasing timestamps")]
    NotEnoughPoints,
    #[error("invalid distribution key: {0}")]
    InvalidKey(String),
    #[error("reports do not cover the same days: {0}")]
    MismatchedReports(String),
    #[error("invalid tariff: {0}")]
    InvalidTariff(String),
    #[error("invalid history: {0}")]
    InvalidHistory(String),
    #[error("invalid window [{0}, {1})")]
    InvalidWindow(Timestamp, Timestamp),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub t: Timestamp,
    pub load_w: f64,
    pub prod_w: f64,
}

impl PowerSample {
    pub fn new(t: Timestamp, load_w: f64, prod_w: f64) -> Self {
        PowerSample { t, load_w, prod_w }
    }

    fn check(&self) -> Result<(), AnalyticsError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if ok(self.load_w) && ok(self.prod_w) {
            Ok(())
        } else {
            Err(AnalyticsError::NegativePower(self.t))
        }
    }

    /// Drawn minus reinjected.
    pub fn balance_w(&self) -> f64 {
        self.load_w - self.prod_w
    }
}

/// A rate, or "n/a" when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rate {
    Value(f64),
    Undefined,
}

impl Rate {
    pub fn value(self) -> Option<f64> {
        match self {
            Rate::Value(v) => Some(v),
            Rate::Undefined => None,
        }
    }

    fn ratio(num: f64, den: f64) -> Rate {
        if den > 0.0 {
            Rate::Value(num / den)
        } else {
            Rate::Undefined
        }
    }
}

impl From<Rate> for Result<f64, AnalyticsError> {
    fn from(r: Rate) -> Self {
        r.value().ok_or(AnalyticsError::UndefinedRate)
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Rate::Value(v) => s.serialize_f64(*v),
            Rate::Undefined => s.serialize_str("n/a"),
        }
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Rate::Value(v)),
            Raw::Text(t) if t == "n/a" => Ok(Rate::Undefined),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"n/a\", got {t:?}"
            ))),
        }
    }
}

/// The three sums both rates are built from. Both rates share `min_sum`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RateComponents {
    pub min_sum: f64,
    pub prod_sum: f64,
    pub load_sum: f64,
}

impl RateComponents {
    pub fn from_samples(samples: &[PowerSample]) -> Result<Self, AnalyticsError> {
        if samples.is_empty() {
            return Err(AnalyticsError::EmptySamples);
        }
        let mut c = RateComponents::default();
        for s in samples {
            s.check()?;
            c.min_sum += s.load_w.min(s.prod_w);
            c.prod_sum += s.prod_w;
            c.load_sum += s.load_w;
        }
        Ok(c)
    }

    pub fn self_consumption(&self) -> Rate {
        Rate::ratio(self.min_sum, self.prod_sum)
    }

    pub fn self_sufficiency(&self) -> Rate {
        Rate::ratio(self.min_sum, self.load_sum)
    }
}

/// Σ min(load, prod) / Σ prod.
pub fn self_consumption(samples: &[PowerSample]) -> Result<f64, AnalyticsError> {
    RateComponents::from_samples(samples)?.self_consumption().into()
}

/// Σ min(load, prod) / Σ load.
pub fn self_sufficiency(samples: &[PowerSample]) -> Result<f64, AnalyticsError> {
    RateComponents::from_samples(samples)?.self_sufficiency().into()
}

/// Single-sample rates: (self-consumption, self-sufficiency).
pub fn instantaneous_rates(load_w: f64, prod_w: f64) -> Result<(Rate, Rate), AnalyticsError> {
    let c = RateComponents::from_samples(&[PowerSample::new(0, load_w, prod_w)])?;
    Ok((c.self_consumption(), c.self_sufficiency()))
}

/// Operation-level sample: drawn power summed as load, injected power
/// summed as production.
pub fn aggregate_fleet(per_house: &BTreeMap<String, PowerSample>) -> Result<PowerSample, AnalyticsError> {
    let mut it = per_house.values();
    let first = it.next().ok_or(AnalyticsError::EmptySamples)?;
    if it.any(|s| s.t != first.t) {
        return Err(AnalyticsError::MixedTimestamps);
    }
    let mut out = PowerSample::new(first.t, 0.0, 0.0);
    for s in per_house.values() {
        s.check()?;
        out.load_w += s.load_w;
        out.prod_w += s.prod_w;
    }
    Ok(out)
}

/// Mean active power between two consecutive points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivePower {
    pub from: Timestamp,
    pub to: Timestamp,
    pub draw_w: f64,
    pub inject_w: f64,
}

pub fn active_power_between(a: &TelemetryPoint, b: &TelemetryPoint) -> Result<ActivePower, AnalyticsError> {
    let dt = b.ts - a.ts;
    if dt <= 0 || b.east_wh < a.east_wh || b.eait_wh < a.eait_wh {
        return Err(AnalyticsError::NotEnoughPoints);
    }
    let w = |d: u64| d as f64 * 3600.0 / dt as f64;
    Ok(ActivePower {
        from: a.ts,
        to: b.ts,
        draw_w: w(b.east_wh - a.east_wh),
        inject_w: w(b.eait_wh - a.eait_wh),
    })
}

/// Power between consecutive points: ΔWh × 3600 / Δs, draw and injection
/// separately.
pub fn active_power_from_indexes(points: &[TelemetryPoint]) -> Result<Vec<ActivePower>, AnalyticsError> {
    if points.len() < 2 {
        return Err(AnalyticsError::NotEnoughPoints);
    }
    points.windows(2).map(|w| active_power_between(&w[0], &w[1])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateScale {
    #[serde(rename = "instant")]
    Instantaneous,
    #[serde(rename = "30min")]
    ThirtyMin,
    #[serde(rename = "period")]
    DisplayPeriod,
}

impl std::str::FromStr for RateScale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "instant" => Ok(RateScale::Instantaneous),
            "30min" => Ok(RateScale::ThirtyMin),
            "period" => Ok(RateScale::DisplayPeriod),
            other => Err(format!("unknown scale {other:?} (expected instant, 30min or period)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub scale: RateScale,
    pub self_consumption: Rate,
    pub self_sufficiency: Rate,
    pub window: [Timestamp; 2],
    pub samples_used: u64,
    pub components: RateComponents,
    /// Houses left out of an instantaneous report for lack of fresh data.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
}

impl RateReport {
    fn from_components(scale: RateScale, window: [Timestamp; 2], samples_used: u64, c: RateComponents) -> Self {
        RateReport {
            scale,
            self_consumption: c.self_consumption(),
            self_sufficiency: c.self_sufficiency(),
            window,
            samples_used,
            components: c,
            excluded: Vec::new(),
        }
    }
}

/// Operation-level energy samples on a uniform `step_s` grid over
/// `[t0, t1)`: per step, load is the fleet's drawn Wh and production the
/// fleet's injected Wh. Only points inside the window are used.
pub fn operation_samples(
    series: &BTreeMap<String, Vec<TelemetryPoint>>,
    t0: Timestamp,
    t1: Timestamp,
    step_s: i64,
) -> Result<Vec<PowerSample>, AnalyticsError> {
    if t0 >= t1 {
        return Err(AnalyticsError::InvalidWindow(t0, t1));
    }
    validate_bucket(step_s).map_err(|e| AnalyticsError::InvalidHistory(e.to_string()))?;
    let start = t0.div_euclid(step_s) * step_s;
    let n = ((t1 + step_s - 1).div_euclid(step_s) * step_s - start) / step_s;
    let mut out: Vec<PowerSample> = (0..n).map(|k| PowerSample::new(start + k * step_s, 0.0, 0.0)).collect();
    for points in series.values() {
        let lo = points.partition_point(|p| p.ts < t0);
        let hi = points.partition_point(|p| p.ts < t1);
        for (s, b) in out.iter_mut().zip(downsample_points(&points[lo..hi], t0, t1, step_s)) {
            s.load_w += b.consumed_wh as f64;
            s.prod_w += b.injected_wh as f64;
        }
    }
    Ok(out)
}

/// Rates over `[t0, t1)` from the concatenated grid samples of the window.
pub fn period_rates(
    series: &BTreeMap<String, Vec<TelemetryPoint>>,
    t0: Timestamp,
    t1: Timestamp,
    step_s: i64,
) -> Result<RateReport, AnalyticsError> {
    let samples = operation_samples(series, t0, t1, step_s)?;
    let c = RateComponents::from_samples(&samples)?;
    Ok(RateReport::from_components(
        RateScale::DisplayPeriod,
        [t0, t1],
        samples.len() as u64,
        c,
    ))
}

/// Rates over the last complete half hour before `now`.
pub fn thirty_min_rates(
    series: &BTreeMap<String, Vec<TelemetryPoint>>,
    now: Timestamp,
    step_s: i64,
) -> Result<RateReport, AnalyticsError> {
    let t1 = now.div_euclid(THIRTY_MIN_S) * THIRTY_MIN_S;
    let t0 = t1 - THIRTY_MIN_S;
    let mut r = period_rates(series, t0, t1, step_s)?;
    r.scale = RateScale::ThirtyMin;
    Ok(r)
}

/// Rates from each house's latest active power. A house whose last point
/// is older than `max_age_s` (or that has fewer than two points) is left
/// out and listed in `excluded`.
pub fn instant_rates(latest: &BTreeMap<String, Vec<TelemetryPoint>>, now: Timestamp, max_age_s: i64) -> RateReport {
    let mut per_house = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut newest = Timestamp::MIN;
    for (house, points) in latest {
        let fresh = match points.as_slice() {
            [.., a, b] if now - b.ts <= max_age_s => active_power_between(a, b).ok(),
            _ => None,
        };
        match fresh {
            Some(p) => {
                newest = newest.max(p.to);
                per_house.insert(house.clone(), PowerSample::new(0, p.draw_w, p.inject_w));
            }
            None => excluded.push(house.clone()),
        }
    }
    let c = aggregate_fleet(&per_house)
        .and_then(|s| RateComponents::from_samples(&[s]))
        .unwrap_or_default();
    let at = if per_house.is_empty() { now } else { newest };
    let mut r = RateReport::from_components(RateScale::Instantaneous, [at, at], per_house.len() as u64, c);
    r.excluded = excluded;
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistributionKey {
    StaticProportions { proportions: BTreeMap<String, f64> },
    DynamicByConsumption,
}

impl DistributionKey {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        let DistributionKey::StaticProportions { proportions } = self else {
            return Ok(());
        };
        if proportions.values().any(|k| !k.is_finite() || *k < 0.0) {
            return Err(AnalyticsError::InvalidKey("proportions must be >= 0".into()));
        }
        let sum: f64 = proportions.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(AnalyticsError::InvalidKey(format!("proportions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Energy split of one interval, in whole Wh.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AllocationResult {
    pub allocated_wh: BTreeMap<String, u64>,
    pub surplus_wh: u64,
    pub residual_draw_wh: BTreeMap<String, u64>,
}

impl AllocationResult {
    pub fn total_allocated(&self) -> u64 {
        self.allocated_wh.values().sum()
    }

    fn from_allocations(prod_wh: u64, consumption: &BTreeMap<String, u64>, allocated: BTreeMap<String, u64>) -> Self {
        let total: u64 = allocated.values().sum();
        let residual = consumption
            .iter()
            .map(|(h, c)| (h.clone(), c - allocated.get(h).copied().unwrap_or(0)))
            .collect();
        AllocationResult {
            allocated_wh: allocated,
            surplus_wh: prod_wh - total,
            residual_draw_wh: residual,
        }
    }
}

/// Splits `total` in proportion to `weights` with the largest-remainder
/// method; ties go to the earlier entry. The parts sum to `total` exactly
/// when any weight is positive.
pub fn apportion(total: u64, weights: &[u64]) -> Vec<u64> {
    let sum: u128 = weights.iter().map(|w| u128::from(*w)).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut parts = Vec::with_capacity(weights.len());
    let mut rems = Vec::with_capacity(weights.len());
    for (i, w) in weights.iter().enumerate() {
        let num = u128::from(total) * u128::from(*w);
        parts.push((num / sum) as u64);
        rems.push((num % sum, i));
    }
    let given: u64 = parts.iter().sum();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in rems.iter().take((total - given) as usize) {
        parts[i] += 1;
    }
    parts
}

/// Consumption-proportional water-filling. Each round hands the remaining
/// production out in proportion to unmet need, capped at that need; with
/// need-proportional shares one round settles every instance, so the
/// result is the need itself when production covers it and the
/// largest-remainder split of production otherwise.
pub fn allocate_dynamic(prod_wh: u64, consumption_wh: &BTreeMap<String, u64>) -> AllocationResult {
    let total: u64 = consumption_wh.values().sum();
    let allocated: BTreeMap<String, u64> = if prod_wh >= total {
        consumption_wh.clone()
    } else {
        let weights: Vec<u64> = consumption_wh.values().copied().collect();
        consumption_wh
            .keys()
            .cloned()
            .zip(apportion(prod_wh, &weights))
            .collect()
    };
    AllocationResult::from_allocations(prod_wh, consumption_wh, allocated)
}

/// Each participant receives `k × prod` (rounded so the shares sum to
/// `prod`), capped at its consumption. Unused shares become surplus.
pub fn allocate_static(
    proportions: &BTreeMap<String, f64>,
    prod_wh: u64,
    consumption_wh: &BTreeMap<String, u64>,
) -> Result<AllocationResult, AnalyticsError> {
    DistributionKey::StaticProportions {
        proportions: proportions.clone(),
    }
    .validate()?;
    let sum: f64 = proportions.values().sum();
    let mut acc = 0.0;
    let mut prev = 0u64;
    let mut shares = BTreeMap::new();
    let n = proportions.len();
    for (i, (h, k)) in proportions.iter().enumerate() {
        acc += k;
        let bound = if i + 1 == n {
            prod_wh
        } else {
            ((acc / sum) * prod_wh as f64)
                .round()
                .clamp(prev as f64, prod_wh as f64) as u64
        };
        shares.insert(h.clone(), bound - prev);
        prev = bound;
    }
    let allocated = consumption_wh
        .iter()
        .map(|(h, c)| (h.clone(), shares.get(h).copied().unwrap_or(0).min(*c)))
        .collect();
    Ok(AllocationResult::from_allocations(prod_wh, consumption_wh, allocated))
}

pub fn allocate(
    key: &DistributionKey,
    prod_wh: u64,
    consumption_wh: &BTreeMap<String, u64>,
) -> Result<AllocationResult, AnalyticsError> {
    match key {
        DistributionKey::StaticProportions { proportions } => allocate_static(proportions, prod_wh, consumption_wh),
        DistributionKey::DynamicByConsumption => Ok(allocate_dynamic(prod_wh, consumption_wh)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsumerTotals {
    pub consumption_wh: u64,
    pub self_consumed_wh: u64,
    pub residual_wh: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProducerTotals {
    pub injected_wh: u64,
    pub shared_wh: u64,
    pub surplus_wh: u64,
}

/// Month of per-slot allocations summed per participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyAllocation {
    pub days: Vec<NaiveDate>,
    pub slots: u64,
    pub production_wh: u64,
    pub self_consumed_wh: u64,
    pub surplus_wh: u64,
    pub consumers: BTreeMap<String, ConsumerTotals>,
    pub producers: BTreeMap<String, ProducerTotals>,
}

/// Runs the key on every 10-minute slot of the reports and sums the
/// results. Every participant's drawn energy is allocation demand and its
/// injected energy is operation production; the allocated energy of a slot
/// is attributed to producers in proportion to their injection.
pub fn corrected_indexes(
    key: &DistributionKey,
    reports: &BTreeMap<String, Vec<DayPlusOneReport>>,
) -> Result<MonthlyAllocation, AnalyticsError> {
    key.validate()?;
    let mut days: Option<Vec<NaiveDate>> = None;
    let mut by_house: BTreeMap<&str, BTreeMap<NaiveDate, &DayPlusOneReport>> = BTreeMap::new();
    for (house, list) in reports {
        let mut m = BTreeMap::new();
        for r in list {
            if r.slots.len() != SLOTS_PER_DAY {
                return Err(AnalyticsError::MismatchedReports(format!(
                    "{house} {} has {} slots",
                    r.date,
                    r.slots.len()
                )));
            }
            if m.insert(r.date, r).is_some() {
                return Err(AnalyticsError::MismatchedReports(format!(
                    "{house} has two reports for {}",
                    r.date
                )));
            }
        }
        let d: Vec<NaiveDate> = m.keys().copied().collect();
        match &days {
            None => days = Some(d),
            Some(expected) if *expected != d => {
                return Err(AnalyticsError::MismatchedReports(format!(
                    "{house} covers different days"
                )));
            }
            _ => {}
        }
        by_house.insert(house, m);
    }
    let days = days.unwrap_or_default();
    let mut out = MonthlyAllocation {
        days: days.clone(),
        slots: 0,
        production_wh: 0,
        self_consumed_wh: 0,
        surplus_wh: 0,
        consumers: reports.keys().map(|h| (h.clone(), ConsumerTotals::default())).collect(),
        producers: BTreeMap::new(),
    };
    for date in &days {
        for slot in 0..SLOTS_PER_DAY {
            let mut consumption = BTreeMap::new();
            let mut injections = Vec::new();
            for (house, m) in &by_house {
                let s = m[date].slots[slot];
                consumption.insert(house.to_string(), s.consumed_wh);
                if s.injected_wh > 0 {
                    injections.push((*house, s.injected_wh));
                }
            }
            let prod: u64 = injections.iter().map(|(_, w)| w).sum();
            let r = allocate(key, prod, &consumption)?;
            let shared = r.total_allocated();
            for (h, c) in &consumption {
                let t = out.consumers.get_mut(h).expect("all houses listed");
                t.consumption_wh += c;
                t.self_consumed_wh += r.allocated_wh[h];
                t.residual_wh += r.residual_draw_wh[h];
            }
            let weights: Vec<u64> = injections.iter().map(|(_, w)| *w).collect();
            for ((h, inj), part) in injections.iter().zip(apportion(shared, &weights)) {
                let t = out.producers.entry(h.to_string()).or_default();
                t.injected_wh += inj;
                t.shared_wh += part;
                t.surplus_wh += inj - part;
            }
            out.slots += 1;
            out.production_wh += prod;
            out.self_consumed_wh += shared;
            out.surplus_wh += r.surplus_wh;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TariffKind {
    #[default]
    Base,
    HpHc,
}

fn default_hc_windows() -> Vec<[u32; 2]> {
    vec![[0, 6 * 3600], [22 * 3600, 24 * 3600]]
}

/// Prices in €/kWh; off-peak windows as `[start, end)` seconds of the
/// local day, local time being UTC shifted by `utc_offset_minutes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TariffSchedule {
    pub kind: TariffKind,
    #[serde(default)]
    pub price_base_eur_per_kwh: f64,
    #[serde(default)]
    pub price_hp_eur_per_kwh: f64,
    #[serde(default)]
    pub price_hc_eur_per_kwh: f64,
    #[serde(default = "default_hc_windows")]
    pub hc_windows: Vec<[u32; 2]>,
    #[serde(default)]
    pub utc_offset_minutes: i32,
}

impl TariffSchedule {
    pub fn base(price: f64) -> Self {
        TariffSchedule {
            kind: TariffKind::Base,
            price_base_eur_per_kwh: price,
            price_hp_eur_per_kwh: 0.0,
            price_hc_eur_per_kwh: 0.0,
            hc_windows: default_hc_windows(),
            utc_offset_minutes: 0,
        }
    }

    pub fn hp_hc(hp: f64, hc: f64) -> Self {
        TariffSchedule {
            kind: TariffKind::HpHc,
            price_base_eur_per_kwh: 0.0,
            price_hp_eur_per_kwh: hp,
            price_hc_eur_per_kwh: hc,
            hc_windows: default_hc_windows(),
            utc_offset_minutes: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        let bad = |m: &str| Err(AnalyticsError::InvalidTariff(m.to_string()));
        let positive = |p: f64| p.is_finite() && p > 0.0;
        match self.kind {
            TariffKind::Base if !positive(self.price_base_eur_per_kwh) => return bad("base price must be > 0"),
            TariffKind::HpHc if !positive(self.price_hp_eur_per_kwh) || !positive(self.price_hc_eur_per_kwh) => {
                return bad("HP and HC prices must be > 0")
            }
            _ => {}
        }
        let mut w = self.hc_windows.clone();
        w.sort();
        if w.iter().any(|[s, e]| s >= e || *e > 86_400) {
            return bad("HC windows must be non-empty and within the day");
        }
        if w.windows(2).any(|p| p[0][1] > p[1][0]) {
            return bad("HC windows overlap");
        }
        if self.utc_offset_minutes.abs() > 14 * 60 {
            return bad("UTC offset out of range");
        }
        Ok(())
    }

    /// Checks that no bucket of width `bucket_s` straddles an HP/HC change.
    pub fn validate_bucket(&self, bucket_s: i64) -> Result<(), AnalyticsError> {
        validate_bucket(bucket_s).map_err(|e| AnalyticsError::InvalidTariff(e.to_string()))?;
        let offset = i64::from(self.utc_offset_minutes) * 60;
        let aligned = self
            .hc_windows
            .iter()
            .flatten()
            .all(|b| (i64::from(*b) - offset).rem_euclid(bucket_s) == 0);
        if self.kind == TariffKind::HpHc && !aligned {
            return Err(AnalyticsError::InvalidTariff(format!(
                "{bucket_s} s buckets straddle an HP/HC boundary"
            )));
        }
        Ok(())
    }

    pub fn local_time_of_day(&self, t: Timestamp) -> i64 {
        (t + i64::from(self.utc_offset_minutes) * 60).rem_euclid(DAY)
    }

    pub fn is_off_peak(&self, t: Timestamp) -> bool {
        let tod = self.local_time_of_day(t);
        self.hc_windows
            .iter()
            .any(|[s, e]| i64::from(*s) <= tod && tod < i64::from(*e))
    }

    /// Label shown to the user for time `t`: BASE, HP or HC.
    pub fn label(&self, t: Timestamp) -> &'static str {
        match self.kind {
            TariffKind::Base => "BASE",
            TariffKind::HpHc if self.is_off_peak(t) => "HC",
            TariffKind::HpHc => "HP",
        }
    }

    /// Price applicable at `t`, in millicents per kWh.
    pub fn price_millicents_per_kwh(&self, t: Timestamp) -> u64 {
        let eur = match self.kind {
            TariffKind::Base => self.price_base_eur_per_kwh,
            TariffKind::HpHc if self.is_off_peak(t) => self.price_hc_eur_per_kwh,
            TariffKind::HpHc => self.price_hp_eur_per_kwh,
        };
        (eur * 100_000.0).round() as u64
    }
}

/// An amount of money in millicents (1 € = 100 000).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Millicents(pub u64);

impl Millicents {
    pub fn eur(self) -> f64 {
        self.0 as f64 / 100_000.0
    }
}

/// Energy cost of the buckets, each priced at its start time.
pub fn cost(
    buckets: &[crate::store::Bucket],
    bucket_s: i64,
    tariff: &TariffSchedule,
) -> Result<Millicents, AnalyticsError> {
    tariff.validate()?;
    tariff.validate_bucket(bucket_s)?;
    // Wh × millicents/kWh gives thousandths of a millicent.
    let milli: u128 = buckets
        .iter()
        .map(|b| u128::from(b.consumed_wh) * u128::from(tariff.price_millicents_per_kwh(b.start)))
        .sum();
    Ok(Millicents(((milli + 500) / 1000) as u64))
}

/// One day of consumption split into equal slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyProfile {
    pub slot_s: i64,
    pub slots: Vec<u64>,
}

impl DailyProfile {
    /// Consumption per `slot_s` over the day starting at `day_start`.
    pub fn from_points(points: &[TelemetryPoint], day_start: Timestamp, slot_s: i64) -> Result<Self, AnalyticsError> {
        validate_bucket(slot_s).map_err(|e| AnalyticsError::InvalidHistory(e.to_string()))?;
        let slots = downsample_points(points, day_start, day_start + DAY, slot_s)
            .into_iter()
            .map(|b| b.consumed_wh)
            .collect();
        Ok(DailyProfile { slot_s, slots })
    }

    pub fn from_report(r: &DayPlusOneReport) -> Self {
        DailyProfile {
            slot_s: SLOT_S,
            slots: r.slots.iter().map(|s| s.consumed_wh).collect(),
        }
    }

    pub fn total(&self) -> u64 {
        self.slots.iter().sum()
    }

    /// Consumption from `time_of_day` (seconds) to midnight, counting the
    /// current slot pro rata.
    pub fn remaining_after(&self, time_of_day: i64) -> f64 {
        let tod = time_of_day.clamp(0, DAY);
        let k = (tod / self.slot_s) as usize;
        let frac = (tod % self.slot_s) as f64 / self.slot_s as f64;
        let current = self.slots.get(k).map_or(0.0, |w| *w as f64 * (1.0 - frac));
        current + self.slots.iter().skip(k + 1).map(|w| *w as f64).sum::<f64>()
    }
}

/// Today so far plus the mean consumption of past days between the same
/// time of day and midnight.
pub fn predict_day_consumption(
    history: &[DailyProfile],
    today_so_far_wh: u64,
    time_of_day: i64,
) -> Result<f64, AnalyticsError> {
    let Some(first) = history.first() else {
        return Err(AnalyticsError::InvalidHistory(
            "at least one past day is required".into(),
        ));
    };
    let expected = (DAY / first.slot_s) as usize;
    if history
        .iter()
        .any(|d| d.slot_s != first.slot_s || d.slots.len() != expected)
    {
        return Err(AnalyticsError::InvalidHistory(
            "days must be complete and share a slot width".into(),
        ));
    }
    let mean = history.iter().map(|d| d.remaining_after(time_of_day)).sum::<f64>() / history.len() as f64;
    Ok(today_so_far_wh as f64 + mean)
}
